import numpy as np
import pytest

from speechattrib import nn
from speechattrib.dsp import TOY, MelSpec

TINY = (2, 2, 2, 2)


def rel_err(a, b, floor=1e-7):
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def numeric_grad(f, x, h=1e-4):
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def tiny_problem(seed=0, batch=3):
    rng = np.random.default_rng(seed)
    params = nn.init_model(seed, channels=TINY, dtype=np.float64)
    params = params.map(lambda a: a + rng.normal(0, 0.05, size=a.shape))  # nonzero biases too
    x = rng.normal(size=(batch, 16, 16))
    y = rng.dirichlet(np.ones(6), size=batch)
    return params, x, y


class TestInit:
    def test_deterministic(self):
        a, b = nn.init_model(3), nn.init_model(3)
        assert all(x.tobytes() == y.tobytes() for x, y in zip(a.arrays(), b.arrays()))

    def test_biases_zero(self):
        p = nn.init_model(0)
        assert all(np.all(b == 0) for b in p.conv_b) and np.all(p.fc_b == 0)

    def test_he_variance(self):
        p = nn.init_model(0)
        for w in p.conv_w:
            fan_in = 9 * w.shape[2]
            assert abs(w.var() / (2.0 / fan_in) - 1) < 0.3

    def test_shapes(self):
        p = nn.init_model(0)
        assert [w.shape for w in p.conv_w] == [(3, 3, 1, 16), (3, 3, 16, 32), (3, 3, 32, 64), (3, 3, 64, 128)]
        assert p.fc_w.shape == (128, 6) and p.fc_b.shape == (6,)


class TestForward:
    def test_rows_sum_to_one(self):
        p = nn.init_model(0)
        x = np.random.default_rng(0).normal(size=(5, 32, 40)) * 10
        out = nn.forward(p, x)
        assert out.shape == (5, 6)
        np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-6)
        assert np.all(out > 0) and np.all(out < 1)

    def test_zeroed_dense_gives_uniform(self):
        p = nn.init_model(0)
        p.fc_w[:] = 0
        out = nn.forward(p, np.random.default_rng(0).normal(size=(4, 16, 16)))
        np.testing.assert_allclose(out, 1 / 6, atol=1e-12)

    def test_batch_permutation(self):
        p = nn.init_model(1)
        x = np.random.default_rng(2).normal(size=(6, 16, 24))
        perm = np.array([3, 0, 5, 1, 4, 2])
        np.testing.assert_allclose(nn.forward(p, x[perm]), nn.forward(p, x)[perm], atol=1e-6)

    def test_saturated_logits_stay_interior(self):
        p = nn.init_model(0)
        p.fc_b[:] = [1e4, 0, 0, 0, 0, 0]
        out = nn.forward(p, np.zeros((1, 16, 16)))
        assert np.all(out > 0) and np.all(out < 1)
        assert np.isfinite(nn.smoothed_cce(out, np.eye(6)[1], 0.05))

    def test_accepts_melspecs(self):
        p = nn.init_model(0)
        specs = [MelSpec(np.random.default_rng(i).normal(size=(32, 32)), TOY) for i in range(2)]
        assert nn.forward(p, specs).shape == (2, 6)

    @pytest.mark.parametrize("shape", [(2, 8, 32), (2, 32, 15)])
    def test_too_small(self, shape):
        with pytest.raises(ValueError):
            nn.forward(nn.init_model(0), np.zeros(shape))

    def test_bad_rank(self):
        with pytest.raises(ValueError):
            nn.forward(nn.init_model(0), np.zeros((2, 16, 16, 3)))


class TestLoss:
    def test_perfect_prediction(self):
        p = np.full(6, 1e-9 / 5)
        p[2] = 1 - 1e-9
        assert nn.smoothed_cce(p, np.eye(6)[2], 0.0) < 1e-8

    @pytest.mark.parametrize("alpha", [0.0, 0.05, 0.5])
    def test_uniform_is_ln6(self, alpha):
        label = np.random.default_rng(0).dirichlet(np.ones(6))
        assert nn.smoothed_cce(np.full(6, 1 / 6), label, alpha) == pytest.approx(np.log(6), rel=1e-12)

    def test_smoothed_target(self):
        t = nn.smooth_labels(np.eye(6)[2], 0.05)
        np.testing.assert_allclose(t, [1 / 120, 1 / 120, 0.958333333, 1 / 120, 1 / 120, 1 / 120], atol=1e-9)

    def test_logit_loss_matches_prob_loss(self):
        logits = np.random.default_rng(0).normal(size=(4, 6)) * 3
        y = np.eye(6)[[0, 1, 2, 5]]
        loss, _ = nn.softmax_ce_forward(logits, y, 0.05)
        probs = np.exp(nn.log_softmax(logits))
        assert loss == pytest.approx(nn.smoothed_cce(probs, y, 0.05), rel=1e-12)


class TestLayerGradients:
    """Each layer checked alone against central differences of sum(out * R)."""

    def check(self, fwd, bwd, x, params=()):
        rng = np.random.default_rng(9)
        out, cache = fwd(x, *params)
        r = rng.normal(size=out.shape)
        grads = bwd(r, cache)
        for arr, g in zip((x, *params), grads):
            num = numeric_grad(lambda: float((fwd(x, *params)[0] * r).sum()), arr)
            assert rel_err(g, num).max() < 1e-4

    def test_conv(self):
        rng = np.random.default_rng(0)
        x, w, b = rng.normal(size=(2, 5, 6, 3)), rng.normal(size=(3, 3, 3, 4)), rng.normal(size=4)
        self.check(nn.conv_forward, nn.conv_backward, x, (w, b))

    def test_relu(self):
        x = np.random.default_rng(1).normal(size=(2, 4, 4, 3))
        x[np.abs(x) < 1e-2] = 0.5  # keep away from the kink
        self.check(nn.relu_forward, lambda d, m: (nn.relu_backward(d, m),), x)

    def test_maxpool(self):
        x = np.random.default_rng(2).permutation(2 * 6 * 7 * 3).reshape(2, 6, 7, 3).astype(float) / 10
        self.check(nn.maxpool_forward, lambda d, c: (nn.maxpool_backward(d, c),), x)

    def test_maxpool_tie_goes_to_first(self):
        x = np.ones((1, 2, 2, 1))
        out, cache = nn.maxpool_forward(x)
        dx = nn.maxpool_backward(np.ones_like(out), cache)
        np.testing.assert_array_equal(dx[0, :, :, 0], [[1, 0], [0, 0]])

    def test_gap(self):
        x = np.random.default_rng(3).normal(size=(2, 3, 5, 4))
        self.check(nn.gap_forward, lambda d, s: (nn.gap_backward(d, s),), x)

    def test_dense(self):
        rng = np.random.default_rng(4)
        x, w, b = rng.normal(size=(3, 5)), rng.normal(size=(5, 6)), rng.normal(size=6)
        self.check(nn.dense_forward, nn.dense_backward, x, (w, b))

    def test_softmax_ce(self):
        rng = np.random.default_rng(5)
        logits = rng.normal(size=(4, 6))
        y = rng.dirichlet(np.ones(6), size=4)
        _, cache = nn.softmax_ce_forward(logits, y, 0.05)
        num = numeric_grad(lambda: nn.softmax_ce_forward(logits, y, 0.05)[0], logits)
        assert rel_err(nn.softmax_ce_backward(cache), num).max() < 1e-4


class TestBackward:
    def test_full_model_finite_differences(self):
        params, x, y = tiny_problem()
        _, grads, _ = nn.backward(params, x, y, 0.05)
        for arr, g in zip(params.arrays(), grads.arrays()):
            num = numeric_grad(lambda: nn.backward(params, x, y, 0.05)[0], arr)
            assert rel_err(g, num).max() < 1e-4

    def test_duplicated_batch(self):
        params, x, y = tiny_problem(batch=1)
        _, g1, _ = nn.backward(params, x, y, 0.05)
        _, g4, _ = nn.backward(params, np.repeat(x, 4, axis=0), np.repeat(y, 4, axis=0), 0.05)
        for a, b in zip(g1.arrays(), g4.arrays()):
            np.testing.assert_allclose(a, b, atol=1e-10, rtol=0)

    def test_uniform_target_zero_bias_grad(self):
        params, x, _ = tiny_problem()
        params.fc_w[:] = 0
        params.fc_b[:] = 0
        _, grads, _ = nn.backward(params, x, np.full((3, 6), 1 / 6), 0.05)
        np.testing.assert_allclose(grads.fc_b, 0.0, atol=1e-15)

    def test_chunked_equals_serial(self):
        params, x, y = tiny_problem(batch=7)
        loss, g, _ = nn.backward(params, x, y, 0.05)
        for k in (2, 3, 7):
            loss_c, gc = nn.chunked_gradients(params, x, y, 0.05, k)
            assert loss_c == pytest.approx(loss, abs=1e-10)
            for a, b in zip(g.arrays(), gc.arrays()):
                np.testing.assert_allclose(a, b, atol=1e-10, rtol=0)

    def test_small_step_decreases_loss(self):
        params = nn.init_model(0, channels=(4, 4, 4, 4), dtype=np.float64)
        rng = np.random.default_rng(1)
        x, y = rng.normal(size=(8, 16, 16)), np.eye(6)[rng.integers(0, 6, 8)]
        loss0, grads, _ = nn.backward(params, x, y, 0.05)
        decreased = []
        for lr in (1e-3, 1e-4, 1e-5):
            p1, _ = nn.adam_step(params, grads, nn.AdamState.zeros(params), lr)
            decreased.append(nn.backward(p1, x, y, 0.05)[0] < loss0)
        assert any(decreased)


class TestAdam:
    def test_zero_grad_no_change(self):
        p = nn.init_model(0)
        zeros = p.map(np.zeros_like)
        p1, s1 = nn.adam_step(p, zeros, nn.AdamState.zeros(p), 1e-3)
        assert all(a.tobytes() == b.tobytes() for a, b in zip(p.arrays(), p1.arrays()))
        assert s1.t == 1

    def test_first_step_is_lr_sign(self):
        p = nn.init_model(0, dtype=np.float64)
        rng = np.random.default_rng(0)
        g = p.map(lambda a: rng.choice([-1.0, 1.0], size=a.shape) * rng.uniform(0.01, 10, size=a.shape))
        p1, _ = nn.adam_step(p, g, nn.AdamState.zeros(p), 1e-3)
        for a, b, ga in zip(p.arrays(), p1.arrays(), g.arrays()):
            np.testing.assert_allclose(a - b, 1e-3 * np.sign(ga), atol=1e-6)

    def test_deterministic(self):
        params, x, y = tiny_problem()
        _, g, _ = nn.backward(params, x, y, 0.05)
        a = nn.adam_step(params, g, nn.AdamState.zeros(params), 1e-3)[0]
        b = nn.adam_step(params, g, nn.AdamState.zeros(params), 1e-3)[0]
        assert all(u.tobytes() == v.tobytes() for u, v in zip(a.arrays(), b.arrays()))

    def test_shape_mismatch(self):
        p = nn.init_model(0)
        with pytest.raises(ValueError):
            nn.adam_step(p, nn.init_model(0, channels=TINY), nn.AdamState.zeros(p), 1e-3)


class TestSchedule:
    def test_epoch_zero(self):
        assert nn.lr_schedule(1e-3, 0.9, 0) == 1e-3

    def test_epoch_ten(self):
        assert nn.lr_schedule(1e-3, 0.9, 10) == pytest.approx(3.48678e-4, rel=1e-5)

    def test_monotone(self):
        seq = [nn.lr_schedule(1e-3, 0.95, e) for e in range(50)]
        assert all(b <= a for a, b in zip(seq, seq[1:]))

    def test_negative_epoch(self):
        with pytest.raises(ValueError):
            nn.lr_schedule(1e-3, 0.9, -1)


class TestTrainConfig:
    @pytest.mark.parametrize("kw", [dict(learning_rate=0), dict(decay_rate=0), dict(decay_rate=1.1),
                                    dict(label_smoothing=1.0), dict(adam_beta1=1.0), dict(batch_size=0)])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            nn.TrainConfig(**kw)


class TestSerialization:
    def test_round_trip_bit_exact(self, tmp_path):
        p = nn.init_model(4)
        path = tmp_path / "m.bin"
        nn.save_model(p, path)
        q = nn.load_model(path)
        assert q.channels == p.channels and q.n_classes == p.n_classes
        assert all(a.tobytes() == b.tobytes() for a, b in zip(p.arrays(), q.arrays()))
        assert nn.dumps(q) == path.read_bytes()

    def test_little_endian_layout(self):
        p = nn.init_model(0, channels=TINY)
        blob = nn.dumps(p)
        tail = np.frombuffer(blob[-24:], dtype="<f4")
        np.testing.assert_array_equal(tail, p.fc_b)

    def test_rejects_garbage(self):
        with pytest.raises(ValueError):
            nn.loads(b"NOTAMODEL" + b"\0" * 20)


class TestOverfit:
    def test_separable_toy_set(self):
        rng = np.random.default_rng(0)
        labels = np.repeat(np.arange(6), 10)
        x = rng.normal(0, 0.3, size=(60, 16, 16))
        for i, k in enumerate(labels):
            x[i, 2 * k:2 * k + 3, :] += 2.0  # class k lights up its own band
        y = np.eye(6)[labels]
        params = nn.init_model(0)
        state = nn.AdamState.zeros(params)
        acc = 0.0
        for epoch in range(200):
            order = rng.permutation(60)
            for s in range(0, 60, 20):
                idx = order[s:s + 20]
                _, g, _ = nn.backward(params, x[idx], y[idx], 0.05)
                params, state = nn.adam_step(params, g, state, 1e-3)
            acc = np.mean(nn.forward(params, x).argmax(axis=1) == labels)
            if acc == 1.0:
                break
        assert acc == 1.0
