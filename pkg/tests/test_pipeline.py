import numpy as np
import pytest

from speechattrib import datagen, nn, pipeline
from speechattrib.augment import AugmentConfig
from speechattrib.dataset import KNOWN_SOURCES, PSEUDO_SOURCE, UNKNOWN_SOURCE, Dataset, Example, featurize, one_hot
from speechattrib.dsp import TOY, MelSpec
from speechattrib.nn import TrainConfig


def spec_ds(counts, seed=0, source=None, label=None, shape=(16, 16)):
    rng = np.random.default_rng(seed)
    out = []
    for cls, n in enumerate(counts):
        for i in range(n):
            k = cls if label is None else label
            src = source or (KNOWN_SOURCES[k] if k < 5 else UNKNOWN_SOURCE)
            out.append(Example(f"s{seed}_c{cls}_{i}", one_hot(k), src, spec=MelSpec(rng.normal(size=shape), TOY)))
    return Dataset(out)


def fixed_model(probs):
    """Model whose output is ``probs`` for every input: zero dense weights, log-prob bias."""
    p = nn.init_model(0, channels=(2, 2, 2, 2), n_classes=len(probs), dtype=np.float64)
    p.fc_w[:] = 0
    p.fc_b[:] = np.log(probs)
    return p


@pytest.fixture(scope="module")
def toy():
    corpus = datagen.build_corpus(n_per_class=20, seed=0, n_eval_per_class=2, duration_s=1.0)
    return featurize(corpus.train, TOY, 1.0, seed=0)


class TestAssembleUnknown:
    def test_counts(self):
        ds = pipeline.assemble_unknown(spec_ds([100] * 5), [spec_ds([100], seed=1, label=5)])
        assert len(ds) == 600 and ds.histogram() == [100] * 6

    def test_empty_sources_identity(self):
        known = spec_ds([3] * 5)
        out = pipeline.assemble_unknown(known, [])
        assert [e.id for e in out] == [e.id for e in known]

    def test_two_sources_tagged(self):
        a = spec_ds([50], seed=1, label=5, source="external-a")
        b = spec_ds([50], seed=2, label=5, source="external-b")
        out = pipeline.assemble_unknown(spec_ds([2] * 5), [a, b])
        unk = [e for e in out if e.target == 5]
        assert len(unk) == 100 and all(e.source == UNKNOWN_SOURCE for e in unk)

    def test_relabels_to_class_5(self):
        src = spec_ds([4], seed=3, label=0, source="external")
        out = pipeline.assemble_unknown(spec_ds([1] * 5), [src])
        assert out.histogram() == [1, 1, 1, 1, 1, 4]

    def test_rejects_unknown_in_known(self):
        with pytest.raises(ValueError):
            pipeline.assemble_unknown(spec_ds([1] * 6), [])


class TestFolds:
    def test_balanced_600(self):
        ds = spec_ds([100] * 6)
        split = pipeline.make_folds(ds, 5, seed=0)
        t = ds.targets()
        for f in range(5):
            val = split.val_idx(f)
            assert len(val) == 120
            assert np.bincount(t[val], minlength=6).tolist() == [20] * 6

    def test_partition(self):
        ds = spec_ds([7, 9, 11, 5, 6, 13])
        split = pipeline.make_folds(ds, 5, seed=3)
        folds = [set(split.val_idx(f)) for f in range(5)]
        assert set().union(*folds) == set(range(len(ds)))
        assert sum(len(f) for f in folds) == len(ds)

    def test_stratified_within_one(self):
        counts = [7, 9, 11, 5, 6, 13]
        ds = spec_ds(counts)
        split = pipeline.make_folds(ds, 5, seed=1)
        t = ds.targets()
        for f in range(5):
            per = np.bincount(t[split.val_idx(f)], minlength=6)
            assert np.all(np.abs(per - np.array(counts) / 5) <= 1)

    def test_deterministic_per_seed(self):
        ds = spec_ds([20] * 6)
        a = pipeline.make_folds(ds, 5, seed=4).assignment
        assert np.array_equal(a, pipeline.make_folds(ds, 5, seed=4).assignment)
        assert not np.array_equal(a, pipeline.make_folds(ds, 5, seed=5).assignment)

    def test_too_few(self):
        with pytest.raises(ValueError):
            pipeline.make_folds(spec_ds([10, 10, 3, 10, 10, 10]), 5)

    def test_pseudo_always_train(self):
        ds = pipeline.with_pseudo(spec_ds([5] * 6), [(MelSpec(np.zeros((16, 16)), TOY), np.full(6, 1 / 6))])
        split = pipeline.make_folds(ds, 5)
        assert split.assignment[-1] == -1
        assert all(len(ds) - 1 in split.train_idx(f) for f in range(5))


class TestEnsemble:
    def test_single_model(self):
        m = nn.init_model(1)
        x = np.random.default_rng(0).normal(size=(3, 16, 16))
        np.testing.assert_array_equal(pipeline.predict_proba([m], x), nn.forward(m, x))

    def test_identical_models(self):
        m = nn.init_model(1)
        x = np.random.default_rng(0).normal(size=(3, 16, 16))
        np.testing.assert_allclose(pipeline.predict_proba([m, m, m], x), nn.forward(m, x), atol=1e-15)

    def test_two_class_symmetry(self):
        a, b = fixed_model([0.6, 0.4]), fixed_model([0.4, 0.6])
        out = pipeline.ensemble_predict([a, b], MelSpec(np.zeros((16, 16)), TOY))
        np.testing.assert_allclose(out, [0.5, 0.5], atol=1e-12)

    def test_empty(self):
        with pytest.raises(ValueError):
            pipeline.predict_proba([], np.zeros((1, 16, 16)))


class TestPseudo:
    def test_equals_ensemble_and_on_simplex(self):
        models = [nn.init_model(s) for s in range(3)]
        specs = [MelSpec(np.random.default_rng(i).normal(size=(16, 16)), TOY) for i in range(5)]
        labels = pipeline.pseudo_label(models, specs)
        for s, lab in zip(specs, labels):
            np.testing.assert_array_equal(lab, pipeline.ensemble_predict(models, s))
            assert np.all(lab > 0) and abs(lab.sum() - 1) < 1e-6
        again = pipeline.pseudo_label(models, specs)
        assert all(a.tobytes() == b.tobytes() for a, b in zip(labels, again))

    def test_with_pseudo_counts_and_tags(self):
        ds = spec_ds([2] * 6)
        pseudo = [(MelSpec(np.zeros((16, 16)), TOY), np.full(6, 1 / 6)) for _ in range(4)]
        out = pipeline.with_pseudo(ds, pseudo)
        assert len(out) == len(ds) + 4
        assert [e.source for e in out.examples[-4:]] == [PSEUDO_SOURCE] * 4

    def test_invalid_soft_label(self):
        with pytest.raises(ValueError):
            pipeline.with_pseudo(spec_ds([2] * 6), [(MelSpec(np.zeros((16, 16)), TOY), np.full(6, 0.5))])

    def test_empty_pseudo_matches_plain_cv(self):
        ds = spec_ds([5] * 6)
        cfg = TrainConfig(epochs=1, batch_size=8, seed=2)
        plain = pipeline.cross_validate(ds, cfg, AugmentConfig(), TOY)
        re = pipeline.retrain_with_pseudo(ds, [], cfg, AugmentConfig(), TOY)
        assert plain.checksum() == re.checksum()
        for a, b in zip(plain.models, re.models):
            assert nn.dumps(a) == nn.dumps(b)


class TestThreshold:
    def probs(self):
        return np.random.default_rng(0).dirichlet(np.ones(5) * 0.5, size=200)

    def test_floor_never_unknown(self):
        assert np.all(pipeline.threshold_predict(self.probs(), 1e-9) != 5)

    def test_ceiling_always_unknown(self):
        assert np.all(pipeline.threshold_predict(self.probs(), 1 - 1e-9) == 5)

    def test_monotone(self):
        p = self.probs()
        prev = pipeline.threshold_predict(p, 0.05)
        for tau in np.linspace(0.06, 0.99, 40):
            cur = pipeline.threshold_predict(p, tau)
            assert not np.any((prev == 5) & (cur != 5))
            prev = cur

    def test_single_spec_path(self):
        m = fixed_model([0.7, 0.1, 0.1, 0.05, 0.05])
        spec = MelSpec(np.zeros((16, 16)), TOY)
        assert pipeline.baseline_threshold_predict(m, spec, 0.6) == 0
        assert pipeline.baseline_threshold_predict(m, spec, 0.8) == 5

    @pytest.mark.parametrize("tau", [0.0, 1.0, -0.5])
    def test_invalid_tau(self, tau):
        with pytest.raises(ValueError):
            pipeline.threshold_predict(self.probs(), tau)


class TestTrainFold:
    def test_untrained_is_chance(self, toy):
        split = pipeline.make_folds(toy, 5, seed=0)
        _, report = pipeline.train_fold(toy, split, 0, TrainConfig(epochs=0), None, TOY)
        assert 0.05 <= report.accuracy <= 0.35

    def test_deterministic(self, toy):
        split = pipeline.make_folds(toy, 5, seed=0)
        cfg = TrainConfig(epochs=1, seed=3)
        m1, r1 = pipeline.train_fold(toy, split, 1, cfg, AugmentConfig(), TOY)
        m2, r2 = pipeline.train_fold(toy, split, 1, cfg, AugmentConfig(), TOY)
        assert nn.dumps(m1) == nn.dumps(m2)
        assert r1.to_text() == r2.to_text()
        assert np.array_equal(r1.confusion, r2.confusion)

    def test_bad_fold(self, toy):
        with pytest.raises(ValueError):
            pipeline.train_fold(toy, pipeline.make_folds(toy, 5), 5, TrainConfig(epochs=0), None, TOY)

    def test_learns_something(self, toy):
        split = pipeline.make_folds(toy, 5, seed=0)
        _, report = pipeline.train_fold(toy, split, 0, TrainConfig(epochs=15, seed=0), AugmentConfig(), TOY)
        assert report.accuracy > 0.4

    def test_known_only_baseline_has_five_outputs(self, toy):
        m = pipeline.train_known_only(toy, range(len(toy)), TrainConfig(epochs=0), None, TOY)
        assert m.n_classes == 5


class TestRunDir:
    def test_save_and_reload(self, tmp_path):
        ds = spec_ds([5] * 6)
        cv = pipeline.cross_validate(ds, TrainConfig(epochs=1, batch_size=8), None, TOY)
        pipeline.save_cv(cv, tmp_path)
        models = pipeline.load_models(tmp_path)
        assert len(models) == 5
        x = ds.spec_array()
        assert pipeline.predict_proba(models, x).tobytes() == pipeline.predict_proba(cv.models, x).tobytes()
        assert (tmp_path / "cv_report.txt").read_text() == cv.report_text()

    def test_workers_match_serial(self):
        ds = spec_ds([5] * 6)
        cfg = TrainConfig(epochs=1, batch_size=8, seed=4)
        serial = pipeline.cross_validate(ds, cfg, AugmentConfig(), TOY)
        parallel = pipeline.cross_validate(ds, cfg, AugmentConfig(), TOY, workers=2)
        assert serial.checksum() == parallel.checksum()

    def test_prob_csv_round_trip(self, tmp_path):
        probs = np.random.default_rng(0).dirichlet(np.ones(6), size=4)
        path = tmp_path / "p.csv"
        pipeline.write_prob_csv(path, ["a", "b", "c", "d"], probs, with_pred=True)
        ids, back, pred = pipeline.read_prob_csv(path)
        assert ids == ["a", "b", "c", "d"]
        assert back.tobytes() == probs.tobytes()
        assert np.array_equal(pred, probs.argmax(axis=1))

    def test_missing_models(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            pipeline.load_models(tmp_path)
