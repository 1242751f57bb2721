import numpy as np
import pytest

from wavefuse.baselines import (
    BaselineSpec,
    GaussianHMM,
    baseline_anomaly,
    baseline_boundary,
    baseline_semseg,
    dtw_distance,
)
from wavefuse.ingest import AnnotationSet, Record
from wavefuse.series import MultivariateSeries
from wavefuse.synthetic import SynthConfig, synth_dataset
from wavefuse.tasks import find_boundaries


def series_from(values, names=None, fs=50.0, rid="t0"):
    v = np.asarray(values, dtype=float)
    if v.ndim == 1:
        v = v.reshape(-1, 1)
    names = tuple(names or (f"c{i}" for i in range(v.shape[1])))
    return MultivariateSeries(v, fs, names, rid)


class TestBaselineSpec:
    def test_valid(self):
        BaselineSpec("semseg", "hmm", {"n_states": 2})

    def test_unknown_method(self):
        with pytest.raises(ValueError):
            BaselineSpec("semseg", "peak")

    def test_unknown_task(self):
        with pytest.raises(ValueError):
            BaselineSpec("forecast", "knn")


class TestThresholdSemseg:
    def test_flow_rule(self):
        s = series_from(
            np.column_stack([np.zeros(4), [1.0, 0.04, -1.0, 0.06]]),
            names=("pressure", "flow"),
        )
        labels = baseline_semseg(s, "threshold")
        # flow < 0.05 -> expiration (class 1)
        assert labels.tolist() == [0, 1, 1, 0]

    def test_missing_flow_channel(self):
        s = series_from(np.zeros((4, 1)), names=("pressure",))
        with pytest.raises(ValueError, match="flow"):
            baseline_semseg(s, "threshold")


class TestKnnSemseg:
    def test_k1_memorizes_training_data(self):
        recs = synth_dataset("semseg", SynthConfig(n_records=1, n_points=400, seed=2))
        labels = baseline_semseg(
            recs[0].series, "knn", {"k": 1}, train_records=recs
        )
        assert np.array_equal(labels, recs[0].annotations.payload)

    def test_k_exceeds_training_size(self):
        recs = synth_dataset("semseg", SynthConfig(n_records=1, n_points=100, seed=2))
        with pytest.raises(ValueError, match="exceeds"):
            baseline_semseg(recs[0].series, "knn", {"k": 101}, train_records=recs)

    def test_requires_training_records(self):
        s = series_from(np.zeros((10, 1)))
        with pytest.raises(ValueError, match="training"):
            baseline_semseg(s, "knn", {"k": 1})


def two_state_record(T=1200, seed=0, rid="hmmtrain"):
    rng = np.random.default_rng(seed)
    labels = np.zeros(T, dtype=int)
    t = 0
    while t < T:
        run = int(rng.integers(20, 60))
        labels[t : t + run] = int(rng.integers(0, 2))
        t += run
    values = np.where(labels == 0, -5.0, 5.0) + rng.normal(0, 0.1, T)
    series = series_from(values, rid=rid)
    return Record(series=series, annotations=AnnotationSet("point_labels", labels))


class TestHmmSemseg:
    def test_well_separated_states(self):
        train = two_state_record(seed=0)
        test = two_state_record(seed=1, rid="hmmtest")
        labels = baseline_semseg(
            test.series, "hmm", {"seed": 0}, train_records=[train]
        )
        acc = np.mean(labels == test.annotations.payload)
        assert acc >= 0.99

    def test_viterbi_decodes_obvious_sequence(self):
        hmm = GaussianHMM(2, seed=0).fit(
            np.concatenate([np.full(50, -3.0), np.full(50, 3.0)]), n_restarts=3
        )
        states = hmm.viterbi(np.array([-3.0, -3.0, 3.0, 3.0, -3.0]))
        assert states[0] == states[1] != states[2] == states[3]
        assert states[4] == states[0]


class TestPeakBoundary:
    def test_sinusoid_crests(self):
        T, period = 500, 50
        x = np.cos(2 * np.pi * np.arange(T) / period)
        s = series_from(x, names=("resp",))
        got = baseline_boundary(s, "peak", {"min_distance": 25, "channel": "resp"})
        # analytic crest positions; index 0 is an endpoint, not a local max
        assert got.tolist() == list(range(period, T, period))

    def test_reuses_find_boundaries(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=300)
        s = series_from(x, names=("resp",))
        got = baseline_boundary(s, "peak", {"min_distance": 7, "channel": "resp"})
        assert got.tolist() == find_boundaries(x, 7).tolist()


class TestTemplateBoundary:
    def make_repeating_record(self, n_reps=8, seed=0, rid="tmpl"):
        rng = np.random.default_rng(seed)
        segment = np.sin(np.linspace(0, np.pi, 40)) + rng.normal(0, 0.01, 40)
        values = np.tile(segment, n_reps)
        boundaries = np.arange(0, 40 * n_reps, 40)
        series = series_from(values, names=("resp",), rid=rid)
        return Record(series=series, annotations=AnnotationSet("boundary_points", boundaries))

    def test_identical_templates_exact_starts(self):
        rec = self.make_repeating_record()
        got = baseline_boundary(
            rec.series, "template", {"n_templates": 8, "channel": "resp"},
            train_records=[rec],
        )
        gt = rec.annotations.payload
        # every true start recovered exactly
        assert set(gt.tolist()) <= set(got.tolist())

    def test_no_templates_error(self):
        rec = self.make_repeating_record()
        with pytest.raises(ValueError, match="templates"):
            baseline_boundary(rec.series, "template", {}, train_records=[])

    def test_dtw_known_values(self):
        assert dtw_distance(np.array([0.0, 0.0, 1.0]), np.array([0.0, 1.0]), band=3) == 0.0
        a = np.array([0.0, 1.0, 0.0])
        assert dtw_distance(a, a, band=1) == 0.0
        assert dtw_distance(np.array([1.0]), np.array([2.0]), band=1) == 1.0


class TestAnomalyBaselines:
    def test_zscore_exact_flag(self):
        x = np.zeros(100)
        x[40] = 10.0
        scores, mask = baseline_anomaly(x, "zscore", {"k": 3.0})
        assert np.flatnonzero(mask).tolist() == [40]
        assert np.argmax(scores) == 40

    def test_quantile_full_range_flags_nothing(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=200)
        _, mask = baseline_anomaly(x, "quantile", {"q_lo": 0.0, "q_hi": 1.0})
        assert mask.sum() == 0

    def test_quantile_training_flag_fraction_bound(self):
        rng = np.random.default_rng(1)
        for _ in range(10):
            T = int(rng.integers(50, 500))
            x = rng.normal(size=T)
            q_lo, q_hi = 0.05, 0.95
            _, mask = baseline_anomaly(x, "quantile", {"q_lo": q_lo, "q_hi": q_hi})
            assert mask.mean() <= (q_lo + 1 - q_hi) + 2.0 / T

    def test_fft_spike_has_max_score(self):
        T = 512
        x = np.sin(2 * np.pi * 8 * np.arange(T) / T)
        sigma = x.std()
        x[200] += 10.0 * sigma
        scores, _ = baseline_anomaly(x, "fft", {"n_components": 1})
        assert int(np.argmax(scores)) == 200

    def test_rolling_window_validation(self):
        with pytest.raises(ValueError, match="rolling window"):
            baseline_anomaly(np.zeros(10), "rolling", {"window": 10})

    def test_fft_component_validation(self):
        with pytest.raises(ValueError, match="n_components"):
            baseline_anomaly(np.zeros(10), "fft", {"n_components": 5})

    def test_multichannel_or_combination(self):
        x = np.zeros((100, 2))
        x[10, 0] = 9.0
        x[60, 1] = -9.0
        _, mask = baseline_anomaly(x, "zscore", {"k": 3.0})
        assert np.flatnonzero(mask).tolist() == [10, 60]

    def test_deterministic(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=(300, 2))
        for method, params in [
            ("quantile", {}),
            ("zscore", {}),
            ("rolling", {"window": 11, "threshold": 0.5}),
            ("fft", {"n_components": 3}),
        ]:
            s1, m1 = baseline_anomaly(x, method, params)
            s2, m2 = baseline_anomaly(x, method, params)
            assert np.array_equal(s1, s2) and np.array_equal(m1, m2)
