import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aetransfer import metrics
from aetransfer.attacks import AEBatch, AttackConfig


def make_batch(p, q, labels=None, target="t"):
    o = len(p)
    labels = np.zeros(o, dtype=np.int64) if labels is None else labels
    z = np.zeros(o, dtype=bool)
    return AEBatch(p, q, labels, target, AttackConfig(), z, z.copy(), np.zeros(o, dtype=np.int64))


def brute_noise(p, q):
    """Quadruple loop over images, rows, cols and channels; divisor o*c*r."""
    o, ch, rows, cols = p.shape
    total = 0.0
    for i in range(o):
        for k in range(rows):
            for j in range(cols):
                for c in range(ch):
                    total += abs(p[i, c, k, j] - q[i, c, k, j])
    return total / (o * rows * cols)


def brute_asr(pred_lists, labels):
    rates = []
    for preds in pred_lists:
        fooled = 0
        for p, y in zip(preds, labels):
            if p != y:
                fooled += 1
        rates.append(fooled / len(labels))
    return sum(rates) / len(rates)


class TestAsr:
    def test_half_fooled(self):
        labels = np.zeros(10000, dtype=int)
        preds = np.zeros(10000, dtype=int)
        preds[:5000] = 1
        assert metrics.asr_from_predictions([preds], labels).value == 0.5

    def test_two_models_mean(self):
        labels = np.zeros(10, dtype=int)
        a, b = np.zeros(10, dtype=int), np.zeros(10, dtype=int)
        a[:2] = 1
        b[:4] = 3
        res = metrics.asr_from_predictions([a, b], labels)
        assert res.fool_counts == [2, 4] and res.m == 2
        assert res.value == pytest.approx(0.3, abs=1e-15)

    def test_empty_test_set(self):
        with pytest.raises(metrics.MetricError):
            metrics.asr_from_predictions([], np.zeros(3))
        with pytest.raises(metrics.MetricError):
            metrics.compute_asr(make_batch(np.zeros((1, 3, 1, 1)), np.zeros((1, 3, 1, 1))), [])

    def test_matches_brute_force(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            n, m, k = rng.integers(1, 60), rng.integers(1, 6), rng.integers(2, 10)
            labels = rng.integers(0, k, size=n)
            preds = [rng.integers(0, k, size=n) for _ in range(m)]
            got = metrics.asr_from_predictions(preds, labels).value
            assert abs(got - brute_asr(preds, labels)) <= 1e-12

    @settings(max_examples=50, deadline=None)
    @given(st.data())
    def test_order_invariance_and_range(self, data):
        n = data.draw(st.integers(1, 30))
        labels = np.array(data.draw(st.lists(st.integers(0, 4), min_size=n, max_size=n)))
        preds = [np.array(data.draw(st.lists(st.integers(0, 4), min_size=n, max_size=n))) for _ in range(3)]
        perm = np.random.default_rng(n).permutation(n)
        a = metrics.asr_from_predictions(preds, labels).value
        b = metrics.asr_from_predictions([p[perm] for p in preds[::-1]], labels[perm]).value
        assert 0.0 <= a <= 1.0
        assert a == pytest.approx(b, abs=1e-15)


class TestAasr:
    def test_singleton(self):
        assert metrics.compute_aasr([0.37]).value == 0.37

    def test_mean(self):
        assert metrics.compute_aasr([0.1, 0.2, 0.3]).value == pytest.approx(0.2, abs=1e-15)

    def test_empty(self):
        with pytest.raises(metrics.MetricError):
            metrics.compute_aasr([])

    def test_recount_from_prediction_logs(self):
        rng = np.random.default_rng(1)
        labels = rng.integers(0, 10, size=40)
        logs = {t: [rng.integers(0, 10, size=40) for _ in range(3)] for t in range(4)}
        asrs = [metrics.asr_from_predictions(logs[t], labels, target_id=str(t)) for t in logs]
        got = metrics.compute_aasr(asrs).value
        expected = sum(brute_asr(logs[t], labels) for t in logs) / len(logs)
        assert abs(got - expected) <= 1e-12
        assert metrics.compute_aasr(asrs).target_ids == ["0", "1", "2", "3"]


class TestNoiseMagnitude:
    def test_zero(self):
        p = np.random.default_rng(0).uniform(0, 255, size=(3, 3, 4, 4))
        assert metrics.noise_magnitude(make_batch(p, p.copy())).value == 0.0

    def test_single_pixel_sums_channels(self):
        p = np.zeros((1, 3, 1, 1))
        q = np.array([1.0, 2.0, 3.0]).reshape(1, 3, 1, 1)
        rep = metrics.noise_magnitude(make_batch(p, q))
        assert rep.value == 6.0
        assert (rep.count, rep.rows, rep.cols, rep.channels) == (1, 1, 1, 3)
        assert metrics.noise_magnitude(make_batch(p, q), mode="per-value").value == 2.0

    def test_matches_brute_force(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            o, r, c = rng.integers(1, 5), rng.integers(1, 6), rng.integers(1, 6)
            p = rng.uniform(0, 255, size=(o, 3, r, c))
            q = p + rng.normal(size=p.shape) * rng.uniform(0, 5)
            assert abs(metrics.noise_magnitude(make_batch(p, q)).value - brute_noise(p, q)) <= 1e-12

    def test_bad_mode(self):
        p = np.zeros((1, 3, 1, 1))
        with pytest.raises(metrics.MetricError):
            metrics.noise_magnitude(make_batch(p, p), mode="mean")

    def test_nonnegative_and_zero_iff_equal(self):
        rng = np.random.default_rng(3)
        p = rng.uniform(0, 255, size=(2, 3, 3, 3))
        q = p.copy()
        q[1, 2, 0, 0] += 1e-3
        assert metrics.noise_magnitude(make_batch(p, q)).value > 0
