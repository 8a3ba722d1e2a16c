import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.optimize import linprog

from zdcflow import metrics
from zdcflow.data import GEOMETRIES

values = st.floats(-1e4, 1e4, allow_nan=False, width=64)


def lp_transport(a, b):
    """W1 between uniform empirical measures as an explicit transport LP."""
    n, m = len(a), len(b)
    cost = np.abs(np.subtract.outer(a, b)).ravel()
    rows = np.zeros((n, n * m))
    for i in range(n):
        rows[i, i * m : (i + 1) * m] = 1
    cols = np.zeros((m, n * m))
    for j in range(m):
        cols[j, j::m] = 1
    res = linprog(cost, A_eq=np.vstack([rows, cols]), b_eq=np.r_[np.full(n, 1 / n), np.full(m, 1 / m)], bounds=(0, None), method="highs")
    return res.fun


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 6).flatmap(lambda n: st.tuples(arrays(np.float64, n, elements=values), arrays(np.float64, st.integers(1, 6), elements=values))))
def test_w1_matches_lp_oracle(ab):
    a, b = ab
    assert metrics.wasserstein_1d(a, b) == pytest.approx(lp_transport(a, b), rel=1e-6, abs=1e-6)


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 40).flatmap(lambda n: st.tuples(arrays(np.float64, n, elements=values), arrays(np.float64, n, elements=values))))
def test_w1_equal_size_closed_form(ab):
    a, b = ab
    closed = float(np.mean(np.abs(np.sort(a) - np.sort(b))))
    assert abs(metrics.wasserstein_1d(a, b) - closed) <= 1e-9 * max(1.0, closed)


def test_w1_channels_equal_size_closed_form():
    rng = np.random.default_rng(0)
    w, w_hat = rng.poisson(50, (500, 5)), rng.poisson(55, (500, 5))
    closed = np.mean([np.mean(np.abs(np.sort(w[:, k]) - np.sort(w_hat[:, k]))) for k in range(5)])
    assert abs(metrics.wasserstein1_channels(w, w_hat) - closed) <= 1e-9


def test_w1_basic_properties():
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=37), rng.normal(2, 1, size=53)
    assert metrics.wasserstein_1d(a, a) == 0
    assert metrics.wasserstein_1d(a, b) == pytest.approx(metrics.wasserstein_1d(b, a))
    assert metrics.wasserstein_1d(a, a + 3.5) == pytest.approx(3.5)
    with pytest.raises(metrics.MetricError):
        metrics.wasserstein_1d([], [1.0])


@pytest.mark.parametrize("det", ["ZN", "ZP", "ZN16"])
def test_channel_partition_identity(det):
    h, w = GEOMETRIES[det]
    imgs = np.random.default_rng(2).poisson(3.0, (1000, h, w))
    ch = metrics.extract_channels(imgs)
    np.testing.assert_array_equal(ch.sum(axis=1), imgs.sum(axis=(1, 2)))


@pytest.mark.parametrize("det,quad,common", [("ZN", 242, 968), ("ZP", 210, 840)])
def test_all_ones_channel_counts(det, quad, common):
    ch = metrics.extract_channels(np.ones(GEOMETRIES[det], dtype=np.int64))
    np.testing.assert_array_equal(ch, [quad] * 4 + [common])


def test_channel_masks_are_disjoint_and_interleaved():
    m = metrics.channel_masks(44, 44)
    assert np.all(m.sum(axis=0) == 1)
    # fibres of the common channel alternate with the quadrant fibres
    assert m[4, 0, 1] and not m[4, 0, 0]


def test_mae_averages_runs():
    w = np.array([[1.0, 2, 3, 4, 5]])
    runs = np.stack([w + 1, w - 3])
    assert metrics.mae_channels(w, runs) == pytest.approx((5 + 15) / 2)
    assert metrics.mae_over_runs(w, lambda s: w + s, runs=3) == pytest.approx((0 + 5 + 10) / 3)
    with pytest.raises(metrics.MetricError):
        metrics.mae_channels(w, np.zeros((2, 5)))


def test_split_half_baseline_of_identical_rows_is_zero():
    assert metrics.original_baseline_wasserstein(np.ones((10, 5))) == 0.0


def test_duplicate_pairs():
    feats = np.array([[1, 2], [3, 4], [1, 2], [1, 2], [3, 4], [9, 9]])
    pairs = metrics.duplicate_pairs(feats, seed=0)
    assert len(pairs) == 2
    assert len(set(pairs.ravel())) == 4
    for i, j in pairs:
        np.testing.assert_array_equal(feats[i], feats[j])
    with pytest.raises(metrics.MetricError):
        metrics.original_baseline_mae(np.eye(3), np.ones((3, 5)))


def test_histograms_share_edges(tmp_path):
    rng = np.random.default_rng(3)
    rows = metrics.emit_histograms(rng.poisson(30, (100, 5)), rng.poisson(35, (80, 5)), 10, tmp_path / "h.csv")
    assert len(rows) == 5
    for r in rows:
        assert len(r["edges"]) == 11
        assert r["original"].sum() == 100 and r["generated"].sum() == 80
    text = (tmp_path / "h.csv").read_text().splitlines()
    assert text[0] == "channel,bin,left,right,original,generated"
    assert len(text) == 51
