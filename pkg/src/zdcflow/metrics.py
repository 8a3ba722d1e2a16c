"""Channel sums, Wasserstein-1 / MAE fidelity metrics and their original-data baselines."""
from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

N_CHANNELS = 5
# Quadrant channels read fibres with (row + col) % 2 == QUADRANT_PARITY, the common channel the rest.
QUADRANT_PARITY = 0


class MetricError(ValueError):
    pass


def channel_masks(height: int, width: int, quadrant_parity: int = QUADRANT_PARITY) -> np.ndarray:
    """Boolean (5, H, W) fibre masks; rows of the quadrant split at H // 2, columns at W // 2."""
    r = np.arange(height)[:, None]
    c = np.arange(width)[None, :]
    quad_fibre = (r + c) % 2 == quadrant_parity
    top, left = r < height // 2, c < width // 2
    quads = [top & left, top & ~left, ~top & left, ~top & ~left]
    masks = [q & quad_fibre for q in quads] + [np.broadcast_to(~quad_fibre, (height, width))]
    return np.stack(masks)


def extract_channels(images, quadrant_parity: int = QUADRANT_PARITY) -> np.ndarray:
    """Five photon sums per image; accepts (H, W) or (n, H, W)."""
    img = np.asarray(images)
    single = img.ndim == 2
    if single:
        img = img[None]
    masks = channel_masks(img.shape[-2], img.shape[-1], quadrant_parity).astype(img.dtype)
    ch = np.einsum("nhw,khw->nk", img, masks)
    return ch[0] if single else ch


def wasserstein_1d(a, b) -> float:
    """W1 between two empirical distributions by integrating the difference of quantile functions.

    Both inverse CDFs are piecewise constant; the integral is exact over the
    union of their breakpoints, so unequal sample sizes need no resampling.
    """
    a = np.sort(np.asarray(a, dtype=np.float64).ravel())
    b = np.sort(np.asarray(b, dtype=np.float64).ravel())
    if a.size == 0 or b.size == 0:
        raise MetricError("Wasserstein distance needs two nonempty samples")
    n, m = a.size, b.size
    if n == m:
        return float(np.abs(a - b).mean())
    # breakpoints i/n and j/m as exact rationals over n*m
    knots = np.union1d(np.arange(1, n + 1) * m, np.arange(1, m + 1) * n)
    widths = np.diff(np.concatenate([[0], knots]))
    mids2 = 2 * knots - widths  # 2 * n * m * interval midpoint
    ia = np.minimum(mids2 // (2 * m), n - 1)
    ib = np.minimum(mids2 // (2 * n), m - 1)
    return float(np.sum(np.abs(a[ia] - b[ib]) * widths) / (n * m))


def wasserstein1_channels(w, w_hat) -> float:
    """Mean over channels of the per-channel W1 between two sets of channel vectors."""
    return float(np.mean(wasserstein_per_channel(w, w_hat)))


def wasserstein_per_channel(w, w_hat) -> np.ndarray:
    w, w_hat = np.atleast_2d(w), np.atleast_2d(w_hat)
    if len(w) == 0 or len(w_hat) == 0:
        raise MetricError("Wasserstein distance needs two nonempty sets")
    if w.shape[1] != w_hat.shape[1]:
        raise MetricError(f"channel count mismatch: {w.shape[1]} vs {w_hat.shape[1]}")
    return np.array([wasserstein_1d(w[:, k], w_hat[:, k]) for k in range(w.shape[1])])


def mae_channels(w, w_hat) -> float:
    """Per-example summed absolute channel error, averaged over examples.

    ``w_hat`` is (n, 5) for one generation run or (runs, n, 5); runs are averaged.
    """
    w = np.asarray(w, dtype=np.float64)
    w_hat = np.asarray(w_hat, dtype=np.float64)
    if w_hat.ndim == 2:
        w_hat = w_hat[None]
    if w_hat.shape[1:] != w.shape:
        raise MetricError(f"generated responses {w_hat.shape[1:]} do not pair with originals {w.shape}")
    if len(w) == 0:
        raise MetricError("MAE needs at least one example")
    return float(np.mean(np.abs(w[None] - w_hat).sum(axis=2).mean(axis=1)))


def mae_over_runs(w, generate, runs: int = 5, seeds=None) -> float:
    """MAE averaged over ``runs`` calls of ``generate(seed) -> (n, 5)`` with seeds 0..runs-1."""
    seeds = list(range(runs)) if seeds is None else list(seeds)
    return mae_channels(w, np.stack([generate(s) for s in seeds]))


def original_baseline_wasserstein(channels, seed: int = 0) -> float:
    """Split the test channels into two random equal halves and compare them."""
    channels = np.atleast_2d(channels)
    n = len(channels)
    if n < 2:
        raise MetricError("split-half baseline needs at least 2 examples")
    perm = np.random.default_rng(seed).permutation(n)
    half = n // 2
    return wasserstein1_channels(channels[perm[:half]], channels[perm[half : 2 * half]])


def duplicate_pairs(features, seed: int = 0) -> np.ndarray:
    """Disjoint (i, j) pairs of rows with identical feature vectors, shape (p, 2)."""
    features = np.asarray(features)
    _, inverse = np.unique(features, axis=0, return_inverse=True)
    inverse = inverse.ravel()
    rng = np.random.default_rng(seed)
    order = np.argsort(inverse, kind="stable")
    groups = np.split(order, np.flatnonzero(np.diff(inverse[order])) + 1)
    pairs = []
    for g in groups:
        if len(g) < 2:
            continue
        g = rng.permutation(g)
        k = len(g) // 2 * 2
        pairs.append(g[:k].reshape(-1, 2))
    return np.concatenate(pairs) if pairs else np.empty((0, 2), dtype=int)


def original_baseline_mae(features, channels, seed: int = 0) -> float:
    """MAE between test responses that share identical particle features."""
    pairs = duplicate_pairs(features, seed)
    if len(pairs) == 0:
        raise MetricError("no pairs of test examples with identical particle features")
    channels = np.asarray(channels, dtype=np.float64)
    return mae_channels(channels[pairs[:, 0]], channels[pairs[:, 1]])


def histograms(original, generated, bins: int = 50) -> list[dict]:
    """Per-channel histograms of both sets on shared bin edges."""
    original, generated = np.atleast_2d(original), np.atleast_2d(generated)
    if len(original) == 0 or len(generated) == 0:
        raise MetricError("histograms need nonempty sets")
    out = []
    for k in range(original.shape[1]):
        both = np.concatenate([original[:, k], generated[:, k]]).astype(np.float64)
        lo, hi = float(both.min()), float(both.max())
        if hi <= lo:
            hi = lo + 1.0
        edges = np.linspace(lo, hi, bins + 1)
        out.append({
            "channel": k + 1,
            "edges": edges,
            "original": np.histogram(original[:, k], bins=edges)[0],
            "generated": np.histogram(generated[:, k], bins=edges)[0],
        })
    return out


def emit_histograms(original, generated, bins: int, path) -> list[dict]:
    """Write per-channel histograms as CSV: channel,bin,left,right,original,generated."""
    tables = histograms(original, generated, bins)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["channel", "bin", "left", "right", "original", "generated"])
        for t in tables:
            for b in range(len(t["original"])):
                wr.writerow([t["channel"], b, t["edges"][b], t["edges"][b + 1], int(t["original"][b]), int(t["generated"][b])])
    return tables
