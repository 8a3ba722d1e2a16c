"""Datasets: ZDC1 container, preprocessing, splits, synthetic shower oracle, statistics."""
from __future__ import annotations

import csv
import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from statistics import NormalDist

import numpy as np

FEATURE_NAMES = ("E", "vx", "vy", "vz", "px", "py", "pz", "m", "q")
N_FEATURES = len(FEATURE_NAMES)

# (height, width). ZN16 is a reduced desk-scale geometry, not a real detector.
GEOMETRIES: dict[str, tuple[int, int]] = {"ZN": (44, 44), "ZP": (56, 30), "ZN16": (16, 16)}

MAGIC = b"ZDC1"
MIN_PHOTONS = 10


class DatasetError(ValueError):
    pass


class IntegrityError(DatasetError):
    pass


def geometry(detector: str) -> tuple[int, int]:
    try:
        return GEOMETRIES[detector]
    except KeyError:
        raise DatasetError(f"unknown detector {detector!r}; expected one of {sorted(GEOMETRIES)}") from None


@dataclass
class Dataset:
    detector: str
    features: np.ndarray  # (n, 9) float32
    images: np.ndarray  # (n, H, W) integer photon counts

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float32)
        self.images = np.asarray(self.images)
        h, w = geometry(self.detector)
        if self.features.ndim != 2 or self.features.shape[1] != N_FEATURES:
            raise DatasetError(f"features must be (n, {N_FEATURES}), got {self.features.shape}")
        if self.images.shape[1:] != (h, w):
            raise DatasetError(f"{self.detector} images must be {h}x{w}, got {self.images.shape[1:]}")
        if len(self.features) != len(self.images):
            raise DatasetError(f"{len(self.features)} feature rows but {len(self.images)} images")
        if self.images.size and self.images.min() < 0:
            raise DatasetError("negative photon counts")

    def __len__(self) -> int:
        return len(self.features)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.detector, self.features[idx], self.images[idx])


# -- container format ----------------------------------------------------
def _digest(b: bytes) -> bytes:
    return hashlib.blake2b(b, digest_size=8).digest()


def save_dataset(path, ds: Dataset) -> None:
    """Write ``ds`` as ZDC1: magic, u64 header length, JSON header, f32 features, u16 images, checksum."""
    if ds.images.size and ds.images.max() > np.iinfo(np.uint16).max:
        raise DatasetError("photon counts exceed the u16 container range")
    feats = np.ascontiguousarray(ds.features, dtype="<f4").tobytes()
    imgs = np.ascontiguousarray(ds.images, dtype="<u2").tobytes()
    h, w = geometry(ds.detector)
    header = {
        "detector": ds.detector,
        "n": len(ds),
        "height": h,
        "width": w,
        "feature_names": list(FEATURE_NAMES),
        "feature_dtype": "<f4",
        "image_dtype": "<u2",
        "offsets": {"features": 0, "images": len(feats)},
    }
    hb = json.dumps(header, sort_keys=True).encode()
    body = MAGIC + struct.pack("<Q", len(hb)) + hb + feats + imgs
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(body + _digest(body))


def load_dataset(path) -> Dataset:
    blob = Path(path).read_bytes()
    if len(blob) < 20 or blob[:4] != MAGIC:
        raise DatasetError(f"{path}: not a ZDC1 file")
    body, digest = blob[:-8], blob[-8:]
    if _digest(body) != digest:
        raise IntegrityError(f"{path}: checksum mismatch (truncated or corrupt)")
    (hlen,) = struct.unpack_from("<Q", body, 4)
    try:
        header = json.loads(body[12 : 12 + hlen])
        n, h, w, det = header["n"], header["height"], header["width"], header["detector"]
        offsets = header["offsets"]
    except (ValueError, KeyError) as exc:
        raise DatasetError(f"{path}: malformed header ({exc})") from exc
    if (h, w) != geometry(det):
        raise DatasetError(f"{path}: {det} tag but {h}x{w} images")
    if tuple(header.get("feature_names", FEATURE_NAMES)) != FEATURE_NAMES:
        raise DatasetError(f"{path}: unexpected feature names {header.get('feature_names')}")
    payload = body[12 + hlen :]
    nf, ni = n * N_FEATURES * 4, n * h * w * 2
    if len(payload) != nf + ni:
        raise IntegrityError(f"{path}: payload is {len(payload)} bytes, expected {nf + ni}")
    fo, io = offsets["features"], offsets["images"]
    feats = np.frombuffer(payload[fo : fo + nf], dtype="<f4").reshape(n, N_FEATURES)
    imgs = np.frombuffer(payload[io : io + ni], dtype="<u2").reshape(n, h, w)
    return Dataset(det, feats.astype(np.float32), imgs.astype(np.int64))


# -- transforms ----------------------------------------------------------
def log_transform(pixels) -> np.ndarray:
    return np.log1p(np.asarray(pixels, dtype=np.float64)).astype(np.float32)


def inverse_transform(y) -> np.ndarray:
    y = np.clip(np.asarray(y, dtype=np.float64), None, 20.0)
    return np.rint(np.maximum(0.0, np.expm1(y))).astype(np.int64)


@dataclass
class PreprocStats:
    mean: list[float]
    std: list[float]
    log_transform: bool = True
    constant_features: list[str] = field(default_factory=list)

    @classmethod
    def fit(cls, features: np.ndarray, train_idx) -> "PreprocStats":
        """Statistics from the training rows only."""
        x = np.asarray(features, dtype=np.float64)[np.asarray(train_idx)]
        if len(x) == 0:
            raise DatasetError("cannot fit statistics on an empty training split")
        mean = x.mean(axis=0)
        std = x.std(axis=0)
        const = [FEATURE_NAMES[i] for i in np.flatnonzero(std <= 1e-12)]
        std = np.where(std <= 1e-12, 1.0, std)
        return cls(mean.tolist(), std.tolist(), True, const)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PreprocStats":
        return cls(**d)


def standardize(features, stats: PreprocStats) -> np.ndarray:
    x = np.asarray(features, dtype=np.float64)
    return ((x - np.asarray(stats.mean)) / np.asarray(stats.std)).astype(np.float32)


def unstandardize(z, stats: PreprocStats) -> np.ndarray:
    return np.asarray(z, dtype=np.float64) * np.asarray(stats.std) + np.asarray(stats.mean)


# -- splits --------------------------------------------------------------
@dataclass
class DatasetSplit:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray
    seed: int


def split_dataset(n: int, seed: int = 0, fractions=(0.7, 0.1, 0.2)) -> DatasetSplit:
    if n < 10:
        raise DatasetError(f"need at least 10 examples to split, got {n}")
    perm = np.random.default_rng(seed).permutation(n)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    return DatasetSplit(
        np.sort(perm[:n_train]), np.sort(perm[n_train : n_train + n_val]), np.sort(perm[n_train + n_val :]), seed
    )


# -- synthetic oracle ----------------------------------------------------
@dataclass
class ParticleType:
    name: str
    mass: float
    charge: float
    weight: float  # share of the particle pool
    yield_scale: float  # photons relative to a neutron of equal energy
    width_scale: float  # shower width relative to the base width


def _default_types() -> list[ParticleType]:
    return [
        ParticleType("n", 0.9396, 0.0, 0.45, 1.00, 1.00),
        ParticleType("p", 0.9383, 1.0, 0.18, 0.95, 1.05),
        ParticleType("gamma", 0.0, 0.0, 0.15, 0.60, 0.70),
        ParticleType("pi+", 0.1396, 1.0, 0.07, 0.80, 1.20),
        ParticleType("pi-", 0.1396, -1.0, 0.05, 0.80, 1.20),
        ParticleType("K0L", 0.4976, 0.0, 0.06, 0.90, 1.10),
        ParticleType("Lambda", 1.1157, 0.0, 0.04, 1.05, 0.95),
    ]


@dataclass
class SynthConfig:
    """Constants of the synthetic shower oracle (all documented, all reproducible)."""

    types: list[ParticleType] = field(default_factory=_default_types)
    log_energy_mean: float = math.log(60.0)  # GeV
    log_energy_std: float = 0.45
    vertex_std: float = 1.0  # vx, vy
    vertex_z_std: float = 5.0
    angle_std: float = 1.0  # transverse angle px/p, in mrad
    center_gain_angle: float = 0.12  # centre shift per mrad, as a fraction of the axis length
    center_gain_vertex: float = 0.06  # centre shift per unit vertex offset
    center_clip: float = 0.3  # centre stays within +-clip of the axis length from the middle
    sigma_frac: tuple[float, float] = (0.11, 0.09)  # base shower width (rows, cols) per axis length
    photons_per_gev: float = 3.0
    jitter_frac: float = 0.10  # high-diversity centre jitter, fraction of axis length
    amplitude_jitter: float = 0.25  # high-diversity log-normal amplitude spread
    repeats: int = 16  # average draws per unique particle
    min_expected_photons: float = 25.0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["sigma_frac"] = list(self.sigma_frac)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        d = dict(d)
        if "types" in d:
            d["types"] = [ParticleType(**t) for t in d["types"]]
        if "sigma_frac" in d:
            d["sigma_frac"] = tuple(d["sigma_frac"])
        return cls(**d)

    def type_index(self, mass, charge) -> np.ndarray:
        m = np.asarray(mass, dtype=np.float32)[..., None]
        q = np.asarray(charge, dtype=np.float32)[..., None]
        tm = np.array([t.mass for t in self.types], dtype=np.float32)
        tq = np.array([t.charge for t in self.types], dtype=np.float32)
        hit = (m == tm) & (q == tq)
        return np.where(hit.any(axis=-1), hit.argmax(axis=-1), -1)

    def high_diversity_threshold(self, diversity_mix: float) -> float:
        """Energy above which a particle is high-diversity; a ``diversity_mix`` share of particles exceed it."""
        if diversity_mix <= 0:
            return math.inf
        if diversity_mix >= 1:
            return 0.0
        return math.exp(self.log_energy_mean + self.log_energy_std * NormalDist().inv_cdf(1.0 - diversity_mix))


def _sample_particles(cfg: SynthConfig, n: int, rng: np.random.Generator, height: int, width: int) -> np.ndarray:
    weights = np.array([t.weight for t in cfg.types])
    out = np.empty((0, N_FEATURES), dtype=np.float32)
    while len(out) < n:
        k = n - len(out)
        kind = rng.choice(len(cfg.types), size=k, p=weights / weights.sum())
        energy = np.exp(rng.normal(cfg.log_energy_mean, cfg.log_energy_std, size=k))
        vx, vy = rng.normal(0.0, cfg.vertex_std, size=(2, k))
        vz = rng.normal(0.0, cfg.vertex_z_std, size=k)
        mass = np.array([cfg.types[i].mass for i in kind])
        charge = np.array([cfg.types[i].charge for i in kind])
        p = np.sqrt(np.maximum(energy**2 - mass**2, 0.0))
        ax, ay = rng.normal(0.0, cfg.angle_std, size=(2, k)) * 1e-3
        px, py = p * ax, p * ay
        pz = np.sqrt(np.maximum(p**2 - px**2 - py**2, 0.0))
        rows = np.stack([energy, vx, vy, vz, px, py, pz, mass, charge], axis=1).astype(np.float32)
        lam = expected_photons(cfg, rows)
        out = np.concatenate([out, rows[lam >= cfg.min_expected_photons]])
    return out[:n]


def expected_photons(cfg: SynthConfig, features) -> np.ndarray:
    f = np.atleast_2d(np.asarray(features, dtype=np.float64))
    idx = cfg.type_index(f[:, 7], f[:, 8])
    scale = np.array([t.yield_scale for t in cfg.types] + [1.0])[idx]
    return cfg.photons_per_gev * f[:, 0] * scale


def shower_centre(cfg: SynthConfig, features, height: int, width: int) -> np.ndarray:
    """Deterministic (row, col) centre of the shower, shape (n, 2)."""
    f = np.atleast_2d(np.asarray(features, dtype=np.float64))
    e = np.maximum(f[:, 0], 1e-9)
    ang_x, ang_y = f[:, 4] / e * 1e3, f[:, 5] / e * 1e3
    off_c = np.clip(cfg.center_gain_angle * ang_x + cfg.center_gain_vertex * f[:, 1], -cfg.center_clip, cfg.center_clip)
    off_r = np.clip(cfg.center_gain_angle * ang_y + cfg.center_gain_vertex * f[:, 2], -cfg.center_clip, cfg.center_clip)
    return np.stack([(height - 1) / 2 + off_r * height, (width - 1) / 2 + off_c * width], axis=1)


def _profile(cfg: SynthConfig, centre, widths, height: int, width: int) -> np.ndarray:
    """Normalised anisotropic Gaussian pixel probabilities, (n, H, W)."""
    r = np.arange(height)[None, :, None]
    c = np.arange(width)[None, None, :]
    sr = cfg.sigma_frac[0] * height * widths
    sc = cfg.sigma_frac[1] * width * widths
    g = np.exp(
        -0.5 * ((r - centre[:, 0, None, None]) / sr[:, None, None]) ** 2
        - 0.5 * ((c - centre[:, 1, None, None]) / sc[:, None, None]) ** 2
    )
    return g / g.sum(axis=(1, 2), keepdims=True)


def expected_image(cfg: SynthConfig, features, detector: str) -> np.ndarray:
    """Conditional mean image of a low-diversity particle (Poisson noise averages out)."""
    h, w = geometry(detector)
    f = np.atleast_2d(np.asarray(features, dtype=np.float64))
    idx = cfg.type_index(f[:, 7], f[:, 8])
    widths = np.array([t.width_scale for t in cfg.types] + [1.0])[idx]
    prob = _profile(cfg, shower_centre(cfg, f, h, w), widths, h, w)
    return expected_photons(cfg, f)[:, None, None] * prob


def render_showers(cfg: SynthConfig, features, detector: str, rng: np.random.Generator, diversity_mix: float) -> np.ndarray:
    """One stochastic detector response per feature row, each with at least MIN_PHOTONS photons."""
    h, w = geometry(detector)
    f = np.atleast_2d(np.asarray(features, dtype=np.float64))
    n = len(f)
    idx = cfg.type_index(f[:, 7], f[:, 8])
    widths = np.array([t.width_scale for t in cfg.types] + [1.0])[idx]
    base_centre = shower_centre(cfg, f, h, w)
    lam0 = expected_photons(cfg, f)
    high = f[:, 0] > cfg.high_diversity_threshold(diversity_mix)
    out = np.zeros((n, h, w), dtype=np.int64)
    todo = np.arange(n)
    for _ in range(1000):
        if len(todo) == 0:
            break
        k = len(todo)
        jitter = rng.normal(0.0, cfg.jitter_frac, size=(k, 2)) * np.array([h, w])
        amp = np.exp(rng.normal(0.0, cfg.amplitude_jitter, size=k))
        hi = high[todo]
        centre = base_centre[todo] + np.where(hi[:, None], jitter, 0.0)
        lam = lam0[todo] * np.where(hi, amp, 1.0)
        img = rng.poisson(lam[:, None, None] * _profile(cfg, centre, widths[todo], h, w))
        ok = img.sum(axis=(1, 2)) >= MIN_PHOTONS
        out[todo[ok]] = img[ok]
        todo = todo[~ok]
    if len(todo):
        raise DatasetError(f"{len(todo)} showers never reached {MIN_PHOTONS} photons")
    return out


def synth_generate(detector: str, n: int, seed: int = 0, diversity_mix: float = 0.3, cfg: SynthConfig | None = None) -> Dataset:
    """Synthetic dataset: a pool of unique particles, each drawn ``cfg.repeats`` times on average."""
    if n < 1:
        raise DatasetError(f"n must be >= 1, got {n}")
    cfg = cfg or SynthConfig()
    h, w = geometry(detector)
    rng = np.random.default_rng(seed)
    n_unique = max(1, math.ceil(n / cfg.repeats))
    pool = _sample_particles(cfg, n_unique, rng, h, w)
    rows = pool[rng.integers(0, n_unique, size=n)]
    images = render_showers(cfg, rows, detector, rng, diversity_mix)
    return Dataset(detector, rows, images)


# -- statistics ----------------------------------------------------------
def dataset_stats(ds: Dataset, bins: int = 20, cfg: SynthConfig | None = None) -> dict:
    cfg = cfg or SynthConfig()
    feats = ds.features
    unique = np.unique(feats, axis=0) if len(ds) else feats
    hists = {}
    for j, name in enumerate(FEATURE_NAMES):
        col = feats[:, j].astype(np.float64)
        lo, hi = (float(col.min()), float(col.max())) if len(col) else (0.0, 1.0)
        if hi <= lo:
            hi = lo + 1.0
        counts, edges = np.histogram(col, bins=bins, range=(lo, hi))
        hists[name] = {"edges": edges.tolist(), "counts": counts.tolist()}
    idx = cfg.type_index(feats[:, 7], feats[:, 8]) if len(ds) else np.array([], dtype=int)
    names = [t.name for t in cfg.types]
    proportions: dict[str, float] = {}
    for i in np.unique(idx):
        label = names[i] if i >= 0 else "other"
        proportions[label] = float(np.mean(idx == i))
    photons = ds.images.sum(axis=(1, 2)) if len(ds) else np.array([0])
    return {
        "detector": ds.detector,
        "total_examples": int(len(ds)),
        "unique_feature_vectors": int(len(unique)),
        "type_proportions": proportions,
        "photons": {"min": int(photons.min()), "mean": float(photons.mean()), "max": int(photons.max())},
        "histograms": hists,
    }


def write_stats(stats: dict, out_dir) -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    jpath, cpath = out_dir / "stats.json", out_dir / "feature_histograms.csv"
    jpath.write_text(json.dumps(stats, indent=2))
    with cpath.open("w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["feature", "bin", "left", "right", "count"])
        for name, h in stats["histograms"].items():
            for b, count in enumerate(h["counts"]):
                wr.writerow([name, b, h["edges"][b], h["edges"][b + 1], count])
    return jpath, cpath


def channel_log_features(ds: Dataset) -> np.ndarray:
    """Log-transformed images with a channel axis, (n, 1, H, W)."""
    return log_transform(ds.images)[:, None]


class OracleGenerator:
    """Draws fresh synthetic showers for given features; the ground-truth simulator of a synthetic set."""

    def __init__(self, detector: str, diversity_mix: float = 0.3, cfg: SynthConfig | None = None):
        self.detector = detector
        self.diversity_mix = diversity_mix
        self.cfg = cfg or SynthConfig()
        self.default_steps = None

    def sample(self, features, seed: int = 0, steps: int | None = None, batch_size: int = 256) -> np.ndarray:
        return render_showers(self.cfg, features, self.detector, np.random.default_rng(seed), self.diversity_mix)
