"""Conditional flow matching: linear path, velocity regression loss, Euler sampler, training, step sweep."""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import metrics
from . import numerics as nx
from .data import Dataset, DatasetSplit, PreprocStats, geometry, inverse_transform, log_transform, standardize
from .model import ModelCheckpoint, UNet, UNetConfig, build_unet
from .numerics import FLOAT16, Tensor

log = logging.getLogger(__name__)

PIXEL_STEPS = 11
LATENT_STEPS = 7


class DivergenceError(FloatingPointError):
    """Training or sampling produced non-finite values."""

    def __init__(self, msg: str, trace: list | None = None):
        super().__init__(msg)
        self.trace = trace or []


@dataclass
class FMSchedule:
    num_steps: int = PIXEL_STEPS

    def __post_init__(self):
        if int(self.num_steps) < 1:
            raise ValueError(f"num_steps must be a positive integer, got {self.num_steps}")
        self.num_steps = int(self.num_steps)

    @property
    def t_grid(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.num_steps + 1)

    @property
    def dts(self) -> np.ndarray:
        """Uniform steps; the last one absorbs rounding so the steps sum to exactly 1."""
        dt = np.full(self.num_steps, 1.0 / self.num_steps)
        dt[-1] = 1.0 - dt[:-1].sum()
        return dt


def interpolate(x0, x1, t):
    """Point on the straight noise-to-data path at time ``t``."""
    x0, x1 = np.asarray(x0), np.asarray(x1)
    if x0.shape != x1.shape:
        raise ValueError(f"shape mismatch: {x0.shape} vs {x1.shape}")
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0) or np.any(t > 1):
        raise ValueError("t must lie in [0, 1]")
    return (1.0 - t) * x0 + t * x1


def target_velocity(x0, x1):
    x0, x1 = np.asarray(x0), np.asarray(x1)
    if x0.shape != x1.shape:
        raise ValueError(f"shape mismatch: {x0.shape} vs {x1.shape}")
    return x1 - x0


def _per_sample(t: np.ndarray, ndim: int) -> np.ndarray:
    return t.reshape((-1,) + (1,) * (ndim - 1))


def cfm_loss(net: Callable, x1, cond, rng: np.random.Generator) -> Tensor:
    """Mean squared error between predicted and straight-path velocity.

    One ``t ~ U[0, 1]`` and one Gaussian noise image are drawn per example.
    """
    x1 = np.asarray(x1, dtype=np.float32)
    if len(x1) == 0:
        raise ValueError("empty batch")
    t = rng.uniform(0.0, 1.0, size=len(x1))
    x0 = rng.standard_normal(x1.shape).astype(np.float32)
    tb = _per_sample(t, x1.ndim).astype(np.float32)
    xt = (1.0 - tb) * x0 + tb * x1
    pred = nx.as_tensor(net(xt, t, cond))
    return nx.mean(nx.square(pred - (x1 - x0)))


def euler_sample(net: Callable, cond, schedule: FMSchedule, rng: np.random.Generator | None = None, x0=None, shape=None) -> np.ndarray:
    """Integrate dx/dt = net(x, t, cond) from Gaussian noise at t=0 to t=1.

    Returns the final state (log space for pixel models). ``x0`` overrides the
    noise draw; otherwise ``shape`` (or the net's configured shape) is used.
    """
    if x0 is None:
        if shape is None:
            cfg = net.cfg
            shape = (len(cond), cfg.in_channels, cfg.image_height, cfg.image_width)
        x0 = rng.standard_normal(shape)
    dtype = nx.compute_dtype()
    x = np.asarray(x0, dtype=dtype).copy()
    reduced = getattr(net, "precision", None) == FLOAT16
    t_grid, dts = schedule.t_grid, schedule.dts
    with nx.no_grad():
        for i in range(schedule.num_steps):
            t = np.full(len(x), t_grid[i])
            v = net(x, t, cond)
            v = v.data if isinstance(v, Tensor) else np.asarray(v, dtype=dtype)
            x = x + dtype(dts[i]) * v
            if reduced:
                x = nx.round_f16(x)
            if not np.isfinite(x).all():
                raise DivergenceError(f"non-finite state at Euler step {i + 1}/{schedule.num_steps}")
    return x


# -- training ------------------------------------------------------------
@dataclass
class FMTrainConfig:
    epochs: int = 50
    batch_size: int = 256
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    cosine_decay: bool = True
    clip_norm: float | None = 1.0
    seed: int = 0
    val_steps: int = PIXEL_STEPS
    val_samples: int | None = None  # cap on validation rows scored each epoch

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class FitResult:
    state: dict[str, np.ndarray]
    trace: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    best_val: float = math.inf
    seconds: float = 0.0


def fit(net, loss_fn: Callable, n_train: int, cfg: FMTrainConfig, evaluate: Callable | None = None) -> FitResult:
    """Generic minibatch Adam loop keeping the parameters of the best-validation epoch.

    ``loss_fn(idx, rng)`` returns the scalar loss of the rows ``idx``;
    ``evaluate(epoch)`` returns the validation score (lower is better).
    """
    rng = np.random.default_rng(cfg.seed)
    params = net.parameters()
    steps_per_epoch = math.ceil(n_train / cfg.batch_size)
    opt = nx.Adam(
        params, lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2,
        cosine_decay=cfg.cosine_decay, total_steps=max(1, cfg.epochs * steps_per_epoch),
    )
    result = FitResult(state=net.state_dict())
    start = time.perf_counter()
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n_train)
        total, count = 0.0, 0
        for b in range(steps_per_epoch):
            idx = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
            try:
                loss = loss_fn(idx, rng)
                value = loss.item()
                if not math.isfinite(value):
                    raise FloatingPointError("non-finite loss")
                grads = nx.backward(loss)
            except FloatingPointError as exc:
                raise DivergenceError(f"diverged in epoch {epoch}: {exc}", result.trace) from exc
            nx.clip_grad_norm(grads, cfg.clip_norm)
            opt.step(grads)
            total += value * len(idx)
            count += len(idx)
        row = {"epoch": epoch, "loss": total / count}
        if evaluate is not None:
            try:
                score = float(evaluate(epoch))
            except FloatingPointError:
                score = math.inf
            row["val_wasserstein"] = score
            if score < result.best_val or (epoch == 1 and not math.isfinite(result.best_val)):
                result.best_val, result.best_epoch = score, epoch
                result.state = net.state_dict()
        else:
            result.best_epoch, result.state = epoch, net.state_dict()
        log.info("epoch %d loss %.5f val %s", epoch, row["loss"], row.get("val_wasserstein"))
        result.trace.append(row)
    result.seconds = time.perf_counter() - start
    return result


class FMGenerator:
    """Samples detector responses from a pixel-space FM checkpoint."""

    def __init__(self, ckpt: ModelCheckpoint, precision: str = "float32"):
        if ckpt.model_kind != "unet_pixel":
            raise ValueError(f"expected a unet_pixel checkpoint, got {ckpt.model_kind}")
        self.ckpt = ckpt
        self.detector = ckpt.config["detector"]
        self.stats = PreprocStats.from_dict(ckpt.stats)
        net = UNet(UNetConfig.from_dict(ckpt.config["unet"]), np.random.default_rng(0))
        net.load_state_dict(ckpt.params)
        self.net = net.with_precision(precision) if precision != "float32" else net
        self.default_steps = int(ckpt.config.get("steps", PIXEL_STEPS))

    @property
    def image_shape(self) -> tuple[int, int]:
        return geometry(self.detector)

    def sample_raw(self, cond_std: np.ndarray, seed: int, steps: int | None = None, batch_size: int = 256) -> np.ndarray:
        cfg = self.net.cfg
        rng = np.random.default_rng(seed)
        noise = rng.standard_normal((len(cond_std), cfg.in_channels, cfg.image_height, cfg.image_width)).astype(np.float32)
        sched = FMSchedule(steps or self.default_steps)
        out = [
            euler_sample(self.net, cond_std[i : i + batch_size], sched, x0=noise[i : i + batch_size])
            for i in range(0, len(cond_std), batch_size)
        ]
        return np.concatenate(out) if out else noise

    def sample(self, features, seed: int = 0, steps: int | None = None, batch_size: int = 256) -> np.ndarray:
        """Photon-count images (n, H, W) for raw particle features."""
        y = self.sample_raw(standardize(features, self.stats), seed, steps, batch_size)
        return inverse_transform(y[:, 0])


@dataclass
class FMRun:
    checkpoint: ModelCheckpoint
    trace: list[dict]


def _val_rows(split: DatasetSplit, cap: int | None) -> np.ndarray:
    return split.val if cap is None else split.val[:cap]


def train_fm(dataset: Dataset, split: DatasetSplit, unet_cfg: UNetConfig, cfg: FMTrainConfig, net: UNet | None = None) -> FMRun:
    """Train a pixel-space FM model; the returned checkpoint holds the best-validation epoch."""
    h, w = geometry(dataset.detector)
    if (unet_cfg.image_height, unet_cfg.image_width) != (h, w):
        raise ValueError(f"U-Net geometry {unet_cfg.image_height}x{unet_cfg.image_width} does not match {dataset.detector}")
    stats = PreprocStats.fit(dataset.features, split.train)
    x1 = log_transform(dataset.images[split.train])[:, None]
    cond = standardize(dataset.features[split.train], stats)
    net = net or build_unet(unet_cfg, seed=cfg.seed)
    val_idx = _val_rows(split, cfg.val_samples)
    val_cond = standardize(dataset.features[val_idx], stats)
    val_channels = metrics.extract_channels(dataset.images[val_idx])

    def loss_fn(idx, rng):
        return cfm_loss(net, x1[idx], cond[idx], rng)

    def evaluate(epoch):
        rng = np.random.default_rng(cfg.seed + 7919)
        sched = FMSchedule(cfg.val_steps)
        noise = rng.standard_normal((len(val_cond), 1, h, w)).astype(np.float32)
        ys = [euler_sample(net, val_cond[i : i + 256], sched, x0=noise[i : i + 256]) for i in range(0, len(val_cond), 256)]
        imgs = inverse_transform(np.concatenate(ys)[:, 0])
        return metrics.wasserstein1_channels(val_channels, metrics.extract_channels(imgs))

    res = fit(net, loss_fn, len(x1), cfg, evaluate if len(val_idx) else None)
    ckpt = ModelCheckpoint(
        model_kind="unet_pixel",
        config={"detector": dataset.detector, "unet": unet_cfg.to_dict(), "steps": PIXEL_STEPS, "split_seed": split.seed, "train": cfg.to_dict()},
        params=res.state,
        stats=stats.to_dict(),
        seed=cfg.seed,
        metadata={
            "epochs": cfg.epochs,
            "best_epoch": res.best_epoch,
            "best_val_wasserstein": res.best_val,
            "train_seconds": res.seconds,
            "trace": res.trace,
        },
    )
    return FMRun(ckpt, res.trace)


# -- evaluation ----------------------------------------------------------
def evaluate_generator(generator, dataset: Dataset, idx, runs: int = 5, steps: int | None = None, batch_size: int = 256) -> dict:
    """Wasserstein and MAE of a generator on rows ``idx``; both averaged over ``runs`` seeds 0..runs-1."""
    feats = dataset.features[idx]
    true = metrics.extract_channels(dataset.images[idx])
    gens = np.stack([metrics.extract_channels(generator.sample(feats, seed=s, steps=steps, batch_size=batch_size)) for s in range(runs)])
    ws = [metrics.wasserstein1_channels(true, g) for g in gens]
    return {
        "wasserstein": float(np.mean(ws)),
        "wasserstein_runs": [float(v) for v in ws],
        "mae": metrics.mae_channels(true, gens),
        "runs": runs,
        "n": int(len(feats)),
    }


def sweep_steps(generator, dataset: Dataset, idx, step_list, seed: int = 0, batch_size: int = 256) -> list[dict]:
    """One (steps, wasserstein, mae) row per Euler step count, same noise for every row."""
    feats = dataset.features[idx]
    true = metrics.extract_channels(dataset.images[idx])
    rows = []
    for steps in step_list:
        gen = metrics.extract_channels(generator.sample(feats, seed=seed, steps=int(steps), batch_size=batch_size))
        rows.append({
            "steps": int(steps),
            "wasserstein": metrics.wasserstein1_channels(true, gen),
            "mae": metrics.mae_channels(true, gen),
        })
    return rows


def write_csv(rows: list[dict], path, columns: list[str]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore")
        wr.writeheader()
        for r in rows:
            wr.writerow(r)
    return path


TRACE_COLUMNS = ["epoch", "loss", "val_wasserstein"]
SWEEP_COLUMNS = ["steps", "wasserstein", "mae"]
