"""Hyperparameter campaigns that minimise validation Wasserstein, with a JSON-lines trial ledger."""
from __future__ import annotations

import csv
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Protocol

import numpy as np

from .data import Dataset, DatasetSplit
from .flow_matching import DivergenceError, FMTrainConfig, train_fm
from .model import ModelCheckpoint, UNetConfig, save_checkpoint

log = logging.getLogger(__name__)

COMPLETED = "completed"
DIVERGED = "diverged"


class CampaignError(RuntimeError):
    pass


@dataclass
class SearchSpace:
    lr: tuple[float, float] = (1e-5, 1e-2)  # log-uniform
    beta1: tuple[float, float] = (0.5, 0.99)
    beta2: tuple[float, float] = (0.9, 0.9999)
    cosine_decay: tuple[bool, ...] = (True, False)

    def __post_init__(self):
        for name in ("lr", "beta1", "beta2"):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi:
                raise ValueError(f"invalid {name} bounds {lo}, {hi}")
        if self.beta1[1] >= 1 or self.beta2[1] >= 1:
            raise ValueError("beta bounds must stay below 1")


class Strategy(Protocol):
    def suggest(self, trial_id: int) -> dict: ...


class RandomSearch:
    """Seeded independent draws from the search space."""

    def __init__(self, space: SearchSpace, seed: int):
        self.space = space
        self.rng = np.random.default_rng(seed)

    def suggest(self, trial_id: int) -> dict:
        s, r = self.space, self.rng
        return {
            "lr": float(math.exp(r.uniform(math.log(s.lr[0]), math.log(s.lr[1])))),
            "beta1": float(r.uniform(*s.beta1)),
            "beta2": float(r.uniform(*s.beta2)),
            "cosine_decay": bool(s.cosine_decay[r.integers(len(s.cosine_decay))]),
        }


@dataclass
class TrialRecord:
    trial_id: int
    params: dict
    seed: int
    status: str
    val_wasserstein: float
    checkpoint: str | None = None
    seconds: float = 0.0

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "TrialRecord":
        return cls(**json.loads(line))


@dataclass
class Campaign:
    records: list[TrialRecord]
    best: TrialRecord
    ledger: Path | None = None
    extra: dict = field(default_factory=dict)


def trial_seed(campaign_seed: int, trial_id: int) -> int:
    return int(np.random.SeedSequence([campaign_seed, trial_id]).generate_state(1)[0])


def select_best(records: list[TrialRecord]) -> TrialRecord:
    """Lowest finite validation Wasserstein; ties go to the lower trial id."""
    ok = [r for r in records if r.status == COMPLETED and math.isfinite(r.val_wasserstein)]
    if not ok:
        raise CampaignError(f"all {len(records)} trials diverged; no model to select")
    return min(ok, key=lambda r: (r.val_wasserstein, r.trial_id))


def _run_trial(trial_id, params, seed, dataset, split, base_cfg, unet_cfg, out_dir) -> TrialRecord:
    cfg = replace(base_cfg, seed=seed, **params)
    start = time.perf_counter()
    try:
        run = train_fm(dataset, split, unet_cfg, cfg)
    except DivergenceError as exc:
        log.info("trial %d diverged: %s", trial_id, exc)
        return TrialRecord(trial_id, params, seed, DIVERGED, math.inf, None, time.perf_counter() - start)
    val = float(run.checkpoint.metadata["best_val_wasserstein"])
    if not math.isfinite(val):
        return TrialRecord(trial_id, params, seed, DIVERGED, math.inf, None, time.perf_counter() - start)
    path = None
    if out_dir is not None:
        path = Path(out_dir) / "trials" / f"trial_{trial_id:04d}.ckpt"
        save_checkpoint(path, run.checkpoint)
        path = str(path)
    return TrialRecord(trial_id, params, seed, COMPLETED, val, path, time.perf_counter() - start)


def run_campaign(
    model_kind: str,
    dataset: Dataset,
    split: DatasetSplit,
    n_trials: int,
    space: SearchSpace | None = None,
    seed: int = 0,
    base_cfg: FMTrainConfig | None = None,
    unet_cfg: UNetConfig | None = None,
    out_dir=None,
    strategy: Strategy | None = None,
    workers: int = 1,
    trial_fn=None,
) -> Campaign:
    """Train ``n_trials`` models with sampled optimizer settings and keep the best.

    ``trial_fn(trial_id, params, seed)`` replaces the default pixel-FM trial
    (used for other model kinds and for tests).
    """
    if n_trials < 1:
        raise ValueError("n_trials must be >= 1")
    if model_kind != "unet_pixel" and trial_fn is None:
        raise ValueError(f"no default trainer for model kind {model_kind!r}; pass trial_fn")
    space = space or SearchSpace()
    strategy = strategy or RandomSearch(space, seed)
    base_cfg = base_cfg or FMTrainConfig(epochs=10)
    plan = [(i, strategy.suggest(i), trial_seed(seed, i)) for i in range(n_trials)]
    ledger = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        ledger = out_dir / "ledger.jsonl"
        ledger.write_text("")

    def jobs():
        if trial_fn is not None:
            for i, params, s in plan:
                yield trial_fn(i, params, s)
        elif workers > 1:
            with ProcessPoolExecutor(workers) as pool:
                futs = [pool.submit(_run_trial, i, p, s, dataset, split, base_cfg, unet_cfg, out_dir) for i, p, s in plan]
                for f in futs:
                    yield f.result()
        else:
            for i, params, s in plan:
                yield _run_trial(i, params, s, dataset, split, base_cfg, unet_cfg, out_dir)

    records = []
    for rec in jobs():
        records.append(rec)
        log.info("trial %d %s W=%.4f", rec.trial_id, rec.status, rec.val_wasserstein)
        if ledger is not None:
            with ledger.open("a") as fh:
                fh.write(rec.to_json() + "\n")
    best = select_best(records)
    if out_dir is not None and best.checkpoint:
        Path(out_dir, "best.ckpt").write_bytes(Path(best.checkpoint).read_bytes())
    return Campaign(records, best, ledger)


def read_ledger(path) -> list[TrialRecord]:
    return [TrialRecord.from_json(line) for line in Path(path).read_text().splitlines() if line.strip()]


def wasserstein_cdf(records: list[TrialRecord]) -> list[dict]:
    """Fraction of all trials at or below each finite Wasserstein value; diverged trials stay in the denominator."""
    if not records:
        raise ValueError("need at least one trial record")
    n = len(records)
    values = np.sort([r.val_wasserstein for r in records if math.isfinite(r.val_wasserstein)])
    rows = []
    for v in np.unique(values):
        rows.append({"threshold": float(v), "fraction": float(np.searchsorted(values, v, side="right") / n)})
    return rows


def cdf_at(rows: list[dict], x: float) -> float:
    """Evaluate the right-continuous step CDF at ``x``."""
    frac = 0.0
    for r in rows:
        if r["threshold"] <= x:
            frac = r["fraction"]
    return frac


def write_cdf(rows: list[dict], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=["threshold", "fraction"])
        wr.writeheader()
        wr.writerows(rows)
    return path
