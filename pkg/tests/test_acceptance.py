"""Acceptance criteria 1-11.

Every test records one ``criterion N: PASS|FAIL`` line; the full set is
repeated in the terminal summary. The model-based criteria (4-8, 11) train on
the 16x16 synthetic set and take most of an hour on one core. Setting
``ZDCFLOW_ACCEPT_CACHE=<dir>`` keeps the trained checkpoints between runs.
"""

import json
import os
import re
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from zdcflow import metrics
from zdcflow.baselines import DenseTrainConfig, evaluate_direct, fit_knn, fit_linear, train_fm_channels, train_mlp_channels
from zdcflow.bench import bench_inference, ladder_report, write_ladder
from zdcflow.cli import build, load_config
from zdcflow.data import geometry, split_dataset, synth_generate
from zdcflow.flow_matching import FMGenerator, FMTrainConfig, evaluate_generator, sweep_steps, train_fm
from zdcflow.latent import LatentGenerator, VAETrainConfig, latent_unet_config, train_latent_fm, train_vae
from zdcflow.model import UNetConfig, VAEConfig, load_checkpoint, save_checkpoint
from zdcflow.tuning import SearchSpace, read_ledger, run_campaign, wasserstein_cdf

from conftest import ACCEPTANCE_LINES

ROOT = Path(__file__).resolve().parents[1]
CONFIGS = ROOT / "configs"
SWEEP = [1, 2, 3, 5, 7, 9, 11, 15, 20, 50]


def record(n: int, ok: bool, detail: str):
    line = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES[n] = line
    print(line)
    assert ok, line


def run_suite(*args) -> tuple[bool, int, float]:
    """Run a selection of the oracle suites in a fresh interpreter; (ok, passed, seconds)."""
    t0 = time.perf_counter()
    proc = subprocess.run(
        [sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider", *args],
        cwd=ROOT / "tests", capture_output=True, text=True,
    )
    seconds = time.perf_counter() - t0
    m = re.search(r"(\d+) passed", proc.stdout)
    passed = int(m.group(1)) if m else 0
    if proc.returncode:
        print(proc.stdout[-3000:])
    return proc.returncode == 0 and passed > 0, passed, seconds


# -- fast criteria ------------------------------------------------------------
def test_criterion_01_gradients():
    ok, passed, s = run_suite("test_numerics.py", "test_model.py", "-k", "gradient")
    record(1, ok and s < 60, f"{passed} finite-difference checks (20 seeds each, rel err < 1e-3) in {s:.1f}s")


def test_criterion_02_fm_algebra():
    ok, passed, s = run_suite("test_flow_matching.py", "-k", "path_identity or constant_velocity or schedule_sums")
    record(2, ok and s < 60, f"{passed} path-identity and Euler exactness checks (steps 1, 7, 11, 50) in {s:.1f}s")


def test_criterion_03_metric_oracles():
    ok, passed, s = run_suite("test_metrics.py", "-k", "lp_oracle or closed_form or partition")
    record(3, ok and s < 60, f"{passed} LP / closed-form / partition checks in {s:.1f}s")


def test_criterion_09_scale_invariance():
    ok, passed, s = run_suite("test_latent.py", "-k", "scale_invariance or normalized_term")
    record(9, ok and s < 60, f"{passed} summand checks for c in (0.1, 10) in {s:.1f}s")


def test_criterion_10_round_trips():
    ok, passed, s = run_suite(
        "test_data.py", "test_model.py", "-k",
        "zdc1_round_trip or log_inverse or split_determinism or checkpoint_round_trip",
    )
    record(10, ok and s < 60, f"{passed} ZDC1 / transform / checkpoint / split checks in {s:.1f}s")


# -- shared trained models on the 16x16 synthetic set -------------------------
@pytest.fixture(scope="module")
def cache(tmp_path_factory) -> Path:
    d = os.environ.get("ZDCFLOW_ACCEPT_CACHE")
    path = Path(d) if d else tmp_path_factory.mktemp("accept")
    path.mkdir(parents=True, exist_ok=True)
    return path


def cached(path: Path, train):
    if path.exists():
        return load_checkpoint(path)
    ckpt = train()
    save_checkpoint(path, ckpt)
    return ckpt


@pytest.fixture(scope="module")
def zn16():
    ds = synth_generate("ZN16", 16384, seed=0)
    split = split_dataset(len(ds), 0)
    test_ch = metrics.extract_channels(ds.images[split.test])
    return {
        "ds": ds,
        "split": split,
        "test_ch": test_ch,
        "w_base": metrics.original_baseline_wasserstein(test_ch),
        "mae_base": metrics.original_baseline_mae(ds.features[split.test], test_ch),
    }


@pytest.fixture(scope="module")
def pixel(zn16, cache):
    conf = load_config(CONFIGS / "unet_zn16.toml")
    h, w = geometry("ZN16")
    ucfg = build(UNetConfig, conf["unet"], image_height=h, image_width=w)
    tcfg = build(FMTrainConfig, conf["train"])
    ckpt = cached(cache / "pixel.ckpt", lambda: train_fm(zn16["ds"], zn16["split"], ucfg, tcfg).checkpoint)
    gen = FMGenerator(ckpt)
    res = evaluate_generator(gen, zn16["ds"], zn16["split"].test, runs=5)
    return {"ckpt": ckpt, "gen": gen, "eval": res}


@pytest.fixture(scope="module")
def latent(zn16, cache):
    vconf = load_config(CONFIGS / "vae_zn16.toml")
    lconf = load_config(CONFIGS / "latent_zn16.toml")
    vcfg = build(VAEConfig, vconf.get("vae"), image_height=16, image_width=16)
    vtcfg = build(VAETrainConfig, vconf["train"])
    vae = cached(cache / "vae.ckpt", lambda: train_vae(zn16["ds"], zn16["split"], vcfg, vtcfg).checkpoint)
    ltcfg = build(FMTrainConfig, lconf["train"])
    ucfg = latent_unet_config(vcfg, **lconf.get("unet", {}))
    fm = cached(cache / "latent.ckpt", lambda: train_latent_fm(vae, zn16["ds"], zn16["split"], ltcfg, ucfg)[0])
    return {"vae": vae, "fm": fm, "gen": LatentGenerator(vae, fm)}


# -- model criteria -------------------------------------------------------------
@pytest.mark.slow
def test_criterion_04_pixel_fidelity(zn16, pixel):
    res, meta = pixel["eval"], pixel["ckpt"].metadata
    w_lim, mae_lim = 3 * zn16["w_base"], 1.5 * zn16["mae_base"]
    minutes = meta["train_seconds"] / 60
    ok = res["wasserstein"] <= w_lim and res["mae"] <= mae_lim and minutes <= 15
    record(4, ok, f"W {res['wasserstein']:.3f} <= {w_lim:.3f}, MAE {res['mae']:.2f} <= {mae_lim:.2f}, training {minutes:.1f} min")


@pytest.mark.slow
def test_criterion_05_latent_pipeline(zn16, pixel, latent):
    recon = latent["vae"].metadata["test_recon_wasserstein"]
    res = evaluate_generator(latent["gen"], zn16["ds"], zn16["split"].test, runs=5)
    r_lim, l_lim = 2 * zn16["w_base"], 1.5 * pixel["eval"]["wasserstein"]
    ok = recon <= r_lim and res["wasserstein"] <= l_lim
    record(5, ok, f"VAE recon W {recon:.3f} <= {r_lim:.3f}, latent FM W {res['wasserstein']:.3f} <= {l_lim:.3f}")


def interleaved(arms, rounds: int, feats):
    """Time several generator settings in alternating short blocks and pool the batches per arm.

    Consecutive blocks on a shared core drift by tens of percent, so each
    comparison is measured round-robin and summarised by pooled medians.
    """
    pooled = {a["label"]: [] for a in arms}
    first = {}
    for r in range(rounds):
        for a in arms:
            res = bench_inference(a["gen"], feats, 256, warmup=1, batches=a["batches"], steps=a["steps"], precision=a.get("precision", "float32"), seed=r, label=a["label"])
            first.setdefault(a["label"], res)
            pooled[a["label"]] += res.per_batch_ms
    out = []
    for a in arms:
        res = first[a["label"]]
        res.per_batch_ms = pooled[a["label"]]
        per_sample = np.array(res.per_batch_ms) / 256
        res.median_ms, res.p10_ms, res.p90_ms = (float(np.percentile(per_sample, q)) for q in (50, 10, 90))
        res.measured_batches = len(per_sample)
        out.append(res)
    return out


@pytest.mark.slow
def test_criterion_06_speed_ladder(zn16, pixel, latent, tmp_path):
    feats = zn16["ds"].features
    v, f = latent["vae"], latent["fm"]
    rows = interleaved([
        {"label": "pixel FM, 50 steps", "gen": pixel["gen"], "steps": 50, "batches": 1},
        {"label": "pixel FM, 11 steps", "gen": pixel["gen"], "steps": 11, "batches": 2},
    ], 3, feats) + interleaved([
        {"label": "latent FM, 7 steps", "gen": latent["gen"], "steps": 7, "batches": 3},
        {"label": "latent FM, 7 steps, float16", "gen": LatentGenerator(v, f, "float16"), "steps": 7, "batches": 3, "precision": "float16"},
    ], 6, feats)
    write_ladder(ladder_report(rows), tmp_path / "ladder.csv")
    p50, p11, lat, half = (r.median_ms for r in rows)
    a, b, c = p11 / lat, p50 / p11, half / lat
    ok = a >= 5 and 4 <= b <= 7 and c <= 1.10
    record(6, ok, f"latent {a:.1f}x faster than pixel (>= 5), 50->11 steps {b:.2f}x (4-7), float16/float32 {c:.2f} (<= 1.10); "
                  f"ms/sample {p50:.3f}, {p11:.3f}, {lat:.4f}, {half:.4f}")


@pytest.mark.slow
def test_criterion_07_step_sweep(zn16, pixel, tmp_path):
    from zdcflow.flow_matching import write_csv

    idx = zn16["split"].test[:1024]
    rows = sweep_steps(pixel["gen"], zn16["ds"], idx, SWEEP)
    path = write_csv(rows, tmp_path / "sweep.csv", ["steps", "wasserstein", "mae"])
    best = min(rows, key=lambda r: r["wasserstein"])["steps"]
    stub_ok, _, _ = run_suite("test_flow_matching.py", "-k", "sweep_flat")
    ok = path.exists() and len(rows) == len(SWEEP) and stub_ok
    record(7, ok, f"sweep CSV with {len(rows)} rows, minimum W at {best} steps; stub sweep flat to 1e-9: {stub_ok}")


@pytest.mark.slow
def test_criterion_08_tuning(tmp_path):
    ds = synth_generate("ZN16", 2048, seed=1)
    split = split_dataset(len(ds), 0)
    base = FMTrainConfig(epochs=1, val_samples=256)
    ucfg = UNetConfig(16, 16)
    t0 = time.perf_counter()
    camps = [run_campaign("unet_pixel", ds, split, 20, SearchSpace(), 7, base, ucfg, tmp_path / f"run{i}") for i in (0, 1)]
    minutes = (time.perf_counter() - t0) / 60

    def strip(path):
        return [(r.trial_id, r.params, r.seed, r.status, r.val_wasserstein) for r in read_ledger(path)]

    a, b = camps
    same = strip(a.ledger) == strip(b.ledger) and all(
        x.tobytes() == y.tobytes()
        for x, y in zip(load_checkpoint(tmp_path / "run0/best.ckpt").params.values(), load_checkpoint(tmp_path / "run1/best.ckpt").params.values())
    )
    cdf = wasserstein_cdf(a.records)
    monotone = all(x["threshold"] < y["threshold"] and x["fraction"] <= y["fraction"] for x, y in zip(cdf, cdf[1:]))
    finite = [r for r in a.records if r.status == "completed" and np.isfinite(r.val_wasserstein)]
    picked_min = a.best.val_wasserstein == min(r.val_wasserstein for r in finite)
    diverged = len(a.records) - len(finite)
    ok = same and monotone and picked_min and a.best.status == "completed" and minutes <= 30
    record(8, ok, f"20 trials x2 in {minutes:.1f} min, bit-reproducible {same}, CDF monotone {monotone}, "
                  f"best trial {a.best.trial_id} is min W {picked_min}, {diverged} diverged")


@pytest.mark.slow
def test_criterion_11_direct_estimation(zn16, pixel, tmp_path):
    lin_ok, _, _ = run_suite("test_baselines.py", "-k", "pseudo_inverse")
    ds, split = zn16["ds"], zn16["split"]
    ch = metrics.extract_channels(ds.images)
    dcfg = build(DenseTrainConfig, load_config(CONFIGS / "baselines_zn16.toml").get("dense"))
    regs = {
        "linear": fit_linear(ds.features[split.train], ch[split.train]),
        "knn": fit_knn(ds.features, ch, k=10, train_idx=split.train),
        "mlp": train_mlp_channels(ds.features, ch, split.train, dcfg),
        "fm5": train_fm_channels(ds.features, ch, split.train, dcfg),
    }
    rows = evaluate_direct(regs, ds.features[split.test], zn16["test_ch"])
    table = {r["model"]: r["wasserstein"] for r in rows}
    fm_w = pixel["eval"]["wasserstein"]
    best = min(table, key=table.get)
    (tmp_path / "direct.json").write_text(json.dumps({**table, "full_image_fm": fm_w}))
    ok = lin_ok and fm_w <= 1.1 * table[best]
    listing = ", ".join(f"{k} {v:.3f}" for k, v in table.items())
    record(11, ok, f"linear fit vs pseudo-inverse {lin_ok}; full-image FM W {fm_w:.3f} vs best direct ({best}) "
                   f"{table[best]:.3f} x 1.1; [{listing}]")


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v", "-rA"]))
