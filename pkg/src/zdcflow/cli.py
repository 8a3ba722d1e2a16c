"""Command-line entry point: ``zdcflow <command> [flags]``.

Every command writes ``manifest.<command>.json`` (argv, resolved config,
versions, seed) next to its artifacts. Failures exit nonzero with one JSON
line on stderr.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import platform
import sys
import time
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import __version__, metrics
from .baselines import (
    DenseTrainConfig,
    evaluate_direct,
    fit_knn,
    fit_linear,
    predict_knn,
    regressor_checkpoint,
    train_fm_channels,
    train_mlp_channels,
)
from .bench import LADDER_COLUMNS, bench_inference, ladder_report, write_ladder
from .data import (
    Dataset,
    OracleGenerator,
    SynthConfig,
    dataset_stats,
    geometry,
    load_dataset,
    save_dataset,
    split_dataset,
    synth_generate,
    write_stats,
)
from .flow_matching import (
    SWEEP_COLUMNS,
    TRACE_COLUMNS,
    FMGenerator,
    FMTrainConfig,
    evaluate_generator,
    sweep_steps,
    train_fm,
    write_csv,
)
from .latent import LatentGenerator, VAETrainConfig, latent_unet_config, train_latent_fm, train_vae
from .model import UNetConfig, VAEConfig, load_checkpoint, save_checkpoint
from .tuning import SearchSpace, run_campaign, wasserstein_cdf, write_cdf

log = logging.getLogger("zdcflow")

try:
    import tomllib as _toml
except ModuleNotFoundError:  # Python < 3.11
    import tomli as _toml


class CLIError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CLIError(f"usage: {message}")


# -- helpers -------------------------------------------------------------
def load_config(path) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise CLIError(f"config file not found: {p}")
    with p.open("rb") as fh:
        return _toml.load(fh)


def build(cls, section: dict | None, **overrides):
    """Dataclass from a config section, with non-None flag values taking precedence."""
    names = {f.name for f in fields(cls)}
    section = dict(section or {})
    unknown = set(section) - names
    if unknown:
        raise CLIError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    section.update({k: v for k, v in overrides.items() if v is not None and k in names})
    return cls(**section)


def read_data(path) -> Dataset:
    if path is None:
        raise CLIError("--data is required")
    if not Path(path).exists():
        raise CLIError(f"dataset not found: {path}")
    return load_dataset(path)


def read_ckpt(path):
    if path is None:
        raise CLIError("--ckpt is required")
    if not Path(path).exists():
        raise CLIError(f"checkpoint not found: {path}")
    return load_checkpoint(path)


def out_dir(args) -> Path:
    d = Path(args.out_dir)
    d.mkdir(parents=True, exist_ok=True)
    return d


def versions() -> dict:
    return {"zdcflow": __version__, "python": platform.python_version(), "numpy": np.__version__}


def write_manifest(directory: Path, command: str, argv: list[str], resolved: dict, seed) -> Path:
    path = Path(directory) / f"manifest.{command}.json"
    doc = {"command": command, "argv": argv, "config": resolved, "seed": seed, "versions": versions(), "created": time.time()}
    path.write_text(json.dumps(doc, indent=2, sort_keys=True, default=str))
    return path


def emit(obj) -> None:
    print(json.dumps(obj, sort_keys=True, default=float))


def make_generator(args, detector: str):
    """Generator for eval/sweep/bench: a checkpoint, the synthetic oracle, or replay of the real rows."""
    kind = getattr(args, "generator", "model")
    if kind == "oracle":
        return OracleGenerator(detector, getattr(args, "diversity_mix", 0.3))
    if kind == "replay":
        return None
    ckpt = read_ckpt(args.ckpt)
    if ckpt.config.get("detector") != detector:
        raise CLIError(f"checkpoint is for detector {ckpt.config.get('detector')}, data is {detector}")
    precision = getattr(args, "precision", "float32")
    if ckpt.model_kind == "unet_pixel":
        return FMGenerator(ckpt, precision)
    if ckpt.model_kind == "unet_latent":
        if not args.vae:
            raise CLIError("a unet_latent checkpoint needs --vae")
        return LatentGenerator(read_ckpt(args.vae), ckpt, precision)
    raise CLIError(f"cannot sample from a {ckpt.model_kind} checkpoint")


class ReplayGenerator:
    """Identity generator over real data.

    For each query it returns a real response of the same particle drawn from
    ``pool`` rows (an independent simulation run), falling back to the nearest
    feature vector when the particle never recurs in the pool.
    """

    default_steps = None

    def __init__(self, dataset: Dataset, pool):
        self.dataset = dataset
        self.pool = np.asarray(pool)
        if len(self.pool) == 0:
            raise CLIError("replay generator needs rows outside the evaluated split")
        self.groups: dict[bytes, list[int]] = {}
        for r in self.pool:
            self.groups.setdefault(dataset.features[r].tobytes(), []).append(int(r))

    def sample(self, features, seed=0, steps=None, batch_size=256):
        rng = np.random.default_rng(seed)
        feats = np.asarray(features, dtype=np.float32)
        rows = np.empty(len(feats), dtype=np.int64)
        missing = []
        for i, f in enumerate(feats):
            cands = self.groups.get(f.tobytes())
            if cands:
                rows[i] = cands[rng.integers(len(cands))]
            else:
                missing.append(i)
        if missing:
            pool_x = self.dataset.features[self.pool]
            scale = pool_x.std(axis=0) + 1e-12
            nn = predict_knn(pool_x / scale, self.pool[:, None], feats[missing] / scale, 1, rng)
            rows[missing] = nn[:, 0].astype(np.int64)
        return self.dataset.images[rows]


def split_rows(ds: Dataset, which: str, seed: int) -> np.ndarray:
    if which == "all":
        return np.arange(len(ds))
    return getattr(split_dataset(len(ds), seed), which)


def _split_seed(args, ckpt_path=None) -> int:
    if args.split_seed is not None:
        return args.split_seed
    if ckpt_path and Path(ckpt_path).exists():
        return int(load_checkpoint(ckpt_path).config.get("split_seed", 0))
    return 0


# -- commands ------------------------------------------------------------
def cmd_synth(args, argv):
    out = Path(args.out)
    ds = synth_generate(args.detector, args.n, args.seed, args.diversity_mix)
    save_dataset(out, ds)
    resolved = {"detector": args.detector, "n": args.n, "diversity_mix": args.diversity_mix, "synth": SynthConfig().to_dict(), "out": str(out)}
    write_manifest(out.parent, "synth", argv, resolved, args.seed)
    emit({"out": str(out), "n": len(ds), "detector": ds.detector})


def cmd_stats(args, argv):
    ds = read_data(args.data)
    stats = dataset_stats(ds, bins=args.bins)
    d = out_dir(args)
    write_stats(stats, d)
    write_manifest(d, "stats", argv, {"data": args.data, "bins": args.bins}, None)
    emit({k: stats[k] for k in stats if k != "histograms"})


def _unet_cfg(conf: dict, detector: str) -> UNetConfig:
    h, w = geometry(detector)
    return build(UNetConfig, conf.get("unet"), image_height=h, image_width=w)


def cmd_train(args, argv):
    conf = load_config(args.config)
    ds = read_data(args.data)
    cfg = build(FMTrainConfig, conf.get("train"), epochs=args.epochs, lr=args.lr, batch_size=args.batch_size, seed=args.seed, val_samples=args.val_samples)
    unet_cfg = _unet_cfg(conf, ds.detector)
    split_seed = args.split_seed if args.split_seed is not None else conf.get("data", {}).get("split_seed", 0)
    split = split_dataset(len(ds), split_seed)
    run = train_fm(ds, split, unet_cfg, cfg)
    d = out_dir(args)
    save_checkpoint(d / "model.ckpt", run.checkpoint)
    write_csv(run.trace, d / "trace.csv", TRACE_COLUMNS)
    write_manifest(d, "train", argv, {"data": args.data, "split_seed": split_seed, "unet": unet_cfg.to_dict(), "train": cfg.to_dict()}, cfg.seed)
    emit({"checkpoint": str(d / "model.ckpt"), "best_val_wasserstein": run.checkpoint.metadata["best_val_wasserstein"], "trace": run.trace})


def cmd_train_vae(args, argv):
    conf = load_config(args.config)
    ds = read_data(args.data)
    h, w = geometry(ds.detector)
    vae_cfg = build(VAEConfig, conf.get("vae"), image_height=h, image_width=w)
    cfg = build(
        VAETrainConfig, conf.get("train"), epochs=args.epochs, lr=args.lr, batch_size=args.batch_size, seed=args.seed,
        val_samples=args.val_samples, use_adv=False if args.no_adv else None,
    )
    split_seed = args.split_seed if args.split_seed is not None else conf.get("data", {}).get("split_seed", 0)
    run = train_vae(ds, split_dataset(len(ds), split_seed), vae_cfg, cfg)
    d = out_dir(args)
    save_checkpoint(d / "vae.ckpt", run.checkpoint)
    write_csv(run.trace, d / "vae_trace.csv", TRACE_COLUMNS)
    write_manifest(d, "train-vae", argv, {"data": args.data, "split_seed": split_seed, "vae": vae_cfg.to_dict(), "train": cfg.to_dict()}, cfg.seed)
    emit({"checkpoint": str(d / "vae.ckpt"), "test_recon_wasserstein": run.recon_wasserstein})


def cmd_train_latent(args, argv):
    conf = load_config(args.config)
    ds = read_data(args.data)
    vae_ckpt = read_ckpt(args.vae)
    if vae_ckpt.model_kind != "vae":
        raise CLIError(f"--vae must be a vae checkpoint, got {vae_ckpt.model_kind}")
    if vae_ckpt.config["detector"] != ds.detector:
        raise CLIError(f"VAE is for detector {vae_ckpt.config['detector']}, data is {ds.detector}")
    vae_cfg = VAEConfig.from_dict(vae_ckpt.config["vae"])
    unet_cfg = latent_unet_config(vae_cfg, **conf.get("unet", {}))
    cfg = build(FMTrainConfig, conf.get("train"), epochs=args.epochs, lr=args.lr, batch_size=args.batch_size, seed=args.seed, val_samples=args.val_samples)
    split_seed = args.split_seed if args.split_seed is not None else int(vae_ckpt.config.get("split_seed", 0))
    ckpt, trace = train_latent_fm(vae_ckpt, ds, split_dataset(len(ds), split_seed), cfg, unet_cfg)
    d = out_dir(args)
    save_checkpoint(d / "latent.ckpt", ckpt)
    write_csv(trace, d / "latent_trace.csv", TRACE_COLUMNS)
    write_manifest(d, "train-latent", argv, {"data": args.data, "vae": args.vae, "split_seed": split_seed, "unet": unet_cfg.to_dict(), "train": cfg.to_dict()}, cfg.seed)
    emit({"checkpoint": str(d / "latent.ckpt"), "best_val_wasserstein": ckpt.metadata["best_val_wasserstein"]})


def cmd_sample(args, argv):
    ds = read_data(args.data)
    rows = split_rows(ds, args.split, _split_seed(args, args.ckpt))
    if args.n is not None:
        rows = rows[: args.n]
    gen = make_generator(args, ds.detector)
    imgs = gen.sample(ds.features[rows], seed=args.seed, steps=args.steps, batch_size=args.batch_size)
    d = out_dir(args)
    save_dataset(d / "samples.zdc", Dataset(ds.detector, ds.features[rows], imgs))
    write_manifest(d, "sample", argv, vars(args) | {"rows": len(rows)}, args.seed)
    emit({"out": str(d / "samples.zdc"), "n": len(rows)})


def cmd_eval(args, argv):
    ds = read_data(args.data)
    rows = split_rows(ds, args.split, _split_seed(args, args.ckpt))
    gen = make_generator(args, ds.detector) or ReplayGenerator(ds, np.setdiff1d(np.arange(len(ds)), rows))
    res = evaluate_generator(gen, ds, rows, runs=args.runs, steps=args.steps, batch_size=args.batch_size)
    true = metrics.extract_channels(ds.images[rows])
    res["split_half_baseline"] = metrics.original_baseline_wasserstein(true, seed=args.seed)
    try:
        res["duplicate_pair_baseline"] = metrics.original_baseline_mae(ds.features[rows], true, seed=args.seed)
    except metrics.MetricError as exc:
        res["duplicate_pair_baseline"] = None
        log.warning("no MAE baseline: %s", exc)
    res["generator"] = args.generator
    d = out_dir(args)
    if args.histograms:
        generated = metrics.extract_channels(gen.sample(ds.features[rows], seed=0, steps=args.steps, batch_size=args.batch_size))
        metrics.emit_histograms(true, generated, args.bins, d / "histograms.csv")
    (d / "eval.json").write_text(json.dumps(res, indent=2, sort_keys=True))
    write_manifest(d, "eval", argv, vars(args), args.seed)
    emit(res)


def cmd_sweep(args, argv):
    ds = read_data(args.data)
    rows = split_rows(ds, args.split, _split_seed(args, args.ckpt))
    gen = make_generator(args, ds.detector)
    if gen is None:
        raise CLIError("sweep needs a model or oracle generator")
    step_list = [int(s) for s in args.steps_list.split(",")]
    table = sweep_steps(gen, ds, rows, step_list, seed=args.seed, batch_size=args.batch_size)
    best = min(table, key=lambda r: (r["wasserstein"], r["steps"]))
    d = out_dir(args)
    write_csv(table, d / "sweep.csv", SWEEP_COLUMNS)
    (d / "sweep.json").write_text(json.dumps({"rows": table, "best_steps": best["steps"]}, indent=2))
    write_manifest(d, "sweep", argv, vars(args), args.seed)
    emit({"best_steps": best["steps"], "rows": table})


def cmd_tune(args, argv):
    conf = load_config(args.config)
    ds = read_data(args.data)
    base = build(FMTrainConfig, conf.get("train"), epochs=args.epochs, val_samples=args.val_samples)
    space = build(SearchSpace, {k: tuple(v) for k, v in conf.get("space", {}).items()})
    unet_cfg = _unet_cfg(conf, ds.detector)
    split_seed = args.split_seed if args.split_seed is not None else conf.get("data", {}).get("split_seed", 0)
    d = out_dir(args)
    camp = run_campaign("unet_pixel", ds, split_dataset(len(ds), split_seed), args.trials, space, args.seed, base, unet_cfg, d, workers=args.workers)
    rows = wasserstein_cdf(camp.records)
    write_cdf(rows, d / "cdf.csv")
    resolved = {"data": args.data, "split_seed": split_seed, "trials": args.trials, "space": asdict(space), "train": base.to_dict(), "unet": unet_cfg.to_dict()}
    write_manifest(d, "tune", argv, resolved, args.seed)
    emit({"best_trial": camp.best.trial_id, "best_val_wasserstein": camp.best.val_wasserstein, "diverged": sum(r.status != "completed" for r in camp.records)})


LADDER_ROWS = [
    # label, model, steps, precision, threads
    ("pixel FM, 50 steps", "pixel", 50, "float32", 1),
    ("pixel FM, 11 steps", "pixel", 11, "float32", 1),
    ("latent FM, 7 steps", "latent", 7, "float32", 1),
    ("latent FM, 7 steps, float16", "latent", 7, "float16", 1),
]


def cmd_bench(args, argv):
    ds = read_data(args.data)
    feats = ds.features
    d = out_dir(args)
    if not args.ladder:
        gen = make_generator(args, ds.detector)
        if gen is None:
            raise CLIError("bench needs a model or oracle generator")
        res = bench_inference(gen, feats, args.batch_size, args.warmup, args.batches, args.steps, args.precision, args.seed, args.label or args.generator, args.threads)
        write_ladder([res], d / "bench.csv")
        write_manifest(d, "bench", argv, vars(args), args.seed)
        emit(res.row())
        return
    if not (args.ckpt and args.latent_ckpt and args.vae):
        raise CLIError("--ladder needs --ckpt (pixel), --latent-ckpt and --vae")
    pixel, latent, vae = read_ckpt(args.ckpt), read_ckpt(args.latent_ckpt), read_ckpt(args.vae)
    plan = list(LADDER_ROWS)
    if args.threads > 1:
        plan.append((f"latent FM, 7 steps, float16, {args.threads} threads", "latent", 7, "float16", args.threads))
    results = []
    for label, model, steps, precision, threads in plan:
        gen = FMGenerator(pixel, precision) if model == "pixel" else LatentGenerator(vae, latent, precision)
        results.append(bench_inference(gen, feats, args.batch_size, args.warmup, args.batches, steps, precision, args.seed, label, threads))
        log.info("%s: %.4f ms/sample", label, results[-1].median_ms)
    ladder_report(results)
    write_ladder(results, d / "ladder.csv")
    write_manifest(d, "bench", argv, vars(args) | {"ladder_rows": plan}, args.seed)
    emit([r.row() for r in results])


def cmd_baselines(args, argv):
    conf = load_config(args.config)
    ds = read_data(args.data)
    split_seed = _split_seed(args, args.ckpt)
    split = split_dataset(len(ds), split_seed)
    channels = metrics.extract_channels(ds.images)
    cfg = build(DenseTrainConfig, conf.get("dense"), epochs=args.epochs, seed=args.seed)
    tr = split.train
    regs = {
        "linear": fit_linear(ds.features[tr], channels[tr]),
        "knn": fit_knn(ds.features[tr], channels[tr], k=args.k),
        "mlp": train_mlp_channels(ds.features, channels, tr, cfg),
        "fm5": train_fm_channels(ds.features, channels, tr, cfg),
    }
    d = out_dir(args)
    for name in ("mlp", "fm5"):
        save_checkpoint(d / f"{name}.ckpt", regressor_checkpoint(regs[name], cfg))
    test_x, test_y = ds.features[split.test], channels[split.test]
    table = evaluate_direct(regs, test_x, test_y, seed=args.seed)
    if args.ckpt:
        gen = make_generator(args, ds.detector)
        res = evaluate_generator(gen, ds, split.test, runs=1)
        table.append({"model": "full-image FM", "wasserstein": res["wasserstein"]})
    write_csv(table, d / "direct.csv", ["model", "wasserstein"])
    write_manifest(d, "baselines", argv, {"data": args.data, "split_seed": split_seed, "dense": cfg.to_dict(), "k": args.k}, args.seed)
    emit(table)


def cmd_rerun(args, argv):
    doc = json.loads(Path(args.manifest).read_text())
    return main(doc["argv"])


# -- parser --------------------------------------------------------------
def _common(p, seed=0):
    p.add_argument("--seed", type=int, default=seed)
    p.add_argument("--out-dir", default=".")
    p.add_argument("--log-level", default="INFO")


def _train_flags(p):
    p.add_argument("--data")
    p.add_argument("--config")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--val-samples", type=int)
    p.add_argument("--split-seed", type=int)


def _gen_flags(p):
    p.add_argument("--data")
    p.add_argument("--ckpt")
    p.add_argument("--vae")
    p.add_argument("--generator", choices=["model", "oracle", "replay"], default="model")
    p.add_argument("--diversity-mix", type=float, default=0.3)
    p.add_argument("--precision", choices=["float32", "float16"], default="float32")
    p.add_argument("--steps", type=int)
    p.add_argument("--split", choices=["train", "val", "test", "all"], default="test")
    p.add_argument("--split-seed", type=int)
    p.add_argument("--batch-size", type=int, default=256)


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="zdcflow", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--detector", choices=["ZN", "ZP", "ZN16"], default="ZN")
    p.add_argument("--n", type=int, default=4096)
    p.add_argument("--diversity-mix", type=float, default=0.3)
    p.add_argument("--out", required=True)
    _common(p)

    p = sub.add_parser("stats", help="dataset statistics")
    p.add_argument("data")
    p.add_argument("--bins", type=int, default=20)
    _common(p)

    for name, help_ in (("train", "train pixel-space FM"), ("train-vae", "train the VAE"), ("train-latent", "train latent FM")):
        p = sub.add_parser(name, help=help_)
        _train_flags(p)
        if name == "train-vae":
            p.add_argument("--no-adv", action="store_true", help="drop the adversarial term from the VAE loss")
        if name == "train-latent":
            p.add_argument("--vae", required=True)
        _common(p)

    p = sub.add_parser("sample", help="sample responses for dataset features")
    _gen_flags(p)
    p.add_argument("--n", type=int)
    _common(p)

    p = sub.add_parser("eval", help="Wasserstein and MAE against real responses")
    _gen_flags(p)
    p.add_argument("--runs", type=int, default=5)
    p.add_argument("--histograms", action="store_true")
    p.add_argument("--bins", type=int, default=50)
    _common(p)

    p = sub.add_parser("sweep", help="Euler step-count sweep")
    _gen_flags(p)
    p.add_argument("--steps-list", default="1,2,3,5,7,9,11,15,20,50")
    _common(p)

    p = sub.add_parser("tune", help="hyperparameter campaign")
    p.add_argument("--data")
    p.add_argument("--config")
    p.add_argument("--trials", type=int, default=20)
    p.add_argument("--epochs", type=int)
    p.add_argument("--val-samples", type=int)
    p.add_argument("--split-seed", type=int)
    p.add_argument("--workers", type=int, default=1)
    _common(p)

    p = sub.add_parser("bench", help="per-sample inference latency")
    _gen_flags(p)
    p.add_argument("--latent-ckpt")
    p.add_argument("--ladder", action="store_true")
    p.add_argument("--warmup", type=int, default=5)
    p.add_argument("--batches", type=int, default=20)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--label", default="")
    _common(p)

    p = sub.add_parser("baselines", help="direct channel estimation baselines")
    p.add_argument("--data")
    p.add_argument("--config")
    p.add_argument("--ckpt")
    p.add_argument("--vae")
    p.add_argument("--generator", default="model")
    p.add_argument("--precision", default="float32")
    p.add_argument("--split-seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--k", type=int, default=10)
    _common(p)

    p = sub.add_parser("rerun", help="repeat a run from its manifest")
    p.add_argument("manifest")
    return ap


COMMANDS = {
    "synth": cmd_synth,
    "stats": cmd_stats,
    "train": cmd_train,
    "train-vae": cmd_train_vae,
    "train-latent": cmd_train_latent,
    "sample": cmd_sample,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "tune": cmd_tune,
    "bench": cmd_bench,
    "baselines": cmd_baselines,
    "rerun": cmd_rerun,
}


def _fail(kind: str, message: str, command=None, code: int = 1) -> int:
    sys.stderr.write(json.dumps({"error": kind, "message": message, "command": command}) + "\n")
    return code


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
    except CLIError as exc:
        return _fail("UsageError", str(exc), code=2)
    logging.basicConfig(level=getattr(args, "log_level", "INFO"), format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    try:
        rc = COMMANDS[args.command](args, argv)
        return rc or 0
    except Exception as exc:  # every failure becomes one JSON line
        log.debug("command failed", exc_info=True)
        return _fail(type(exc).__name__, " ".join(str(exc).split()), args.command)


if __name__ == "__main__":
    raise SystemExit(main())
