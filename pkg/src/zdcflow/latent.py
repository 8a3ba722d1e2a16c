"""Two-stage latent FM: gradient-normalised VAE training, then FM over the VAE's latents."""
from __future__ import annotations

import hashlib
import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import metrics
from . import numerics as nx
from .data import Dataset, DatasetSplit, PreprocStats, geometry, inverse_transform, log_transform, standardize
from .flow_matching import (
    LATENT_STEPS,
    DivergenceError,
    FMSchedule,
    FMTrainConfig,
    cfm_loss,
    euler_sample,
    fit,
)
from .model import VAE, ModelCheckpoint, UNet, UNetConfig, VAEConfig, build_unet, build_vae
from .model.layers import Conv2d, Module
from .numerics import Tensor

log = logging.getLogger(__name__)

GRAD_NORM_FLOOR = 1e-12


class FeatureNet(Module):
    """Frozen random convnet standing in for a pretrained perceptual backbone."""

    def __init__(self, seed: int = 1234, width: int = 8):
        rng = np.random.default_rng(seed)
        self.convs = [
            Conv2d(1, width, 3, rng),
            Conv2d(width, 2 * width, 3, rng, stride=2, padding=1),
            Conv2d(2 * width, 2 * width, 3, rng, stride=2, padding=1),
        ]
        for p in self.parameters():
            p.requires_grad = False

    def features(self, x) -> list[Tensor]:
        out, h = [], nx.as_tensor(x)
        for conv in self.convs:
            h = nx.leaky_relu(conv(h))
            out.append(h)
        return out

    def distance(self, x, x_hat) -> Tensor:
        """Mean squared distance of channel-normalised features, averaged over layers."""
        total = None
        for fa, fb in zip(self.features(x), self.features(x_hat)):
            na = fa / nx.sqrt(nx.sum_(nx.square(fa), axis=1, keepdims=True) + 1e-6)
            nb = fb / nx.sqrt(nx.sum_(nx.square(fb), axis=1, keepdims=True) + 1e-6)
            d = nx.mean(nx.square(na - nb))
            total = d if total is None else total + d
        return total * (1.0 / len(self.convs))


class Discriminator(Module):
    """Four-layer patch discriminator trained with the hinge loss."""

    def __init__(self, seed: int = 4321, width: int = 8):
        rng = np.random.default_rng(seed)
        self.convs = [
            Conv2d(1, width, 3, rng, stride=2, padding=1),
            Conv2d(width, 2 * width, 3, rng, stride=2, padding=1),
            Conv2d(2 * width, 2 * width, 3, rng),
            Conv2d(2 * width, 1, 3, rng),
        ]

    def __call__(self, x) -> Tensor:
        h = nx.as_tensor(x)
        for conv in self.convs[:-1]:
            h = nx.leaky_relu(conv(h))
        return self.convs[-1](h)


def hinge_d_loss(disc: Discriminator, real, fake) -> Tensor:
    return nx.mean(nx.relu(1.0 - disc(real))) + nx.mean(nx.relu(1.0 + disc(fake)))


def kl_divergence(mu: Tensor, logvar: Tensor) -> Tensor:
    """KL(q(z|x) || N(0, I)), averaged over latent elements and batch."""
    return nx.mean(nx.square(mu) + nx.exp(logvar) - logvar - 1.0) * 0.5


@dataclass
class VAELossTerms:
    l_vae: float
    l_perc: float
    l_adv: float | None
    grad_norms: list[float | None]
    total: float


def reconstruction_error(x: Tensor, x_hat: Tensor, space: str = "counts") -> Tensor:
    """Mean squared error on photon counts (``expm1`` of log space) or directly in log space.

    In log space a smoothing decoder converges to E[log(1 + n)], which
    undercounts photons; on counts the optimum is the conditional mean count,
    so channel sums stay unbiased.
    """
    if space == "log":
        return nx.mean(nx.square(x - x_hat))
    if space == "counts":
        return nx.mean(nx.square(nx.exp(x) - nx.exp(x_hat)))
    raise ValueError(f"unknown reconstruction space {space!r}")


def _terms(vae: VAE, feature_net: FeatureNet, disc: Discriminator | None, x: Tensor, rng, beta: float, scales=(1.0, 1.0, 1.0), space: str = "counts"):
    x_hat, mu, logvar = vae(x, rng)
    l_vae = (reconstruction_error(x, x_hat, space) + beta * kl_divergence(mu, logvar)) * scales[0]
    l_perc = feature_net.distance(x, x_hat) * scales[1]
    # generator-side hinge: no push once a reconstruction clears the margin, so a weak discriminator cannot be chased off-manifold
    l_adv = None if disc is None else nx.mean(nx.relu(1.0 - disc(x_hat))) * scales[2]
    return [l_vae, l_perc, l_adv]


def vae_loss_gradnorm(
    vae: VAE,
    feature_net: FeatureNet,
    disc: Discriminator | None,
    x,
    rng: np.random.Generator | None = None,
    beta: float = 1e-2,
    scales=(1.0, 1.0, 1.0),
    space: str = "counts",
) -> tuple[float, dict[Tensor, np.ndarray], VAELossTerms]:
    """Sum of loss terms, each divided by the norm of its gradient with respect to the input batch.

    The norms are constants (no second-order terms), so the parameter
    gradient of the total is sum_i grad(L_i) / ||d L_i / d x||. Returns the
    total value, gradients for the VAE parameters, and the per-term record.
    Terms whose input gradient vanishes are skipped. ``scales`` multiplies the
    raw terms and exists to check that the normalisation cancels it.
    """
    x = nx.Tensor(np.asarray(x, dtype=nx.compute_dtype()), requires_grad=True)
    terms = _terms(vae, feature_net, disc, x, rng, beta, scales, space)
    params = vae.parameters()
    grads = {p: np.zeros_like(p.data) for p in params}
    values, norms, total = [], [], 0.0
    for loss in terms:
        if loss is None:
            values.append(None)
            norms.append(None)
            continue
        value = loss.item()
        if not math.isfinite(value):
            raise DivergenceError("non-finite VAE loss term")
        g = nx.backward(loss, inputs=params + [x], retain_graph=True)
        norm = float(np.sqrt(np.sum(g[x].astype(np.float64) ** 2)))
        values.append(value)
        norms.append(norm)
        if norm <= GRAD_NORM_FLOOR:
            continue
        total += value / norm
        for p in params:
            grads[p] += g[p] / norm
    for loss in terms:
        if loss is not None:
            _free(loss)
    rec = VAELossTerms(values[0], values[1], values[2], norms, total)
    return total, grads, rec


def _free(t: Tensor) -> None:
    stack = [t]
    while stack:
        node = stack.pop()
        stack.extend(node._parents)
        node._parents = ()
        node._backward = None


def normalized_summands(rec: VAELossTerms) -> list[float | None]:
    out = []
    for v, n in zip((rec.l_vae, rec.l_perc, rec.l_adv), rec.grad_norms):
        out.append(None if v is None or n is None or n <= GRAD_NORM_FLOOR else v / n)
    return out


@dataclass
class VAETrainConfig:
    epochs: int = 50
    batch_size: int = 256
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    cosine_decay: bool = True
    kl_weight: float = 1e-2
    recon_space: str = "counts"
    use_adv: bool = True
    adv_warmup: float = 0.5  # fraction of epochs before the adversarial term joins the VAE loss
    disc_lr: float = 2e-4
    clip_norm: float | None = 1.0
    seed: int = 0
    val_samples: int | None = None

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class VAERun:
    checkpoint: ModelCheckpoint
    recon_wasserstein: float
    trace: list[dict] = field(default_factory=list)


def reconstruct(vae: VAE, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """decode(encoder mean) mapped back to photon counts."""
    x = log_transform(images)[:, None]
    out = []
    with nx.no_grad():
        for i in range(0, len(x), batch_size):
            mu, _ = vae.encode(x[i : i + batch_size])
            out.append(vae.decode(mu).data)
    return inverse_transform(np.concatenate(out)[:, 0])


def recon_wasserstein(vae: VAE, images: np.ndarray) -> float:
    return metrics.wasserstein1_channels(metrics.extract_channels(images), metrics.extract_channels(reconstruct(vae, images)))


def train_vae(dataset: Dataset, split: DatasetSplit, vae_cfg: VAEConfig, cfg: VAETrainConfig) -> VAERun:
    h, w = geometry(dataset.detector)
    if (vae_cfg.image_height, vae_cfg.image_width) != (h, w):
        raise ValueError(f"VAE geometry does not match {dataset.detector}")
    vae = build_vae(vae_cfg, seed=cfg.seed)
    feature_net = FeatureNet()
    disc = Discriminator(seed=cfg.seed + 1) if cfg.use_adv else None
    x1 = log_transform(dataset.images[split.train])[:, None]
    val_idx = split.val if cfg.val_samples is None else split.val[: cfg.val_samples]
    rng = np.random.default_rng(cfg.seed)
    steps_per_epoch = math.ceil(len(x1) / cfg.batch_size)
    total_steps = max(1, cfg.epochs * steps_per_epoch)
    opt = nx.Adam(vae.parameters(), lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, cosine_decay=cfg.cosine_decay, total_steps=total_steps)
    dopt = nx.Adam(disc.parameters(), lr=cfg.disc_lr, beta1=0.5, beta2=0.9) if disc else None
    trace, best, best_state, best_epoch = [], math.inf, vae.state_dict(), 0
    start = time.perf_counter()
    adv_start = math.floor(cfg.adv_warmup * cfg.epochs) + 1
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(x1))
        tot = 0.0
        adv = disc if epoch >= adv_start else None
        for b in range(steps_per_epoch):
            xb = x1[order[b * cfg.batch_size : (b + 1) * cfg.batch_size]]
            try:
                value, grads, _ = vae_loss_gradnorm(vae, feature_net, adv, xb, rng, cfg.kl_weight, space=cfg.recon_space)
            except FloatingPointError as exc:
                raise DivergenceError(f"VAE diverged in epoch {epoch}: {exc}", trace) from exc
            nx.clip_grad_norm(grads, cfg.clip_norm)
            opt.step(grads)
            if disc is not None:
                with nx.no_grad():
                    fake = vae(xb, rng)[0].data
                dl = hinge_d_loss(disc, xb, fake)
                dopt.step(nx.backward(dl))
            tot += value * len(xb)
        score = recon_wasserstein(vae, dataset.images[val_idx]) if len(val_idx) else math.nan
        trace.append({"epoch": epoch, "loss": tot / len(x1), "val_wasserstein": score})
        log.info("vae epoch %d loss %.4f val W %.4f", epoch, tot / len(x1), score)
        if not len(val_idx) or score < best:
            best, best_state, best_epoch = score, vae.state_dict(), epoch
    vae.load_state_dict(best_state)
    test_w = recon_wasserstein(vae, dataset.images[split.test]) if len(split.test) else math.nan
    ckpt = ModelCheckpoint(
        model_kind="vae",
        config={"detector": dataset.detector, "vae": vae_cfg.to_dict(), "split_seed": split.seed, "train": cfg.to_dict()},
        params=best_state,
        stats={},
        seed=cfg.seed,
        metadata={
            "epochs": cfg.epochs,
            "best_epoch": best_epoch,
            "best_val_wasserstein": best,
            "test_recon_wasserstein": test_w,
            "train_seconds": time.perf_counter() - start,
            "trace": trace,
        },
    )
    return VAERun(ckpt, test_w, trace)


def load_vae(ckpt: ModelCheckpoint) -> VAE:
    if ckpt.model_kind != "vae":
        raise ValueError(f"expected a vae checkpoint, got {ckpt.model_kind}")
    vae = VAE(VAEConfig.from_dict(ckpt.config["vae"]), np.random.default_rng(0))
    vae.load_state_dict(ckpt.params)
    return vae


def fingerprint(ckpt: ModelCheckpoint) -> str:
    h = hashlib.blake2b(digest_size=8)
    for name in sorted(ckpt.params):
        h.update(name.encode())
        h.update(np.ascontiguousarray(ckpt.params[name], dtype="<f4").tobytes())
    return h.hexdigest()


def encode_means(vae: VAE, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    x = log_transform(images)[:, None]
    out = []
    with nx.no_grad():
        for i in range(0, len(x), batch_size):
            out.append(vae.encode(x[i : i + batch_size])[0].data)
    return np.concatenate(out)


def latent_unet_config(vae_cfg: VAEConfig, **overrides) -> UNetConfig:
    c, h, w = vae_cfg.latent_shape
    return UNetConfig(image_height=h, image_width=w, in_channels=c, **overrides)


class LatentGenerator:
    """Euler sampling in latent space, VAE decode, inverse pixel transform."""

    def __init__(self, vae_ckpt: ModelCheckpoint, fm_ckpt: ModelCheckpoint, precision: str = "float32"):
        if fm_ckpt.model_kind != "unet_latent":
            raise ValueError(f"expected a unet_latent checkpoint, got {fm_ckpt.model_kind}")
        vae = load_vae(vae_ckpt)
        if fm_ckpt.config["detector"] != vae_ckpt.config["detector"]:
            raise ValueError("latent FM and VAE checkpoints were trained for different detectors")
        if tuple(fm_ckpt.config["latent_shape"]) != vae.cfg.latent_shape:
            raise ValueError(f"latent FM expects latents {fm_ckpt.config['latent_shape']}, VAE produces {vae.cfg.latent_shape}")
        if fm_ckpt.config.get("vae_fingerprint") not in (None, fingerprint(vae_ckpt)):
            raise ValueError("latent FM checkpoint was trained against a different VAE")
        net = UNet(UNetConfig.from_dict(fm_ckpt.config["unet"]), np.random.default_rng(0))
        net.load_state_dict(fm_ckpt.params)
        self.detector = fm_ckpt.config["detector"]
        self.vae = vae.with_precision(precision) if precision != "float32" else vae
        self.net = net.with_precision(precision) if precision != "float32" else net
        self.stats = PreprocStats.from_dict(fm_ckpt.stats["features"])
        self.lat_mean = np.asarray(fm_ckpt.stats["latent_mean"], dtype=np.float32).reshape(1, -1, 1, 1)
        self.lat_std = np.asarray(fm_ckpt.stats["latent_std"], dtype=np.float32).reshape(1, -1, 1, 1)
        self.default_steps = int(fm_ckpt.config.get("steps", LATENT_STEPS))

    def sample_latents(self, cond_std: np.ndarray, seed: int, steps: int | None = None, batch_size: int = 256) -> np.ndarray:
        cfg = self.net.cfg
        rng = np.random.default_rng(seed)
        noise = rng.standard_normal((len(cond_std), cfg.in_channels, cfg.image_height, cfg.image_width)).astype(np.float32)
        sched = FMSchedule(steps or self.default_steps)
        out = [
            euler_sample(self.net, cond_std[i : i + batch_size], sched, x0=noise[i : i + batch_size])
            for i in range(0, len(cond_std), batch_size)
        ]
        return np.concatenate(out) * self.lat_std + self.lat_mean

    def sample(self, features, seed: int = 0, steps: int | None = None, batch_size: int = 256) -> np.ndarray:
        z = self.sample_latents(standardize(features, self.stats), seed, steps, batch_size)
        out = []
        with nx.no_grad():
            for i in range(0, len(z), batch_size):
                out.append(self.vae.decode(z[i : i + batch_size]).data)
        return inverse_transform(np.concatenate(out)[:, 0])


def latent_sample(vae_ckpt: ModelCheckpoint, fm_ckpt: ModelCheckpoint, cond, steps: int | None = None, seed: int = 0) -> np.ndarray:
    """Photon-count images for raw particle features ``cond``."""
    return LatentGenerator(vae_ckpt, fm_ckpt).sample(cond, seed=seed, steps=steps)


def train_latent_fm(
    vae_ckpt: ModelCheckpoint,
    dataset: Dataset,
    split: DatasetSplit,
    cfg: FMTrainConfig,
    unet_cfg: UNetConfig | None = None,
) -> tuple[ModelCheckpoint, list[dict]]:
    vae = load_vae(vae_ckpt)
    if vae_ckpt.config["detector"] != dataset.detector:
        raise ValueError("VAE was trained for a different detector")
    unet_cfg = unet_cfg or latent_unet_config(vae.cfg)
    if (unet_cfg.in_channels, unet_cfg.image_height, unet_cfg.image_width) != vae.cfg.latent_shape:
        raise ValueError(f"latent U-Net shape does not match VAE latents {vae.cfg.latent_shape}")
    stats = PreprocStats.fit(dataset.features, split.train)
    # latents are encoded once and cached for all epochs
    z = encode_means(vae, dataset.images[split.train])
    lat_mean = z.mean(axis=(0, 2, 3))
    lat_std = z.std(axis=(0, 2, 3)) + 1e-6
    z1 = ((z - lat_mean.reshape(1, -1, 1, 1)) / lat_std.reshape(1, -1, 1, 1)).astype(np.float32)
    cond = standardize(dataset.features[split.train], stats)
    net = build_unet(unet_cfg, seed=cfg.seed)
    config = {
        "detector": dataset.detector,
        "unet": unet_cfg.to_dict(),
        "steps": LATENT_STEPS,
        "latent_shape": list(vae.cfg.latent_shape),
        "vae_fingerprint": fingerprint(vae_ckpt),
        "split_seed": split.seed,
        "train": cfg.to_dict(),
    }
    all_stats = {"features": stats.to_dict(), "latent_mean": lat_mean.tolist(), "latent_std": lat_std.tolist()}
    val_idx = split.val if cfg.val_samples is None else split.val[: cfg.val_samples]
    val_channels = metrics.extract_channels(dataset.images[val_idx])

    def loss_fn(idx, rng):
        return cfm_loss(net, z1[idx], cond[idx], rng)

    def evaluate(epoch):
        tmp = ModelCheckpoint("unet_latent", config, net.state_dict(), all_stats, cfg.seed)
        gen = LatentGenerator(vae_ckpt, tmp)
        imgs = gen.sample(dataset.features[val_idx], seed=cfg.seed + 7919, steps=cfg.val_steps)
        return metrics.wasserstein1_channels(val_channels, metrics.extract_channels(imgs))

    res = fit(net, loss_fn, len(z1), cfg, evaluate if len(val_idx) else None)
    ckpt = ModelCheckpoint(
        model_kind="unet_latent",
        config=config,
        params=res.state,
        stats=all_stats,
        seed=cfg.seed,
        metadata={
            "epochs": cfg.epochs,
            "best_epoch": res.best_epoch,
            "best_val_wasserstein": res.best_val,
            "train_seconds": res.seconds,
            "trace": res.trace,
        },
    )
    return ckpt, res.trace
