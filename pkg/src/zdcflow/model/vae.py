"""Small convolutional VAE with a fixed downsize factor of 4."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .. import numerics as nx
from ..numerics import Tensor
from .layers import Conv2d, ConvTranspose2d, GroupNorm, Module, ResBlock, pad_amount
from .unet import check_budget

DOWNSIZE = 4


@dataclass
class VAEConfig:
    image_height: int = 44
    image_width: int = 44
    latent_channels: int = 4
    base_channels: int = 16
    groups: int = 4
    downsize_factor: int = DOWNSIZE
    param_budget: int = 60_000

    @property
    def latent_shape(self) -> tuple[int, int, int]:
        f = self.downsize_factor
        return (self.latent_channels, math.ceil(self.image_height / f), math.ceil(self.image_width / f))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "VAEConfig":
        return cls(**d)


class VAE(Module):
    def __init__(self, cfg: VAEConfig, rng: np.random.Generator):
        if cfg.downsize_factor != DOWNSIZE:
            raise ValueError("only a downsize factor of 4 is supported")
        self.cfg = cfg
        c0, c1 = cfg.base_channels, 2 * cfg.base_channels
        self.pad_h = pad_amount(cfg.image_height, DOWNSIZE)
        self.pad_w = pad_amount(cfg.image_width, DOWNSIZE)
        # encoder
        self.enc_in = Conv2d(1, c0, 3, rng)
        self.enc1 = ResBlock(c0, c0, rng, groups=cfg.groups)
        self.down1 = Conv2d(c0, c0, 3, rng, stride=2, padding=1)
        self.enc2 = ResBlock(c0, c1, rng, groups=cfg.groups)
        self.down2 = Conv2d(c1, c1, 3, rng, stride=2, padding=1)
        self.enc_norm = GroupNorm(c1, cfg.groups)
        self.enc_out = Conv2d(c1, 2 * cfg.latent_channels, 3, rng)
        # decoder
        self.dec_in = Conv2d(cfg.latent_channels, c1, 3, rng)
        self.dec1 = ResBlock(c1, c1, rng, groups=cfg.groups)
        self.up1 = ConvTranspose2d(c1, c0, 2, rng, stride=2)
        self.dec2 = ResBlock(c0, c0, rng, groups=cfg.groups)
        self.up2 = ConvTranspose2d(c0, c0, 2, rng, stride=2)
        self.dec_norm = GroupNorm(c0, cfg.groups)
        self.dec_out = Conv2d(c0, 1, 3, rng)

    def encode(self, x) -> tuple[Tensor, Tensor]:
        x = nx.as_tensor(x)
        cfg = self.cfg
        if x.shape[1:] != (1, cfg.image_height, cfg.image_width):
            raise ValueError(f"expected (N, 1, {cfg.image_height}, {cfg.image_width}), got {x.shape}")
        if any(self.pad_h) or any(self.pad_w):
            x = nx.pad(x, ((0, 0), (0, 0), self.pad_h, self.pad_w))
        h = self.enc1(self.enc_in(x))
        h = self.enc2(self.down1(h))
        h = self.enc_out(nx.silu(self.enc_norm(self.down2(h))))
        k = cfg.latent_channels
        return h[:, :k], h[:, k:]

    def decode(self, z) -> Tensor:
        z = nx.as_tensor(z)
        if z.shape[1:] != self.cfg.latent_shape:
            raise ValueError(f"expected latent (N, {self.cfg.latent_shape}), got {z.shape}")
        h = self.dec1(self.dec_in(z))
        h = self.dec2(self.up1(h))
        h = self.dec_out(nx.silu(self.dec_norm(self.up2(h))))
        (h0, h1), (w0, w1) = self.pad_h, self.pad_w
        if h0 or h1 or w0 or w1:
            h = h[:, :, h0 : h.shape[2] - h1, w0 : h.shape[3] - w1]
        return self.store(h)

    def __call__(self, x, rng: np.random.Generator | None = None):
        """Reconstruct ``x``; samples the posterior when ``rng`` is given, else decodes the mean."""
        mu, logvar = self.encode(x)
        z = mu
        if rng is not None:
            eps = rng.standard_normal(mu.shape)
            z = mu + nx.exp(logvar * 0.5) * eps
        return self.decode(z), mu, logvar


def build_vae(cfg: VAEConfig, seed: int = 0, enforce_budget: bool = True) -> VAE:
    net = VAE(cfg, np.random.default_rng(seed))
    if enforce_budget:
        check_budget(net, cfg.param_budget, "VAE")
    return net
