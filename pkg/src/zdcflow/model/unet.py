"""Compact conditional U-Net velocity network."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .. import numerics as nx
from ..numerics import Tensor
from .layers import (
    Conv2d,
    ConvTranspose2d,
    CrossAttention,
    GroupNorm,
    Linear,
    Module,
    ResBlock,
    count_params,
    pad_amount,
    sinusoidal_embedding,
)

BUDGET_BAND = (0.65, 1.3)


@dataclass
class UNetConfig:
    image_height: int = 44
    image_width: int = 44
    in_channels: int = 1
    base_channels: int = 12
    channel_multipliers: list[int] = field(default_factory=lambda: [1, 2, 2])
    cond_dim: int = 9
    time_embed_dim: int = 32
    attention_levels: list[int] = field(default_factory=lambda: [1, 2])
    cond_tokens: int = 4
    token_dim: int = 16
    heads: int = 2
    groups: int = 4
    param_budget: int = 77_000

    @property
    def num_down_levels(self) -> int:
        return len(self.channel_multipliers) - 1

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "UNetConfig":
        d = dict(d)
        d.pop("num_down_levels", None)
        return cls(**d)


class UNet(Module):
    """Maps (x_t, t, cond) to a velocity of the same shape as x_t.

    Time enters every residual block through a sinusoidal embedding and a
    2-layer MLP; the 9 particle features are projected to a few tokens that
    pixels attend over at the configured levels.
    """

    def __init__(self, cfg: UNetConfig, rng: np.random.Generator):
        self.cfg = cfg
        chans = [cfg.base_channels * m for m in cfg.channel_multipliers]
        levels = len(chans) - 1
        self.pad_h = pad_amount(cfg.image_height, 2 ** levels)
        self.pad_w = pad_amount(cfg.image_width, 2 ** levels)
        temb = 2 * cfg.time_embed_dim
        self.time1 = Linear(cfg.time_embed_dim, temb, rng)
        self.time2 = Linear(temb, temb, rng)
        self.cond_proj = Linear(cfg.cond_dim, cfg.cond_tokens * cfg.token_dim, rng)
        self.inp = Conv2d(cfg.in_channels, chans[0], 3, rng)

        attn = set(cfg.attention_levels)
        self.down_blocks, self.down_attn, self.downsample = [], [], []
        prev = chans[0]
        for lvl, c in enumerate(chans):
            self.down_blocks.append(ResBlock(prev, c, rng, temb, cfg.groups))
            self.down_attn.append(CrossAttention(c, cfg.token_dim, rng, cfg.heads, cfg.groups) if lvl in attn else None)
            if lvl < levels:
                self.downsample.append(Conv2d(c, c, 3, rng, stride=2, padding=1))
            prev = c

        self.up_blocks, self.up_attn, self.upsample = [], [], []
        for lvl in reversed(range(levels)):
            c = chans[lvl]
            self.upsample.append(ConvTranspose2d(chans[lvl + 1], c, 2, rng, stride=2))
            self.up_blocks.append(ResBlock(2 * c, c, rng, temb, cfg.groups))
            self.up_attn.append(CrossAttention(c, cfg.token_dim, rng, cfg.heads, cfg.groups) if lvl in attn else None)

        self.out_norm = GroupNorm(chans[0], cfg.groups)
        self.out = Conv2d(chans[0], cfg.in_channels, 3, rng, zero_init=True)

    def __call__(self, x, t, cond) -> Tensor:
        cfg = self.cfg
        x = nx.as_tensor(x)
        n = x.shape[0]
        if x.shape[1:] != (cfg.in_channels, cfg.image_height, cfg.image_width):
            raise ValueError(f"expected input (N, {cfg.in_channels}, {cfg.image_height}, {cfg.image_width}), got {x.shape}")
        t = np.broadcast_to(np.asarray(t, dtype=np.float64).reshape(-1), (n,))
        temb = nx.Tensor(sinusoidal_embedding(t, cfg.time_embed_dim))
        temb = self.time2(nx.silu(self.time1(temb)))
        cond = nx.as_tensor(cond)
        tokens = nx.reshape(self.cond_proj(cond), (n, cfg.cond_tokens, cfg.token_dim))

        if any(self.pad_h) or any(self.pad_w):
            x = nx.pad(x, ((0, 0), (0, 0), self.pad_h, self.pad_w))
        h = self.store(self.inp(x))
        skips = []
        for lvl, block in enumerate(self.down_blocks):
            h = block(h, temb)
            if self.down_attn[lvl] is not None:
                h = self.down_attn[lvl](h, tokens)
            if lvl < len(self.downsample):
                skips.append(h)
                h = self.downsample[lvl](h)
        for up, block, att in zip(self.upsample, self.up_blocks, self.up_attn):
            h = nx.concat([up(h), skips.pop()], axis=1)
            h = block(h, temb)
            if att is not None:
                h = att(h, tokens)
        h = self.out(nx.silu(self.out_norm(h)))
        (h0, h1), (w0, w1) = self.pad_h, self.pad_w
        if h0 or h1 or w0 or w1:
            h = h[:, :, h0 : h.shape[2] - h1, w0 : h.shape[3] - w1]
        return self.store(h)


def check_budget(net: Module, budget: int, what: str) -> int:
    n = count_params(net)
    lo, hi = BUDGET_BAND
    if not lo * budget <= n <= hi * budget:
        raise ValueError(f"{what} has {n} parameters, outside [{lo}, {hi}] x budget {budget}")
    return n


def build_unet(cfg: UNetConfig, seed: int = 0, enforce_budget: bool = True) -> UNet:
    for name in ("image_height", "image_width"):
        if getattr(cfg, name) < 2 ** cfg.num_down_levels:
            raise ValueError(f"{name}={getattr(cfg, name)} too small for {cfg.num_down_levels} down levels")
    net = UNet(cfg, np.random.default_rng(seed))
    if enforce_budget:
        check_budget(net, cfg.param_budget, "U-Net")
    return net
