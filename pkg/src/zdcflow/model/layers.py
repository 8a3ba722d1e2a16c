"""Parameter containers and the building blocks shared by the U-Net and the VAE."""
from __future__ import annotations

import copy
import math

import numpy as np

from .. import numerics as nx
from ..numerics import FLOAT16, FLOAT32, Tensor


class Module:
    """Minimal parameter container: parameters are ``Tensor`` attributes with requires_grad."""

    precision: str = FLOAT32

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for name, value in vars(self).items():
            key = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                out[key] = value
            elif isinstance(value, Module):
                out.update(value.named_parameters(key + "."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.update(item.named_parameters(f"{key}.{i}."))
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def modules(self):
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise KeyError(f"state dict mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for k, p in params.items():
            arr = np.asarray(state[k])
            if arr.shape != p.shape:
                raise ValueError(f"shape mismatch for {k}: {arr.shape} vs {p.shape}")
            p.data = arr.astype(p.data.dtype, copy=True)

    def with_precision(self, mode: str) -> "Module":
        """Copy of this network whose weights and block activations are stored in ``mode``."""
        if mode not in (FLOAT32, FLOAT16):
            raise ValueError(f"unknown precision {mode!r}")
        net = copy.deepcopy(self)
        for m in net.modules():
            m.precision = mode
        if mode == FLOAT16:
            for p in net.parameters():
                p.data = nx.round_f16(p.data)
                p.dtype = FLOAT16
        return net

    def store(self, x: Tensor) -> Tensor:
        # activation storage point for the reduced-precision mode
        return nx.cast_precision(x, FLOAT16) if self.precision == FLOAT16 else x


def count_params(net: Module | None) -> int:
    if net is None:
        return 0
    return sum(p.size for p in net.parameters())


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    bound = 1.0 / math.sqrt(max(fan_in, 1))
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def _zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def _ones(shape) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=True)


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, k: int, rng, stride: int = 1, padding: int | None = None, zero_init: bool = False):
        self.stride = stride
        self.padding = k // 2 if padding is None else padding
        shape = (cout, cin, k, k)
        self.weight = _zeros(shape) if zero_init else _uniform(rng, shape, cin * k * k)
        self.bias = _zeros(cout) if zero_init else _uniform(rng, cout, cin * k * k)

    def __call__(self, x):
        return nx.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class ConvTranspose2d(Module):
    def __init__(self, cin: int, cout: int, k: int, rng, stride: int = 2, padding: int = 0):
        self.stride, self.padding = stride, padding
        self.weight = _uniform(rng, (cin, cout, k, k), cin * k * k // (stride * stride))
        self.bias = _uniform(rng, cout, cin)

    def __call__(self, x):
        return nx.conv_transpose2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class Linear(Module):
    def __init__(self, din: int, dout: int, rng, zero_init: bool = False):
        self.weight = _zeros((din, dout)) if zero_init else _uniform(rng, (din, dout), din)
        self.bias = _zeros(dout) if zero_init else _uniform(rng, dout, din)

    def __call__(self, x):
        return nx.linear(x, self.weight, self.bias)


class GroupNorm(Module):
    def __init__(self, channels: int, groups: int):
        self.groups = math.gcd(groups, channels)
        self.gamma = _ones(channels)
        self.beta = _zeros(channels)

    def __call__(self, x):
        return nx.group_norm(x, self.groups, self.gamma, self.beta)


class ResBlock(Module):
    """GN-SiLU-conv twice, optional time-embedding shift, 1x1 skip when widths differ."""

    def __init__(self, cin: int, cout: int, rng, temb_dim: int | None = None, groups: int = 4):
        self.norm1 = GroupNorm(cin, groups)
        self.conv1 = Conv2d(cin, cout, 3, rng)
        self.temb = Linear(temb_dim, cout, rng) if temb_dim else None
        self.norm2 = GroupNorm(cout, groups)
        self.conv2 = Conv2d(cout, cout, 3, rng)
        self.skip = Conv2d(cin, cout, 1, rng) if cin != cout else None

    def __call__(self, x, temb=None):
        h = self.conv1(nx.silu(self.norm1(x)))
        if self.temb is not None and temb is not None:
            shift = self.temb(temb)
            h = h + nx.reshape(shift, shift.shape + (1, 1))
        h = self.conv2(nx.silu(self.norm2(h)))
        return self.store(h + (self.skip(x) if self.skip is not None else x))


class CrossAttention(Module):
    """Pixels attend over a small set of conditioning tokens; residual output."""

    def __init__(self, channels: int, token_dim: int, rng, heads: int = 2, groups: int = 4):
        self.heads = heads
        self.norm = GroupNorm(channels, groups)
        self.q = Linear(channels, channels, rng)
        self.k = Linear(token_dim, channels, rng)
        self.v = Linear(token_dim, channels, rng)
        self.out = Linear(channels, channels, rng)

    def __call__(self, x, tokens):
        n, c, h, w = x.shape
        seq = nx.transpose(nx.reshape(self.norm(x), (n, c, h * w)), (0, 2, 1))
        a = nx.attention(self.q(seq), self.k(tokens), self.v(tokens), self.heads)
        a = nx.reshape(nx.transpose(self.out(a), (0, 2, 1)), (n, c, h, w))
        return self.store(x + a)


def sinusoidal_embedding(t: np.ndarray, dim: int, max_period: float = 1000.0) -> np.ndarray:
    """Sinusoidal features of ``t`` in [0, 1], shape (B, dim)."""
    half = dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half) / half)
    args = np.asarray(t, dtype=np.float64).reshape(-1, 1) * max_period * freqs[None]
    emb = np.concatenate([np.sin(args), np.cos(args)], axis=1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros((emb.shape[0], 1))], axis=1)
    return emb


def pad_amount(size: int, multiple: int) -> tuple[int, int]:
    """Split padding needed to reach the next multiple; extra pixel goes on the high side."""
    target = -(-size // multiple) * multiple
    total = target - size
    return total // 2, total - total // 2
