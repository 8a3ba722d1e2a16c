"""Fused layer primitives: convolution, transposed convolution, group norm, attention."""
from __future__ import annotations

import numpy as np

from .tensor import Tensor, _result, as_tensor, matmul, reshape, softmax, transpose

NORM_EPS = 1e-5
COL_CACHE_BYTES = 64 * 2**20


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    # xp: padded NHWC -> (N*Ho*Wo, kh*kw*C); one strided copy per kernel tap
    n, c = xp.shape[0], xp.shape[3]
    cols = np.empty((n, ho, wo, kh, kw, c), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i, j, :] = xp[:, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride, :]
    return cols.reshape(n * ho * wo, kh * kw * c)


def _col2im(cols: np.ndarray, shape: tuple[int, int, int, int], kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    # cols: (N, Ho, Wo, kh, kw, C) -> padded NHWC image, overlapping taps summed
    out = np.zeros(shape, dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride, :] += cols[:, :, :, i, j, :]
    return out


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of an NCHW input with an (O, C, kh, kw) kernel."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError(f"conv2d expects 4-D input and kernel, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    o, ci, kh, kw = weight.shape
    if ci != c:
        raise ValueError(f"input has {c} channels but kernel expects {ci}")
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise ValueError(f"spatial dims {(h, w)} smaller than kernel {(kh, kw)} after padding {padding}")
    ho, wo = conv_output_size(h, kh, stride, padding), conv_output_size(w, kw, stride, padding)
    p = padding
    xp = np.zeros((n, h + 2 * p, w + 2 * p, c), dtype=x.data.dtype)
    xp[:, p : p + h, p : p + w, :] = x.data.transpose(0, 2, 3, 1)
    wmat = weight.data.transpose(2, 3, 1, 0).reshape(-1, o)  # (kh*kw*C, O)
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    out = cols @ wmat
    # keep the patch matrix for the weight gradient unless it is large
    saved = cols if cols.nbytes <= COL_CACHE_BYTES else None
    del cols
    if bias is not None:
        bias = as_tensor(bias)
        out += bias.data
    out = out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2)
    parents = (x, weight) if bias is None else (x, weight, bias)

    def back(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, o)
        gx = gw = gb = None
        if weight.requires_grad:
            cols = saved if saved is not None else _im2col(xp, kh, kw, stride, ho, wo)
            gw = (cols.T @ g2).reshape(kh, kw, c, o).transpose(3, 2, 0, 1)
        if x.requires_grad:
            dcols = (g2 @ wmat.T).reshape(n, ho, wo, kh, kw, c)
            gxp = _col2im(dcols, xp.shape, kh, kw, stride, ho, wo)
            gx = gxp[:, p : p + h, p : p + w, :].transpose(0, 3, 1, 2)
        if bias is not None and bias.requires_grad:
            gb = g2.sum(axis=0)
        return (gx, gw) if bias is None else (gx, gw, gb)

    return _result(np.ascontiguousarray(out), parents, back)


def conv_transpose2d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Transposed convolution; ``weight`` is (C_in, C_out, kh, kw).

    Output size is (H - 1) * stride - 2 * padding + kh per axis.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError(f"conv_transpose2d expects 4-D input and kernel, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    ci, o, kh, kw = weight.shape
    if ci != c:
        raise ValueError(f"input has {c} channels but kernel expects {ci}")
    hf, wf = (h - 1) * stride + kh, (w - 1) * stride + kw
    hout, wout = hf - 2 * padding, wf - 2 * padding
    if hout < 1 or wout < 1:
        raise ValueError("padding too large for transposed convolution")
    p = padding
    wmat = weight.data.transpose(0, 2, 3, 1).reshape(c, -1)  # (C, kh*kw*O)
    x2 = x.data.transpose(0, 2, 3, 1).reshape(-1, c)
    cols = (x2 @ wmat).reshape(n, h, w, kh, kw, o)
    full = _col2im(cols, (n, hf, wf, o), kh, kw, stride, h, w)
    out = full[:, p : p + hout, p : p + wout, :].transpose(0, 3, 1, 2)
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data.reshape(1, -1, 1, 1)
    parents = (x, weight) if bias is None else (x, weight, bias)

    def back(g):
        gfull = np.zeros((n, hf, wf, o), dtype=g.dtype)
        gfull[:, p : p + hout, p : p + wout, :] = g.transpose(0, 2, 3, 1)
        gcols = _im2col(gfull, kh, kw, stride, h, w)  # (N*h*w, kh*kw*O)
        gx = gw = gb = None
        if x.requires_grad:
            gx = (gcols @ wmat.T).reshape(n, h, w, c).transpose(0, 3, 1, 2)
        if weight.requires_grad:
            gw = (x2.T @ gcols).reshape(c, kh, kw, o).transpose(0, 3, 1, 2)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return (gx, gw) if bias is None else (gx, gw, gb)

    return _result(np.ascontiguousarray(out), parents, back)


def group_norm(x, groups: int, gamma=None, beta=None, eps: float = NORM_EPS) -> Tensor:
    """Group normalisation over (C/groups, H, W) for NCHW input."""
    x = as_tensor(x)
    n, c = x.shape[:2]
    if c % groups:
        raise ValueError(f"{c} channels not divisible into {groups} groups")
    xg = x.data.reshape(n, groups, -1)
    mu = xg.mean(axis=2, keepdims=True)
    var = xg.var(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = ((xg - mu) * inv).reshape(x.shape)
    bshape = (1, c) + (1,) * (x.ndim - 2)
    out = xhat
    if gamma is not None:
        gamma = as_tensor(gamma)
        out = out * gamma.data.reshape(bshape)
    if beta is not None:
        beta = as_tensor(beta)
        out = out + beta.data.reshape(bshape)
    parents = tuple(t for t in (x, gamma, beta) if t is not None)
    red = (0,) + tuple(range(2, x.ndim))

    def back(g):
        grads = []
        dxhat = g * gamma.data.reshape(bshape) if gamma is not None else g
        if x.requires_grad:
            dg = dxhat.reshape(n, groups, -1)
            xh = xhat.reshape(n, groups, -1)
            dx = inv * (dg - dg.mean(axis=2, keepdims=True) - xh * (dg * xh).mean(axis=2, keepdims=True))
            grads.append(dx.reshape(x.shape))
        else:
            grads.append(None)
        if gamma is not None:
            grads.append((g * xhat).sum(axis=red))
        if beta is not None:
            grads.append(g.sum(axis=red))
        return grads

    return _result(out, parents, back)


def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight + bias`` with weight stored (in, out)."""
    out = matmul(x, weight)
    return out + bias if bias is not None else out


def split_heads(x: Tensor, heads: int) -> Tensor:
    b, length, d = x.shape
    return transpose(reshape(x, (b, length, heads, d // heads)), (0, 2, 1, 3))


def merge_heads(x: Tensor) -> Tensor:
    b, h, length, dh = x.shape
    return reshape(transpose(x, (0, 2, 1, 3)), (b, length, h * dh))


def attention(q, k, v, heads: int = 1) -> Tensor:
    """Multi-head scaled dot-product attention over (B, L, D) inputs."""
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    if q.ndim != 3 or k.ndim != 3 or v.ndim != 3:
        raise ValueError("attention expects (batch, length, dim) tensors")
    d = q.shape[-1]
    if k.shape[-1] != d or k.shape[:2] != v.shape[:2] or q.shape[0] != k.shape[0]:
        raise ValueError(f"incompatible attention shapes q={q.shape} k={k.shape} v={v.shape}")
    if d % heads or v.shape[-1] % heads:
        raise ValueError(f"embedding dim {d} not divisible by {heads} heads")
    qh, kh, vh = split_heads(q, heads), split_heads(k, heads), split_heads(v, heads)
    scale = 1.0 / np.sqrt(d // heads)
    scores = matmul(qh, transpose(kh, (0, 1, 3, 2))) * scale
    return merge_heads(matmul(softmax(scores, axis=-1), vh))
