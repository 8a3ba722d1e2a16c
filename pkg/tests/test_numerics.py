import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from zdcflow import numerics as nx
from zdcflow.numerics.precision import f16_reference

from conftest import fd_grad, rel_err

SEEDS = range(20)
TOL = 1e-3


def check_op(fn, shapes, seed, positive=False):
    """Compare autodiff with central differences for ``sum(fn(*inputs) * w)``."""
    rng = np.random.default_rng(seed)
    with nx.float64_mode():
        arrays = [rng.uniform(0.5, 2.0, s) if positive else rng.standard_normal(s) for s in shapes]
        ts = [nx.Tensor(a, requires_grad=True) for a in arrays]
        w = rng.standard_normal(fn(*ts).shape)

        def value():
            with nx.no_grad():
                return float(np.sum(fn(*[nx.Tensor(t.data) for t in ts]).data * w))

        grads = nx.backward(nx.sum_(fn(*ts) * w), inputs=ts)
        for t in ts:
            assert rel_err(grads[t], fd_grad(value, t.data)) < TOL


ELEMENTWISE = {
    "add": (lambda a, b: a + b, [(3, 4), (4,)], False),
    "sub": (lambda a, b: a - b, [(3, 4), (3, 1)], False),
    "mul": (lambda a, b: a * b, [(2, 3), (2, 3)], False),
    "div": (lambda a, b: a / b, [(2, 3), (3,)], True),
    "power": (lambda a: nx.power(a, 1.7), [(5,)], True),
    "exp": (lambda a: nx.exp(a), [(2, 3)], False),
    "log": (lambda a: nx.log(a), [(2, 3)], True),
    "sqrt": (lambda a: nx.sqrt(a), [(4,)], True),
    "sigmoid": (lambda a: nx.sigmoid(a), [(6,)], False),
    "silu": (lambda a: nx.silu(a), [(6,)], False),
    "tanh": (lambda a: nx.tanh(a), [(6,)], False),
    "square": (lambda a: nx.square(a), [(6,)], False),
    "sum_axis": (lambda a: nx.sum_(a, axis=1, keepdims=True), [(3, 4, 2)], False),
    "mean_axes": (lambda a: nx.mean(a, axis=(0, 2)), [(3, 4, 2)], False),
    "reshape": (lambda a: nx.reshape(a, (6, 2)), [(3, 4)], False),
    "transpose": (lambda a: nx.transpose(a, (2, 0, 1)), [(2, 3, 4)], False),
    "getitem_slice": (lambda a: a[1:, ::2], [(4, 5)], False),
    "getitem_fancy": (lambda a: a[np.array([0, 2, 2, 1])], [(3, 2)], False),
    "pad": (lambda a: nx.pad(a, ((1, 0), (0, 2))), [(2, 3)], False),
    "concat": (lambda a, b: nx.concat([a, b], axis=1), [(2, 3), (2, 1)], False),
    "broadcast": (lambda a: nx.broadcast_to(a, (4, 3)), [(1, 3)], False),
    "matmul": (lambda a, b: a @ b, [(2, 3, 4), (4, 5)], False),
    "softmax": (lambda a: nx.softmax(a, axis=-1), [(3, 5)], False),
    "linear": (lambda x, w, b: nx.linear(x, w, b), [(4, 3), (3, 2), (2,)], False),
}


@pytest.mark.parametrize("name", sorted(ELEMENTWISE))
@pytest.mark.parametrize("seed", SEEDS)
def test_primitive_gradients(name, seed):
    fn, shapes, positive = ELEMENTWISE[name]
    check_op(fn, shapes, seed, positive)


@pytest.mark.parametrize("seed", SEEDS)
def test_kinked_gradients_away_from_kink(seed):
    # inputs bounded away from 0 so central differences never straddle the kink
    rng = np.random.default_rng(seed)
    with nx.float64_mode():
        x = rng.uniform(0.1, 1.0, 8) * rng.choice([-1, 1], 8)
        for fn in (nx.relu, nx.leaky_relu, nx.abs_):
            t = nx.Tensor(x.copy(), requires_grad=True)
            g = nx.backward(nx.sum_(fn(t)), inputs=[t])[t]
            assert rel_err(g, fd_grad(lambda: float(np.sum(fn(nx.Tensor(t.data)).data)), t.data)) < TOL


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1)])
def test_conv2d_gradients(seed, stride, padding):
    check_op(lambda x, w, b: nx.conv2d(x, w, b, stride=stride, padding=padding), [(2, 3, 5, 6), (4, 3, 3, 3), (4,)], seed)


@pytest.mark.parametrize("seed", SEEDS)
def test_conv_transpose_gradients(seed):
    check_op(lambda x, w, b: nx.conv_transpose2d(x, w, b, stride=2), [(2, 3, 3, 4), (3, 2, 2, 2), (2,)], seed)
    check_op(lambda x, w: nx.conv_transpose2d(x, w, stride=2, padding=1), [(1, 2, 3, 3), (2, 3, 4, 4)], seed)


@pytest.mark.parametrize("seed", SEEDS)
def test_group_norm_gradients(seed):
    check_op(lambda x, g, b: nx.group_norm(x, 2, g, b), [(2, 4, 3, 3), (4,), (4,)], seed)


@pytest.mark.parametrize("seed", SEEDS)
def test_attention_gradients(seed):
    check_op(lambda q, k, v: nx.attention(q, k, v, heads=2), [(2, 5, 4), (2, 3, 4), (2, 3, 6)], seed)


# -- naive-loop oracles ----------------------------------------------------
def naive_conv2d(x, w, b, stride, padding):
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for bi in range(n):
        for oc in range(o):
            for i in range(ho):
                for j in range(wo):
                    patch = xp[bi, :, i * stride : i * stride + kh, j * stride : j * stride + kw]
                    out[bi, oc, i, j] = np.sum(patch * w[oc]) + b[oc]
    return out


def naive_conv_transpose(x, w, stride, padding):
    n, c, h, wd = x.shape
    _, o, kh, kw = w.shape
    full = np.zeros((n, o, (h - 1) * stride + kh, (wd - 1) * stride + kw))
    for bi in range(n):
        for ic in range(c):
            for i in range(h):
                for j in range(wd):
                    full[bi, :, i * stride : i * stride + kh, j * stride : j * stride + kw] += x[bi, ic, i, j] * w[ic]
    hp, wp = full.shape[2] - padding, full.shape[3] - padding
    return full[:, :, padding:hp, padding:wp]


@pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 0), (2, 1)])
def test_conv2d_matches_loops(stride, padding):
    rng = np.random.default_rng(stride * 10 + padding)
    x, w, b = rng.standard_normal((2, 3, 7, 6)), rng.standard_normal((5, 3, 3, 3)), rng.standard_normal(5)
    with nx.float64_mode():
        got = nx.conv2d(x, w, b, stride, padding).data
    np.testing.assert_allclose(got, naive_conv2d(x, w, b, stride, padding), atol=1e-12)


@pytest.mark.parametrize("stride,padding,k", [(2, 0, 2), (1, 0, 3), (2, 1, 4)])
def test_conv_transpose_matches_loops(stride, padding, k):
    rng = np.random.default_rng(k)
    x, w = rng.standard_normal((2, 3, 4, 5)), rng.standard_normal((3, 2, k, k))
    with nx.float64_mode():
        got = nx.conv_transpose2d(x, w, stride=stride, padding=padding).data
    np.testing.assert_allclose(got, naive_conv_transpose(x, w, stride, padding), atol=1e-12)


def test_group_norm_matches_loops():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((2, 6, 4, 3)) * 3 + 1
    gamma, beta = rng.standard_normal(6), rng.standard_normal(6)
    with nx.float64_mode():
        got = nx.group_norm(x, 3, gamma, beta).data
    want = np.empty_like(x)
    for n in range(2):
        for g in range(3):
            block = x[n, 2 * g : 2 * g + 2]
            z = (block - block.mean()) / math.sqrt(block.var() + nx.nn.NORM_EPS)
            for ci in range(2):
                c = 2 * g + ci
                want[n, c] = z[ci] * gamma[c] + beta[c]
    np.testing.assert_allclose(got, want, atol=1e-12)


def test_attention_matches_loops():
    rng = np.random.default_rng(4)
    q, k, v = rng.standard_normal((2, 3, 4)), rng.standard_normal((2, 5, 4)), rng.standard_normal((2, 5, 6))
    heads = 2
    with nx.float64_mode():
        got = nx.attention(q, k, v, heads).data
    want = np.zeros((2, 3, 6))
    for b in range(2):
        for h in range(heads):
            qs, ks, vs = q[b, :, 2 * h : 2 * h + 2], k[b, :, 2 * h : 2 * h + 2], v[b, :, 3 * h : 3 * h + 3]
            for i in range(3):
                s = np.array([qs[i] @ ks[j] for j in range(5)]) / math.sqrt(2)
                p = np.exp(s - s.max())
                p /= p.sum()
                want[b, i, 3 * h : 3 * h + 3] = sum(p[j] * vs[j] for j in range(5))
    np.testing.assert_allclose(got, want, atol=1e-12)


def test_shape_errors():
    with pytest.raises(ValueError):
        nx.conv2d(np.zeros((1, 2, 4, 4)), np.zeros((3, 3, 3, 3)))
    with pytest.raises(ValueError):
        nx.conv2d(np.zeros((1, 2, 2, 2)), np.zeros((3, 2, 3, 3)))
    with pytest.raises(ValueError):
        nx.group_norm(np.zeros((1, 5, 2, 2)), 2)
    with pytest.raises(ValueError):
        nx.attention(np.zeros((1, 2, 5)), np.zeros((1, 2, 5)), np.zeros((1, 2, 5)), heads=2)


# -- graph semantics -------------------------------------------------------
def test_backward_requires_scalar_and_graph():
    t = nx.Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError):
        nx.backward(t * 2.0)
    with pytest.raises(ValueError):
        nx.backward(nx.sum_(nx.Tensor(np.ones(3))))


def test_gradient_accumulates_over_reuse():
    with nx.float64_mode():
        x = nx.Tensor(np.array([1.5, -2.0]), requires_grad=True)
        y = nx.sum_(x * x + x * 3.0)
        g = nx.backward(y)[x]
    np.testing.assert_allclose(g, 2 * x.data + 3.0)


def test_graph_freed_unless_retained():
    x = nx.Tensor(np.ones(2), requires_grad=True)
    y = nx.sum_(nx.exp(x))
    nx.backward(y, retain_graph=True)
    g2 = nx.backward(y)[x]
    np.testing.assert_allclose(g2, np.exp(1.0), rtol=1e-6)
    assert y._parents == ()


def test_no_grad_records_nothing():
    x = nx.Tensor(np.ones(2), requires_grad=True)
    with nx.no_grad():
        y = nx.sum_(x * 2.0)
    assert not y.requires_grad


def test_non_finite_raises():
    with pytest.raises(FloatingPointError):
        nx.log(nx.Tensor(np.array([0.0, 1.0])))
    with pytest.raises(FloatingPointError):
        nx.exp(nx.Tensor(np.array([1e4])))


# -- optimizer ---------------------------------------------------------------
def test_adam_first_step_is_lr_times_sign():
    st_ = nx.AdamState(lr=0.1)
    (p,) = nx.adam_step(st_, [np.array([1.0, 1.0, 1.0])], [np.array([3.0, -0.5, 1e-3])])
    np.testing.assert_allclose(p, [0.9, 1.1, 0.9], atol=1e-6)


def test_adam_matches_reference_loop():
    rng = np.random.default_rng(0)
    st_ = nx.AdamState(lr=0.01, beta1=0.8, beta2=0.95, cosine_decay=True, total_steps=7)
    p = rng.standard_normal(4)
    ref, m, v = p.copy(), np.zeros(4), np.zeros(4)
    for t in range(1, 8):
        g = rng.standard_normal(4)
        (p,) = nx.adam_step(st_, [p], [g])
        lr = 0.01 * 0.5 * (1 + math.cos(math.pi * (t - 1) / 7))
        m = 0.8 * m + 0.2 * g
        v = 0.95 * v + 0.05 * g * g
        ref = ref - lr * (m / (1 - 0.8**t)) / (np.sqrt(v / (1 - 0.95**t)) + 1e-8)
    np.testing.assert_allclose(p, ref, rtol=1e-12)


def test_cosine_schedule_endpoints():
    st_ = nx.AdamState(lr=1.0, cosine_decay=True, total_steps=10)
    assert st_.effective_lr(0) == 1.0
    assert st_.effective_lr(5) == pytest.approx(0.5)
    assert st_.effective_lr(10) == pytest.approx(0.0, abs=1e-15)
    assert st_.effective_lr(99) == pytest.approx(0.0, abs=1e-15)


@pytest.mark.parametrize("kw", [{"beta1": 1.0}, {"beta2": 0.0}, {"lr": 0.0}, {"total_steps": 0}])
def test_adam_rejects_bad_settings(kw):
    with pytest.raises(ValueError):
        nx.AdamState(**kw)


def test_clip_grad_norm():
    a, b = nx.Tensor(np.zeros(2)), nx.Tensor(np.zeros(1))
    grads = {a: np.array([3.0, 0.0]), b: np.array([4.0])}
    assert nx.clip_grad_norm(grads, 1.0) == pytest.approx(5.0)
    assert math.sqrt(sum(float(np.sum(g**2)) for g in grads.values())) == pytest.approx(1.0, rel=1e-9)


# -- reduced precision -------------------------------------------------------
@settings(max_examples=300, deadline=None)
@given(st.floats(width=32, allow_nan=False, allow_infinity=True))
def test_round_f16_matches_bit_reference(x):
    assert nx.round_f16(np.array([x]))[0] == np.float32(f16_reference(x))


def test_round_f16_ties_to_even():
    # 1 + 2^-11 lies halfway between 1 and the next half-precision value
    assert nx.round_f16(np.array([1 + 2**-11]))[0] == 1.0
    assert nx.round_f16(np.array([1 + 3 * 2**-11]))[0] == 1 + 2**-9
    assert math.isinf(nx.round_f16(np.array([70000.0]))[0])


def test_cast_precision_is_straight_through():
    x = nx.Tensor(np.array([0.1, 1234.567]), requires_grad=True)
    y = nx.cast_precision(x, "float16")
    assert y.dtype == "float16"
    np.testing.assert_array_equal(y.data, nx.round_f16(x.data))
    np.testing.assert_array_equal(nx.backward(nx.sum_(y))[x], [1.0, 1.0])
