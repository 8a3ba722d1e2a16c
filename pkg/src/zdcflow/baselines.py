"""Direct estimation of the five channel sums from particle features."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import metrics
from . import numerics as nx
from .data import PreprocStats, standardize
from .flow_matching import FMSchedule, FMTrainConfig, cfm_loss, euler_sample, fit
from .model import ModelCheckpoint
from .model.layers import Linear, Module, sinusoidal_embedding

class BaselineError(ValueError):
    pass


@dataclass
class ChannelRegressor:
    kind: str  # linear | knn | mlp | fm5
    state: dict = field(default_factory=dict)
    stats: PreprocStats | None = None
    net: Module | None = None

    def predict(self, features, seed: int = 0) -> np.ndarray:
        features = np.asarray(features, dtype=np.float64)
        if self.kind == "linear":
            out = _design(features) @ self.state["coef"]
        elif self.kind == "knn":
            out = predict_knn(self.state["train_x"], self.state["train_y"], standardize(features, self.stats), self.state["k"], np.random.default_rng(seed))
        elif self.kind == "mlp":
            with nx.no_grad():
                out = np.expm1(self.net(standardize(features, self.stats)).data.astype(np.float64))
        elif self.kind == "fm5":
            rng = np.random.default_rng(seed)
            y = euler_sample(self.net, standardize(features, self.stats), FMSchedule(self.state["steps"]), rng, shape=(len(features), 5))
            out = np.expm1(y.astype(np.float64) * self.state["y_std"] + self.state["y_mean"])
        else:
            raise BaselineError(f"unknown regressor kind {self.kind!r}")
        return np.maximum(out, 0.0)


def _design(x: np.ndarray) -> np.ndarray:
    return np.concatenate([x, np.ones((len(x), 1))], axis=1)


def fit_linear(features, channels) -> ChannelRegressor:
    """Least squares per channel with an intercept; minimum-norm solution when columns are collinear."""
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(channels, dtype=np.float64)
    if len(x) < 10:
        raise BaselineError(f"linear fit needs at least 10 rows, got {len(x)}")
    a = _design(x)
    coef = np.linalg.lstsq(a, y, rcond=None)[0]
    return ChannelRegressor("linear", {"coef": coef})


def predict_knn(train_x, train_y, query_x, k: int, rng: np.random.Generator, chunk: int = 1024) -> np.ndarray:
    """Channels of one uniformly drawn neighbour among the ``k`` nearest (Euclidean) training rows."""
    train_x = np.asarray(train_x, dtype=np.float64)
    train_y = np.asarray(train_y)
    query_x = np.atleast_2d(np.asarray(query_x, dtype=np.float64))
    if len(train_x) == 0:
        raise BaselineError("empty training set")
    if not 1 <= k <= len(train_x):
        raise BaselineError(f"k={k} must be in [1, {len(train_x)}]")
    pick = rng.integers(0, k, size=len(query_x))
    out = np.empty((len(query_x), train_y.shape[1]), dtype=np.float64)
    sq = (train_x**2).sum(axis=1)
    for s in range(0, len(query_x), chunk):
        q = query_x[s : s + chunk]
        d = sq[None, :] - 2.0 * q @ train_x.T + (q**2).sum(axis=1)[:, None]
        nearest = np.argsort(d, axis=1, kind="stable")[:, :k]
        out[s : s + chunk] = train_y[nearest[np.arange(len(q)), pick[s : s + chunk]]]
    return out


def fit_knn(features, channels, k: int = 10, train_idx=None) -> ChannelRegressor:
    features = np.asarray(features)
    train_idx = np.arange(len(features)) if train_idx is None else train_idx
    stats = PreprocStats.fit(features, train_idx)
    return ChannelRegressor("knn", {"train_x": standardize(features, stats), "train_y": np.asarray(channels), "k": k}, stats)


class DenseNet(Module):
    def __init__(self, dims: list[int], rng: np.random.Generator, zero_last: bool = False):
        self.layers = [Linear(a, b, rng, zero_init=zero_last and i == len(dims) - 2) for i, (a, b) in enumerate(zip(dims[:-1], dims[1:]))]

    def __call__(self, x):
        h = nx.as_tensor(x)
        for layer in self.layers[:-1]:
            h = nx.silu(layer(h))
        return self.layers[-1](h)


class VelocityMLP(Module):
    """Velocity field over 5-d channel vectors conditioned on time and features."""

    def __init__(self, cond_dim: int, hidden: int, rng: np.random.Generator, time_dim: int = 16, dim: int = 5):
        self.time_dim = time_dim
        self.body = DenseNet([dim + time_dim + cond_dim, hidden, hidden, hidden, dim], rng, zero_last=True)

    def __call__(self, x, t, cond):
        n = len(cond)
        t = np.broadcast_to(np.asarray(t, dtype=np.float64).reshape(-1), (n,))
        inp = nx.concat([nx.as_tensor(x), nx.Tensor(sinusoidal_embedding(t, self.time_dim)), nx.as_tensor(cond)], axis=1)
        return self.body(inp)


@dataclass
class DenseTrainConfig:
    epochs: int = 50
    batch_size: int = 256
    lr: float = 1e-3
    hidden: int = 64
    seed: int = 0
    steps: int = 11

    def to_fm(self) -> FMTrainConfig:
        return FMTrainConfig(epochs=self.epochs, batch_size=self.batch_size, lr=self.lr, seed=self.seed)

    def to_dict(self) -> dict:
        return asdict(self)


def train_mlp_channels(features, channels, train_idx, cfg: DenseTrainConfig) -> ChannelRegressor:
    """Dense regression net on log(1 + channel) targets with an l2 loss."""
    stats = PreprocStats.fit(features, train_idx)
    x = standardize(np.asarray(features)[train_idx], stats)
    y = np.log1p(np.asarray(channels, dtype=np.float64)[train_idx]).astype(np.float32)
    net = DenseNet([x.shape[1], cfg.hidden, cfg.hidden, y.shape[1]], np.random.default_rng(cfg.seed))

    def loss_fn(idx, rng):
        return nx.mean(nx.square(net(x[idx]) - y[idx]))

    res = fit(net, loss_fn, len(x), cfg.to_fm())
    net.load_state_dict(res.state)
    return ChannelRegressor("mlp", {"trace": res.trace}, stats, net)


def train_fm_channels(features, channels, train_idx, cfg: DenseTrainConfig) -> ChannelRegressor:
    """Conditional FM over standardised log(1 + channel) vectors."""
    stats = PreprocStats.fit(features, train_idx)
    x = standardize(np.asarray(features)[train_idx], stats)
    y = np.log1p(np.asarray(channels, dtype=np.float64)[train_idx])
    y_mean, y_std = y.mean(axis=0), y.std(axis=0) + 1e-6
    y1 = ((y - y_mean) / y_std).astype(np.float32)
    net = VelocityMLP(x.shape[1], cfg.hidden, np.random.default_rng(cfg.seed))

    def loss_fn(idx, rng):
        return cfm_loss(net, y1[idx], x[idx], rng)

    res = fit(net, loss_fn, len(x), cfg.to_fm())
    net.load_state_dict(res.state)
    state = {"steps": cfg.steps, "y_mean": y_mean, "y_std": y_std, "trace": res.trace}
    return ChannelRegressor("fm5", state, stats, net)


def regressor_checkpoint(reg: ChannelRegressor, cfg: DenseTrainConfig) -> ModelCheckpoint:
    if reg.net is None:
        raise BaselineError(f"{reg.kind} regressor has no network to checkpoint")
    kind = "mlp_channels" if reg.kind == "mlp" else "fm_channels"
    stats = {"features": reg.stats.to_dict()}
    if reg.kind == "fm5":
        stats.update(y_mean=reg.state["y_mean"].tolist(), y_std=reg.state["y_std"].tolist())
    return ModelCheckpoint(kind, {"train": cfg.to_dict()}, reg.net.state_dict(), stats, cfg.seed)


def evaluate_direct(regressors: dict[str, ChannelRegressor], test_features, test_channels, seed: int = 0) -> list[dict]:
    """One Wasserstein row per regressor on the test rows."""
    rows = []
    for name, reg in regressors.items():
        pred = reg.predict(test_features, seed=seed)
        rows.append({"model": name, "wasserstein": metrics.wasserstein1_channels(test_channels, pred)})
    return rows
