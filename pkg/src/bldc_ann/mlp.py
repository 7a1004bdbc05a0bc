"""Three-layer perceptron trained by backpropagation.

Layer 1 is the input, layer 2 a tan-sigmoid hidden layer, layer 3 a linear
output. Bias units are prepended as a constant 1, so ``theta1`` has shape
``(hidden, inputs + 1)`` and ``theta2`` has shape ``(outputs, hidden + 1)``.
The cost is the mean squared error ``J = 1/(2m) * sum ||h - y||^2`` taken in
the network's scaled units.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

INIT_EPSILON = 0.12


class TrainingFault(RuntimeError):
    """Cost became non-finite during training; ``history`` is kept."""

    def __init__(self, message, history):
        super().__init__(message)
        self.history = history


def tansig(x):
    # algebraically -1 + 2/(1 + exp(-2x)); tanh is the stable form
    return np.tanh(x)


def tansig_grad(a):
    """Derivative of the tan-sigmoid expressed through its output ``a``."""
    return 1.0 - a * a


@dataclass
class Mlp:
    theta1: np.ndarray
    theta2: np.ndarray
    input_offset: np.ndarray = None
    input_scale: np.ndarray = None
    output_offset: np.ndarray = None
    output_scale: np.ndarray = None
    hidden_activation: str = "tansig"
    output_activation: str = "linear"
    seed: int | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.theta1 = np.asarray(self.theta1, dtype=np.float64)
        self.theta2 = np.asarray(self.theta2, dtype=np.float64)
        if self.theta1.ndim != 2 or self.theta2.ndim != 2:
            raise ValueError("weight matrices must be 2-D")
        if self.theta2.shape[1] != self.theta1.shape[0] + 1:
            raise ValueError(f"theta2 {self.theta2.shape} does not follow theta1 {self.theta1.shape}")
        n_in, n_out = self.n_inputs, self.n_outputs
        self.input_offset = _vec(self.input_offset, n_in, 0.0)
        self.input_scale = _vec(self.input_scale, n_in, 1.0)
        self.output_offset = _vec(self.output_offset, n_out, 0.0)
        self.output_scale = _vec(self.output_scale, n_out, 1.0)
        if not (np.all(np.isfinite(self.theta1)) and np.all(np.isfinite(self.theta2))):
            raise ValueError("weights must be finite")
        if self.hidden_activation != "tansig" or self.output_activation != "linear":
            raise ValueError("only tansig hidden / linear output layers are supported")

    @property
    def n_inputs(self) -> int:
        return self.theta1.shape[1] - 1

    @property
    def n_hidden(self) -> int:
        return self.theta1.shape[0]

    @property
    def n_outputs(self) -> int:
        return self.theta2.shape[0]

    @property
    def topology(self) -> tuple[int, int, int]:
        return self.n_inputs, self.n_hidden, self.n_outputs

    @classmethod
    def initialise(cls, topology: Sequence[int], seed: int, epsilon: float = INIT_EPSILON, **scaling) -> "Mlp":
        n_in, n_hid, n_out = topology
        rng = np.random.default_rng(seed)
        t1 = rng.uniform(-epsilon, epsilon, size=(n_hid, n_in + 1))
        t2 = rng.uniform(-epsilon, epsilon, size=(n_out, n_hid + 1))
        return cls(t1, t2, seed=seed, **scaling)

    @classmethod
    def zeros(cls, topology: Sequence[int]) -> "Mlp":
        n_in, n_hid, n_out = topology
        return cls(np.zeros((n_hid, n_in + 1)), np.zeros((n_out, n_hid + 1)))

    def with_weights(self, theta1, theta2) -> "Mlp":
        return Mlp(theta1.copy(), theta2.copy(), self.input_offset, self.input_scale, self.output_offset,
                   self.output_scale, seed=self.seed, meta=dict(self.meta))

    # -- scaling -----------------------------------------------------------
    def scale_inputs(self, x):
        return (np.asarray(x, dtype=np.float64) - self.input_offset) * self.input_scale

    def scale_targets(self, y):
        return (np.asarray(y, dtype=np.float64) - self.output_offset) * self.output_scale

    def unscale_outputs(self, h):
        return h / self.output_scale + self.output_offset

    # -- persistence ---------------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "topology": list(self.topology),
            "hidden_activation": self.hidden_activation,
            "output_activation": self.output_activation,
            "theta1": self.theta1.tolist(),
            "theta2": self.theta2.tolist(),
            "input_scaling": {"offset": self.input_offset.tolist(), "scale": self.input_scale.tolist()},
            "output_scaling": {"offset": self.output_offset.tolist(), "scale": self.output_scale.tolist()},
            "seed": self.seed,
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Mlp":
        net = cls(
            np.array(d["theta1"], dtype=np.float64),
            np.array(d["theta2"], dtype=np.float64),
            input_offset=d["input_scaling"]["offset"],
            input_scale=d["input_scaling"]["scale"],
            output_offset=d["output_scaling"]["offset"],
            output_scale=d["output_scaling"]["scale"],
            hidden_activation=d.get("hidden_activation", "tansig"),
            output_activation=d.get("output_activation", "linear"),
            seed=d.get("seed"),
            meta=d.get("meta", {}),
        )
        if list(net.topology) != list(d["topology"]):
            raise ValueError("stored topology does not match the weight shapes")
        return net

    def save(self, path: str | Path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path: str | Path) -> "Mlp":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _vec(v, n, default):
    if v is None:
        return np.full(n, default, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    if v.size == 1 and n != 1:
        v = np.full(n, float(v[0]))
    if v.size != n:
        raise ValueError(f"scaling vector has {v.size} entries, expected {n}")
    return v


def _forward_scaled(theta1, theta2, xs):
    """Forward pass on already-scaled rows ``xs`` (m, n_in)."""
    a1 = np.hstack([np.ones((xs.shape[0], 1)), xs])
    a2 = tansig(a1 @ theta1.T)
    a2b = np.hstack([np.ones((a2.shape[0], 1)), a2])
    h = a2b @ theta2.T
    return a1, a2, a2b, h


def forward(net: Mlp, x) -> tuple[np.ndarray, np.ndarray]:
    """Hidden activations and de-scaled outputs for one vector or a batch."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    xb = np.atleast_2d(x)
    if xb.shape[1] != net.n_inputs:
        raise ValueError(f"expected {net.n_inputs} inputs, got {xb.shape[1]}")
    _, a2, _, h = _forward_scaled(net.theta1, net.theta2, net.scale_inputs(xb))
    out = net.unscale_outputs(h)
    if single:
        return a2[0], out[0]
    return a2, out


def predict(net: Mlp, x) -> np.ndarray:
    return forward(net, x)[1]


def _cost_grad(theta1, theta2, xs, ys):
    m = xs.shape[0]
    a1, a2, a2b, h = _forward_scaled(theta1, theta2, xs)
    d3 = h - ys
    d2 = (d3 @ theta2[:, 1:]) * tansig_grad(a2)
    g2 = d3.T @ a2b / m
    g1 = d2.T @ a1 / m
    cost = 0.5 * float(np.sum(d3 * d3)) / m
    return cost, g1, g2


def cost(net: Mlp, x, y) -> float:
    xs = net.scale_inputs(np.atleast_2d(x))
    ys = net.scale_targets(np.atleast_2d(y))
    _, _, _, h = _forward_scaled(net.theta1, net.theta2, xs)
    d = h - ys
    return 0.5 * float(np.sum(d * d)) / xs.shape[0]


def backprop_gradients(net: Mlp, x, y) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of :func:`cost` with respect to ``theta1`` and ``theta2``."""
    xb = np.atleast_2d(np.asarray(x, dtype=np.float64))
    yb = np.atleast_2d(np.asarray(y, dtype=np.float64))
    if xb.shape[1] != net.n_inputs or yb.shape[1] != net.n_outputs or len(xb) != len(yb):
        raise ValueError("x/y shapes do not match the network topology")
    _, g1, g2 = _cost_grad(net.theta1, net.theta2, net.scale_inputs(xb), net.scale_targets(yb))
    return g1, g2


# -- data handling -------------------------------------------------------------
@dataclass(frozen=True)
class LabeledDataset:
    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        x = np.atleast_2d(np.asarray(self.x, dtype=np.float64))
        y = np.asarray(self.y, dtype=np.float64)
        if y.ndim == 1:
            y = y[:, None]
        if len(x) != len(y):
            raise ValueError("x and y hold different numbers of examples")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)

    @property
    def m(self) -> int:
        return len(self.x)

    def subset(self, idx) -> "LabeledDataset":
        return LabeledDataset(self.x[idx], self.y[idx])


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    max_epochs: int = 1000
    batch_size: int | None = None  # None means full batch
    early_stop_patience: int = 50
    split_fractions: tuple[float, float, float] = (0.40, 0.10, 0.50)
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")
        if self.max_epochs < 1 or self.early_stop_patience < 1:
            raise ConfigError("max_epochs and early_stop_patience must be >= 1")
        if self.batch_size is not None and self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        f = tuple(float(v) for v in self.split_fractions)
        if len(f) != 3 or min(f) < 0 or abs(sum(f) - 1.0) > 1e-9:
            raise ConfigError("split fractions must be three non-negative numbers summing to 1")
        object.__setattr__(self, "split_fractions", f)

    @property
    def batch_mode(self) -> str:
        return "full" if self.batch_size is None else f"mini({self.batch_size})"

    def to_dict(self) -> dict:
        return {
            "learning_rate": self.learning_rate,
            "max_epochs": self.max_epochs,
            "batch_size": self.batch_size,
            "batch_mode": self.batch_mode,
            "early_stop_patience": self.early_stop_patience,
            "split_fractions": list(self.split_fractions),
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = {k: v for k, v in d.items() if k != "batch_mode"}
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown training parameters: {sorted(unknown)}")
        if "split_fractions" in d:
            d["split_fractions"] = tuple(d["split_fractions"])
        return cls(**d)


def split_dataset(ds: LabeledDataset, cfg: TrainConfig):
    """Seeded shuffle, then floor(f_train*m) / floor(f_val*m) / remainder."""
    m = ds.m
    if m < 10:
        raise ConfigError(f"need at least 10 examples to split, got {m}")
    perm = np.random.default_rng(cfg.seed).permutation(m)
    n_tr = math.floor(cfg.split_fractions[0] * m)
    n_va = math.floor(cfg.split_fractions[1] * m)
    return ds.subset(perm[:n_tr]), ds.subset(perm[n_tr:n_tr + n_va]), ds.subset(perm[n_tr + n_va:])


@dataclass
class TrainingHistory:
    epochs: list[int] = field(default_factory=list)
    train_cost: list[float] = field(default_factory=list)
    val_cost: list[float] = field(default_factory=list)
    best_epoch: int = 0
    best_val_cost: float = math.inf

    def append(self, epoch, tr, va):
        self.epochs.append(epoch)
        self.train_cost.append(tr)
        self.val_cost.append(va)

    def to_csv(self) -> str:
        lines = ["epoch,train_cost,val_cost"]
        lines += [f"{e},{t!r},{v!r}" for e, t, v in zip(self.epochs, self.train_cost, self.val_cost)]
        return "\n".join(lines) + "\n"


def train(ds: LabeledDataset | tuple, topology: Sequence[int], cfg: TrainConfig,
          scaling: dict | None = None, init: Mlp | None = None) -> tuple[Mlp, TrainingHistory]:
    """Gradient descent with early stopping on the validation cost.

    ``ds`` is either a dataset (split here with ``cfg``) or a ready-made
    ``(train, validation)`` pair. Epoch 0 in the history is the untrained
    network. The returned network holds the weights of the best
    validation epoch.
    """
    if isinstance(ds, tuple):
        tr, va = ds[0], ds[1]
    else:
        tr, va, _ = split_dataset(ds, cfg)
    n_in, _, n_out = topology
    if tr.x.shape[1] != n_in or tr.y.shape[1] != n_out:
        raise ConfigError(f"dataset shape ({tr.x.shape[1]}, {tr.y.shape[1]}) does not fit topology {tuple(topology)}")
    if tr.m == 0 or va.m == 0:
        raise ConfigError("training and validation splits must be non-empty")
    net = init if init is not None else Mlp.initialise(topology, cfg.seed, **(scaling or {}))
    xs, ys = net.scale_inputs(tr.x), net.scale_targets(tr.y)
    xv, yv = net.scale_inputs(va.x), net.scale_targets(va.y)
    t1, t2 = net.theta1.copy(), net.theta2.copy()
    rng = np.random.default_rng(cfg.seed + 1)
    lr = cfg.learning_rate
    hist = TrainingHistory()

    def val_cost(a, b):
        _, _, _, h = _forward_scaled(a, b, xv)
        d = h - yv
        return 0.5 * float(np.sum(d * d)) / len(xv)

    c0, _, _ = _cost_grad(t1, t2, xs, ys)
    best = (val_cost(t1, t2), t1.copy(), t2.copy(), 0)
    hist.append(0, c0, best[0])
    stale = 0
    for epoch in range(1, cfg.max_epochs + 1):
        if cfg.batch_size is None:
            _, g1, g2 = _cost_grad(t1, t2, xs, ys)
            t1 -= lr * g1
            t2 -= lr * g2
        else:
            order = rng.permutation(len(xs))
            for s in range(0, len(xs), cfg.batch_size):
                idx = order[s:s + cfg.batch_size]
                _, g1, g2 = _cost_grad(t1, t2, xs[idx], ys[idx])
                t1 -= lr * g1
                t2 -= lr * g2
        _, _, _, h = _forward_scaled(t1, t2, xs)
        tr_cost = 0.5 * float(np.sum((h - ys) ** 2)) / len(xs)
        va_cost = val_cost(t1, t2)
        hist.append(epoch, tr_cost, va_cost)
        if not (math.isfinite(tr_cost) and math.isfinite(va_cost)):
            raise TrainingFault(f"cost diverged at epoch {epoch}", hist)
        if va_cost < best[0]:
            best = (va_cost, t1.copy(), t2.copy(), epoch)
            stale = 0
        else:
            stale += 1
            if stale >= cfg.early_stop_patience:
                break
    hist.best_val_cost, hist.best_epoch = best[0], best[3]
    out = net.with_weights(best[1], best[2])
    out.meta.update(train=cfg.to_dict(), best_epoch=best[3], best_val_cost=best[0], epochs_run=hist.epochs[-1])
    return out, hist
