"""Bias-free fully-connected networks with explicit forward/backward passes.

Conventions used throughout the package:

* Data are stored column-wise: an input batch ``X`` has shape ``(m_0, D)``.
* Layer ``k`` has weight ``W[k]`` of shape ``(n_{k+1}, n_k)``, input
  activations ``A[k]`` (``(n_k, D)``), pre-activations ``S[k] = W[k] @ A[k]``
  and errors ``E[k] = dL/dS[k]``.
* ``L`` is the *mean* loss over the ``D`` columns, so ``E`` already carries
  the ``1/D`` factor and the weight gradient is exactly ``E[k] @ A[k].T``.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

ACTIVATIONS = ("relu", "tanh")
LOSSES = ("ce", "mse")


class ShapeError(ValueError):
    """Raised when array shapes do not chain through the network."""


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based generator; identical streams on every platform."""
    return np.random.Generator(np.random.Philox(int(seed) & 0xFFFFFFFFFFFFFFFF))


@dataclass
class Network:
    weights: list[np.ndarray]
    activation: str = "relu"
    loss: str = "ce"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.loss not in LOSSES:
            raise ValueError(f"unknown loss {self.loss!r}")
        self.weights = [np.asarray(w, dtype=np.float64) for w in self.weights]
        for k, w in enumerate(self.weights):
            if w.ndim != 2:
                raise ShapeError(f"layer {k}: weight must be 2-D, got shape {w.shape}")
            if k and w.shape[1] != self.weights[k - 1].shape[0]:
                raise ShapeError(
                    f"layer {k}: expects {w.shape[1]} inputs but layer {k - 1} "
                    f"produces {self.weights[k - 1].shape[0]}"
                )

    @property
    def sizes(self) -> list[int]:
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    @property
    def shapes(self) -> list[tuple[int, int]]:
        return [w.shape for w in self.weights]

    @property
    def num_params(self) -> int:
        return sum(w.size for w in self.weights)

    def copy(self) -> "Network":
        return Network([w.copy() for w in self.weights], self.activation, self.loss)

    def flat(self) -> np.ndarray:
        return flatten(self.weights)


def init_network(
    sizes: Sequence[int], activation: str = "relu", loss: str = "ce", seed: int = 0
) -> Network:
    """Kaiming-He normal initialisation, ``std = sqrt(2 / fan_in)``."""
    rng = make_rng(seed)
    weights = [
        rng.standard_normal((n_out, n_in)) * np.sqrt(2.0 / n_in)
        for n_in, n_out in zip(sizes[:-1], sizes[1:])
    ]
    return Network(weights, activation, loss)


def flatten(mats: Sequence[np.ndarray]) -> np.ndarray:
    """Row-major vec of each layer matrix, layers concatenated input-to-output."""
    return np.concatenate([np.asarray(m, dtype=np.float64).ravel() for m in mats])


def unflatten(vec: np.ndarray, shapes: Sequence[tuple[int, int]]) -> list[np.ndarray]:
    vec = np.asarray(vec, dtype=np.float64)
    total = sum(r * c for r, c in shapes)
    if vec.shape != (total,):
        raise ShapeError(f"flat vector has shape {vec.shape}, expected ({total},)")
    out, pos = [], 0
    for r, c in shapes:
        out.append(vec[pos : pos + r * c].reshape(r, c))
        pos += r * c
    return out


@dataclass(frozen=True)
class BatchTrace:
    """Per-layer quantities recorded while processing one batch."""

    A: list[np.ndarray]
    S: list[np.ndarray]
    E: list[np.ndarray] | None = None
    E_F: list[np.ndarray] | None = None
    # 1/sqrt(D) per column: G = per-sample gradients times these weights
    col_weights: np.ndarray = field(default=None)

    @property
    def D(self) -> int:
        return self.A[0].shape[1]

    @property
    def logits(self) -> np.ndarray:
        return self.S[-1]


@dataclass(frozen=True)
class LabelSample:
    labels: np.ndarray
    seed: int


def _act(name, s):
    return np.maximum(s, 0.0) if name == "relu" else np.tanh(s)


def _act_grad(name, s, a):
    if name == "relu":
        return (s > 0).astype(np.float64)
    return 1.0 - a * a


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=0, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=0, keepdims=True)
    return z


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=0, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=0, keepdims=True))


def forward(net: Network, X: np.ndarray) -> BatchTrace:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] < 1:
        raise ShapeError(f"input must be a (features, D>=1) matrix, got shape {X.shape}")
    if X.shape[0] != net.sizes[0]:
        raise ShapeError(f"layer 0: expects {net.sizes[0]} input rows, got {X.shape[0]}")
    A, S = [X], []
    for k, w in enumerate(net.weights):
        s = w @ A[-1]
        S.append(s)
        if k < len(net.weights) - 1:
            A.append(_act(net.activation, s))
    return BatchTrace(A=A, S=S, col_weights=np.full(X.shape[1], 1.0 / np.sqrt(X.shape[1])))


def _check_targets(net: Network, trace: BatchTrace, targets) -> np.ndarray:
    D = trace.D
    targets = np.asarray(targets)
    if net.loss == "ce":
        targets = targets.reshape(-1)
        if targets.shape != (D,):
            raise ShapeError(f"expected {D} class labels, got {targets.shape[0]}")
        return targets.astype(np.int64)
    targets = np.asarray(targets, dtype=np.float64)
    if targets.ndim == 1 and trace.logits.shape[0] == 1:
        targets = targets[None, :]
    if targets.shape != trace.logits.shape:
        raise ShapeError(f"expected targets of shape {trace.logits.shape}, got {targets.shape}")
    return targets


def output_errors(net: Network, logits: np.ndarray, targets) -> np.ndarray:
    """Per-sample derivative of the loss w.r.t. the logits (no 1/D factor)."""
    if net.loss == "ce":
        err = softmax(logits)
        err[targets, np.arange(logits.shape[1])] -= 1.0
        return err
    return logits - targets


def cross_entropy(logits: np.ndarray, targets) -> np.ndarray:
    """Per-column ``-log softmax(logits)[target]``.

    Columns whose target already has the largest logit use
    ``log1p(sum_{c != y} exp(z_c - z_y))``, which stays accurate for tiny
    losses instead of rounding to exactly zero.
    """
    cols = np.arange(logits.shape[1])
    d = logits - logits[targets, cols]
    m = d.max(axis=0)
    rest = np.exp(d - m)
    rest[targets, cols] = 0.0
    confident = m <= 0
    tail = rest.sum(axis=0)
    # for confident columns m = 0 and the target term is exactly 1
    return np.where(confident, np.log1p(tail), m + np.log(tail + np.exp(-m)))


def loss_value(net: Network, logits: np.ndarray, targets) -> float:
    if net.loss == "ce":
        targets = np.asarray(targets).reshape(-1).astype(np.int64)
        return float(cross_entropy(logits, targets).mean())
    diff = logits - np.asarray(targets, dtype=np.float64).reshape(logits.shape)
    # a diverged run overflows to inf, which the caller records
    with np.errstate(over="ignore", invalid="ignore"):
        return float(0.5 * (diff * diff).sum(axis=0).mean())


def backprop_errors(net: Network, trace: BatchTrace, top: np.ndarray) -> list[np.ndarray]:
    """Propagate ``top`` (errors at the logits) down through every layer."""
    E = [None] * len(net.weights)
    E[-1] = top
    for k in range(len(net.weights) - 1, 0, -1):
        back = net.weights[k].T @ E[k]
        E[k - 1] = back * _act_grad(net.activation, trace.S[k - 1], trace.A[k])
    return E


def gradients(trace: BatchTrace, errors: Sequence[np.ndarray] | None = None) -> list[np.ndarray]:
    errors = trace.E if errors is None else errors
    return [e @ a.T for e, a in zip(errors, trace.A)]


def backward(net: Network, trace: BatchTrace, targets) -> tuple[BatchTrace, list[np.ndarray]]:
    """Fill ``E`` from supervised targets and return per-layer gradients."""
    targets = _check_targets(net, trace, targets)
    top = output_errors(net, trace.logits, targets) / trace.D
    E = backprop_errors(net, trace, top)
    trace = dataclasses.replace(trace, E=E)
    return trace, gradients(trace)


def sample_labels(logits: np.ndarray, loss: str, seed: int) -> LabelSample:
    """Draw one label per column from the model's predictive distribution."""
    rng = make_rng(seed)
    logits = np.asarray(logits, dtype=np.float64)
    if loss == "ce":
        cdf = np.cumsum(softmax(logits), axis=0)
        u = rng.random(logits.shape[1]) * cdf[-1]
        labels = (cdf < u[None, :]).sum(axis=0)
        labels = np.minimum(labels, logits.shape[0] - 1)
    elif loss == "mse":
        labels = logits + rng.standard_normal(logits.shape)
    else:
        raise ValueError(f"unknown loss {loss!r}")
    return LabelSample(labels=labels, seed=seed)


def backward_sampled(net: Network, trace: BatchTrace, sample: LabelSample) -> BatchTrace:
    """Same as :func:`backward` but with model-sampled labels, stored in ``E_F``."""
    targets = _check_targets(net, trace, sample.labels)
    top = output_errors(net, trace.logits, targets) / trace.D
    return dataclasses.replace(trace, E_F=backprop_errors(net, trace, top))


def loss_and_grad(net: Network, X, y) -> tuple[float, list[np.ndarray]]:
    trace = forward(net, X)
    _, grads = backward(net, trace, y)
    return loss_value(net, trace.logits, y), grads


def accuracy(net: Network, X, y) -> float:
    logits = forward(net, X).logits
    if net.loss != "ce":
        return float("nan")
    return float((logits.argmax(axis=0) == np.asarray(y).reshape(-1)).mean())
