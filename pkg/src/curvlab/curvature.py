"""Subsampled Fisher ``F = G G^T`` kept in factored form.

``G`` has one column per datapoint (an input paired with a label drawn from
the model, or every label for the full Fisher).  Column ``i`` is
``s_i * vec(e_i a_i^T)``, so only the layer inputs ``a_i`` and per-sample
errors ``e_i`` are stored.  Every product with ``G`` reduces to ordinary
matrix multiplications with those factors, and ``(lam I + F)^{-1} u`` is
obtained from a ``D x D`` system via the matrix inversion lemma.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.linalg

from .net import (
    BatchTrace,
    Network,
    ShapeError,
    backprop_errors,
    flatten,
    forward,
    output_errors,
    sample_labels,
    softmax,
    unflatten,
)

log = logging.getLogger(__name__)


class CurvatureError(np.linalg.LinAlgError):
    """The inner ``D x D`` system could not be factorised."""

    def __init__(self, msg, smallest_pivot=None):
        super().__init__(msg)
        self.smallest_pivot = smallest_pivot


class NonFiniteCurvature(CurvatureError):
    """Curvature statistics overflowed; the run has diverged."""


@dataclass
class ImplicitCurvature:
    """Factored ``G``: layer inputs ``A[k]`` (one column per *input*) and
    per-sample errors ``E[k]`` (one column per *datapoint*).

    ``col_input[i]`` says which input column datapoint ``i`` belongs to; it is
    ``None`` when datapoints and inputs coincide (MC mode).
    """

    A: list[np.ndarray]
    E: list[np.ndarray]
    scale: np.ndarray
    mode: str = "mc"
    col_input: np.ndarray | None = None
    classes: int | None = None

    def __post_init__(self):
        D = self.scale.shape[0]
        for k, (a, e) in enumerate(zip(self.A, self.E)):
            if e.shape[1] != D:
                raise ShapeError(f"layer {k}: {e.shape[1]} error columns, expected {D}")
            n_inputs = a.shape[1]
            if self.col_input is None and n_inputs != D:
                raise ShapeError(f"layer {k}: {n_inputs} input columns, expected {D}")

    @property
    def D(self) -> int:
        return self.scale.shape[0]

    @property
    def shapes(self) -> list[tuple[int, int]]:
        return [(e.shape[0], a.shape[0]) for a, e in zip(self.A, self.E)]

    @property
    def num_params(self) -> int:
        return sum(r * c for r, c in self.shapes)

    @cached_property
    def Es(self) -> list[np.ndarray]:
        return [e * self.scale for e in self.E]

    def layer(self, k: int) -> "ImplicitCurvature":
        return ImplicitCurvature(
            [self.A[k]], [self.E[k]], self.scale, self.mode, self.col_input, self.classes
        )

    def scaled(self, c: float) -> "ImplicitCurvature":
        """Same factors with every error multiplied by ``c`` (so ``F -> c^2 F``)."""
        return ImplicitCurvature(
            self.A, [c * e for e in self.E], self.scale, self.mode, self.col_input, self.classes
        )

    @property
    def grouped(self) -> bool:
        """Datapoint ``i * C + c`` pairs input ``i`` with class ``c``."""
        return bool(self.classes) and self.col_input is not None and (
            self.D == self.A[0].shape[1] * self.classes
        )

    def _expand(self, m: np.ndarray) -> np.ndarray:
        # input columns -> datapoint columns
        return m if self.col_input is None else m[:, self.col_input]

    def _reduce(self, m: np.ndarray) -> np.ndarray:
        # datapoint columns -> input columns (sum of datapoints sharing an input)
        if self.col_input is None:
            return m
        n_inputs = self.A[0].shape[1]
        if self.grouped:
            return m.reshape(m.shape[0], n_inputs, self.classes).sum(axis=2)
        out = np.zeros((m.shape[0], n_inputs))
        np.add.at(out.T, self.col_input, m.T)
        return out


def gram(curv: ImplicitCurvature) -> np.ndarray:
    """``G^T G`` as a sum over layers of Hadamard products of small Gram matrices."""
    out = np.zeros((curv.D, curv.D))
    for a, es in zip(curv.A, curv.Es):
        aa = a.T @ a
        if curv.col_input is not None:
            aa = aa[np.ix_(curv.col_input, curv.col_input)]
        out += aa * (es.T @ es)
    return out


def g_transpose_vec(curv: ImplicitCurvature, u: np.ndarray) -> np.ndarray:
    """Dot product of every scaled per-datapoint gradient with ``u``."""
    v = np.zeros(curv.D)
    for a, es, um in zip(curv.A, curv.Es, unflatten(u, curv.shapes)):
        t = um @ a
        if curv.grouped:
            C = curv.classes
            v += np.einsum("rn,rnc->nc", t, es.reshape(t.shape[0], -1, C)).reshape(-1)
        else:
            v += (curv._expand(t) * es).sum(axis=0)
    return v


def g_lincomb(curv: ImplicitCurvature, w: np.ndarray) -> np.ndarray:
    """``G w``: linear combination of the scaled per-datapoint gradients."""
    w = np.asarray(w, dtype=np.float64)
    if w.shape != (curv.D,):
        raise ShapeError(f"weights have shape {w.shape}, expected ({curv.D},)")
    if curv.grouped:
        C = curv.classes
        wr = w.reshape(-1, C)
        return flatten(
            [np.einsum("rnc,nc->rn", es.reshape(es.shape[0], -1, C), wr) @ a.T
             for a, es in zip(curv.A, curv.Es)]
        )
    return flatten([curv._reduce(es * w) @ a.T for a, es in zip(curv.A, curv.Es)])


def fisher_vec(curv: ImplicitCurvature, u: np.ndarray) -> np.ndarray:
    return g_lincomb(curv, g_transpose_vec(curv, u))


def _factor(K: np.ndarray):
    try:
        return scipy.linalg.cho_factor(K, lower=True)
    except np.linalg.LinAlgError:
        pass
    jitter = 1e-10 * np.trace(K) / K.shape[0]
    log.warning("inner system not positive definite, retrying with jitter %.3g", jitter)
    try:
        return scipy.linalg.cho_factor(K + jitter * np.eye(K.shape[0]), lower=True)
    except np.linalg.LinAlgError:
        pivot = float(np.linalg.eigvalsh(K).min())
        raise CurvatureError(
            f"I + G^T G / lam is not positive definite (smallest pivot {pivot:.3g})", pivot
        ) from None


def natural_gradient(curv: ImplicitCurvature, u: np.ndarray, lam: float) -> np.ndarray:
    """Exact ``(lam I + G G^T)^{-1} u`` through the ``D x D`` Woodbury system."""
    if not lam > 0:
        raise ValueError(f"damping must be positive, got {lam}")
    u = np.asarray(u, dtype=np.float64)
    if u.shape != (curv.num_params,):
        raise ShapeError(f"vector has shape {u.shape}, expected ({curv.num_params},)")
    K = np.eye(curv.D) + gram(curv) / lam
    w = scipy.linalg.cho_solve(_factor(K), g_transpose_vec(curv, u))
    return u / lam - g_lincomb(curv, w) / lam**2


def natural_gradient_blockdiag(curv: ImplicitCurvature, u: np.ndarray, lam: float) -> np.ndarray:
    """Layerwise natural gradient: each layer uses only its own Fisher block."""
    parts = unflatten(u, curv.shapes)
    return np.concatenate(
        [natural_gradient(curv.layer(k), p.ravel(), lam) for k, p in enumerate(parts)]
    )


def natural_gradient_cg(
    curv: ImplicitCurvature,
    u: np.ndarray,
    lam: float,
    rtol: float = 1e-10,
    maxiter: int = 2000,
    x0: np.ndarray | None = None,
    precond=None,
) -> tuple[np.ndarray, dict]:
    """Conjugate gradients on ``(lam I + F) x = u`` using implicit ``F`` products.

    Used when ``D`` is too large for a dense ``D x D`` factorisation (e.g. the
    full Fisher over a thousand inputs).  ``precond`` is an optional symmetric
    positive definite approximation of ``(lam I + F)^{-1}``; it changes the
    iteration count, not the solution.  Returns the solution and a dict with
    the iteration count and final relative residual.
    """
    if not lam > 0:
        raise ValueError(f"damping must be positive, got {lam}")
    u = np.asarray(u, dtype=np.float64)
    x = np.zeros_like(u) if x0 is None else np.array(x0, dtype=np.float64)
    r = u - (lam * x + fisher_vec(curv, x)) if x0 is not None else u.copy()
    unorm = np.sqrt(u @ u)
    if unorm == 0:
        return x, {"iters": 0, "rel_residual": 0.0}
    z = r if precond is None else precond(r)
    p = z.copy()
    rz = r @ z
    it = 0
    while it < maxiter and np.sqrt(r @ r) > rtol * unorm:
        Ap = lam * p + fisher_vec(curv, p)
        alpha = rz / (p @ Ap)
        x += alpha * p
        r -= alpha * Ap
        z = r if precond is None else precond(r)
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
        it += 1
    return x, {"iters": it, "rel_residual": float(np.sqrt(r @ r) / unorm)}


def per_sample_errors(net: Network, trace: BatchTrace, targets) -> list[np.ndarray]:
    """Backpropagated errors for each column without the ``1/D`` mean factor."""
    return backprop_errors(net, trace, output_errors(net, trace.logits, targets))


def curvature_from_trace(
    net: Network, trace: BatchTrace, mode: str = "mc", seed: int = 0
) -> ImplicitCurvature:
    N = trace.D
    if mode == "mc":
        sample = sample_labels(trace.logits, net.loss, seed)
        E = per_sample_errors(net, trace, sample.labels)
        return ImplicitCurvature(list(trace.A), E, np.full(N, 1.0 / np.sqrt(N)), "mc")
    if mode != "full":
        raise ValueError(f"unknown Fisher mode {mode!r}")
    if net.loss != "ce":
        raise ValueError("full Fisher needs an enumerable likelihood (cross-entropy)")
    probs = softmax(trace.logits)
    C = probs.shape[0]
    per_class = [per_sample_errors(net, trace, np.full(N, c)) for c in range(C)]
    # column i*C + c  <->  (input i, class c)
    E = [
        np.stack([pc[k] for pc in per_class], axis=2).reshape(-1, N * C)
        for k in range(len(net.weights))
    ]
    scale = np.sqrt(probs.T.reshape(-1) / N)
    return ImplicitCurvature(list(trace.A), E, scale, "full", np.repeat(np.arange(N), C), C)


def build_curvature(net: Network, X, mode: str = "mc", seed: int = 0) -> ImplicitCurvature:
    return curvature_from_trace(net, forward(net, X), mode, seed)


class CurvatureSource:
    """Chooses which minibatch the Fisher is estimated on.

    ``same-batch`` reuses the gradient batch.  ``independent-batch`` uses the
    previous minibatch so that the Fisher and gradient estimates are
    independent; on the very first step there is no previous batch and the
    current one is used.
    """

    POLICIES = ("same-batch", "independent-batch")

    def __init__(self, policy: str = "same-batch"):
        if policy not in self.POLICIES:
            raise ValueError(f"unknown curvature policy {policy!r}")
        self.policy = policy
        self._prev = None

    def select(self, batch):
        chosen = batch
        if self.policy == "independent-batch" and self._prev is not None:
            chosen = self._prev
        self._prev = batch
        return chosen


def curvature_source_policy(policy: str) -> CurvatureSource:
    return CurvatureSource(policy)

