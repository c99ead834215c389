"""KFAC (heuristic and standard damping), FOOF, natural gradients and baselines.

Kronecker factors for a layer with weight ``W`` (``n x m``):

* ``Sigma_A``: moving average of ``A A^T / D`` (``m x m``)
* ``Sigma_E``: moving average of ``E_s E_s^T / D`` (``n x n``) where ``E_s`` are
  per-sample errors for model-sampled labels.

With the row-major vec used everywhere, the layer's Fisher block is
approximated by ``Sigma_E (x) Sigma_A`` and a preconditioned update is
``P_E @ grad @ P_A``.

Functions in the top half operate on single layers and return *directions*
(not yet multiplied by the learning rate); the ``Optimizer`` classes below
tie them into a training step.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from . import curvature as cv
from .net import (
    Network,
    backward,
    backward_sampled,
    flatten,
    forward,
    loss_value,
    sample_labels,
    unflatten,
)

log = logging.getLogger(__name__)

KINDS = ("sgd", "adam", "kfac-heuristic", "kfac-standard", "foof", "ng", "ng-blockdiag")

RATIO_CLAMP = (1e-12, 1e12)


# --------------------------------------------------------------------------
# single-layer algebra


class EMA:
    """Normalised exponential moving average of matrices.

    Equivalent to initialising the average with the first observation, so the
    current value is always a convex combination of what has been seen.
    """

    def __init__(self, decay: float):
        if not 0.0 <= decay < 1.0:
            raise ValueError(f"EMA decay must lie in [0, 1), got {decay}")
        self.decay = decay
        self._raw = None
        self.weight = 0.0
        self.count = 0

    def update(self, x: np.ndarray) -> None:
        m = self.decay
        self._raw = (1.0 - m) * x if self._raw is None else m * self._raw + (1.0 - m) * x
        self.weight = m * self.weight + (1.0 - m)
        self.count += 1

    @property
    def value(self) -> np.ndarray | None:
        return None if self._raw is None else self._raw / self.weight

    def coefficients(self) -> np.ndarray:
        """Weights given to observations 1..count (oldest first)."""
        m, k = self.decay, self.count
        w = np.array([(1.0 - m) * m ** (k - 1 - i) for i in range(k)])
        return w / self.weight


def damping_split(
    lam: float, sigma_a: np.ndarray, sigma_e: np.ndarray, warn: bool = True
) -> tuple[float, float]:
    """Split ``lam`` into ``(lam_A, lam_E)`` with product ``lam`` and ratio
    ``n Tr(Sigma_A) / (m Tr(Sigma_E))`` for a layer with ``n`` outputs, ``m`` inputs."""
    m, n = sigma_a.shape[0], sigma_e.shape[0]
    tr_a, tr_e = float(np.trace(sigma_a)), float(np.trace(sigma_e))
    num, den = n * tr_a, m * tr_e
    if num <= 0 and den <= 0:
        if warn:
            log.warning("both Kronecker factors have zero trace; using ratio 1")
        ratio = 1.0
    elif num <= 0 or den <= 0:
        if warn:
            log.warning("Kronecker factor with zero trace; clamping damping ratio")
        ratio = RATIO_CLAMP[0] if num <= 0 else RATIO_CLAMP[1]
    else:
        ratio = min(max(num / den, RATIO_CLAMP[0]), RATIO_CLAMP[1])
    return math.sqrt(lam * ratio), math.sqrt(lam / ratio)


def damped_inverse(sigma: np.ndarray, lam: float) -> np.ndarray:
    """``(sigma + lam I)^{-1}`` by Cholesky; singular input raises ``CurvatureError``."""
    mat = sigma + lam * np.eye(sigma.shape[0])
    if not np.all(np.isfinite(mat)):
        raise cv.NonFiniteCurvature("damped factor has non-finite entries", smallest_pivot=math.nan)
    try:
        c = cho_factor(mat)
    except np.linalg.LinAlgError:
        pivot = float(np.linalg.eigvalsh(mat).min())
        raise cv.CurvatureError(
            f"damped factor is not positive definite (lam={lam})", smallest_pivot=pivot
        ) from None
    inv = cho_solve(c, np.eye(mat.shape[0]))
    return 0.5 * (inv + inv.T)


def kfac_update_heuristic(grad: np.ndarray, p_a: np.ndarray, p_e: np.ndarray) -> np.ndarray:
    """``(Sigma_E + lam_E I)^{-1} grad (Sigma_A + lam_A I)^{-1}`` from cached inverses."""
    return p_e @ grad @ p_a


@dataclass
class Eigenbasis:
    qa: np.ndarray
    la: np.ndarray
    qe: np.ndarray
    le: np.ndarray

    @classmethod
    def of(cls, sigma_a: np.ndarray, sigma_e: np.ndarray) -> "Eigenbasis":
        la, qa = np.linalg.eigh(sigma_a)
        le, qe = np.linalg.eigh(sigma_e)
        return cls(qa, la, qe, le)


def kfac_update_standard(grad: np.ndarray, basis: Eigenbasis, lam: float) -> np.ndarray:
    """``(Sigma_E (x) Sigma_A + lam I)^{-1} vec(grad)`` via both eigenbases."""
    rotated = basis.qe.T @ grad @ basis.qa
    rotated /= np.outer(basis.le, basis.la) + lam
    return basis.qe @ rotated @ basis.qa.T


def foof_update(grad: np.ndarray, p_a: np.ndarray, eta: float = 1.0) -> np.ndarray:
    """``eta * grad @ (Sigma_A + lam I)^{-1}``.

    Since ``grad = E A^T``, this is the ridge-regression solution for an update
    that moves the layer's outputs along ``E``.
    """
    return eta * grad @ p_a


def amortization_schedule(t: int, T: int, S: int) -> dict:
    if not 1 <= S <= T:
        raise ValueError(f"need 1 <= S <= T, got S={S}, T={T}")
    return {"refresh_inverse": t % T == 0, "accumulate": (t + S) % T < S}


# --------------------------------------------------------------------------
# optimizers


@dataclass
class OptimizerConfig:
    kind: str = "sgd"
    lr: float = 0.1
    damping: float = 1.0
    momentum: float = 0.0
    ema_decay: float = 0.95
    T: int = 1
    S: int = 1
    policy: str = "same-batch"
    subsampled: bool = False
    fisher: str = "mc"
    weight_decay: float = 0.0
    warmup_batches: int = 50
    foof_kfac_damping: bool = False
    ng_solver: str = "auto"
    cg_rtol: float = 1e-10
    cg_maxiter: int = 2000
    cg_precondition: bool = True
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown optimizer kind {self.kind!r}")
        if not self.lr > 0:
            raise ValueError(f"learning rate must be positive, got {self.lr}")
        if self.kind in ("ng", "ng-blockdiag") and not self.damping > 0:
            raise ValueError(f"{self.kind} needs positive damping, got {self.damping}")
        if self.damping < 0:
            raise ValueError(f"damping must be non-negative, got {self.damping}")
        if self.subsampled:
            self.ema_decay = 0.0
        if not 1 <= self.S <= self.T:
            raise ValueError(f"need 1 <= S <= T, got S={self.S}, T={self.T}")

    @property
    def uses_kronecker(self) -> bool:
        return self.kind in ("kfac-heuristic", "kfac-standard", "foof")


@dataclass
class Proposal:
    """Everything one optimizer step computes before touching the weights."""

    loss: float
    grads: list[np.ndarray]
    updates: list[np.ndarray]
    info: dict = field(default_factory=dict)


class Optimizer:
    """Base class: ``step`` = ``propose`` then ``apply``."""

    needs_warmup = False

    def __init__(self, config: OptimizerConfig, seed: int = 0):
        self.config = config
        self.seed = seed
        self.t = 0
        self._velocity = None

    def warm_start(self, net: Network, batches) -> None:
        """Accumulate curvature statistics before training (no-op by default)."""

    def directions(self, net, trace, grads, X, y) -> tuple[list[np.ndarray], dict]:
        raise NotImplementedError

    def _step_seed(self, salt: int = 0) -> int:
        return (self.seed * 1_000_003 + self.t * 7919 + salt) & 0xFFFFFFFF

    def propose(self, net: Network, X, y) -> Proposal:
        trace = forward(net, X)
        trace, grads = backward(net, trace, y)
        loss = loss_value(net, trace.logits, y)
        dirs, info = self.directions(net, trace, grads, X, y)
        mu = self.config.momentum
        if mu:
            if self._velocity is None:
                self._velocity = [np.zeros_like(d) for d in dirs]
            # velocity is committed in apply()
            dirs = [mu * v + d for v, d in zip(self._velocity, dirs)]
        updates = [-self.config.lr * d for d in dirs]
        if self.config.weight_decay:
            updates = [
                u - self.config.lr * self.config.weight_decay * w
                for u, w in zip(updates, net.weights)
            ]
        info["dirs"] = dirs
        return Proposal(loss, grads, updates, info)

    def apply(self, net: Network, proposal: Proposal) -> None:
        for w, u in zip(net.weights, proposal.updates):
            w += u
        if self.config.momentum:
            self._velocity = proposal.info["dirs"]
        self.t += 1

    def step(self, net: Network, X, y) -> Proposal:
        proposal = self.propose(net, X, y)
        self.apply(net, proposal)
        return proposal


class SGD(Optimizer):
    """Heavy ball: ``buf <- mu buf + grad``; ``W <- W - lr buf``."""

    def directions(self, net, trace, grads, X, y):
        return grads, {}


def sgd_momentum_step(grad: np.ndarray, buf: np.ndarray | None, lr: float, mu: float):
    """Functional heavy-ball step; returns ``(delta_W, new_buffer)``."""
    buf = grad.copy() if buf is None else mu * buf + grad
    return -lr * buf, buf


def adam_step(grad, state: dict | None, lr, betas=(0.9, 0.999), eps=1e-8):
    """Functional Adam step; ``state`` holds ``m``, ``v`` and ``t``."""
    b1, b2 = betas
    if state is None:
        state = {"m": np.zeros_like(grad), "v": np.zeros_like(grad), "t": 0}
    t = state["t"] + 1
    m = b1 * state["m"] + (1 - b1) * grad
    v = b2 * state["v"] + (1 - b2) * grad * grad
    mhat = m / (1 - b1**t)
    vhat = v / (1 - b2**t)
    return -lr * mhat / (np.sqrt(vhat) + eps), {"m": m, "v": v, "t": t}


class Adam(Optimizer):
    def __init__(self, config, seed=0):
        super().__init__(config, seed)
        self.state = None

    def propose(self, net, X, y):
        trace = forward(net, X)
        trace, grads = backward(net, trace, y)
        loss = loss_value(net, trace.logits, y)
        states = self.state or [None] * len(grads)
        updates, new_states = [], []
        for g, st in zip(grads, states):
            d, st = adam_step(g, st, self.config.lr, self.config.adam_betas, self.config.adam_eps)
            updates.append(d)
            new_states.append(st)
        if self.config.weight_decay:
            updates = [
                u - self.config.lr * self.config.weight_decay * w
                for u, w in zip(updates, net.weights)
            ]
        return Proposal(loss, grads, updates, {"adam_state": new_states})

    def apply(self, net, proposal):
        for w, u in zip(net.weights, proposal.updates):
            w += u
        self.state = proposal.info["adam_state"]
        self.t += 1


class KroneckerState:
    """Per-layer moving averages, damping split and cached inverses."""

    def __init__(self, shapes, decay: float, lam: float, need_e: bool = True):
        self.shapes = list(shapes)
        self.lam = lam
        self.need_e = need_e
        self.ema_a = [EMA(decay) for _ in shapes]
        self.ema_e = [EMA(decay) for _ in shapes] if need_e else None
        self.P_A = [None] * len(shapes)
        self.P_E = [None] * len(shapes)
        self.split = [None] * len(shapes)
        self.basis = [None] * len(shapes)
        self.refreshes = 0
        self._warned = False

    def sigma_a(self, k):
        v = self.ema_a[k].value
        m = self.shapes[k][1]
        return np.zeros((m, m)) if v is None else v

    def sigma_e(self, k):
        v = self.ema_e[k].value if self.need_e else None
        n = self.shapes[k][0]
        return np.zeros((n, n)) if v is None else v

    def update_factors(self, trace) -> None:
        for k, a in enumerate(trace.A):
            D = a.shape[1]
            self.ema_a[k].update(a @ a.T / D)
            if self.need_e:
                # E_F carries 1/D; per-sample errors are D * E_F
                e = trace.E_F[k]
                self.ema_e[k].update(D * (e @ e.T))

    def update_from_curvature(self, curv: cv.ImplicitCurvature) -> None:
        """Factors from an explicit curvature (MC or full Fisher columns)."""
        for k, (a, es) in enumerate(zip(curv.A, curv.Es)):
            self.ema_a[k].update(a @ a.T / a.shape[1])
            if self.need_e:
                self.ema_e[k].update(es @ es.T)

    def refresh(self, mode: str) -> None:
        for k in range(len(self.shapes)):
            sa = self.sigma_a(k)
            if mode == "foof":
                self.P_A[k] = damped_inverse(sa, self.lam)
                continue
            se = self.sigma_e(k)
            if mode == "kfac-standard":
                self.basis[k] = Eigenbasis.of(sa, se)
                continue
            # warn once per run, not once per refresh
            lam_a, lam_e = damping_split(self.lam, sa, se, warn=not self._warned)
            if np.trace(sa) <= 0 or np.trace(se) <= 0:
                self._warned = True
            self.split[k] = (lam_a, lam_e)
            self.P_A[k] = damped_inverse(sa, lam_a)
            self.P_E[k] = damped_inverse(se, lam_e)
        self.refreshes += 1


def update_factors(state: KroneckerState, trace) -> KroneckerState:
    state.update_factors(trace)
    return state


class KroneckerOptimizer(Optimizer):
    """Shared machinery for KFAC (both dampings) and FOOF."""

    needs_warmup = True

    def __init__(self, config, shapes, seed=0):
        super().__init__(config, seed)
        self.mode = config.kind
        need_e = config.kind != "foof" or config.foof_kfac_damping
        self.state = KroneckerState(shapes, config.ema_decay, config.damping, need_e=need_e)
        if config.kind == "foof" and config.foof_kfac_damping:
            self.mode = "foof-kfac-damping"


    def _observe(self, net, trace):
        if self.state.need_e and self.config.fisher == "full":
            self.state.update_from_curvature(cv.curvature_from_trace(net, trace, "full"))
            return
        if self.state.need_e:
            sample = sample_labels(trace.logits, net.loss, self._step_seed(1))
            trace = backward_sampled(net, trace, sample)
        self.state.update_factors(trace)

    def warm_start(self, net, batches):
        n = 0
        for X, _ in batches:
            self.t = -1 - n
            self._observe(net, forward(net, X))
            n += 1
        self.t = 0
        if n:
            self.state.refresh(self.mode)

    def directions(self, net, trace, grads, X, y):
        sched = amortization_schedule(self.t, self.config.T, self.config.S)
        if sched["accumulate"]:
            self._observe(net, trace)
        if sched["refresh_inverse"] or self.state.refreshes == 0:
            self.state.refresh(self.mode)
        st = self.state
        if self.mode == "foof":
            dirs = [foof_update(g, st.P_A[k]) for k, g in enumerate(grads)]
        elif self.mode == "foof-kfac-damping":
            # KFAC with the second factor replaced by lam_E I
            dirs = [foof_update(g, st.P_A[k]) / st.split[k][1] for k, g in enumerate(grads)]
        elif self.mode == "kfac-standard":
            dirs = [kfac_update_standard(g, st.basis[k], st.lam) for k, g in enumerate(grads)]
        else:
            dirs = [kfac_update_heuristic(g, st.P_A[k], st.P_E[k]) for k, g in enumerate(grads)]
        return dirs, {"schedule": sched, "split": list(st.split)}


def kronecker_preconditioner(curv: cv.ImplicitCurvature, lam: float):
    """Block-diagonal KFAC inverse built from ``curv``, for preconditioned CG.

    Each layer block is ``(Sigma_E + lam_E I)^{-1} (x) (Sigma_A + lam_A I)^{-1}``
    with the heuristic damping split; it is symmetric positive definite for
    ``lam > 0``, which is all CG needs.
    """
    blocks = []
    for a, es in zip(curv.A, curv.Es):
        sa, se = a @ a.T / a.shape[1], es @ es.T
        lam_a, lam_e = damping_split(lam, sa, se, warn=False)
        blocks.append((damped_inverse(se, lam_e), damped_inverse(sa, lam_a)))

    def apply(r):
        return flatten([pe @ m @ pa for (pe, pa), m in zip(blocks, unflatten(r, curv.shapes))])

    return apply


class NaturalGradient(Optimizer):
    """Exact subsampled natural gradient (full network or block-diagonal)."""

    def __init__(self, config, seed=0):
        super().__init__(config, seed)
        self.source = cv.CurvatureSource(config.policy)
        self.last_solve = {}
        self._x_prev = None

    def curvature(self, net, X):
        return cv.build_curvature(net, X, self.config.fisher, self._step_seed(2))

    def _preconditioner(self, curv, lam):
        if not self.config.cg_precondition:
            return None
        try:
            return kronecker_preconditioner(curv, lam)
        except cv.CurvatureError as exc:
            # only affects the iteration count; plain CG solves the same system
            log.warning("no CG preconditioner this step: %s", exc)
            return None

    def solve(self, curv, u):
        lam = self.config.damping
        solver = self.config.ng_solver
        if solver == "auto":
            solver = "woodbury" if curv.D <= 3000 else "cg"
        if solver == "cg":
            cfg = self.config
            if cfg.kind == "ng-blockdiag":
                parts, infos = [], []
                for k, p in enumerate(unflatten(u, curv.shapes)):
                    layer = curv.layer(k)
                    pre = self._preconditioner(layer, lam)
                    x, inf = cv.natural_gradient_cg(
                        layer, p.ravel(), lam, cfg.cg_rtol, cfg.cg_maxiter, precond=pre
                    )
                    parts.append(x)
                    infos.append(inf)
                self.last_solve = {"solver": "cg", "iters": sum(i["iters"] for i in infos),
                                   "rel_residual": max(i["rel_residual"] for i in infos)}
                return np.concatenate(parts)
            # previous solution as a warm start; the Fisher drifts slowly between steps
            pre = self._preconditioner(curv, lam)
            x, info = cv.natural_gradient_cg(
                curv, u, lam, cfg.cg_rtol, cfg.cg_maxiter, x0=self._x_prev, precond=pre
            )
            if info["rel_residual"] > cfg.cg_rtol:
                log.warning("CG stopped at relative residual %.3g", info["rel_residual"])
            self._x_prev = x.copy()
            self.last_solve = {"solver": "cg", **info}
            return x
        self.last_solve = {"solver": "woodbury"}
        if self.config.kind == "ng-blockdiag":
            return cv.natural_gradient_blockdiag(curv, u, lam)
        return cv.natural_gradient(curv, u, lam)

    def directions(self, net, trace, grads, X, y):
        Xf = self.source.select(X)
        curv = self.curvature(net, Xf)
        d = self.solve(curv, flatten(grads))
        return unflatten(d, net.shapes), dict(self.last_solve)


def make_optimizer(config: OptimizerConfig, net: Network, seed: int = 0) -> Optimizer:
    if config.kind == "sgd":
        return SGD(config, seed)
    if config.kind == "adam":
        return Adam(config, seed)
    if config.uses_kronecker:
        return KroneckerOptimizer(config, net.shapes, seed)
    return NaturalGradient(config, seed)
