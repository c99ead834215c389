"""Implicit-vs-dense agreement checks over a matrix of tiny random instances."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import curvature as cv
from . import laplace as lp
from . import oracle as orc
from . import optim
from .net import Network, backward, flatten, forward, init_network, make_rng

# shared tolerance table: products 1e-10, solves 1e-8
TOLERANCES = {
    "gram": 1e-10,
    "g_transpose_vec": 1e-10,
    "g_lincomb": 1e-10,
    "woodbury_natural_gradient": 1e-8,
    "blockdiag_natural_gradient": 1e-8,
    "woodbury_identity": 1e-8,
    "fisher_psd": 1e-10,
    "kfac_heuristic_dense": 1e-10,
    "kfac_heuristic_cross_terms": 1e-10,
    "kfac_standard_eigenbasis": 1e-8,
    "damping_split_product": 1e-12,
    "foof_normal_equations": 1e-10,
    "foof_objective_gradient": 1e-8,
    "kfac_foof_limit": 1e-3,
    "laplace_identity": 1e-10,
    "laplace_U": 1e-10,
    "finite_difference_gradient": 1e-5,
}


@dataclass
class Instance:
    net: Network
    X: np.ndarray
    y: np.ndarray
    mode: str
    lam: float
    seed: int

    @property
    def label(self) -> str:
        return (f"sizes={self.net.sizes} act={self.net.activation} loss={self.net.loss} "
                f"mode={self.mode} D={self.X.shape[1]}")


def instance_matrix(count: int = 16, seed: int = 0) -> list[Instance]:
    """Tiny nets: 1-3 layers, widths <= 8, up to 20 datapoints, both losses."""
    rng = make_rng(seed)
    out = []
    for i in range(count):
        depth = 1 + i % 3
        loss = "ce" if i % 2 == 0 else "mse"
        act = "relu" if i % 4 < 2 else "tanh"
        sizes = [int(rng.integers(2, 7))] + [int(rng.integers(2, 9)) for _ in range(depth)]
        if loss == "ce":
            sizes[-1] = max(sizes[-1], 2)
        mode = "full" if loss == "ce" and i % 4 == 0 else "mc"
        classes = sizes[-1]
        # full mode has B * classes columns; keep D <= 20
        B = int(rng.integers(1, 20 // classes + 1)) if mode == "full" else int(rng.integers(2, 21))
        net = init_network(sizes, act, loss, seed=seed * 1000 + i)
        X = rng.standard_normal((sizes[0], B))
        y = rng.integers(0, classes, B) if loss == "ce" else rng.standard_normal((classes, B))
        lam = float(10.0 ** rng.uniform(-3, 1))
        out.append(Instance(net, X, y, mode, lam, seed * 1000 + i))
    return out


@dataclass
class CheckResult:
    name: str
    max_dev: float
    tol: float
    cases: int

    @property
    def passed(self) -> bool:
        return bool(self.max_dev <= self.tol)


def _rel(a, b):
    den = max(np.linalg.norm(b), 1e-300)
    return float(np.linalg.norm(a - b) / den)


def _scaled_abs(a, b):
    return float(np.abs(a - b).max() / max(1.0, np.abs(b).max()))


class _Collector:
    def __init__(self):
        self.devs: dict[str, list[float]] = {k: [] for k in TOLERANCES}

    def add(self, name, dev):
        self.devs[name].append(float(dev))

    def results(self) -> list[CheckResult]:
        return [
            CheckResult(k, max(v) if v else float("nan"), TOLERANCES[k], len(v))
            for k, v in self.devs.items()
        ]


def _curvature_checks(inst: Instance, c: _Collector):
    curv = cv.build_curvature(inst.net, inst.X, inst.mode, seed=inst.seed)
    b = orc.bundle(curv)
    rng = make_rng(inst.seed + 1)
    u = rng.standard_normal(curv.num_params)
    w = rng.standard_normal(curv.D)
    c.add("gram", _scaled_abs(cv.gram(curv), b.G.T @ b.G))
    c.add("g_transpose_vec", _scaled_abs(cv.g_transpose_vec(curv, u), b.G.T @ u))
    c.add("g_lincomb", _scaled_abs(cv.g_lincomb(curv, w), b.G @ w))
    ng = cv.natural_gradient(curv, u, inst.lam)
    c.add("woodbury_natural_gradient", _rel(ng, orc.dense_natural_gradient(b.F, u, inst.lam)))
    c.add("woodbury_identity", _rel(inst.lam * ng + b.F @ ng, u))
    bd = cv.natural_gradient_blockdiag(curv, u, inst.lam)
    c.add("blockdiag_natural_gradient", _rel(bd, orc.dense_blockdiag_natural_gradient(b, u, inst.lam)))
    eig = np.linalg.eigvalsh(b.F)
    c.add("fisher_psd", max(0.0, -eig.min()))
    return curv, b


def _kronecker_checks(inst: Instance, c: _Collector):
    net = inst.net
    tr = forward(net, inst.X)
    tr, grads = backward(net, tr, inst.y)
    curv = cv.build_curvature(net, inst.X, inst.mode, seed=inst.seed)
    lam = inst.lam
    for k, g in enumerate(grads):
        a = tr.A[k]
        sa = a @ a.T / a.shape[1]
        se = curv.Es[k] @ curv.Es[k].T
        lam_a, lam_e = optim.damping_split(lam, sa, se)
        c.add("damping_split_product", abs(lam_a * lam_e - lam) / lam)

        p_a, p_e = optim.damped_inverse(sa, lam_a), optim.damped_inverse(se, lam_e)
        heur = optim.kfac_update_heuristic(g, p_a, p_e)
        dense_h = orc.dense_kron_curvature(sa, se, "heuristic", lam_a=lam_a, lam_e=lam_e)
        c.add("kfac_heuristic_dense", _rel(heur, orc.dense_kron_solve(dense_h, g)))
        expanded = (orc.dense_kron_curvature(sa, se, "standard", lam=lam)
                    + orc.dense_kron_curvature(sa, se, "cross", lam_a=lam_a, lam_e=lam_e))
        c.add("kfac_heuristic_cross_terms", _scaled_abs(dense_h, expanded))

        std = optim.kfac_update_standard(g, optim.Eigenbasis.of(sa, se), lam)
        dense_s = orc.dense_kron_curvature(sa, se, "standard", lam=lam)
        c.add("kfac_standard_eigenbasis", _rel(std, orc.dense_kron_solve(dense_s, g)))

        eta = 0.7
        foof = optim.foof_update(g, optim.damped_inverse(sa, lam), eta)
        resid = (lam * np.eye(sa.shape[0]) + sa) @ foof.T - eta * (a @ tr.E[k].T)
        c.add("foof_normal_equations", float(np.abs(resid).max()))
        D = a.shape[1]
        a_t, e_t = a / np.sqrt(D), tr.E[k] * np.sqrt(D)
        obj_grad = (foof @ a_t - eta * e_t) @ a_t.T + lam * foof
        c.add("foof_objective_gradient", float(np.abs(obj_grad).max()))

        # lam_E -> infinity: lam_E * KFAC turns into FOOF with damping lam_A
        big = 1e8 * max(np.linalg.norm(se, 2), 1e-12)
        limit = big * optim.kfac_update_heuristic(g, p_a, optim.damped_inverse(se, big))
        f_ref = optim.foof_update(g, p_a)
        if np.linalg.norm(f_ref) > 0:
            from .harness import alignment

            align = alignment(limit, f_ref, sa + lam_a * np.eye(sa.shape[0]))
            c.add("kfac_foof_limit", 1.0 - align)


def _laplace_checks(inst: Instance, curv, b, c: _Collector):
    rng = make_rng(inst.seed + 2)
    prior = rng.uniform(0.5, 2.0, curv.num_params)
    D = float(inst.X.shape[1])
    lhs, rhs = orc.dense_laplace_identity(prior, b.G, D)
    c.add("laplace_identity", _scaled_abs(lhs, rhs))
    spec = lp.LaplaceSpec(prior, curv, D, seed=inst.seed)
    V = np.sqrt(D) * b.G / np.sqrt(prior)[:, None]
    c.add("laplace_U", _scaled_abs(lp.LaplaceSampler(spec).U, np.eye(curv.D) + V.T @ V))


def _gradient_check(inst: Instance, c: _Collector):
    fd = orc.finite_diff_grad(inst.net, inst.X, inst.y, 1e-5)
    an = orc.analytic_grad(inst.net, inst.X, inst.y)
    c.add("finite_difference_gradient", _rel(an, fd))


def validate_oracle(count: int = 16, seed: int = 0) -> list[CheckResult]:
    c = _Collector()
    for inst in instance_matrix(count, seed):
        curv, b = _curvature_checks(inst, c)
        _kronecker_checks(inst, c)
        _laplace_checks(inst, curv, b, c)
        _gradient_check(inst, c)
    return c.results()


def format_report(results: list[CheckResult]) -> str:
    lines = []
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        lines.append(f"{status}  {r.name:<28} max_dev={r.max_dev:.3e}  tol={r.tol:.0e}  cases={r.cases}")
    return "\n".join(lines)
