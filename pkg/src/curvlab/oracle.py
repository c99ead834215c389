"""Brute-force reference computations for tiny instances.

Everything here materialises ``G``, ``F`` and Kronecker products explicitly
and uses dense solves.  Nothing in the training path imports this module;
it exists for the test-suite and the ``validate-oracle`` command.

vec ordering: row-major within each layer matrix, layers concatenated from
input to output (the same as :func:`curvlab.net.flatten`).  Under this
ordering ``vec(P X Q) = (P (x) Q^T) vec(X)``, so a Kronecker-factored layer
block is ``Sigma_E (x) Sigma_A``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .curvature import ImplicitCurvature
from .net import Network, flatten, loss_and_grad, unflatten

MAX_ENTRIES = 10**6


class OracleSizeError(ValueError):
    pass


def _guard(*dims):
    total = int(np.prod(dims))
    if total > MAX_ENTRIES:
        raise OracleSizeError(f"dense oracle refused: {dims} has {total} entries > {MAX_ENTRIES}")


@dataclass
class DenseBundle:
    G: np.ndarray
    F: np.ndarray
    shapes: list[tuple[int, int]]

    @property
    def offsets(self) -> list[int]:
        out = [0]
        for r, c in self.shapes:
            out.append(out[-1] + r * c)
        return out

    def block(self, k: int) -> np.ndarray:
        o = self.offsets
        return self.F[o[k] : o[k + 1], o[k] : o[k + 1]]


def assemble_G(curv: ImplicitCurvature) -> np.ndarray:
    """Explicit ``n x D`` matrix whose columns are scaled per-datapoint gradients."""
    _guard(curv.num_params, curv.D)
    cols = []
    for i in range(curv.D):
        j = i if curv.col_input is None else curv.col_input[i]
        cols.append(
            curv.scale[i] * np.concatenate([np.outer(e[:, i], a[:, j]).ravel()
                                            for a, e in zip(curv.A, curv.E)])
        )
    return np.stack(cols, axis=1)


def bundle(curv: ImplicitCurvature) -> DenseBundle:
    G = assemble_G(curv)
    _guard(G.shape[0], G.shape[0])
    return DenseBundle(G, G @ G.T, curv.shapes)


def dense_natural_gradient(F: np.ndarray, u: np.ndarray, lam: float) -> np.ndarray:
    return np.linalg.solve(lam * np.eye(F.shape[0]) + F, u)


def dense_blockdiag_natural_gradient(b: DenseBundle, u: np.ndarray, lam: float) -> np.ndarray:
    o = b.offsets
    return np.concatenate(
        [dense_natural_gradient(b.block(k), u[o[k] : o[k + 1]], lam) for k in range(len(b.shapes))]
    )


def dense_kron_curvature(sigma_a, sigma_e, mode="standard", lam=0.0, lam_a=0.0, lam_e=0.0):
    """Damped Kronecker curvature for one layer, ordered to match row-major vec.

    ``standard``: ``Sigma_E (x) Sigma_A + lam I``.
    ``heuristic``: ``(Sigma_E + lam_E I) (x) (Sigma_A + lam_A I)``.
    ``cross``: the two extra terms heuristic damping adds,
    ``lam_E I (x) Sigma_A + lam_A Sigma_E (x) I``.
    """
    m, n = sigma_a.shape[0], sigma_e.shape[0]
    _guard(m * n, m * n)
    Im, In = np.eye(m), np.eye(n)
    if mode == "standard":
        return np.kron(sigma_e, sigma_a) + lam * np.eye(m * n)
    if mode == "heuristic":
        return np.kron(sigma_e + lam_e * In, sigma_a + lam_a * Im)
    if mode == "cross":
        return lam_e * np.kron(In, sigma_a) + lam_a * np.kron(sigma_e, Im)
    raise ValueError(f"unknown damping mode {mode!r}")


def dense_kron_solve(curvature: np.ndarray, grad: np.ndarray) -> np.ndarray:
    return np.linalg.solve(curvature, grad.ravel()).reshape(grad.shape)


def finite_diff_grad(net: Network, X, y, eps: float = 1e-5) -> np.ndarray:
    """Central differences of the mean loss w.r.t. every weight."""
    theta = net.flat()
    _guard(theta.size)
    out = np.empty_like(theta)
    probe = net.copy()

    def loss_at(t):
        probe.weights = unflatten(t, net.shapes)
        return loss_and_grad(probe, X, y)[0]

    for i in range(theta.size):
        step = np.zeros_like(theta)
        step[i] = eps
        out[i] = (loss_at(theta + step) - loss_at(theta - step)) / (2 * eps)
    return out


def analytic_grad(net: Network, X, y) -> np.ndarray:
    return flatten(loss_and_grad(net, X, y)[1])


def dense_laplace_cov(prior_diag: np.ndarray, F: np.ndarray, D: float) -> np.ndarray:
    """Posterior covariance ``(diag(prior) + D F)^{-1}``."""
    _guard(F.shape[0], F.shape[0])
    return np.linalg.inv(np.diag(prior_diag) + D * F)


def dense_laplace_identity(prior_diag: np.ndarray, G: np.ndarray, D: float):
    """Both sides of ``E[x x^T] = I - V U^{-1} V^T`` with ``V = sqrt(D) prior^{-1/2} G``.

    Returns ``(I - V U^{-1} V^T, prior^{1/2} (prior + D G G^T)^{-1} prior^{1/2})``.
    """
    V = np.sqrt(D) * G / np.sqrt(prior_diag)[:, None]
    U = np.eye(G.shape[1]) + V.T @ V
    lhs = np.eye(G.shape[0]) - V @ np.linalg.solve(U, V.T)
    root = np.sqrt(prior_diag)
    rhs = root[:, None] * dense_laplace_cov(prior_diag, G @ G.T, D) * root[None, :]
    return lhs, rhs
