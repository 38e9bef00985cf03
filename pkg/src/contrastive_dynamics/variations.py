"""First and second variations of the generalized loss, and stationarity checks.

Gradients here are L2(mu) gradients: for a configuration with weights
``w`` the Euclidean partial derivative is ``dL/dz_i = w_i * g_i``.  This is
the quantity that drives the latent and kernel flows.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .dataset import PerturbationSet
from .losses import (
    SimilarityConfig,
    _embed,
    _perturbation_pairs,
    as_configuration,
    generalized_loss,
    half_sq_dists,
)

FD_STEP = 1e-5
STATIONARITY_TOL = 1e-8


@dataclass
class VariationReport:
    euclidean: np.ndarray
    tangential: np.ndarray
    lagrange: np.ndarray
    loss: float

    @property
    def max_tangential_norm(self) -> float:
        return float(np.max(np.linalg.norm(self.tangential, axis=1)))

    @property
    def max_gradient_norm(self) -> float:
        return float(np.max(np.linalg.norm(self.euclidean, axis=1)))

    @property
    def lambda_spread(self) -> float:
        return float(np.ptp(self.lagrange))

    def as_dict(self) -> dict:
        return {
            "max_tangential_norm": self.max_tangential_norm,
            "max_gradient_norm": self.max_gradient_norm,
            "lambda_spread": self.lambda_spread,
            "loss": self.loss,
        }


@dataclass
class SecondVariationReport:
    value: float
    sigma: float
    threshold: float
    satisfied: bool
    num_clusters: int


def tangential_part(z: np.ndarray, g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Project ``g_i`` onto the tangent space at ``z_i / |z_i|``; also return ``<g_i, u_i>``."""
    norms = np.linalg.norm(z, axis=1, keepdims=True)
    u = np.divide(z, norms, out=np.zeros_like(z), where=norms > 0)
    radial = np.einsum("ij,ij->i", g, u)
    return g - radial[:, None] * u, radial


def loss_and_gradient(z, cfg: SimilarityConfig, weights=None) -> tuple[float, np.ndarray]:
    """Loss and per-point gradient ``g_i`` in one pass over the pairs."""
    conf = as_configuration(z, weights)
    diff, d = half_sq_dists(conf.z)
    eta0 = cfg.eta0
    G = cfg.eta_fn(d) @ conf.weights / eta0
    dpsi = cfg.psi_fn(G, 1)
    coef = (dpsi[:, None] + dpsi[None, :]) * cfg.eta_fn(d, 1) * conf.weights[None, :] / eta0
    g = np.einsum("ij,ijk->ik", coef, diff)
    return float(np.dot(conf.weights, cfg.psi_fn(G))), g


def invariant_gradient(z, cfg: SimilarityConfig, weights=None) -> VariationReport:
    """Gradient of the loss of an invariant map, evaluated at every latent point.

    ``g_i = sum_j w_j (psi'(G_i) + psi'(G_j)) eta'(|z_i - z_j|^2/2) (z_i - z_j) / eta(0)``.
    The tangential part and the multiplier estimate ``lambda_i = <g_i, u_i>``
    are always filled in; they matter in sphere mode.
    """
    conf = as_configuration(z, weights)
    loss, g = loss_and_gradient(conf, cfg)
    tang, radial = tangential_part(conf.z, g)
    return VariationReport(euclidean=g, tangential=tang, lagrange=radial, loss=loss)


def stationarity_check(z, cfg: SimilarityConfig, tol: float = STATIONARITY_TOL,
                       weights=None) -> tuple[bool, VariationReport]:
    report = invariant_gradient(z, cfg, weights)
    return report.max_tangential_norm <= tol, report


def first_variation_pairing(points, embed, perturb: PerturbationSet, cfg: SimilarityConfig,
                            h: Callable[[np.ndarray], np.ndarray]) -> float:
    """Directional derivative ``d/de L(f + e h)`` at ``e = 0`` of the two-view loss.

    With ``a = f(Tx)``, ``b_y = f(T'y)``, ``c = f(T'x)``, ``N = E_y eta(|a - b_y|^2/2)``
    and ``D = eta(|a - c|^2/2)``, the integrand is
    ``psi'(N/D) * (dN/D - N dD/D^2)`` where ``dN`` and ``dD`` carry
    ``eta' <a - b, h(Tx) - h(T'y)>``. The expectation over ``nu x nu`` is an
    exact finite sum, so only finite perturbation sets are accepted.
    """
    if not perturb.exact:
        raise ValueError("first_variation_pairing needs a finite perturbation set")
    X = np.atleast_2d(np.asarray(points, dtype=float))
    pairs, _ = _perturbation_pairs(perturb, X.shape[1], 0, 0)
    total = 0.0
    for t, t2 in pairs:
        a, b = _embed(embed, X + t), _embed(embed, X + t2)
        ha, hb = _embed(h, X + t), _embed(h, X + t2)
        diff, d = half_sq_dists(a, b)
        dh = ha[:, None, :] - hb[None, :, :]
        slope = cfg.eta_fn(d, 1) * np.einsum("ijk,ijk->ij", diff, dh)
        num, dnum = cfg.eta_fn(d).mean(axis=1), slope.mean(axis=1)
        den, dden = cfg.eta_fn(np.diag(d)), np.diag(slope)
        dG = dnum / den - num * dden / den**2
        total += np.mean(cfg.psi_fn(num / den, 1) * dG)
    return float(total / len(pairs))


def finite_difference_gradient(fun: Callable[[np.ndarray], float], z: np.ndarray,
                               step: float = FD_STEP) -> np.ndarray:
    """Central differences of a scalar function of an array, entry by entry."""
    z = np.asarray(z, dtype=float)
    grad = np.empty_like(z)
    flat, out = z.reshape(-1), grad.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + step
        up = fun(z)
        flat[k] = orig - step
        down = fun(z)
        flat[k] = orig
        out[k] = (up - down) / (2 * step)
    return grad


def gradient_check(z, cfg: SimilarityConfig, weights=None, step: float = FD_STEP) -> float:
    """Relative error between :func:`invariant_gradient` and finite differences of the loss."""
    conf = as_configuration(z, weights)
    work = conf.z.copy()
    fd = finite_difference_gradient(lambda v: generalized_loss(v, cfg, conf.weights), work, step)
    analytic = invariant_gradient(conf, cfg).euclidean * conf.weights[:, None]
    return float(np.linalg.norm(analytic - fd) / max(np.linalg.norm(fd), np.finfo(float).tiny))


def cluster_labels(z: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    """Group rows of ``z`` that coincide up to ``tol`` (first-seen order)."""
    labels = -np.ones(len(z), dtype=int)
    reps: list[np.ndarray] = []
    for i, row in enumerate(z):
        for q, rep in enumerate(reps):
            if np.max(np.abs(row - rep)) <= tol:
                labels[i] = q
                break
        else:
            labels[i] = len(reps)
            reps.append(row)
    return labels


def second_variation(z, tau: float, h) -> SecondVariationReport:
    """Second variation along ``h`` of the loss with ``psi(t) = log(1 + t/2)``,
    ``eta(t) = exp(-t/tau)`` at a configuration of K equal-multiplicity clusters.

    ``h`` holds one direction per point (shape ``(n, d)``) or one per cluster
    (shape ``(K, d)``, broadcast to its members). The value is the exact
    finite sum

    ``(1/n) sum_i [psi''(G_i) (G_i')^2 + psi'(G_i) G_i'']``

    with ``G_i' = (1/n) sum_j eta' s_ij`` and
    ``G_i'' = (1/n) sum_j (eta'' s_ij^2 + eta' |h_i - h_j|^2)``,
    ``s_ij = <z_i - z_j, h_i - h_j>``.

    The sufficient condition for positivity requires ``h`` constant on each
    cluster and ``s_ij^2 >= sigma |h_i - h_j|^2`` for all pairs with some
    ``sigma > 3 K^2 tau``; the report carries the largest such ``sigma``.
    """
    z = np.atleast_2d(np.asarray(z, dtype=float))
    n, dim = z.shape
    labels = cluster_labels(z)
    K = int(labels.max()) + 1
    counts = np.bincount(labels)
    if np.any(counts != counts[0]):
        raise ValueError(f"clusters have unequal multiplicities {counts.tolist()}")
    h = np.atleast_2d(np.asarray(h, dtype=float))
    if h.shape == (K, dim) and K != n:
        h = h[labels]
    if h.shape != (n, dim):
        raise ValueError(f"h has shape {h.shape}; expected ({n}, {dim}) or ({K}, {dim})")

    diff, d = half_sq_dists(z)
    dh = h[:, None, :] - h[None, :, :]
    s = np.einsum("ijk,ijk->ij", diff, dh)
    q = np.einsum("ijk,ijk->ij", dh, dh)
    eta = np.exp(-d / tau)
    G = eta.mean(axis=1)
    G1 = (-eta / tau * s).mean(axis=1)
    G2 = (eta / tau**2 * s**2 - eta / tau * q).mean(axis=1)
    value = float(np.mean(-G1**2 / (2.0 + G) ** 2 + G2 / (2.0 + G)))

    constant_on_clusters = all(np.allclose(h[labels == c], h[labels == c][0], rtol=0, atol=1e-12)
                               for c in range(K))
    moving = q > 1e-24
    sigma = float(np.min(s[moving] ** 2 / q[moving])) if moving.any() else np.inf
    threshold = 3.0 * K**2 * tau
    satisfied = bool(constant_on_clusters and moving.any() and sigma > threshold)
    if satisfied and not value > 0:
        raise ArithmeticError(f"second variation {value} is not positive under the sufficient condition")
    return SecondVariationReport(value=value, sigma=sigma, threshold=threshold,
                                 satisfied=satisfied, num_clusters=K)


def scaled_map_gradient_decay(z, cfg: SimilarityConfig, scales: Sequence[float],
                              weights: Optional[np.ndarray] = None) -> list[float]:
    """Largest gradient norm of the scaled configuration ``k * z`` for each ``k``."""
    conf = as_configuration(z, weights)
    out = []
    for k in scales:
        _, g = loss_and_gradient(k * conf.z, cfg, conf.weights)
        out.append(float(np.max(np.linalg.norm(g, axis=1))))
    return out
