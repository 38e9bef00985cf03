"""Contrastive objectives: NT-Xent, its generalized form, and latent reformulations.

The generalized loss of a latent configuration ``z`` (rows are points,
``w`` the point weights) is::

    L(z) = sum_i w_i * psi(G_i),   G_i = sum_j w_j * eta(|z_i - z_j|^2 / 2) / eta(0)

The self term ``j == i`` is kept; the original NT-Xent excludes it.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Callable, Literal, Optional, Union

import numpy as np
from scipy.interpolate import CubicSpline

from .dataset import PerturbationSet, make_rng

PsiName = Literal["log1p", "log1p_half", "identity"]


class DomainError(ValueError):
    """An input falls outside the domain where a quantity is defined."""


# value, first and second derivative
_PSI = {
    "log1p": (np.log1p, lambda t: 1.0 / (1.0 + t), lambda t: -1.0 / (1.0 + t) ** 2),
    "log1p_half": (
        lambda t: np.log1p(t / 2.0),
        lambda t: 1.0 / (2.0 + t),
        lambda t: -1.0 / (2.0 + t) ** 2,
    ),
    "identity": (
        lambda t: np.asarray(t, dtype=float),
        lambda t: np.ones_like(np.asarray(t, dtype=float)),
        lambda t: np.zeros_like(np.asarray(t, dtype=float)),
    ),
}


@dataclass(frozen=True)
class CustomEta:
    """User-supplied similarity profile with its first two derivatives."""

    value: Callable[[np.ndarray], np.ndarray]
    d1: Callable[[np.ndarray], np.ndarray]
    d2: Callable[[np.ndarray], np.ndarray]

    @classmethod
    def from_table(cls, t, values) -> "CustomEta":
        """Cubic-spline interpolant of a tabulated profile on ``t >= 0``."""
        spline = CubicSpline(np.asarray(t, float), np.asarray(values, float), extrapolate=True)
        d1, d2 = spline.derivative(1), spline.derivative(2)
        return cls(value=spline, d1=d1, d2=d2)


@dataclass(frozen=True)
class SimilarityConfig:
    """The triple (psi, eta, tau) plus the constraint mode.

    ``eta="exp_decay"`` means ``eta(t) = exp(-t / tau)``; on the unit sphere
    ``eta(|x - y|^2 / 2)`` equals ``exp((cos_sim - 1) / tau)``.
    """

    tau: float = 0.1
    psi: PsiName = "log1p"
    eta: Union[str, CustomEta] = "exp_decay"
    constraint: Literal["sphere", "unconstrained"] = "sphere"

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if self.psi not in _PSI:
            raise ValueError(f"unknown psi {self.psi!r}")
        if isinstance(self.eta, str) and self.eta != "exp_decay":
            raise ValueError(f"unknown eta {self.eta!r}")
        if self.constraint not in ("sphere", "unconstrained"):
            raise ValueError(f"unknown constraint {self.constraint!r}")

    def psi_fn(self, t, order: int = 0):
        return _PSI[self.psi][order](t)

    def eta_fn(self, t, order: int = 0):
        t = np.asarray(t, dtype=float)
        if isinstance(self.eta, CustomEta):
            return np.asarray((self.eta.value, self.eta.d1, self.eta.d2)[order](t), dtype=float)
        return (-1.0 / self.tau) ** order * np.exp(-t / self.tau)

    @property
    def eta0(self) -> float:
        return float(self.eta_fn(0.0))


@dataclass
class LatentConfiguration:
    """Weighted point cloud in latent space (the pushforward measure)."""

    z: np.ndarray
    weights: Optional[np.ndarray] = None

    def __post_init__(self):
        self.z = np.atleast_2d(np.asarray(self.z, dtype=float))
        n = self.z.shape[0]
        if self.weights is None:
            self.weights = np.full(n, 1.0 / n)
        self.weights = np.asarray(self.weights, dtype=float)
        if self.weights.shape != (n,):
            raise ValueError("need one weight per point")
        if np.any(self.weights < 0) or abs(self.weights.sum() - 1.0) > 1e-12:
            raise ValueError("weights must be a probability vector")

    def check_sphere(self, tol: float = 1e-9) -> None:
        norms = np.linalg.norm(self.z, axis=1)
        if np.any(np.abs(norms - 1.0) > tol):
            raise ValueError(f"point {int(np.argmax(np.abs(norms - 1.0)))} is off the unit sphere")

    @classmethod
    def from_csv(cls, path) -> "LatentConfiguration":
        """Read ``point,z_0,...`` rows, with an optional ``weight`` column."""
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            rows = list(reader)
            fields = reader.fieldnames or []
        zcols = sorted((c for c in fields if c.startswith("z_")), key=lambda c: int(c[2:]))
        if not zcols:
            raise ValueError(f"{path}: no z_k columns")
        z = np.array([[float(r[c]) for c in zcols] for r in rows])
        weights = None
        if "weight" in fields:
            weights = np.array([float(r["weight"]) for r in rows])
        return cls(z, weights)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["point", "weight"] + [f"z_{k}" for k in range(self.z.shape[1])])
            for i, (w, row) in enumerate(zip(self.weights, self.z)):
                writer.writerow([i, repr(float(w))] + [repr(float(v)) for v in row])


def as_configuration(z, weights=None) -> LatentConfiguration:
    if isinstance(z, LatentConfiguration):
        return z
    return LatentConfiguration(z, weights)


def half_sq_dists(a: np.ndarray, b: Optional[np.ndarray] = None) -> tuple[np.ndarray, np.ndarray]:
    """Pairwise differences ``a_i - b_j`` and ``|a_i - b_j|^2 / 2``."""
    b = a if b is None else b
    diff = a[:, None, :] - b[None, :, :]
    return diff, 0.5 * np.einsum("ijk,ijk->ij", diff, diff)


def similarity_ratio(z, cfg: SimilarityConfig, weights=None) -> np.ndarray:
    """The per-point ratio ``G_i`` (self term included)."""
    conf = as_configuration(z, weights)
    _, d = half_sq_dists(conf.z)
    return cfg.eta_fn(d) @ conf.weights / cfg.eta0


def generalized_loss(z, cfg: SimilarityConfig, weights=None) -> float:
    """Generalized contrastive loss of a latent configuration."""
    conf = as_configuration(z, weights)
    G = similarity_ratio(conf, cfg)
    return float(np.dot(conf.weights, cfg.psi_fn(G)))


def nt_xent_latent(z, tau: float) -> float:
    """NT-Xent of an invariant map written over its pushforward.

    With ``T = T'`` acting trivially, the positive pair has cosine
    similarity 1 and both views contribute the same negatives, giving
    ``mean_i log(1 + 2 * mean_j 1[j != i] exp((sim_ij - 1) / tau))``.
    Equivalently ``log(1 + 2 * (G_i - 1/n))`` with ``G`` the generalized
    ratio for ``exp_decay`` on unit-norm points.
    """
    z = np.atleast_2d(np.asarray(z, dtype=float))
    n = z.shape[0]
    u = _unit_rows(z)
    e = np.exp((u @ u.T - 1.0) / tau)
    np.fill_diagonal(e, 0.0)
    return float(np.mean(np.log1p(2.0 * e.sum(axis=1) / n)))


def _unit_rows(z: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(z, axis=1)
    bad = np.flatnonzero(norms == 0)
    if bad.size:
        raise DomainError(f"embedding of point {int(bad[0])} is the zero vector")
    return z / norms[:, None]


def _embed(embed, X: np.ndarray) -> np.ndarray:
    out = np.asarray(embed(X), dtype=float)
    return out.reshape(X.shape[0], -1)


def _perturbation_pairs(perturb: PerturbationSet, dim: int, mc_samples: int, seed: int):
    """Displacement pairs ``(t, t')`` and whether they enumerate ``nu x nu`` exactly."""
    if perturb.exact:
        support = perturb.support(dim)
        return [(a, b) for a in support for b in support], True
    rng = make_rng(seed)
    first = perturb.sample(rng, mc_samples, dim)
    second = perturb.sample(rng, mc_samples, dim)
    return list(zip(first, second)), False


def _mc_result(values, exact: bool, return_stderr: bool):
    values = np.asarray(values)
    mean = float(values.mean())
    if not return_stderr:
        return mean
    err = 0.0 if exact or values.size < 2 else float(values.std(ddof=1) / np.sqrt(values.size))
    return mean, err


def nt_xent_original(points, embed, perturb: PerturbationSet, tau: float, mc_samples: int = 1000,
                     seed: int = 0, return_stderr: bool = False):
    """NT-Xent loss with cosine similarity and the indicator ``1[x != y]``.

    Each draw picks one pair ``(T, T')`` that is applied to every point.
    ``x != y`` is taken over sample indices. Finite perturbation sets are
    summed exactly; ``orthogonal-noise`` uses ``mc_samples`` draws.
    """
    X = np.atleast_2d(np.asarray(points, dtype=float))
    n = X.shape[0]
    off = ~np.eye(n, dtype=bool)
    pairs, exact = _perturbation_pairs(perturb, X.shape[1], mc_samples, seed)
    values = []
    for t, t2 in pairs:
        a = _unit_rows(_embed(embed, X + t))
        b = _unit_rows(_embed(embed, X + t2))
        pos = np.einsum("ij,ij->i", a, b) / tau
        # both views of the negatives, scaled by the positive term for stability
        neg = np.exp(a @ a.T / tau - pos[:, None]) * off + np.exp(a @ b.T / tau - pos[:, None]) * off
        values.append(np.mean(np.log1p(neg.sum(axis=1) / n)))
    return _mc_result(values, exact, return_stderr)


def full_loss_two_view(points, embed, perturb: PerturbationSet, cfg: SimilarityConfig,
                       mc_samples: int = 1000, seed: int = 0, return_stderr: bool = False):
    """Generalized loss with explicit views::

        E_{x, T, T'} psi( E_y eta_f(T x, T' y) / eta_f(T x, T' x) )

    Finite perturbation sets are summed exactly over ``(T, T')``.
    """
    if cfg.eta0 == 0:
        raise ValueError("eta(0) = 0 makes the similarity ratio degenerate")
    X = np.atleast_2d(np.asarray(points, dtype=float))
    pairs, exact = _perturbation_pairs(perturb, X.shape[1], mc_samples, seed)
    values = []
    for t, t2 in pairs:
        a = _embed(embed, X + t)
        b = _embed(embed, X + t2)
        _, d = half_sq_dists(a, b)
        num = cfg.eta_fn(d).mean(axis=1)
        den = cfg.eta_fn(np.diag(d))
        values.append(np.mean(cfg.psi_fn(num / den)))
    return _mc_result(values, exact, return_stderr)


def vicreg_variance(z: np.ndarray) -> float:
    """Mean over latent dimensions of ``max(0, 1 - std)`` (unbiased std)."""
    return float(np.mean(np.maximum(0.0, 1.0 - z.std(axis=0, ddof=1))))


def vicreg_covariance(z: np.ndarray) -> float:
    """Sum of squared off-diagonal entries of the latent covariance."""
    cov = np.atleast_2d(np.cov(z, rowvar=False))
    return float(np.sum(cov**2) - np.sum(np.diag(cov) ** 2))


def vicreg_latent(z, lambda_var: float, lambda_cov: float, variance=vicreg_variance,
                  covariance=vicreg_covariance) -> float:
    """VICReg objective of an invariant map, which no longer sees the input data."""
    z = np.atleast_2d(np.asarray(z.z if isinstance(z, LatentConfiguration) else z, dtype=float))
    if z.shape[0] < 2:
        raise ValueError("variance is undefined for fewer than two points")
    return lambda_var * variance(z) + lambda_cov * covariance(z)


def byol_latent(z, q: Callable[[np.ndarray], np.ndarray]) -> float:
    """BYOL objective of an invariant map: ``mean_i |q(z_i) - z_i|^2``."""
    z = np.atleast_2d(np.asarray(z.z if isinstance(z, LatentConfiguration) else z, dtype=float))
    r = np.asarray(q(z), dtype=float) - z
    return float(np.mean(np.einsum("ij,ij->i", r, r)))
