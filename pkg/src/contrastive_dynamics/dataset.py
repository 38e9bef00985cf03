"""Clustered point clouds with orthogonal-subspace perturbations.

Points live in R^D. The first ``latent_dim`` coordinates span the data
manifold; the remaining coordinates are the orthogonal subspace in which
augmentations act. All randomness goes through a Philox counter-based
generator so that a seed reproduces the same dataset on every platform.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Literal, Optional, Sequence

import numpy as np

PerturbationMode = Literal["orthogonal-noise", "identity-only", "finite-list"]


def make_rng(seed: int) -> np.random.Generator:
    """Philox-backed generator; the only RNG used across the package."""
    return np.random.Generator(np.random.Philox(int(seed) & (2**64 - 1)))


def uniform_ball(rng: np.random.Generator, size: int, dim: int, radius: float) -> np.ndarray:
    """Draw ``size`` points uniformly from the open ball of ``radius`` in R^dim."""
    if dim == 0:
        return np.zeros((size, 0))
    direction = rng.standard_normal((size, dim))
    norms = np.linalg.norm(direction, axis=1, keepdims=True)
    norms[norms == 0] = 1.0
    # random() is in [0, 1): the radius stays strictly below the bound
    r = radius * rng.random((size, 1)) ** (1.0 / dim)
    return r * direction / norms


@dataclass(frozen=True)
class ClusterSpec:
    ambient_dim: int
    latent_dim: int
    num_clusters: int
    cluster_sizes: Sequence[int]
    center_norms: Sequence[float]
    noise_bound: float = 0.0
    seed: int = 0

    def __post_init__(self):
        D, d, N = self.ambient_dim, self.latent_dim, self.num_clusters
        if min(D, d, N) < 1:
            raise ValueError("dimensions and cluster count must be positive")
        if d > D:
            raise ValueError(f"latent_dim {d} exceeds ambient_dim {D}")
        if N > d:
            raise ValueError(
                f"cannot place {N} mutually orthogonal centers in a {d}-dimensional subspace"
            )
        if len(self.cluster_sizes) != N or len(self.center_norms) != N:
            raise ValueError("cluster_sizes and center_norms need one entry per cluster")
        if any(int(s) < 1 for s in self.cluster_sizes):
            raise ValueError("every cluster needs at least one point")
        if any(r <= 0 for r in self.center_norms):
            raise ValueError("center norms must be positive")
        if self.noise_bound < 0:
            raise ValueError("noise_bound must be nonnegative")

    @property
    def n(self) -> int:
        return int(sum(self.cluster_sizes))


@dataclass
class ClusteredDataset:
    """Points ``x_i = centers[labels[i]] + noise[i]`` with ``||noise[i]|| < noise_bound``."""

    points: np.ndarray
    centers: np.ndarray
    labels: np.ndarray
    noise: np.ndarray
    noise_bound: float
    latent_dim: int

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def ambient_dim(self) -> int:
        return self.points.shape[1]

    @property
    def num_clusters(self) -> int:
        return self.centers.shape[0]

    @property
    def cluster_sizes(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_clusters)

    @property
    def masses(self) -> np.ndarray:
        """Fraction of points per cluster, ``(n_q - n_{q-1}) / n``."""
        return self.cluster_sizes / self.n

    def representatives(self) -> np.ndarray:
        """Index of the first point of each cluster."""
        return np.array([np.flatnonzero(self.labels == q)[0] for q in range(self.num_clusters)])

    def check(self, orthogonal: bool = True) -> None:
        """Raise ``ValueError`` if a dataset invariant is violated."""
        dev = np.linalg.norm(self.points - self.centers[self.labels], axis=1)
        if self.noise_bound > 0 and np.any(dev >= self.noise_bound):
            raise ValueError(f"point {int(np.argmax(dev))} leaves its noise ball")
        if self.noise_bound == 0 and np.any(dev > 0):
            raise ValueError("noise_bound is 0 but points differ from their centers")
        if np.any(self.centers[:, self.latent_dim:] != 0):
            raise ValueError("centers must lie in the span of the first latent_dim coordinates")
        if orthogonal:
            gram = self.centers @ self.centers.T
            off = gram - np.diag(np.diag(gram))
            if np.max(np.abs(off), initial=0.0) > 1e-12 or np.any(np.diag(gram) == 0):
                raise ValueError("centers are not mutually orthogonal")

    def to_csv(self, path) -> None:
        """Write ``idx,cluster,x_0,...,x_{D-1}`` rows with round-trip float repr."""
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["idx", "cluster"] + [f"x_{k}" for k in range(self.ambient_dim)])
            for i, (label, row) in enumerate(zip(self.labels, self.points)):
                writer.writerow([i, int(label)] + [repr(float(v)) for v in row])


def generate(spec: ClusterSpec) -> ClusteredDataset:
    """Sample the clustered dataset described by ``spec``.

    Centers are ``r_q * e_q``. The noise of every point is the sum of an
    in-manifold part and an orthogonal part, each uniform in a ball of
    radius ``noise_bound / 2``, so the total stays strictly below the bound.
    """
    rng = make_rng(spec.seed)
    D, d, N = spec.ambient_dim, spec.latent_dim, spec.num_clusters
    centers = np.zeros((N, D))
    centers[np.arange(N), np.arange(N)] = np.asarray(spec.center_norms, dtype=float)
    labels = np.repeat(np.arange(N), np.asarray(spec.cluster_sizes, dtype=int))
    n = labels.size
    noise = np.zeros((n, D))
    if spec.noise_bound > 0:
        half = spec.noise_bound / 2.0
        noise[:, :d] = uniform_ball(rng, n, d, half)
        noise[:, d:] = uniform_ball(rng, n, D - d, half)
    data = ClusteredDataset(
        points=centers[labels] + noise,
        centers=centers,
        labels=labels,
        noise=noise,
        noise_bound=float(spec.noise_bound),
        latent_dim=d,
    )
    data.check()
    return data


def line_clusters(
    positions: Sequence[float] = (-3.0, -1.0, 1.0, 3.0),
    n: int = 200,
    ambient_dim: int = 3,
    latent_dim: int = 2,
    noise_bound: float = 0.1,
    seed: int = 0,
) -> ClusteredDataset:
    """Clusters centred on the first axis at ``positions``.

    This is the four-cluster picture used for the with/without-kernel
    comparison. Centers are collinear rather than orthogonal, so the
    dataset only satisfies the noise-ball invariant.
    """
    k = len(positions)
    if n < k:
        raise ValueError("need at least one point per cluster")
    sizes = [n // k + (1 if q < n % k else 0) for q in range(k)]
    centers = np.zeros((k, ambient_dim))
    centers[:, 0] = positions
    labels = np.repeat(np.arange(k), sizes)
    rng = make_rng(seed)
    noise = np.zeros((n, ambient_dim))
    if noise_bound > 0:
        half = noise_bound / 2.0
        noise[:, :latent_dim] = uniform_ball(rng, n, latent_dim, half)
        noise[:, latent_dim:] = uniform_ball(rng, n, ambient_dim - latent_dim, half)
    data = ClusteredDataset(centers[labels] + noise, centers, labels, noise, float(noise_bound), latent_dim)
    data.check(orthogonal=False)
    return data


def read_csv(path, centers: Optional[np.ndarray] = None, noise_bound: Optional[float] = None,
             latent_dim: Optional[int] = None) -> ClusteredDataset:
    """Load a dataset written by :meth:`ClusteredDataset.to_csv`.

    The file only stores points and labels. Without explicit ``centers`` the
    cluster means are used, and the noise bound defaults to the largest
    observed deviation (nudged up so the strict bound holds).
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[:2] != ["idx", "cluster"]:
            raise ValueError(f"{path}: unexpected header {header[:2]}")
        rows = [r for r in reader if r]
    rows.sort(key=lambda r: int(r[0]))
    labels = np.array([int(r[1]) for r in rows])
    points = np.array([[float(v) for v in r[2:]] for r in rows])
    if centers is None:
        centers = np.stack([points[labels == q].mean(axis=0) for q in range(labels.max() + 1)])
    centers = np.asarray(centers, dtype=float)
    noise = points - centers[labels]
    if noise_bound is None:
        noise_bound = float(np.nextafter(np.linalg.norm(noise, axis=1).max(), np.inf))
    if latent_dim is None:
        latent_dim = points.shape[1]
    return ClusteredDataset(points, centers, labels, noise, float(noise_bound), int(latent_dim))


@dataclass(frozen=True)
class PerturbationSet:
    """Distribution over input-space perturbations ``T``.

    ``orthogonal-noise`` adds a vector drawn uniformly from the ball of radius
    ``magnitude`` inside coordinates ``latent_dim..D-1``; ``finite-list``
    draws uniformly from ``draws`` (one displacement per row);
    ``identity-only`` is the point mass on the identity.
    """

    mode: PerturbationMode = "identity-only"
    latent_dim: int = 0
    magnitude: float = 0.0
    draws: Optional[np.ndarray] = field(default=None, compare=False)

    def __post_init__(self):
        if self.mode not in ("orthogonal-noise", "identity-only", "finite-list"):
            raise ValueError(f"unknown perturbation mode {self.mode!r}")
        if self.magnitude < 0:
            raise ValueError("magnitude must be nonnegative")
        if self.mode == "finite-list":
            if self.draws is None or len(self.draws) == 0:
                raise ValueError("finite-list mode needs at least one displacement")
            draws = np.atleast_2d(np.asarray(self.draws, dtype=float))
            if np.any(draws[:, : self.latent_dim] != 0):
                raise ValueError("displacements must lie in the orthogonal subspace")
            object.__setattr__(self, "draws", draws)

    @property
    def exact(self) -> bool:
        """True when the distribution has finite support and can be summed exactly."""
        return self.mode != "orthogonal-noise"

    def support(self, dim: int) -> np.ndarray:
        """All displacements of an exact distribution, shape ``(k, dim)``."""
        if self.mode == "identity-only":
            return np.zeros((1, dim))
        if self.mode == "finite-list":
            if self.draws.shape[1] != dim:
                raise ValueError(f"displacements have dimension {self.draws.shape[1]}, data {dim}")
            return self.draws
        raise ValueError("orthogonal-noise perturbations have no finite support")

    def sample(self, rng: np.random.Generator, size: int, dim: int) -> np.ndarray:
        """Draw ``size`` displacement vectors in R^dim."""
        if self.mode == "identity-only":
            return np.zeros((size, dim))
        if self.mode == "finite-list":
            support = self.support(dim)
            return support[rng.integers(0, len(support), size=size)]
        out = np.zeros((size, dim))
        out[:, self.latent_dim:] = uniform_ball(rng, size, dim - self.latent_dim, self.magnitude)
        return out


def apply_perturbation(x: np.ndarray, p: PerturbationSet, seed: int = 0) -> np.ndarray:
    """Return ``T(x)`` for one ``T`` drawn from ``p``; ``x`` may be a batch of rows."""
    x = np.asarray(x, dtype=float)
    rows = np.atleast_2d(x)
    shift = p.sample(make_rng(seed), rows.shape[0], rows.shape[1])
    out = rows + shift
    return out.reshape(x.shape)


__all__ = [
    "ClusterSpec",
    "ClusteredDataset",
    "PerturbationSet",
    "apply_perturbation",
    "generate",
    "line_clusters",
    "make_rng",
    "read_csv",
    "uniform_ball",
]
