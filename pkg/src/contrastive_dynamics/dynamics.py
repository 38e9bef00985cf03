"""Gradient-descent dynamics in latent space and in weight space.

All latent updates are driven by the per-point gradient ``g_i`` from
:func:`contrastive_dynamics.variations.loss_and_gradient`:

* vanilla:   ``z_i <- z_i - s * g_i``
* kernel:    ``z_i <- z_i - (s / n) * sum_j K_ij g_j``
* clustered: ``z_i <- z_i - s * m_q |xi_q|^2 * beta_q * g_{rep(q)}`` for ``i`` in cluster ``q``

Weight-space descent trains the network parameters on
``L(f(w, x_1), ..., f(w, x_n))`` and records the latent configuration by
forward passes.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Literal, Optional, Union

import numpy as np
from scipy import stats

from .dataset import ClusteredDataset, PerturbationSet, make_rng
from .losses import SimilarityConfig, as_configuration
from .network import GenericMLP, KernelMatrix, OneHiddenNet, activation, kernel, kernel_generic
from .variations import loss_and_gradient, tangential_part

FlowMode = Literal["vanilla", "kernel-exact", "weight-space", "clustered-approx", "infinite-width"]
DIVERGENCE_LOSS = 1e6


class DivergenceError(RuntimeError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"descent diverged at step {step} (loss={loss})")
        self.step = step
        self.loss = loss


@dataclass(frozen=True)
class FlowConfig:
    """Explicit-Euler settings.

    Args:
        mode: Which dynamics to integrate.
        step: Step size ``sigma_step``.
        max_steps: Number of Euler steps.
        record_stride: Record a state every this many steps (the final
            state is always recorded).
        sphere_projection: Renormalize rows to the unit sphere after every
            latent step. Ignored in weight-space mode.
        frozen_kernel: In kernel-exact mode keep the initial kernel instead
            of recomputing it from the evolving weights.
        max_halvings: Step-halving retries per weight-space step when the
            loss would increase.
    """

    mode: FlowMode = "vanilla"
    step: float = 0.1
    max_steps: int = 100
    record_stride: int = 1
    sphere_projection: bool = False
    frozen_kernel: bool = False
    max_halvings: int = 20

    def __post_init__(self):
        if self.mode not in ("vanilla", "kernel-exact", "weight-space", "clustered-approx", "infinite-width"):
            raise ValueError(f"unknown flow mode {self.mode!r}")
        if not self.step > 0:
            raise ValueError("step size must be positive")
        if self.max_steps < 0 or self.record_stride < 1:
            raise ValueError("max_steps must be >= 0 and record_stride >= 1")


@dataclass
class Trajectory:
    """Recorded states and per-record diagnostics; missing diagnostics are NaN."""

    times: list = field(default_factory=list)
    states: list = field(default_factory=list)
    loss: list = field(default_factory=list)
    max_grad: list = field(default_factory=list)
    invariance_dev: list = field(default_factory=list)
    coherence: list = field(default_factory=list)
    uniformity: list = field(default_factory=list)

    def record(self, t: int, z: np.ndarray, loss: float, max_grad: float,
               invariance_dev: float = np.nan, coherence: float = np.nan,
               uniformity: float = np.nan) -> None:
        if self.times and t <= self.times[-1]:
            raise ValueError("trajectory times must be strictly increasing")
        self.times.append(int(t))
        self.states.append(np.array(z, dtype=float, copy=True))
        self.loss.append(float(loss))
        self.max_grad.append(float(max_grad))
        self.invariance_dev.append(float(invariance_dev))
        self.coherence.append(float(coherence))
        self.uniformity.append(float(uniformity))

    def __len__(self) -> int:
        return len(self.times)

    @property
    def final(self) -> np.ndarray:
        return self.states[-1]

    def first_time(self, metric: str, predicate) -> Optional[int]:
        """First recorded step whose ``metric`` satisfies ``predicate``."""
        for t, v in zip(self.times, getattr(self, metric)):
            if predicate(v):
                return t
        return None

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "loss", "max_grad", "invariance_dev", "coherence", "uniformity"])
            for row in zip(self.times, self.loss, self.max_grad, self.invariance_dev,
                           self.coherence, self.uniformity):
                writer.writerow([row[0]] + [repr(v) for v in row[1:]])

    def states_to_csv(self, path) -> None:
        d = self.states[0].shape[1]
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "point"] + [f"z_{k}" for k in range(d)])
            for t, z in zip(self.times, self.states):
                for i, row in enumerate(z):
                    writer.writerow([t, i] + [repr(float(v)) for v in row])


@dataclass(frozen=True)
class ClusterFlowParams:
    """Per-cluster coefficients of the clustered flow.

    Args:
        betas: ``(N, d)`` diagonals of the matrices ``beta_q``.
        masses: Cluster mass fractions ``n_q / n``.
        center_sq_norms: ``|xi_q|^2``.
        labels: Cluster index of every point.
    """

    betas: np.ndarray
    masses: np.ndarray
    center_sq_norms: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        N = len(self.masses)
        if self.betas.shape[0] != N or len(self.center_sq_norms) != N:
            raise ValueError("betas, masses and center norms need one entry per cluster")
        if self.labels.min() < 0 or self.labels.max() >= N:
            raise ValueError(f"unknown cluster index {int(self.labels.max())} for {N} clusters")

    @property
    def representatives(self) -> np.ndarray:
        return np.array([np.flatnonzero(self.labels == q)[0] for q in range(len(self.masses))])

    @classmethod
    def from_net(cls, net: OneHiddenNet, data: ClusteredDataset) -> "ClusterFlowParams":
        """``beta^k_q = (1/M) sum_{p in block k} act'(b_p . xi_q)^2``."""
        _, dact = activation(net.activation)
        S = dact(data.centers @ net.B.T).reshape(data.num_clusters, net.d, net.M)
        betas = (S**2).mean(axis=2)
        return cls(betas, data.masses, np.sum(data.centers**2, axis=1), data.labels)

    @classmethod
    def infinite_width(cls, data: ClusteredDataset, d: int) -> "ClusterFlowParams":
        betas = np.full((data.num_clusters, d), 0.5)
        return cls(betas, data.masses, np.sum(data.centers**2, axis=1), data.labels)


def _project(z: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(z, axis=1, keepdims=True)
    return np.divide(z, norms, out=z.copy(), where=norms > 0)


def step_vanilla(z, cfg: SimilarityConfig, step: float, project: bool = False,
                 weights=None) -> np.ndarray:
    conf = as_configuration(z, weights)
    _, g = loss_and_gradient(conf, cfg)
    out = conf.z - step * g
    return _project(out) if project else out


def kernel_increment(z, K: KernelMatrix, cfg: SimilarityConfig, step: float) -> np.ndarray:
    """``-(step / n) * sum_j K_ij g_j`` for every point."""
    z = np.atleast_2d(np.asarray(z, dtype=float))
    n, d = z.shape
    if K.n != n or K.d != d:
        raise ValueError(f"kernel is for n={K.n}, d={K.d}; configuration has n={n}, d={d}")
    _, g = loss_and_gradient(z, cfg)
    # scaling the kernel first keeps K = n I bit-identical to the vanilla step
    return -step * np.einsum("ijkl,jl->ik", K.blocks / n, g)


def step_kernel(z, K: KernelMatrix, cfg: SimilarityConfig, step: float,
                project: bool = False) -> np.ndarray:
    z = np.atleast_2d(np.asarray(z, dtype=float))
    out = z + kernel_increment(z, K, cfg, step)
    return _project(out) if project else out


def clustered_increment(z, params: ClusterFlowParams, cfg: SimilarityConfig, step: float) -> np.ndarray:
    z = np.atleast_2d(np.asarray(z, dtype=float))
    if len(params.labels) != len(z):
        raise ValueError("cluster labels do not match the configuration")
    _, g = loss_and_gradient(z, cfg)
    reps = params.representatives
    per_cluster = -step * (params.masses * params.center_sq_norms)[:, None] * params.betas * g[reps]
    return per_cluster[params.labels]


def step_clustered(z, params: ClusterFlowParams, cfg: SimilarityConfig, step: float,
                   project: bool = False) -> np.ndarray:
    z = np.atleast_2d(np.asarray(z, dtype=float))
    out = z + clustered_increment(z, params, cfg, step)
    return _project(out) if project else out


Net = Union[OneHiddenNet, GenericMLP]


def net_kernel(net: Net, X) -> KernelMatrix:
    return kernel(net, X) if isinstance(net, OneHiddenNet) else kernel_generic(net, X)


def weight_gradient_of_loss(net: Net, X: np.ndarray, cfg: SimilarityConfig) -> tuple[float, np.ndarray, np.ndarray]:
    """Loss, flat weight gradient and latent configuration ``z = f(w, X)``.

    The weight gradient is ``(1/n) sum_i J_i^T g_i``.
    """
    z = net.forward(X)
    loss, g = loss_and_gradient(z, cfg)
    return loss, net.vjp(X, g / len(X)), z


def monitor_invariance(net, data, perturb: PerturbationSet, samples: int = 256, seed: int = 0) -> float:
    """Largest ``|f(T x) - f(x)|`` over ``samples`` random draws of ``(x, T)``."""
    X = data.points if isinstance(data, ClusteredDataset) else np.atleast_2d(np.asarray(data, dtype=float))
    if perturb.mode == "identity-only":
        return 0.0
    rng = make_rng(seed)
    idx = rng.integers(0, len(X), size=samples)
    x = X[idx]
    shifted = x + perturb.sample(rng, samples, X.shape[1])
    return float(np.max(np.linalg.norm(net.forward(shifted) - net.forward(x), axis=1)))


def cluster_coherence(z, labels) -> float:
    """Mean silhouette ``(b_i - a_i) / max(a_i, b_i)`` with Euclidean distances.

    ``a_i`` is the mean distance to the other members of the own cluster
    (0 for a singleton), ``b_i`` the smallest mean distance to another
    cluster. Points with ``max(a_i, b_i) = 0`` score 0.
    """
    z = np.atleast_2d(np.asarray(z, dtype=float))
    labels = np.asarray(labels)
    uniq, inv = np.unique(labels, return_inverse=True)
    if len(uniq) < 2:
        raise ValueError("coherence needs at least two clusters")
    if len(z) != len(labels):
        raise ValueError("one label per point is required")
    dist = np.sqrt(np.maximum(np.sum((z[:, None, :] - z[None, :, :]) ** 2, axis=2), 0.0))
    onehot = np.eye(len(uniq))[inv]
    counts = onehot.sum(axis=0)
    sums = dist @ onehot
    rows = np.arange(len(z))
    own = counts[inv] - 1
    a = np.divide(sums[rows, inv], own, out=np.zeros(len(z)), where=own > 0)
    means = sums / counts
    means[rows, inv] = np.inf
    b = means.min(axis=1)
    top = np.maximum(a, b)
    s = np.divide(b - a, top, out=np.zeros(len(z)), where=top > 0)
    return float(s.mean())


def uniformity_score(z) -> float:
    """Kolmogorov-Smirnov distance between pairwise angles and the uniform law on the sphere.

    Rows are normalized first. For uniform points on ``S^{d-1}`` the value
    ``(1 + cos theta) / 2`` is Beta((d-1)/2, (d-1)/2); on the circle this is
    ``theta / pi`` and on ``S^2`` it is ``(1 - cos theta) / 2``.
    """
    z = np.atleast_2d(np.asarray(z, dtype=float))
    n, d = z.shape
    if n < 2:
        raise ValueError("uniformity needs at least two points")
    if d < 2:
        raise ValueError("uniformity needs points on a sphere of dimension >= 1")
    norms = np.linalg.norm(z, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise ValueError("cannot place the zero vector on the sphere")
    u = z / norms
    iu = np.triu_indices(n, 1)
    cos = np.clip((u @ u.T)[iu], -1.0, 1.0)
    theta = np.arccos(cos)
    a = (d - 1) / 2.0
    return float(stats.kstest(theta, lambda t: stats.beta.sf((1 + np.cos(t)) / 2.0, a, a)).statistic)


def _diagnostics(z, cfg, labels, project):
    loss, g = loss_and_gradient(z, cfg)
    if project:
        g, _ = tangential_part(z, g)
    grad = float(np.max(np.linalg.norm(g, axis=1)))
    coh = cluster_coherence(z, labels) if labels is not None and len(np.unique(labels)) > 1 else np.nan
    uni = uniformity_score(z) if z.shape[0] > 1 and z.shape[1] > 1 and np.all(np.any(z != 0, axis=1)) else np.nan
    return loss, grad, coh, uni


def _should_record(b, flow):
    return b % flow.record_stride == 0 or b == flow.max_steps


def run_flow(z0, cfg: SimilarityConfig, flow: FlowConfig, *, kernel_matrix: Optional[KernelMatrix] = None,
             net: Optional[Net] = None, X=None, params: Optional[ClusterFlowParams] = None,
             labels=None) -> Trajectory:
    """Integrate one of the latent dynamics from ``z0``.

    Args:
        z0: Initial configuration, one row per point.
        cfg: Loss configuration.
        flow: Integration settings; ``flow.mode`` picks the update.
        kernel_matrix: Kernel for ``kernel-exact`` mode when it is frozen.
        net: Network whose kernel drives ``kernel-exact`` mode. Unless the
            kernel is frozen, the weights take weight-space steps alongside
            the latent steps and the kernel is recomputed from them.
        X: Inputs matching ``net``.
        params: Coefficients for the clustered and infinite-width flows.
        labels: Cluster labels used for the coherence diagnostic.

    Returns:
        The recorded trajectory.
    """
    if flow.mode == "weight-space":
        raise ValueError("use run_weight_space for weight-space descent")
    z = np.array(np.atleast_2d(z0), dtype=float)
    traj = Trajectory()
    project = flow.sphere_projection
    if labels is None and params is not None:
        labels = params.labels
    if flow.mode == "kernel-exact":
        if kernel_matrix is None and net is None:
            raise ValueError("kernel-exact mode needs a kernel matrix or a network")
        if kernel_matrix is None:
            X = np.atleast_2d(np.asarray(X, dtype=float))
            kernel_matrix = net_kernel(net, X)
    elif flow.mode in ("clustered-approx", "infinite-width") and params is None:
        raise ValueError(f"{flow.mode} mode needs ClusterFlowParams")

    loss, grad, coh, uni = _diagnostics(z, cfg, labels, project)
    traj.record(0, z, loss, grad, coherence=coh, uniformity=uni)
    for b in range(1, flow.max_steps + 1):
        if flow.mode == "vanilla":
            z = step_vanilla(z, cfg, flow.step, project)
        elif flow.mode == "kernel-exact":
            z = step_kernel(z, kernel_matrix, cfg, flow.step, project)
            if net is not None and not flow.frozen_kernel:
                _, gw, _ = weight_gradient_of_loss(net, X, cfg)
                net = net.with_params(net.params - flow.step * gw)
                kernel_matrix = net_kernel(net, X)
        else:
            z = step_clustered(z, params, cfg, flow.step, project)
        if not np.all(np.isfinite(z)):
            raise DivergenceError(b, np.nan)
        if _should_record(b, flow):
            loss, grad, coh, uni = _diagnostics(z, cfg, labels, project)
            if not np.isfinite(loss) or loss > DIVERGENCE_LOSS:
                raise DivergenceError(b, loss)
            traj.record(b, z, loss, grad, coherence=coh, uniformity=uni)
    return traj


def run_weight_space(net: Net, data, perturb: Optional[PerturbationSet], cfg: SimilarityConfig,
                     flow: FlowConfig, invariance_samples: int = 256,
                     seed: int = 0) -> tuple[Trajectory, Net]:
    """Explicit-Euler descent on the network weights.

    A step that would increase the loss is retried with half the step size,
    at most ``flow.max_halvings`` times; the loss sequence is therefore
    non-increasing unless every retry fails, in which case the smallest step
    is taken anyway. The latent configuration is never projected.

    Raises:
        DivergenceError: if the latent configuration stops being finite or
            the loss becomes NaN or exceeds 1e6.
    """
    if isinstance(data, ClusteredDataset):
        X, labels = data.points, data.labels
    else:
        X, labels = np.atleast_2d(np.asarray(data, dtype=float)), None
    if not np.all(np.isfinite(net.params)):
        raise ValueError("network parameters must be finite")
    traj = Trajectory()

    def diagnostics(current, z, loss, gw):
        inv = monitor_invariance(current, X, perturb, invariance_samples, seed) if perturb is not None else np.nan
        _, g = loss_and_gradient(z, cfg)
        coh = cluster_coherence(z, labels) if labels is not None and len(np.unique(labels)) > 1 else np.nan
        uni = uniformity_score(z) if z.shape[1] > 1 and np.all(np.any(z != 0, axis=1)) else np.nan
        return float(np.max(np.linalg.norm(g, axis=1))), inv, coh, uni

    loss, gw, z = weight_gradient_of_loss(net, X, cfg)
    traj.record(0, z, loss, *diagnostics(net, z, loss, gw))
    for b in range(1, flow.max_steps + 1):
        step = flow.step
        for _ in range(flow.max_halvings + 1):
            candidate = net.with_params(net.params - step * gw)
            z_new = candidate.forward(X)
            new_loss, _ = loss_and_gradient(z_new, cfg)
            if not np.all(np.isfinite(z_new)) or not np.isfinite(new_loss) or new_loss > DIVERGENCE_LOSS:
                raise DivergenceError(b, new_loss)
            if new_loss <= loss:
                break
            step *= 0.5
        net = candidate
        loss, gw, z = weight_gradient_of_loss(net, X, cfg)
        if _should_record(b, flow):
            traj.record(b, z, loss, *diagnostics(net, z, loss, gw))
    return traj, net
