"""Sweeps, dynamics comparisons and verification suites.

Each function returns plain result objects; :func:`emit_plots` and
:func:`write_manifest` turn them into CSV, SVG and a JSON manifest.
"""

from __future__ import annotations

import csv
import hashlib
import json
import platform
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
import scipy
from scipy import stats

from . import __version__
from .dataset import ClusterSpec, PerturbationSet, generate, line_clusters, make_rng
from .dynamics import (
    ClusterFlowParams,
    FlowConfig,
    Trajectory,
    clustered_increment,
    kernel_increment,
    run_flow,
    run_weight_space,
    step_vanilla,
)
from .losses import SimilarityConfig, full_loss_two_view, generalized_loss
from .network import NetSpec, init_gaussian, init_invariant, kernel, kernel_infinite, weight_gradient
from .svg import Series, line_chart
from .variations import (
    finite_difference_gradient,
    first_variation_pairing,
    gradient_check,
    scaled_map_gradient_decay,
    second_variation,
    stationarity_check,
)

SCHEMA_VERSION = 1
PLATEAU_RULE = 0.01
TAU_GRID = tuple(round(0.02 * k, 10) for k in range(1, 26))


# ---------------------------------------------------------------------------
# configurations on the circle


def evenly_spaced(K: int) -> np.ndarray:
    """The ``K``-th roots of unity as rows of a ``(K, 2)`` array."""
    if K < 1:
        raise ValueError("K must be positive")
    theta = 2 * np.pi * np.arange(K) / K
    return np.column_stack([np.cos(theta), np.sin(theta)])


def max_arc_sq_distance(K: int) -> float:
    """Largest achievable minimum squared distance of ``K`` equally spaced arc points."""
    if K < 2:
        return 0.0
    return float(2.0 - 2.0 * np.cos(2 * np.pi / K))


def arc_configuration(K: int, min_sq_dist: float) -> np.ndarray:
    """``K`` points on the unit circle, consecutive ones at squared distance ``min_sq_dist``.

    Raises:
        ValueError: if ``K`` points cannot keep that squared distance on the circle.
    """
    limit = max_arc_sq_distance(K)
    if min_sq_dist < 0 or min_sq_dist > limit * (1 + 1e-12):
        raise ValueError(
            f"minimum squared distance {min_sq_dist} is infeasible for K={K} points on the circle "
            f"(maximum {limit})"
        )
    step = np.arccos(np.clip(1.0 - min_sq_dist / 2.0, -1.0, 1.0))
    theta = step * np.arange(K)
    return np.column_stack([np.cos(theta), np.sin(theta)])


# ---------------------------------------------------------------------------
# sweeps


@dataclass
class SweepResult:
    """One loss curve with its derived statistics.

    Args:
        axis: Strictly increasing axis values.
        values: Curve values, one per axis value.
        axis_name: Label of the axis.
        label: Series label, e.g. ``"tau=0.1"``.
        plateau: Axis value where the curve flattens (``None`` if it never does).
        slope, intercept, r2: Linear-fit statistics (threshold sweeps only).
    """

    axis: np.ndarray
    values: np.ndarray
    axis_name: str
    label: str = ""
    value_name: str = "loss"
    plateau: Optional[float] = None
    slope: Optional[float] = None
    intercept: Optional[float] = None
    r2: Optional[float] = None

    def __post_init__(self):
        self.axis = np.asarray(self.axis, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        if self.axis.shape != self.values.shape:
            raise ValueError("axis and values must have the same length")
        if np.any(np.diff(self.axis) <= 0):
            raise ValueError("sweep axis must be strictly increasing")

    def non_increasing(self, tol: float = 1e-12) -> bool:
        return bool(np.all(np.diff(self.values) <= tol))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow([self.axis_name, self.value_name])
            for a, v in zip(self.axis, self.values):
                writer.writerow([repr(float(a)), repr(float(v))])

    def summary(self) -> dict:
        return {k: getattr(self, k) for k in ("label", "axis_name", "plateau", "slope", "intercept", "r2")}


def detect_plateau(values: Sequence[float], rel: float = PLATEAU_RULE) -> Optional[int]:
    """Index of the first point reached by a decrease smaller than ``rel`` of the total drop.

    The total drop is ``values[0] - values[-1]``. Returns ``None`` if the
    curve has no drop or never flattens.
    """
    values = np.asarray(values, dtype=float)
    drop = values[0] - values[-1]
    if values.size < 2 or not drop > 0:
        return None
    small = np.flatnonzero(values[:-1] - values[1:] < rel * drop)
    return int(small[0] + 1) if small.size else None


def _loss_on_circle(z: np.ndarray, tau: float, weights=None) -> float:
    return generalized_loss(z, SimilarityConfig(tau=tau), weights)


def _multiplicity_weights(K: int, n: Optional[int]) -> Optional[np.ndarray]:
    if n is None:
        return None
    if n < K:
        raise ValueError(f"cannot spread n={n} samples over K={K} locations")
    counts = np.full(K, n // K)
    counts[: n % K] += 1
    return counts / n


def sweep_clusters(K_values: Sequence[int], taus: Sequence[float], n: Optional[int] = None,
                   rel: float = PLATEAU_RULE) -> list[SweepResult]:
    """Loss of ``K`` evenly spaced locations on the circle, one curve per ``tau``.

    With ``n`` given, the ``n`` samples are split as evenly as possible
    over the ``K`` locations; otherwise every location has mass ``1/K``.
    """
    out = []
    for tau in taus:
        values = [_loss_on_circle(evenly_spaced(K), tau, _multiplicity_weights(K, n)) for K in K_values]
        idx = detect_plateau(values, rel)
        out.append(SweepResult(np.asarray(K_values, float), values, "K", f"tau={tau:g}",
                               plateau=None if idx is None else float(K_values[idx])))
    return out


def distance_grid(K: int, num: int = 101) -> np.ndarray:
    """``num`` evenly spaced squared distances from 0 to the feasible maximum.

    The plateau rule compares one step's decrease with ``rel`` times the
    total drop, so it only describes the curve itself (local slope below
    the mean slope) when ``rel = 1 / (num - 1)``. The default pairs 101
    points with the 1% rule.
    """
    return np.linspace(0.0, max_arc_sq_distance(K), num)


def sweep_min_distance(K: int, distances: Optional[Sequence[float]], taus: Sequence[float],
                       rel: float = PLATEAU_RULE) -> list[SweepResult]:
    """Loss of ``K`` arc points against their minimum squared distance, one curve per ``tau``.

    The threshold is the first distance reached by a decrease below
    ``rel`` of the total drop.
    """
    distances = distance_grid(K) if distances is None else np.asarray(distances, dtype=float)
    configs = [arc_configuration(K, s) for s in distances]
    out = []
    for tau in taus:
        values = [_loss_on_circle(z, tau) for z in configs]
        idx = detect_plateau(values, rel)
        out.append(SweepResult(distances, values, "min squared distance", f"tau={tau:g}",
                               plateau=None if idx is None else float(distances[idx])))
    return out


def sweep_tau_threshold(taus: Sequence[float], K: int = 8, distances: Optional[Sequence[float]] = None,
                        rel: float = PLATEAU_RULE, geometry: str = "arc",
                        max_K: int = 256) -> SweepResult:
    """Threshold distance against ``tau`` with a least-squares line through it.

    ``geometry="arc"`` keeps ``K`` fixed and moves the points along an arc.
    ``geometry="even"`` instead uses evenly spaced configurations with
    ``K = 1..max_K`` and reports the squared distance between neighbours
    at the plateau in ``K``.
    """
    taus = np.asarray(taus, dtype=float)
    if geometry == "arc":
        thresholds = [r.plateau for r in sweep_min_distance(K, distances, taus, rel)]
    elif geometry == "even":
        Ks = list(range(1, max_K + 1))
        thresholds = [None if r.plateau is None else max_arc_sq_distance(int(r.plateau))
                      for r in sweep_clusters(Ks, taus, rel=rel)]
    else:
        raise ValueError(f"unknown geometry {geometry!r}")
    missing = [t for t, th in zip(taus, thresholds) if th is None]
    if missing:
        raise ValueError(f"no threshold detected for tau={missing}")
    thresholds = np.asarray(thresholds, dtype=float)
    fit = stats.linregress(taus, thresholds)
    return SweepResult(taus, thresholds, "tau", f"K={K}" if geometry == "arc" else "even",
                       value_name="threshold", slope=float(fit.slope), intercept=float(fit.intercept),
                       r2=float(fit.rvalue**2))


# ---------------------------------------------------------------------------
# dynamics comparison


@dataclass(frozen=True)
class CompareConfig:
    """Setup for the with/without-kernel comparison on clusters along a line.

    The weight-space path trains a one-hidden-layer net; the vanilla path
    starts from the same initial embedding projected onto the circle and
    descends with sphere projection.
    """

    positions: tuple = (-3.0, -1.0, 1.0, 3.0)
    n: int = 200
    ambient_dim: int = 3
    latent_dim: int = 2
    noise_bound: float = 0.1
    width: int = 256
    activation: str = "relu"
    tau: float = 0.1
    weight_step: float = 1.0
    weight_steps: int = 400
    vanilla_step: float = 0.2
    vanilla_steps: int = 1000
    record_stride: int = 10
    coherence_target: float = 0.8
    uniformity_target: float = 0.1
    stationarity_target: float = 1e-4
    seed: int = 0


@dataclass
class CompareReport:
    kernel: Trajectory
    vanilla: Trajectory
    verdict: dict

    @property
    def passed(self) -> bool:
        return bool(self.verdict["kernel_reached"] and self.verdict["vanilla_reached"])


def compare_dynamics(config: CompareConfig = CompareConfig()) -> CompareReport:
    """Run weight-space descent and vanilla latent descent from one initial embedding."""
    data = line_clusters(tuple(config.positions), config.n, config.ambient_dim, config.latent_dim,
                         config.noise_bound, config.seed)
    cfg = SimilarityConfig(tau=config.tau)
    net = init_gaussian(NetSpec(config.ambient_dim, config.latent_dim, width=config.width,
                                activation=config.activation), seed=config.seed)
    wflow = FlowConfig("weight-space", config.weight_step, config.weight_steps, config.record_stride)
    kernel_traj, _ = run_weight_space(net, data, None, cfg, wflow)
    z0 = kernel_traj.states[0]
    norms = np.linalg.norm(z0, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise ValueError("initial embedding maps a point to the origin; cannot start on the sphere")
    vflow = FlowConfig("vanilla", config.vanilla_step, config.vanilla_steps, config.record_stride,
                       sphere_projection=True)
    vanilla_traj = run_flow(z0 / norms, cfg, vflow, labels=data.labels)

    k_first = kernel_traj.first_time("coherence", lambda v: v >= config.coherence_target)
    v_first = vanilla_traj.first_time("uniformity", lambda v: v <= config.uniformity_target)
    _, v_report = stationarity_check(vanilla_traj.final, cfg)
    verdict = {
        "seed": config.seed,
        "kernel_initial_coherence": kernel_traj.coherence[0],
        "kernel_final_coherence": kernel_traj.coherence[-1],
        "kernel_first_coherent_step": k_first,
        "kernel_reached": k_first is not None and k_first < kernel_traj.times[-1],
        "kernel_final_max_grad": kernel_traj.max_grad[-1],
        "kernel_stationary": kernel_traj.max_grad[-1] <= config.stationarity_target,
        "vanilla_final_uniformity": vanilla_traj.uniformity[-1],
        "vanilla_final_coherence": vanilla_traj.coherence[-1],
        "vanilla_first_uniform_step": v_first,
        "vanilla_reached": v_first is not None and v_first < vanilla_traj.times[-1],
        "vanilla_final_max_tangential": v_report.max_tangential_norm,
        "vanilla_stationary": v_report.max_tangential_norm <= config.stationarity_target,
    }
    return CompareReport(kernel_traj, vanilla_traj, verdict)


# ---------------------------------------------------------------------------
# verification suites


def _random_embedding(rng, D: int, d: int):
    W1 = rng.normal(size=(6, D)) / np.sqrt(D)
    W2 = rng.normal(size=(d, 6)) / np.sqrt(6)
    return lambda X: np.tanh(X @ W1.T) @ W2.T


def gradient_suite(instances: int = 20, seed: int = 0, step: float = 1e-5) -> dict:
    """Relative errors of the analytic first variations against central differences.

    Each instance draws ``n <= 10`` latent points in ``d <= 4`` dimensions
    with random weights and temperature for the latent gradient, and a
    random tanh embedding, direction ``h`` and finite perturbation list for
    the pairing with the two-view loss.
    """
    rng = make_rng(seed)
    latent, pairing = [], []
    for _ in range(instances):
        n, d = int(rng.integers(2, 11)), int(rng.integers(1, 5))
        cfg = SimilarityConfig(tau=float(rng.uniform(0.2, 2.0)), psi=str(rng.choice(["log1p", "log1p_half", "identity"])))
        w = rng.random(n) + 0.1
        latent.append(gradient_check(rng.normal(size=(n, d)), cfg, w / w.sum(), step))

        D, latent_dim = d + 2, d
        X = rng.normal(size=(n, D))
        draws = np.zeros((3, D))
        draws[:, latent_dim:] = rng.normal(scale=0.3, size=(3, D - latent_dim))
        perturb = PerturbationSet("finite-list", latent_dim, draws=draws)
        f, h = _random_embedding(rng, D, d), _random_embedding(rng, D, d)
        analytic = first_variation_pairing(X, f, perturb, cfg, h)
        fd = finite_difference_gradient(
            lambda e: full_loss_two_view(X, lambda Y: f(Y) + e[0] * h(Y), perturb, cfg), np.zeros(1), step)[0]
        pairing.append(abs(analytic - fd) / max(abs(fd), np.finfo(float).tiny))
    return {"latent": latent, "pairing": pairing, "max": float(max(latent + pairing))}


def stationarity_suite(ns: Sequence[int] = range(2, 17), tau: float = 0.1) -> dict:
    """Max tangential gradient of roots-of-unity configurations and of a single point."""
    cfg = SimilarityConfig(tau=tau)
    out = {f"roots-{n}": stationarity_check(evenly_spaced(n), cfg)[1].max_tangential_norm for n in ns}
    out["single-point"] = stationarity_check(np.array([[1.0, 0.0]]), cfg)[1].max_tangential_norm
    return out


def second_variation_suite(Ks: Sequence[int] = (2, 3), directions: int = 100, tau: Optional[float] = None,
                           multiplicity: int = 2, seed: int = 0, max_draws: int = 100_000) -> dict:
    """Second variation along random cluster-constant directions meeting the sufficient condition.

    Clusters sit at the ``K``-th roots of unity with ``multiplicity`` points
    each; per-cluster directions are Gaussian in the plane, and draws failing
    the condition are rejected. By default ``tau`` is chosen per ``K`` so the
    threshold ``3 K^2 tau`` is half the squared distance between clusters,
    the largest value ``sigma`` can take.
    """
    rng = make_rng(seed)
    out = {}
    for K in Ks:
        z = np.repeat(evenly_spaced(K), multiplicity, axis=0)
        if tau is None:
            tau_K = 0.5 * max_arc_sq_distance(K) / (3.0 * K**2)
        else:
            tau_K = tau
        values, draws = [], 0
        while len(values) < directions:
            draws += 1
            if draws > max_draws:
                raise RuntimeError(f"K={K}: too few directions satisfy the condition")
            report = second_variation(z, tau_K, rng.normal(size=(K, 2)))
            if report.satisfied:
                values.append(report.value)
        out[K] = {"values": values, "draws": draws, "tau": tau_K, "threshold": 3.0 * K**2 * tau_K}
    return out


def ill_posedness_check(n: int = 12, ambient_dim: int = 5, latent_dim: int = 2, magnitude: float = 0.1,
                        mc_samples: int = 10_000, seed: int = 0) -> dict:
    """Loss values of two datasets that an invariant map sends to the same points.

    The second dataset shifts every point of the first inside the
    orthogonal subspace, so the pushforwards coincide while the inputs differ.
    """
    rng = make_rng(seed)
    X = rng.normal(size=(n, ambient_dim))
    Y = X.copy()
    Y[:, latent_dim:] += rng.normal(size=(n, ambient_dim - latent_dim))
    net = init_invariant(NetSpec(ambient_dim, latent_dim, hidden=(16,), activation="tanh"), seed=seed)
    perturb = PerturbationSet("orthogonal-noise", latent_dim, magnitude)
    cfg = SimilarityConfig(tau=0.5)
    two_view = [full_loss_two_view(P, net.forward, perturb, cfg, mc_samples, seed, return_stderr=True)
                for P in (X, Y)]
    latent = [generalized_loss(net.forward(P), cfg) for P in (X, Y)]
    return {
        "inputs_differ": float(np.max(np.abs(X - Y))),
        "two_view": [v for v, _ in two_view],
        "two_view_stderr": [e for _, e in two_view],
        "two_view_gap": abs(two_view[0][0] - two_view[1][0]),
        "latent": latent,
        "latent_gap": abs(latent[0] - latent[1]),
    }


def kernel_exactness_check(nets: int = 10, seed: int = 0) -> dict:
    """Analytic kernel against the Gram matrix of explicit weight gradients."""
    rng = make_rng(seed)
    errors, off_block = [], []
    for t in range(nets):
        D, d = int(rng.integers(2, 6)), int(rng.integers(1, 4))
        M, n = int(rng.integers(1, 65)), int(rng.integers(1, 9))
        net = init_gaussian(NetSpec(D, d, width=M, activation=str(rng.choice(["relu", "tanh", "smooth-relu"]))),
                            seed=seed * 1000 + t)
        X = rng.normal(size=(n, D))
        grads = np.stack([[weight_gradient(net, x, k).reshape(-1) for k in range(d)] for x in X])
        gram = np.einsum("ikp,jlp->ijkl", grads, grads)
        K = kernel(net, X).blocks
        errors.append(float(np.max(np.abs(K - gram))))
        mask = ~np.eye(d, dtype=bool)
        off_block.append(float(max(np.max(np.abs(K[:, :, mask]), initial=0.0),
                                   np.max(np.abs(gram[:, :, mask]), initial=0.0))))
    return {"max_error": max(errors), "max_off_block": max(off_block), "errors": errors}


def kernel_convergence(widths: Sequence[int] = (256, 4096), angles: Sequence[float] = (0.0, np.pi / 4, np.pi / 2),
                       seeds: int = 20, d: int = 4) -> dict:
    """RMS Frobenius error of the finite-width relu kernel at unit-vector pairs.

    For each angle the pair ``(e_1, (cos a, sin a))`` gives a ``2 x 2``
    kernel per output; the error is measured against the infinite-width
    formula over all four entries and ``d`` outputs, then averaged over seeds.
    """
    rms = {}
    for a in angles:
        X = np.array([[1.0, 0.0], [np.cos(a), np.sin(a)]])
        target = kernel_infinite(X, d).blocks
        for M in widths:
            sq = []
            for s in range(seeds):
                net = init_gaussian(NetSpec(2, d, width=M), seed=s)
                sq.append(np.sum((kernel(net, X).blocks - target) ** 2) / d)
            rms[(float(a), M)] = float(np.sqrt(np.mean(sq)))
    lo, hi = min(widths), max(widths)
    ratios = {float(a): rms[(float(a), lo)] / rms[(float(a), hi)] for a in angles}
    return {"rms": {f"{a:.4f}@{M}": v for (a, M), v in rms.items()}, "ratios": ratios}


def invariance_check(seeds: int = 10, steps: int = 500, noise_bound: float = 0.1,
                     vanilla_steps: int = 1000) -> dict:
    """Invariance under the two dynamics.

    Vanilla descent runs from a configuration where every point has a
    duplicate; weight-space descent trains an invariant net on data with
    orthogonal noise and records the first step with deviation above 1e-6.
    """
    rng = make_rng(1234)
    base = rng.normal(size=(6, 2))
    z = np.repeat(base, 2, axis=0)
    cfg = SimilarityConfig(tau=0.5)
    for _ in range(vanilla_steps):
        z = step_vanilla(z, cfg, 0.05)
    duplicates_identical = bool(np.array_equal(z[0::2], z[1::2]))

    first_broken = []
    for seed in range(seeds):
        data = generate(ClusterSpec(4, 2, 2, (10, 10), (1.0, 1.0), noise_bound, seed))
        net = init_invariant(NetSpec(4, 2, hidden=(16,), activation="tanh"), seed=seed)
        perturb = PerturbationSet("orthogonal-noise", 2, noise_bound)
        traj, _ = run_weight_space(net, data, perturb, cfg, FlowConfig("weight-space", 0.5, steps, 10), seed=seed)
        first_broken.append(traj.first_time("invariance_dev", lambda v: v > 1e-6))
    return {"duplicates_identical": duplicates_identical, "first_broken": first_broken,
            "broken_seeds": sum(t is not None for t in first_broken)}


def cluster_flow_check(deltas: Sequence[float] = (0.1, 0.05, 0.01), seed: int = 0, width: int = 64,
                       tau: float = 0.5, activation: str = "smooth-relu") -> dict:
    """Same-cluster spread of kernel-descent increments as the noise bound shrinks.

    Also compares the kernel increments at zero noise with the clustered flow
    whose coefficients come from the same net. With relu a single sign flip
    of ``b_p . x`` moves the kernel by ``1/M`` however small the noise is, so
    the spread of one fixed net is not linear in the noise bound; the smooth
    default avoids that.
    """
    cfg = SimilarityConfig(tau=tau)
    net = init_gaussian(NetSpec(6, 3, width=width, activation=activation), seed=seed)

    def spread(delta):
        data = generate(ClusterSpec(6, 3, 3, (8, 8, 8), (1.0, 1.5, 2.0), delta, seed))
        z = net.forward(data.points)
        inc = kernel_increment(z, kernel(net, data.points), cfg, 1.0)
        worst = max(np.max(np.abs(inc[data.labels == q] - inc[data.labels == q][0])) for q in range(3))
        return float(worst), data, z, inc

    exact, data0, z0, inc0 = spread(0.0)
    clustered = clustered_increment(z0, ClusterFlowParams.from_net(net, data0), cfg, 1.0)
    spreads = [spread(d)[0] for d in deltas]
    fit = stats.linregress(np.log(deltas), np.log(spreads))
    return {"zero_noise_spread": exact, "clustered_gap": float(np.max(np.abs(clustered - inc0))),
            "spreads": spreads, "slope": float(fit.slope), "constants": [s / d for s, d in zip(spreads, deltas)]}


def scaled_map_check(scales: Optional[Sequence[float]] = None, seed: int = 0, tau: float = 0.1) -> dict:
    """Gradient norms of ``k * z`` for a 5-point configuration on the circle."""
    scales = np.linspace(1.0, 100.0, 100) if scales is None else np.asarray(scales, dtype=float)
    rng = make_rng(seed)
    theta = np.sort(rng.uniform(0, 2 * np.pi, 5))
    # keep neighbours apart so the decay is already past its maximum at k = 1
    theta = theta + np.arange(5) * 2 * np.pi / 5
    z = np.column_stack([np.cos(theta), np.sin(theta)])
    norms = scaled_map_gradient_decay(z, SimilarityConfig(tau=tau), scales)
    return {"scales": scales.tolist(), "norms": norms}


# ---------------------------------------------------------------------------
# configuration, manifests and output


@dataclass
class ExperimentConfig:
    """JSON-serializable description of one run.

    Sections are passed to the constructors of the matching types
    (``SimilarityConfig``, ``CompareConfig`` ...), so they validate under
    those types' own rules. Unknown keys are rejected at every level.
    """

    experiment: str
    seed: int = 0
    out: str = "results"
    similarity: dict = field(default_factory=dict)
    dataset: dict = field(default_factory=dict)
    network: dict = field(default_factory=dict)
    flow: dict = field(default_factory=dict)
    sweep: dict = field(default_factory=dict)
    schema_version: int = SCHEMA_VERSION

    EXPERIMENTS = ("sweep-clusters", "sweep-distance", "sweep-tau", "compare-dynamics",
                   "check-gradients", "kernel-converge")

    def __post_init__(self):
        if self.schema_version != SCHEMA_VERSION:
            raise ValueError(f"unsupported schema version {self.schema_version}")
        if self.experiment not in self.EXPERIMENTS:
            raise ValueError(f"unknown experiment {self.experiment!r}")
        try:
            SimilarityConfig(**self.similarity)
        except TypeError as exc:
            raise ValueError(f"similarity section: {exc}") from None

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        raw = json.loads(text)
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ValueError(f"unknown config keys: {unknown}")
        return cls(**raw)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2)

    def digest(self) -> str:
        canonical = json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode()).hexdigest()


def write_manifest(out_dir, config: Union[ExperimentConfig, dict], seed: int, files: Sequence) -> Path:
    """Write ``manifest.json`` with the config hash, seed, versions and outputs."""
    out_dir = Path(out_dir)
    if isinstance(config, ExperimentConfig):
        payload, digest = asdict(config), config.digest()
    else:
        payload = config
        digest = hashlib.sha256(json.dumps(config, sort_keys=True, separators=(",", ":"), default=str).encode()).hexdigest()
    manifest = {
        "config": payload,
        "config_sha256": digest,
        "seed": seed,
        "versions": {"package": __version__, "python": platform.python_version(),
                     "numpy": np.__version__, "scipy": scipy.__version__},
        "outputs": sorted(Path(f).name for f in files),
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, sort_keys=True, indent=2, default=str) + "\n")
    return path


def _slug(text: str) -> str:
    return "".join(c if c.isalnum() or c in "-." else "_" for c in text).strip("_")


def emit_plots(results: dict, out_dir, fmt: str = "both") -> list[Path]:
    """Write CSV and/or SVG files for named results.

    Args:
        results: Maps a name to a ``SweepResult``, a list of them (drawn in one
            chart) or a ``Trajectory``.
        out_dir: Existing or creatable directory.
        fmt: ``"csv"``, ``"svg"`` or ``"both"``.

    Returns:
        Paths written, in name order.

    Raises:
        ValueError: on empty input. Nothing is written in that case.
    """
    if fmt not in ("csv", "svg", "both"):
        raise ValueError(f"unknown format {fmt!r}")
    if not results:
        raise ValueError("no results to emit")
    rendered: list[tuple[Path, str, object]] = []
    out_dir = Path(out_dir)
    for name in sorted(results):
        item = results[name]
        if isinstance(item, Trajectory):
            if len(item) == 0:
                raise ValueError(f"{name}: empty trajectory")
            series = [Series(m, item.times, getattr(item, m)) for m in ("loss", "max_grad", "coherence", "uniformity")
                      if np.any(np.isfinite(getattr(item, m)))]
            if fmt in ("csv", "both"):
                rendered.append((out_dir / f"{_slug(name)}.csv", "trajectory", item))
                rendered.append((out_dir / f"{_slug(name)}_states.csv", "states", item))
            if fmt in ("svg", "both"):
                rendered.append((out_dir / f"{_slug(name)}.svg", "svg",
                                 line_chart(series, name, "step", "value")))
            continue
        sweeps = item if isinstance(item, list) else [item]
        if not sweeps or any(len(s.axis) == 0 for s in sweeps):
            raise ValueError(f"{name}: empty sweep")
        if fmt in ("csv", "both"):
            for s in sweeps:
                suffix = f"_{_slug(s.label)}" if len(sweeps) > 1 else ""
                rendered.append((out_dir / f"{_slug(name)}{suffix}.csv", "sweep", s))
        if fmt in ("svg", "both"):
            chart = line_chart([Series(s.label or name, s.axis, s.values) for s in sweeps], name,
                               sweeps[0].axis_name, sweeps[0].value_name)
            rendered.append((out_dir / f"{_slug(name)}.svg", "svg", chart))

    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for path, kind, payload in rendered:
        if kind == "svg":
            path.write_text(payload)
        elif kind == "trajectory":
            payload.to_csv(path)
        elif kind == "states":
            payload.states_to_csv(path)
        else:
            payload.to_csv(path)
        written.append(path)
    return written
