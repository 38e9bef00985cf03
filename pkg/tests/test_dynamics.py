import csv

import numpy as np
import pytest

from contrastive_dynamics.dataset import ClusterSpec, PerturbationSet, generate
from contrastive_dynamics.dynamics import (
    ClusterFlowParams,
    DivergenceError,
    FlowConfig,
    Trajectory,
    cluster_coherence,
    kernel_increment,
    monitor_invariance,
    run_flow,
    run_weight_space,
    step_clustered,
    step_kernel,
    step_vanilla,
    uniformity_score,
)
from contrastive_dynamics.losses import SimilarityConfig
from contrastive_dynamics.network import KernelMatrix, NetSpec, init_gaussian, init_invariant, kernel
from contrastive_dynamics.variations import invariant_gradient

CFG = SimilarityConfig(tau=0.5)


def identity_kernel(n, d, scale):
    blocks = np.zeros((n, n, d, d))
    for i in range(n):
        blocks[i, i] = scale * np.eye(d)
    return KernelMatrix(blocks)


def circle(angles):
    return np.column_stack([np.cos(angles), np.sin(angles)])


class TestVanillaStep:
    def test_coincident_points_fixed(self):
        z = np.tile([0.2, -0.4], (4, 1))
        np.testing.assert_array_equal(step_vanilla(z, CFG, 0.3), z)

    def test_hand_rolled_update(self):
        z = np.array([[0.1, 0.9], [-0.5, 0.2], [0.3, -0.7]])
        g = invariant_gradient(z, CFG).euclidean
        np.testing.assert_allclose(step_vanilla(z, CFG, 0.25), z - 0.25 * g, rtol=1e-15)

    def test_projection_lands_on_sphere(self):
        z = np.random.default_rng(0).normal(size=(5, 3))
        assert np.allclose(np.linalg.norm(step_vanilla(z, CFG, 0.1, project=True), axis=1), 1.0)

    def test_duplicates_stay_identical(self):
        base = np.random.default_rng(3).normal(size=(4, 2))
        z0 = np.vstack([base, base[[0, 2]]])
        traj = run_flow(z0, SimilarityConfig(tau=0.2), FlowConfig("vanilla", 0.05, 1000, record_stride=100))
        for z in traj.states:
            assert np.array_equal(z[0], z[4]) and np.array_equal(z[2], z[5])


class TestKernelStep:
    def test_scaled_identity_equals_vanilla(self):
        z0 = np.random.default_rng(1).normal(size=(5, 2))
        K = identity_kernel(5, 2, 5.0)
        np.testing.assert_array_equal(step_kernel(z0, K, CFG, 0.1), step_vanilla(z0, CFG, 0.1))
        a = run_flow(z0, CFG, FlowConfig("kernel-exact", 0.1, 50, frozen_kernel=True), kernel_matrix=K)
        b = run_flow(z0, CFG, FlowConfig("vanilla", 0.1, 50))
        for za, zb in zip(a.states, b.states):
            np.testing.assert_array_equal(za, zb)

    def test_zero_kernel(self):
        z = np.random.default_rng(2).normal(size=(3, 2))
        np.testing.assert_array_equal(step_kernel(z, KernelMatrix(np.zeros((3, 3, 2, 2))), CFG, 1.0), z)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            step_kernel(np.zeros((3, 2)), identity_kernel(4, 2, 1.0), CFG, 0.1)


class TestWeightSpace:
    spec = NetSpec(3, 2, width=16, activation="tanh")

    def test_zero_steps(self):
        net = init_gaussian(self.spec, seed=0)
        X = np.random.default_rng(0).normal(size=(6, 3))
        traj, out = run_weight_space(net, X, None, CFG, FlowConfig("weight-space", 0.1, 0))
        assert len(traj) == 1 and traj.times == [0]
        np.testing.assert_array_equal(traj.states[0], net.forward(X))
        assert out is net

    def test_first_step_matches_kernel_formula_to_second_order(self):
        net = init_gaussian(self.spec, seed=4)
        X = np.random.default_rng(4).normal(size=(5, 3))
        z0 = net.forward(X)
        K = kernel(net, X)
        errors = []
        for step in (0.2, 0.1, 0.05):
            traj, _ = run_weight_space(net, X, None, CFG, FlowConfig("weight-space", step, 1, max_halvings=0))
            predicted = kernel_increment(z0, K, CFG, step)
            errors.append(np.max(np.abs(traj.states[1] - z0 - predicted)))
        ratios = np.array(errors[:-1]) / np.array(errors[1:])
        assert np.all(np.abs(ratios - 4.0) < 0.4)

    def test_energy_descent(self):
        net = init_gaussian(self.spec, seed=1)
        data = generate(ClusterSpec(3, 2, 2, (6, 6), (1.0, 1.0), 0.1, seed=1))
        traj, _ = run_weight_space(net, data, None, SimilarityConfig(tau=0.1), FlowConfig("weight-space", 50.0, 60))
        assert np.all(np.diff(traj.loss) <= 0)

    def test_invariance_lost_from_invariant_start(self):
        spec = NetSpec(3, 2, width=8, hidden=(8,), activation="tanh")
        net = init_invariant(spec, seed=0)
        data = generate(ClusterSpec(3, 2, 2, (5, 5), (1.0, 1.0), 0.1, seed=0))
        perturb = PerturbationSet("orthogonal-noise", latent_dim=2, magnitude=0.1)
        traj, _ = run_weight_space(net, data, perturb, SimilarityConfig(tau=0.1),
                                   FlowConfig("weight-space", 1.0, 30, record_stride=10))
        assert traj.invariance_dev[0] == 0.0
        assert traj.invariance_dev[-1] > 0

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_reported_with_step(self):
        # the loss is bounded, so only an overflowing output can diverge
        net = init_gaussian(NetSpec(2, 2, width=1, activation="identity"), seed=0)
        net = net.with_params(np.full_like(net.params, 1e300))
        X = np.array([[1e10, 0.0], [0.0, 1e10]])
        with pytest.raises(DivergenceError) as info:
            run_weight_space(net, X, None, CFG, FlowConfig("weight-space", 0.1, 3))
        assert info.value.step == 1

    def test_non_finite_parameters_rejected(self):
        net = init_gaussian(self.spec, seed=0)
        bad = net.with_params(np.full_like(net.params, np.nan))
        with pytest.raises(ValueError):
            run_weight_space(bad, np.ones((2, 3)), None, CFG, FlowConfig("weight-space"))

    def test_kernel_mode_recomputes_from_net(self):
        net = init_gaussian(self.spec, seed=2)
        X = np.random.default_rng(2).normal(size=(5, 3))
        frozen = run_flow(net.forward(X), CFG, FlowConfig("kernel-exact", 1.0, 5, frozen_kernel=True), net=net, X=X)
        live = run_flow(net.forward(X), CFG, FlowConfig("kernel-exact", 1.0, 5), net=net, X=X)
        np.testing.assert_array_equal(frozen.states[1], live.states[1])
        assert not np.array_equal(frozen.final, live.final)


class TestClusteredStep:
    def test_infinite_width_formula(self):
        N = 3
        data = generate(ClusterSpec(4, 3, N, (2, 2, 2), (1.0, 1.0, 1.0), 0.0))
        params = ClusterFlowParams.infinite_width(data, 2)
        z = np.random.default_rng(0).normal(size=(6, 2))
        g = invariant_gradient(z, CFG).euclidean
        expected = z - 0.3 / (2 * N) * g[params.representatives][data.labels]
        np.testing.assert_allclose(step_clustered(z, params, CFG, 0.3), expected, rtol=1e-14)

    def test_mass_ratio(self):
        data = generate(ClusterSpec(3, 2, 2, (1, 99), (1.0, 1.0), 0.0))
        params = ClusterFlowParams.infinite_width(data, 2)
        z = np.vstack([[1.0, 0.0], np.tile([0.0, 1.0], (99, 1))])
        g = invariant_gradient(z, CFG).euclidean
        inc = step_clustered(z, params, CFG, 1.0) - z
        scale = [np.linalg.norm(inc[r]) / np.linalg.norm(g[r]) for r in params.representatives]
        assert scale[1] / scale[0] == pytest.approx(99.0, rel=1e-12)

    def test_same_cluster_points_move_together(self):
        data = generate(ClusterSpec(4, 2, 2, (3, 4), (1.0, 2.0), 0.05, seed=1))
        params = ClusterFlowParams.from_net(init_gaussian(NetSpec(4, 2, width=8), seed=0), data)
        z = np.random.default_rng(1).normal(size=(7, 2))
        inc = step_clustered(z, params, CFG, 0.1) - z
        for q in range(2):
            rows = np.flatnonzero(data.labels == q)
            np.testing.assert_allclose(inc[rows], np.broadcast_to(inc[rows[0]], (len(rows), 2)), atol=1e-15)

    def test_relu_betas_match_exact_kernel_without_noise(self):
        data = generate(ClusterSpec(5, 3, 3, (2, 3, 4), (1.0, 1.5, 0.7), 0.0))
        net = init_gaussian(NetSpec(5, 2, width=32), seed=3)
        z = net.forward(data.points)
        exact = kernel_increment(z, kernel(net, data.points), CFG, 0.2)
        approx = step_clustered(z, ClusterFlowParams.from_net(net, data), CFG, 0.2) - z
        np.testing.assert_allclose(approx, exact, atol=1e-10)
        assert np.all(ClusterFlowParams.from_net(net, data).betas <= 1.0)

    def test_unknown_cluster_index(self):
        with pytest.raises(ValueError, match="cluster index"):
            ClusterFlowParams(np.ones((2, 2)), np.array([0.5, 0.5]), np.ones(2), np.array([0, 2]))

    def test_mode_needs_params(self):
        with pytest.raises(ValueError):
            run_flow(np.ones((2, 2)), CFG, FlowConfig("clustered-approx"))


class TestMonitorInvariance:
    perturb = PerturbationSet("orthogonal-noise", latent_dim=2, magnitude=0.1)
    X = np.random.default_rng(0).normal(size=(20, 4))

    def test_invariant_net(self):
        net = init_invariant(NetSpec(4, 2, width=4, hidden=(6,)), seed=0)
        assert monitor_invariance(net, self.X, self.perturb) == 0.0

    def test_identity_only(self):
        assert monitor_invariance(init_gaussian(NetSpec(4, 2, width=4)), self.X, PerturbationSet()) == 0.0

    def test_generic_net_positive(self):
        assert monitor_invariance(init_gaussian(NetSpec(4, 2, width=4), seed=1), self.X, self.perturb) > 0


class TestCoherence:
    def test_tight_blobs(self):
        rng = np.random.default_rng(0)
        centers = np.array([[5.0, 0.0], [-5.0, 0.0], [0.0, 5.0]])
        labels = np.repeat(np.arange(3), 10)
        z = centers[labels] + 0.05 * rng.normal(size=(30, 2))
        assert cluster_coherence(z, labels) > 0.9

    def test_random_labels(self):
        for seed in range(20):
            rng = np.random.default_rng(seed)
            z = circle(rng.uniform(0, 2 * np.pi, 200))
            assert abs(cluster_coherence(z, rng.integers(0, 2, 200))) < 0.1

    def test_coincident_points(self):
        assert cluster_coherence(np.ones((6, 2)), [0, 0, 1, 1, 2, 2]) == 0.0

    def test_singleton_cluster(self):
        z = np.array([[0.0, 0.0], [0.1, 0.0], [3.0, 0.0]])
        # the singleton has a = 0 so it scores exactly 1
        expected = np.mean([(3.0 - 0.1) / 3.0, (2.9 - 0.1) / 2.9, 1.0])
        assert cluster_coherence(z, [0, 0, 1]) == pytest.approx(expected, rel=1e-12)

    def test_needs_two_clusters(self):
        with pytest.raises(ValueError):
            cluster_coherence(np.ones((3, 2)), [0, 0, 0])


class TestUniformity:
    def test_roots_of_unity(self):
        assert uniformity_score(circle(2 * np.pi * np.arange(64) / 64)) < 0.05

    def test_coincident(self):
        assert uniformity_score(np.tile([1.0, 0.0], (10, 1))) == pytest.approx(1.0)

    def test_antipodal_halves_intermediate(self):
        value = uniformity_score(np.repeat(circle([0.0, np.pi]), 10, axis=0))
        assert 0.05 < value < 0.99

    def test_random_sphere_points(self):
        u = np.random.default_rng(0).normal(size=(300, 3))
        assert uniformity_score(u) < 0.05

    def test_needs_two_points(self):
        with pytest.raises(ValueError):
            uniformity_score(np.ones((1, 2)))


class TestTrajectory:
    def test_times_strictly_increasing(self):
        traj = Trajectory()
        traj.record(0, np.zeros((1, 2)), 0.0, 0.0)
        with pytest.raises(ValueError):
            traj.record(0, np.zeros((1, 2)), 0.0, 0.0)

    def test_stride_keeps_initial_and_final(self):
        z0 = np.random.default_rng(0).normal(size=(4, 2))
        traj = run_flow(z0, CFG, FlowConfig("vanilla", 0.1, 7, record_stride=3))
        assert traj.times == [0, 3, 6, 7]
        np.testing.assert_array_equal(traj.states[0], z0)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_in_latent_flow(self):
        with pytest.raises(DivergenceError):
            run_flow(np.array([[1.7e308, 0.0], [-1.7e308, 0.0]]), CFG, FlowConfig("vanilla", 0.1, 2))

    def test_csv_exports(self, tmp_path):
        traj = run_flow(np.random.default_rng(0).normal(size=(3, 2)), CFG, FlowConfig("vanilla", 0.1, 2),
                        labels=[0, 0, 1])
        traj.to_csv(tmp_path / "t.csv")
        traj.states_to_csv(tmp_path / "s.csv")
        rows = list(csv.DictReader(open(tmp_path / "t.csv")))
        assert [int(r["step"]) for r in rows] == [0, 1, 2]
        assert float(rows[-1]["loss"]) == traj.loss[-1]
        states = list(csv.DictReader(open(tmp_path / "s.csv")))
        assert len(states) == 9 and float(states[-1]["z_1"]) == traj.final[2, 1]
