import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from contrastive_dynamics.dataset import PerturbationSet, apply_perturbation
from contrastive_dynamics.network import (
    GenericMLP,
    NetSpec,
    OneHiddenNet,
    averaging_head,
    init_gaussian,
    init_invariant,
    init_mlp,
    kernel,
    kernel_generic,
    kernel_infinite,
    net_from_json,
    weight_gradient,
)
from contrastive_dynamics.variations import finite_difference_gradient


def dense_forward(B, d, act, x):
    """Build the head A explicitly: column k has 1/sqrt(M) on rows kM..(k+1)M-1."""
    M = B.shape[0] // d
    A = np.zeros((M * d, d))
    for k in range(d):
        A[k * M:(k + 1) * M, k] = 1.0 / np.sqrt(M)
    return A.T @ act(B @ x)


class TestForward:
    def test_zero_weights(self):
        net = OneHiddenNet(np.zeros((6, 3)), 2)
        np.testing.assert_array_equal(net.forward(np.ones(3)), [0.0, 0.0])

    def test_scalar_example(self):
        assert OneHiddenNet(np.array([[2.0]]), 1).forward(np.array([3.0]))[0] == 6.0

    @pytest.mark.parametrize("act_name, act", [("relu", lambda v: np.maximum(v, 0)), ("tanh", np.tanh)])
    def test_dense_head_oracle(self, act_name, act):
        net = init_gaussian(NetSpec(4, 3, width=5, activation=act_name), seed=2)
        X = np.random.default_rng(0).normal(size=(6, 4))
        dense = np.stack([dense_forward(net.B, 3, act, x) for x in X])
        np.testing.assert_allclose(net.forward(X), dense, rtol=1e-13, atol=1e-15)

    def test_averaging_head_matches(self):
        np.testing.assert_array_equal(averaging_head(2, 2), np.array([[1, 0], [1, 0], [0, 1], [0, 1]]) / np.sqrt(2))

    def test_wrong_input_dimension(self):
        with pytest.raises(ValueError):
            init_gaussian(NetSpec(3, 2, width=4)).forward(np.ones(4))


class TestWeightGradient:
    net = init_gaussian(NetSpec(3, 2, width=4, activation="tanh"), seed=5)

    def test_zero_input(self):
        assert np.all(weight_gradient(self.net, np.zeros(3), 1) == 0)

    @pytest.mark.parametrize("k", [0, 1])
    def test_finite_differences(self, k):
        x = np.array([0.3, -1.2, 0.8])
        fd = finite_difference_gradient(lambda B: self.net.with_params(B.reshape(-1)).forward(x)[k], self.net.B.copy())
        np.testing.assert_allclose(weight_gradient(self.net, x, k), fd, rtol=1e-6, atol=1e-9)

    def test_row_support(self):
        g = weight_gradient(self.net, np.array([1.0, 2.0, 3.0]), 1)
        assert np.all(g[:4] == 0) and np.any(g[4:] != 0)

    def test_vjp_matches_gradients(self):
        X = np.random.default_rng(1).normal(size=(5, 3))
        cot = np.random.default_rng(2).normal(size=(5, 2))
        expected = sum(cot[i, k] * weight_gradient(self.net, X[i], k) for i in range(5) for k in range(2))
        np.testing.assert_allclose(self.net.vjp(X, cot), expected.reshape(-1), rtol=1e-12)


def gram(net, X):
    grads = np.stack([[weight_gradient(net, x, k).reshape(-1) for k in range(net.d)] for x in X])
    return np.einsum("ikp,jlp->ijkl", grads, grads)


class TestKernel:
    def test_orthogonal_inputs(self):
        net = init_gaussian(NetSpec(3, 2, width=8), seed=0)
        K = kernel(net, np.eye(3)[:2]).blocks
        assert np.all(K[0, 1] == 0)

    def test_identity_activation(self):
        net = init_gaussian(NetSpec(3, 2, width=8, activation="identity"), seed=0)
        X = np.random.default_rng(0).normal(size=(4, 3))
        K = kernel(net, X).blocks
        for k in range(2):
            np.testing.assert_allclose(K[:, :, k, k], X @ X.T, rtol=1e-13)

    @settings(max_examples=15, deadline=None)
    @given(seed=st.integers(0, 10_000), M=st.integers(1, 32), n=st.integers(1, 6),
           act=st.sampled_from(["relu", "tanh", "smooth-relu"]))
    def test_gram_equivalence(self, seed, M, n, act):
        net = init_gaussian(NetSpec(3, 2, width=M, activation=act), seed=seed)
        X = np.random.default_rng(seed).normal(size=(n, 3))
        K = kernel(net, X)
        np.testing.assert_allclose(K.blocks, gram(net, X), rtol=0, atol=1e-12)
        assert np.all(K.blocks[:, :, 0, 1] == 0) and np.all(K.blocks[:, :, 1, 0] == 0)
        assert K.min_eigenvalue() >= -1e-10

    def test_matrix_layout(self):
        net = init_gaussian(NetSpec(2, 2, width=3), seed=1)
        X = np.random.default_rng(3).normal(size=(3, 2))
        K = kernel(net, X)
        m = K.as_matrix()
        assert m[1 * 2 + 1, 2 * 2 + 1] == K.blocks[1, 2, 1, 1]
        g = np.random.default_rng(4).normal(size=(3, 2))
        np.testing.assert_allclose(K.apply(g).reshape(-1), m @ g.reshape(-1), rtol=1e-13)

    def test_csv(self, tmp_path):
        K = kernel(init_gaussian(NetSpec(2, 2, width=3)), np.eye(2))
        K.to_csv(tmp_path / "k.csv")
        np.testing.assert_array_equal(np.loadtxt(tmp_path / "k.csv", delimiter=","), K.as_matrix())


class TestInfiniteKernel:
    def test_same_unit_vector(self):
        np.testing.assert_allclose(kernel_infinite(np.array([[0.6, 0.8]]), 3).blocks[0, 0], 0.5 * np.eye(3))

    def test_orthogonal_and_antipodal(self):
        K = kernel_infinite(np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]]), 2).blocks
        assert np.all(K[0, 1] == 0)
        np.testing.assert_allclose(K[0, 2], 0.0, atol=1e-16)

    def test_zero_vector_rejected(self):
        with pytest.raises(ValueError):
            kernel_infinite(np.zeros((1, 2)), 2)

    @pytest.mark.parametrize("angle", [0.0, np.pi / 4, np.pi / 2, 3 * np.pi / 4])
    def test_monte_carlo_mean(self, angle):
        X = np.array([[1.0, 0.0], [np.cos(angle), np.sin(angle)]])
        target = kernel_infinite(X, 1).blocks[0, 1, 0, 0]
        samples = [kernel(init_gaussian(NetSpec(2, 1, width=256), seed=s), X).blocks[0, 1, 0, 0] for s in range(200)]
        err = np.std(samples, ddof=1) / np.sqrt(len(samples))
        assert abs(np.mean(samples) - target) <= 5 * err + 1e-15

    def test_error_decays_like_inverse_sqrt_width(self):
        X = np.array([[1.0, 0.0], [np.cos(1.0), np.sin(1.0)]])
        target = kernel_infinite(X, 4).blocks
        rms = []
        for M in (64, 256, 1024, 4096):
            sq = [np.sum((kernel(init_gaussian(NetSpec(2, 4, width=M), seed=s), X).blocks - target) ** 2)
                  for s in range(30)]
            rms.append(np.sqrt(np.mean(sq)))
        ratios = np.array(rms[:-1]) / np.array(rms[1:])
        assert np.all((ratios > 1.5) & (ratios < 2.7))


class TestGenericMLP:
    def test_reproduces_one_hidden_kernel(self):
        net = init_gaussian(NetSpec(3, 2, width=6, activation="tanh"), seed=4)
        X = np.random.default_rng(0).normal(size=(4, 3))
        np.testing.assert_allclose(kernel_generic(net.to_generic(), X).blocks, kernel(net, X).blocks, atol=1e-14)

    def test_four_layers_against_finite_differences(self):
        mlp = init_mlp(NetSpec(3, 2, hidden=(5, 4, 3), activation="tanh"), seed=1)
        X = np.random.default_rng(2).normal(size=(3, 3))
        J = mlp.jacobian(X)
        for i in range(3):
            for k in range(2):
                fd = finite_difference_gradient(lambda p: mlp.with_params(p).forward(X[i])[k], mlp.params.copy())
                np.testing.assert_allclose(J[i, k], fd, rtol=1e-5, atol=1e-9)
        K = kernel_generic(mlp, X)
        for i in range(3):
            assert np.linalg.eigvalsh(K.blocks[i, i])[0] >= -1e-12
        assert K.min_eigenvalue() >= -1e-10

    def test_chain_mismatch_rejected(self):
        with pytest.raises(ValueError):
            GenericMLP([np.zeros((4, 3)), np.zeros((2, 5))])


class TestInit:
    def test_seed_determinism(self):
        a = init_gaussian(NetSpec(4, 2, width=16), seed=9)
        b = init_gaussian(NetSpec(4, 2, width=16), seed=9)
        np.testing.assert_array_equal(a.B, b.B)

    def test_moments_and_truncation(self):
        spec = NetSpec(10, 4, width=300)
        net = init_gaussian(spec, seed=0)
        size = net.B.size
        assert size >= 10_000
        assert abs(net.B.mean()) <= 5 / np.sqrt(size) * spec.std
        assert np.all(np.abs(net.B) < net.bound) and net.within_bound()

    def test_tight_bound_resamples(self):
        net = init_gaussian(NetSpec(3, 2, width=50, bound=0.1), seed=1)
        assert np.all(np.abs(net.B) < 0.1)


class TestInvariantInit:
    spec = NetSpec(5, 2, width=3, hidden=(8, 8), activation="tanh")

    def test_perturbation_has_no_effect(self):
        net = init_invariant(self.spec, seed=3)
        p = PerturbationSet("orthogonal-noise", latent_dim=2, magnitude=1.0)
        X = np.random.default_rng(0).normal(size=(100, 5))
        for seed in range(5):
            np.testing.assert_array_equal(net.forward(apply_perturbation(X, p, seed)), net.forward(X))

    def test_identity_realisation(self):
        net = init_invariant(self.spec, "identity")
        X = np.random.default_rng(1).normal(size=(10, 5))
        np.testing.assert_allclose(net.forward(X), X[:, :2], rtol=1e-14)

    def test_from_one_hidden_net(self):
        R = init_gaussian(NetSpec(2, 2, width=4), seed=0)
        net = init_invariant(self.spec, R)
        X = np.random.default_rng(2).normal(size=(6, 5))
        np.testing.assert_allclose(net.forward(X), R.forward(X[:, :2]), rtol=1e-14)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            init_invariant(self.spec, init_gaussian(NetSpec(3, 2, width=4)))


class TestSerialization:
    def test_roundtrip(self):
        for net in (init_gaussian(NetSpec(3, 2, width=4), seed=1), init_mlp(NetSpec(3, 2, hidden=(4,)), seed=2),
                    init_gaussian(NetSpec(3, 2, width=4)).to_generic()):
            back = net_from_json(net.to_json())
            np.testing.assert_array_equal(back.params, net.params)
            X = np.random.default_rng(0).normal(size=(3, 3))
            np.testing.assert_array_equal(back.forward(X), net.forward(X))

    def test_layout_version_checked(self):
        payload = json.loads(init_gaussian(NetSpec(2, 1, width=2)).to_json())
        payload["layout_version"] = 99
        with pytest.raises(ValueError):
            net_from_json(json.dumps(payload))
