"""scikit-learn style wrappers around the training dynamics and kernels."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils import check_random_state
from sklearn.utils.validation import check_array, check_is_fitted

from .dataset import make_rng
from .dynamics import FlowConfig, run_flow, run_weight_space
from .losses import SimilarityConfig
from .network import NetSpec, activation, init_gaussian


def _seed(random_state) -> int:
    if isinstance(random_state, (int, np.integer)):
        return int(random_state)
    return int(check_random_state(random_state).randint(2**31 - 1))


class ContrastiveEmbedding(TransformerMixin, BaseEstimator):
    """Embed samples by minimizing the generalized contrastive loss.

    ``mode="weight-space"`` trains a one-hidden-layer network and can embed
    new samples. ``mode="vanilla"`` moves the latent points directly (with
    projection onto the unit sphere when ``sphere_projection`` is set), so
    only the training samples have an embedding.

    Args:
        n_components: Latent dimension.
        tau: Temperature of the exponential similarity.
        psi: Outer function of the loss.
        width: Hidden units per output of the network.
        activation: Hidden activation.
        mode: ``"weight-space"`` or ``"vanilla"``.
        learning_rate: Euler step size.
        max_iter: Number of steps.
        sphere_projection: Renormalize after every vanilla step.
        random_state: Seed for the network or the initial latent points.
    """

    def __init__(self, n_components=2, tau=0.1, psi="log1p", width=256, activation="relu",
                 mode="weight-space", learning_rate=1.0, max_iter=400, sphere_projection=True,
                 random_state=0):
        self.n_components = n_components
        self.tau = tau
        self.psi = psi
        self.width = width
        self.activation = activation
        self.mode = mode
        self.learning_rate = learning_rate
        self.max_iter = max_iter
        self.sphere_projection = sphere_projection
        self.random_state = random_state

    def fit(self, X, y=None):
        X = check_array(X, ensure_min_samples=2)
        self.n_features_in_ = X.shape[1]
        cfg = SimilarityConfig(tau=self.tau, psi=self.psi)
        seed = _seed(self.random_state)
        if self.mode == "weight-space":
            net = init_gaussian(NetSpec(X.shape[1], self.n_components, width=self.width,
                                        activation=self.activation), seed=seed)
            flow = FlowConfig("weight-space", self.learning_rate, self.max_iter, record_stride=max(self.max_iter, 1))
            self.trajectory_, self.net_ = run_weight_space(net, X, None, cfg, flow)
        elif self.mode == "vanilla":
            z0 = make_rng(seed).standard_normal((X.shape[0], self.n_components))
            if self.sphere_projection:
                z0 /= np.linalg.norm(z0, axis=1, keepdims=True)
            flow = FlowConfig("vanilla", self.learning_rate, self.max_iter, record_stride=max(self.max_iter, 1),
                              sphere_projection=self.sphere_projection)
            self.trajectory_ = run_flow(z0, cfg, flow)
        else:
            raise ValueError(f"unknown mode {self.mode!r}")
        self.embedding_ = self.trajectory_.final
        self.loss_ = self.trajectory_.loss[-1]
        return self

    def fit_transform(self, X, y=None):
        return self.fit(X, y).embedding_

    def transform(self, X):
        check_is_fitted(self, "embedding_")
        if self.mode != "weight-space":
            raise ValueError("vanilla mode embeds only its training samples; use fit_transform")
        X = check_array(X)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return self.net_.forward(X)


class NeuralKernel(TransformerMixin, BaseEstimator):
    """Map samples to their neural-kernel values against the training samples.

    With ``width=None`` the infinite-width relu kernel is used; otherwise a
    one-hidden-layer net of that width is drawn and the first output's
    block of its kernel is returned.
    """

    def __init__(self, width=None, activation="relu", random_state=0):
        self.width = width
        self.activation = activation
        self.random_state = random_state

    def fit(self, X, y=None):
        X = check_array(X)
        self.n_features_in_ = X.shape[1]
        self.X_fit_ = X
        if self.width is not None:
            self.net_ = init_gaussian(NetSpec(X.shape[1], 1, width=self.width, activation=self.activation),
                                      seed=_seed(self.random_state))
        elif self.activation != "relu":
            raise ValueError("the infinite-width kernel is only available for relu")
        return self

    def transform(self, X):
        check_is_fitted(self, "X_fit_")
        X = check_array(X)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        dots = X @ self.X_fit_.T
        if self.width is None:
            norms = np.outer(np.linalg.norm(X, axis=1), np.linalg.norm(self.X_fit_, axis=1))
            if np.any(norms == 0):
                raise ValueError("the infinite-width kernel is undefined at the zero vector")
            cos = np.clip(dots / norms, -1.0, 1.0)
            return dots * (0.5 - np.arccos(cos) / (2 * np.pi))
        _, dact = activation(self.activation)
        B = self.net_.B
        return dots * (dact(X @ B.T) @ dact(self.X_fit_ @ B.T).T) / self.net_.M
