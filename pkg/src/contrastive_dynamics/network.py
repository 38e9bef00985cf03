"""Embedding networks and their neural kernels.

``OneHiddenNet`` computes ``f(x) = A^T act(B x)`` where ``A`` is the fixed
block-averaging head: output ``k`` is ``sum_p act(b_p . x) / sqrt(M)`` over
rows ``p`` of block ``k``. Only ``B`` is trained. ``GenericMLP`` covers
deeper, bias-free fully connected nets and computes its kernel from full
parameter Jacobians.

Kernels are stored as an ``(n, n, d, d)`` block array with
``K[i, j, k, l] = <grad_w f^k(x_i), grad_w f^l(x_j)>``.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace
from typing import Literal, Optional, Sequence, Union

import numpy as np
from scipy.special import expit

from .dataset import make_rng

LAYOUT_VERSION = 1


def _relu(x):
    return np.maximum(x, 0.0)


def _relu_prime(x):
    # derivative at 0 is taken as 0
    return (x > 0).astype(float)


ACTIVATIONS = {
    "relu": (_relu, _relu_prime),
    "tanh": (np.tanh, lambda x: 1.0 - np.tanh(x) ** 2),
    "smooth-relu": (lambda x: np.logaddexp(0.0, x), expit),
    "identity": (lambda x: np.asarray(x, dtype=float), lambda x: np.ones_like(x, dtype=float)),
}


def activation(name: str):
    try:
        return ACTIVATIONS[name]
    except KeyError:
        raise ValueError(f"unknown activation {name!r}") from None


@dataclass(frozen=True)
class KernelMatrix:
    blocks: np.ndarray
    structure: Literal["diagonal-blocks", "dense"] = "dense"

    @property
    def n(self) -> int:
        return self.blocks.shape[0]

    @property
    def d(self) -> int:
        return self.blocks.shape[2]

    def as_matrix(self) -> np.ndarray:
        """``(n d) x (n d)`` matrix with row index ``i * d + k``."""
        n, d = self.n, self.d
        return self.blocks.transpose(0, 2, 1, 3).reshape(n * d, n * d)

    def apply(self, g: np.ndarray) -> np.ndarray:
        """``sum_j K_ij g_j`` for every ``i``."""
        return np.einsum("ijkl,jl->ik", self.blocks, g)

    def min_eigenvalue(self) -> float:
        m = self.as_matrix()
        return float(np.linalg.eigvalsh(0.5 * (m + m.T))[0])

    def to_csv(self, path) -> None:
        m = self.as_matrix()
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            for row in m:
                writer.writerow([repr(float(v)) for v in row])


@dataclass(frozen=True)
class NetSpec:
    """Architecture and initialisation scale.

    ``weight_std`` defaults to ``1/sqrt(fan_in)`` and ``bound`` to six
    standard deviations. ``hidden`` lists hidden widths for ``GenericMLP``;
    ``width`` is the per-output width ``M`` of ``OneHiddenNet``.
    """

    input_dim: int
    output_dim: int
    width: int = 64
    activation: str = "relu"
    weight_std: Optional[float] = None
    bound: Optional[float] = None
    hidden: Sequence[int] = (32, 32, 32)

    def __post_init__(self):
        activation(self.activation)
        if min(self.input_dim, self.output_dim, self.width) < 1:
            raise ValueError("dimensions must be positive")

    @property
    def std(self) -> float:
        return self.weight_std if self.weight_std is not None else 1.0 / np.sqrt(self.input_dim)


@dataclass(frozen=True)
class OneHiddenNet:
    B: np.ndarray
    d: int
    activation: str = "relu"
    bound: float = np.inf
    seed: Optional[int] = None

    def __post_init__(self):
        activation(self.activation)
        if self.B.ndim != 2 or self.B.shape[0] % self.d:
            raise ValueError(f"B has shape {self.B.shape}; rows must be a multiple of d={self.d}")

    @property
    def M(self) -> int:
        return self.B.shape[0] // self.d

    @property
    def D(self) -> int:
        return self.B.shape[1]

    @property
    def params(self) -> np.ndarray:
        return self.B.reshape(-1)

    def with_params(self, p: np.ndarray) -> "OneHiddenNet":
        return replace(self, B=np.asarray(p, dtype=float).reshape(self.B.shape))

    def within_bound(self) -> bool:
        return bool(np.all(np.abs(self.B) < self.bound))

    def _check(self, X) -> tuple[np.ndarray, bool]:
        X = np.asarray(X, dtype=float)
        single = X.ndim == 1
        X = np.atleast_2d(X)
        if X.shape[1] != self.D:
            raise ValueError(f"input dimension {X.shape[1]} does not match D={self.D}")
        return X, single

    def forward(self, X) -> np.ndarray:
        X, single = self._check(X)
        act, _ = activation(self.activation)
        out = act(X @ self.B.T).reshape(len(X), self.d, self.M).sum(axis=2) / np.sqrt(self.M)
        return out[0] if single else out

    __call__ = forward

    def vjp(self, X, cotangent: np.ndarray) -> np.ndarray:
        """Flat gradient of ``sum_i <cotangent_i, f(x_i)>`` with respect to ``B``."""
        X, _ = self._check(X)
        _, dact = activation(self.activation)
        S = dact(X @ self.B.T)
        weights = np.repeat(np.asarray(cotangent, float), self.M, axis=1) / np.sqrt(self.M)
        return ((weights * S).T @ X).reshape(-1)

    def to_generic(self) -> "GenericMLP":
        return GenericMLP([self.B.copy()], self.activation, fixed_head=averaging_head(self.M, self.d).T)

    def to_json(self) -> str:
        return json.dumps({
            "arch": "one-hidden",
            "widths": [self.D, self.M * self.d, self.d],
            "activation": self.activation,
            "seed": self.seed,
            "bound": None if np.isinf(self.bound) else self.bound,
            "weights": self.params.tolist(),
            "layout_version": LAYOUT_VERSION,
        })


def averaging_head(M: int, d: int) -> np.ndarray:
    """Dense ``(M d) x d`` head ``A`` with ``1/sqrt(M)`` on the block diagonal."""
    return np.kron(np.eye(d), np.ones((M, 1))) / np.sqrt(M)


@dataclass(frozen=True)
class GenericMLP:
    """Bias-free fully connected net.

    Hidden layers apply ``activation``. Without ``fixed_head`` the last
    matrix in ``weights`` is a trainable linear output layer; with it, every
    matrix is followed by the activation and the untrained ``fixed_head``
    maps the last hidden layer to the output.
    """

    weights: list = field(default_factory=list)
    activation: str = "tanh"
    fixed_head: Optional[np.ndarray] = None
    seed: Optional[int] = None

    def __post_init__(self):
        activation(self.activation)
        for a, b in zip(self.weights[:-1], self.weights[1:]):
            if b.shape[1] != a.shape[0]:
                raise ValueError("consecutive weight shapes do not chain")
        if self.fixed_head is not None and self.fixed_head.shape[1] != self.weights[-1].shape[0]:
            raise ValueError("fixed head does not match the last layer")

    @property
    def D(self) -> int:
        return self.weights[0].shape[1]

    @property
    def d(self) -> int:
        return (self.fixed_head if self.fixed_head is not None else self.weights[-1]).shape[0]

    @property
    def params(self) -> np.ndarray:
        return np.concatenate([W.reshape(-1) for W in self.weights])

    def with_params(self, p: np.ndarray) -> "GenericMLP":
        p = np.asarray(p, dtype=float)
        out, start = [], 0
        for W in self.weights:
            out.append(p[start:start + W.size].reshape(W.shape))
            start += W.size
        return replace(self, weights=out)

    def _layers(self, X):
        """Pre-activations and activations of every layer; ``acts[0]`` is the input."""
        act, _ = activation(self.activation)
        pre, acts = [], [X]
        for idx, W in enumerate(self.weights):
            a = acts[-1] @ W.T
            pre.append(a)
            last_linear = idx == len(self.weights) - 1 and self.fixed_head is None
            acts.append(a if last_linear else act(a))
        return pre, acts

    def forward(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        single = X.ndim == 1
        X = np.atleast_2d(X)
        if X.shape[1] != self.D:
            raise ValueError(f"input dimension {X.shape[1]} does not match D={self.D}")
        _, acts = self._layers(X)
        out = acts[-1] if self.fixed_head is None else acts[-1] @ self.fixed_head.T
        return out[0] if single else out

    __call__ = forward

    def _backprop(self, X, delta_out):
        """Per-layer weight gradients given the output sensitivity.

        ``delta_out`` has shape ``(n, ..., d)``; leading batch axes after ``n``
        are carried through, so passing an identity per point yields Jacobians.
        """
        _, dact = activation(self.activation)
        pre, acts = self._layers(X)
        grads = [None] * len(self.weights)
        extra = delta_out.ndim - 2
        expand = (slice(None),) + (None,) * extra
        if self.fixed_head is None:
            delta = delta_out
        else:
            delta = (delta_out @ self.fixed_head) * dact(pre[-1])[expand]
        for idx in range(len(self.weights) - 1, -1, -1):
            h = acts[idx][expand]
            grads[idx] = delta[..., :, None] * h[..., None, :]
            if idx > 0:
                delta = (delta @ self.weights[idx]) * dact(pre[idx - 1])[expand]
        return grads

    def jacobian(self, X) -> np.ndarray:
        """``(n, d, P)`` Jacobian of the outputs with respect to the flat parameters."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        n, d = X.shape[0], self.d
        eye = np.broadcast_to(np.eye(d), (n, d, d))
        grads = self._backprop(X, eye)
        return np.concatenate([g.reshape(n, d, -1) for g in grads], axis=2)

    def vjp(self, X, cotangent: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        grads = self._backprop(X, np.asarray(cotangent, dtype=float))
        return np.concatenate([g.sum(axis=0).reshape(-1) for g in grads])

    def to_json(self) -> str:
        widths = [self.D] + [W.shape[0] for W in self.weights]
        if self.fixed_head is not None:
            widths.append(self.fixed_head.shape[0])
        return json.dumps({
            "arch": "mlp",
            "widths": widths,
            "activation": self.activation,
            "seed": self.seed,
            "head": None if self.fixed_head is None else self.fixed_head.reshape(-1).tolist(),
            "weights": self.params.tolist(),
            "layout_version": LAYOUT_VERSION,
        })


Net = Union[OneHiddenNet, GenericMLP]


def net_from_json(text: str) -> Net:
    cfg = json.loads(text)
    if cfg.get("layout_version") != LAYOUT_VERSION:
        raise ValueError(f"unsupported layout version {cfg.get('layout_version')}")
    w = np.asarray(cfg["weights"], dtype=float)
    widths = cfg["widths"]
    if cfg["arch"] == "one-hidden":
        D, Md, d = widths
        bound = np.inf if cfg.get("bound") is None else cfg["bound"]
        return OneHiddenNet(w.reshape(Md, D), d, cfg["activation"], bound, cfg.get("seed"))
    head = cfg.get("head")
    layer_widths = widths[:-1] if head is not None else widths
    weights, start = [], 0
    for fan_in, fan_out in zip(layer_widths[:-1], layer_widths[1:]):
        weights.append(w[start:start + fan_in * fan_out].reshape(fan_out, fan_in))
        start += fan_in * fan_out
    if head is not None:
        head = np.asarray(head, dtype=float).reshape(widths[-1], widths[-2])
    return GenericMLP(weights, cfg["activation"], head, cfg.get("seed"))


def forward(net: Net, x) -> np.ndarray:
    return net.forward(x)


def weight_gradient(net: OneHiddenNet, x, k: int) -> np.ndarray:
    """``grad_B f^k(x)``: nonzero only on the rows of output block ``k``."""
    x = np.asarray(x, dtype=float)
    _, dact = activation(net.activation)
    grad = np.zeros_like(net.B)
    rows = slice(k * net.M, (k + 1) * net.M)
    grad[rows] = np.outer(dact(net.B[rows] @ x), x) / np.sqrt(net.M)
    return grad


def kernel(net: OneHiddenNet, X) -> KernelMatrix:
    """Analytic kernel of the one-hidden-layer net.

    ``K[i, j, k, k] = (x_i . x_j) / M * sum_{p in block k} act'(b_p x_i) act'(b_p x_j)``;
    off-diagonal entries of every block are zero.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    _, dact = activation(net.activation)
    n, d, M = X.shape[0], net.d, net.M
    S = dact(X @ net.B.T).reshape(n, d, M)
    per_output = np.einsum("ikp,jkp->ijk", S, S) / M * (X @ X.T)[:, :, None]
    blocks = np.zeros((n, n, d, d))
    idx = np.arange(d)
    blocks[:, :, idx, idx] = per_output
    return KernelMatrix(blocks, "diagonal-blocks")


def kernel_infinite(X, d: int) -> KernelMatrix:
    """Infinite-width relu kernel ``(x_i.x_j) [1/2 - arccos(cos_ij) / (2 pi)] I_d``."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    norms = np.linalg.norm(X, axis=1)
    if np.any(norms == 0):
        raise ValueError(f"point {int(np.argmin(norms))} is the zero vector")
    dots = X @ X.T
    cos = np.clip(dots / np.outer(norms, norms), -1.0, 1.0)
    scalar = dots * (0.5 - np.arccos(cos) / (2 * np.pi))
    blocks = scalar[:, :, None, None] * np.eye(d)[None, None]
    return KernelMatrix(blocks, "diagonal-blocks")


def kernel_generic(net: GenericMLP, X) -> KernelMatrix:
    """Kernel from full parameter Jacobians; dense ``d x d`` blocks."""
    J = net.jacobian(X)
    return KernelMatrix(np.einsum("ikp,jlp->ijkl", J, J), "dense")


def _truncated_normal(rng, shape, std, bound):
    W = rng.normal(0.0, std, size=shape)
    bad = np.abs(W) >= bound
    while bad.any():
        W[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(W) >= bound
    return W


def init_gaussian(spec: NetSpec, seed: int = 0) -> OneHiddenNet:
    """Gaussian rows ``b_p``, resampling any entry with ``|b| >= bound``."""
    std = spec.std
    bound = spec.bound if spec.bound is not None else 6.0 * std
    rng = make_rng(seed)
    B = _truncated_normal(rng, (spec.width * spec.output_dim, spec.input_dim), std, bound)
    return OneHiddenNet(B, spec.output_dim, spec.activation, bound, seed)


def init_mlp(spec: NetSpec, seed: int = 0, input_dim: Optional[int] = None) -> GenericMLP:
    """Random bias-free MLP with a trainable linear output layer."""
    rng = make_rng(seed)
    widths = [input_dim or spec.input_dim, *spec.hidden, spec.output_dim]
    weights = []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        std = spec.weight_std if spec.weight_std is not None else 1.0 / np.sqrt(fan_in)
        bound = spec.bound if spec.bound is not None else 6.0 * std
        weights.append(_truncated_normal(rng, (fan_out, fan_in), std, bound))
    return GenericMLP(weights, spec.activation, None, seed)


def init_invariant(spec: NetSpec, R: Union[None, str, Net] = None, seed: int = 0) -> GenericMLP:
    """Network of the form ``f(x) = R(x^1, ..., x^d, 0, ..., 0)``.

    ``R`` is a net on ``output_dim`` inputs (random when ``None``). Its first
    layer is padded with zero columns for coordinates ``d..D-1``, so the
    result ignores the orthogonal subspace exactly. ``R="identity"`` builds
    an identity-activation one-hidden net that returns the first ``d``
    coordinates.
    """
    d, D = spec.output_dim, spec.input_dim
    if d > D:
        raise ValueError("output_dim cannot exceed input_dim for an invariant net")
    if R is None:
        R = init_mlp(spec, seed, input_dim=d)
    elif isinstance(R, str):
        if R != "identity":
            raise ValueError(f"unknown invariant construction {R!r}")
        M = spec.width
        B = np.kron(np.eye(d), np.ones((M, 1))) / np.sqrt(M)
        R = OneHiddenNet(B, d, "identity").to_generic()
    elif isinstance(R, OneHiddenNet):
        R = R.to_generic()
    if R.D != d or R.d != d:
        raise ValueError(f"R must map R^{d} to R^{d}; got R^{R.D} -> R^{R.d}")
    first = np.zeros((R.weights[0].shape[0], D))
    first[:, :d] = R.weights[0]
    return replace(R, weights=[first, *[W.copy() for W in R.weights[1:]]], seed=seed)
