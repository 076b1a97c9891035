"""Payment network: d -> ceil(d/2) -> ceil(d/4) -> 1, ReLU hidden, softplus output."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .. import _rng
from ..errors import DimensionMismatch

MIN_HIDDEN = 2


def layer_sizes_for(d: int) -> list[int]:
    return [d, max(MIN_HIDDEN, math.ceil(d / 2)), max(MIN_HIDDEN, math.ceil(d / 4)), 1]


def softplus(z):
    return np.logaddexp(0.0, z)


def softplus_inverse(y: float) -> float:
    # log(exp(y) - 1), stable for large y
    return float(y + np.log(-np.expm1(-y)))


@dataclass(eq=False)
class MlpPolicy:
    """Weights ``W[k]`` have shape (fan_in, fan_out); biases ``b[k]`` shape (fan_out,)."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self):
        self.weights = [np.array(w, dtype=np.float64) for w in self.weights]
        self.biases = [np.array(b, dtype=np.float64).reshape(-1) for b in self.biases]
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("need one bias vector per weight matrix")
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or w.shape[1] != b.shape[0]:
                raise ValueError(f"layer {k}: weight {w.shape} inconsistent with bias {b.shape}")
            if k and self.weights[k - 1].shape[1] != w.shape[0]:
                raise ValueError(f"layer {k}: fan-in {w.shape[0]} != previous fan-out")
        if self.weights[-1].shape[1] != 1:
            raise ValueError("output layer must have a single unit")

    @property
    def layer_sizes(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @property
    def dimension(self) -> int:
        return self.weights[0].shape[0]

    def copy(self) -> "MlpPolicy":
        return MlpPolicy([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    # flat parameter vector: W0, b0, W1, b1, ...
    def get_params(self) -> np.ndarray:
        return np.concatenate([p.ravel() for wb in zip(self.weights, self.biases) for p in wb])

    def set_params(self, flat) -> None:
        flat = np.asarray(flat, dtype=np.float64)
        pos = 0
        for k in range(len(self.weights)):
            for arr in (self.weights[k], self.biases[k]):
                arr[...] = flat[pos : pos + arr.size].reshape(arr.shape)
                pos += arr.size
        if pos != flat.size:
            raise ValueError("parameter vector has the wrong length")

    def __call__(self, contexts) -> np.ndarray:
        return mlp_forward(self, contexts)

    def to_dict(self) -> dict:
        return {
            "kind": "mlp",
            "version": 1,
            "layer_sizes": self.layer_sizes,
            "weights": [w.tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MlpPolicy":
        return cls([np.asarray(w) for w in d["weights"]], [np.asarray(b) for b in d["biases"]])


def init_mlp(d: int, rng_seed: int = 0, output_bias: float = 0.0) -> MlpPolicy:
    """Glorot-uniform weights, zero hidden biases, configurable output bias."""
    sizes = layer_sizes_for(d)
    rng = _rng.stream(rng_seed, _rng.MLP_INIT)
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        lim = math.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-lim, lim, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    biases[-1][0] = output_bias
    return MlpPolicy(weights, biases)


def _as_batch(policy: MlpPolicy, contexts) -> tuple[np.ndarray, bool]:
    X = np.asarray(contexts, dtype=np.float64)
    single = X.ndim == 1
    if single:
        X = X.reshape(1, -1)
    if X.shape[1] != policy.dimension:
        raise DimensionMismatch(f"context dimension {X.shape[1]}, network expects {policy.dimension}")
    return X, single


def _forward(policy: MlpPolicy, X: np.ndarray):
    acts = [X]
    pres = []
    h = X
    last = len(policy.weights) - 1
    for k, (W, b) in enumerate(zip(policy.weights, policy.biases)):
        z = h @ W + b
        pres.append(z)
        h = softplus(z) if k == last else np.maximum(z, 0.0)
        acts.append(h)
    return acts, pres


def mlp_forward(policy: MlpPolicy, contexts) -> np.ndarray | float:
    """Payment for one context (float) or a batch (shape (n,))."""
    X, single = _as_batch(policy, contexts)
    acts, _ = _forward(policy, X)
    out = acts[-1][:, 0]
    return float(out[0]) if single else out


@dataclass
class MlpGradients:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    inputs: np.ndarray  # d output / d context, per row

    def flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for wb in zip(self.weights, self.biases) for p in wb])


def mlp_backward(policy: MlpPolicy, contexts, upstream_gradient) -> MlpGradients:
    """Reverse-mode gradients of ``sum_i g_i * payment(x_i)``.

    ``upstream_gradient`` is a scalar (single context) or one value per row.
    Parameter gradients are summed over rows; ``inputs`` keeps one row per
    context.  The ReLU subgradient at 0 is 0.
    """
    X, single = _as_batch(policy, contexts)
    g = np.broadcast_to(np.asarray(upstream_gradient, dtype=np.float64).reshape(-1), (X.shape[0],))
    acts, pres = _forward(policy, X)
    n_layers = len(policy.weights)
    gw: list[np.ndarray] = [None] * n_layers  # type: ignore[list-item]
    gb: list[np.ndarray] = [None] * n_layers  # type: ignore[list-item]
    # d softplus(z) / dz = sigmoid(z)
    delta = (g * expit(pres[-1][:, 0]))[:, None]
    for k in range(n_layers - 1, -1, -1):
        gw[k] = acts[k].T @ delta
        gb[k] = delta.sum(axis=0)
        back = delta @ policy.weights[k].T
        if k > 0:
            delta = back * (pres[k - 1] > 0.0)
    dx = back[0] if single else back
    return MlpGradients(gw, gb, dx)
