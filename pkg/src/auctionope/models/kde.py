"""Product-kernel density estimate of the behavior policy's action density.

The conditional density of the payment given the context is the ratio of
a joint (context, action) estimate to the marginal context estimate; both
use the same per-dimension bandwidths.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import _kernels
from ..core import EPS_Q, LoggedDataset
from ..errors import DimensionMismatch, EmptyInput
from .kernels import kernel_code


def silverman_bandwidths(X) -> np.ndarray:
    """Per-column rule-of-thumb bandwidth ``1.06 * std * n**(-1/5)``.

    Constant columns get ``EPS_Q``.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    n = X.shape[0]
    if n < 2:
        raise EmptyInput("bandwidth selection needs at least 2 rows")
    sd = X.std(axis=0, ddof=1)
    h = 1.06 * sd * n ** (-0.2)
    return np.where(sd > 0, h, EPS_Q)


@dataclass(frozen=True, eq=False)
class KdeDensity:
    training_points: np.ndarray  # (n, d + 1): context columns then action
    bandwidths: np.ndarray  # (d + 1,)
    kernel: str = "gaussian"

    def __post_init__(self):
        P = np.array(self.training_points, dtype=np.float64)
        h = np.array(self.bandwidths, dtype=np.float64).reshape(-1)
        if P.ndim != 2 or P.shape[0] < 2:
            raise EmptyInput("KDE needs at least 2 training points")
        if h.shape[0] != P.shape[1]:
            raise DimensionMismatch(f"{h.shape[0]} bandwidths for {P.shape[1]} columns")
        if np.any(~(h > 0)):
            raise ValueError("bandwidths must be strictly positive")
        kernel_code(self.kernel)
        P.setflags(write=False)
        h.setflags(write=False)
        object.__setattr__(self, "training_points", P)
        object.__setattr__(self, "bandwidths", h)

    @property
    def dimension(self) -> int:
        return self.training_points.shape[1] - 1

    def with_action_bandwidth(self, h: float) -> "KdeDensity":
        bw = self.bandwidths.copy()
        bw[-1] = h
        return KdeDensity(self.training_points, bw, self.kernel)

    def conditional(self, contexts, actions) -> np.ndarray:
        """Vectorised ``f(action | context)``, floored at ``EPS_Q``."""
        X = np.asarray(contexts, dtype=np.float64)
        if X.ndim == 1:
            X = X.reshape(1, -1)
        t = np.asarray(actions, dtype=np.float64).reshape(-1)
        if X.shape[1] != self.dimension:
            raise DimensionMismatch(f"context dimension {X.shape[1]}, model expects {self.dimension}")
        if t.shape[0] != X.shape[0]:
            raise DimensionMismatch("one action per context required")
        P = self.training_points
        joint, marginal = _kernels.kde_sums(
            np.ascontiguousarray(P[:, :-1]),
            np.ascontiguousarray(P[:, -1]),
            np.ascontiguousarray(self.bandwidths[:-1]),
            float(self.bandwidths[-1]),
            np.ascontiguousarray(X),
            np.ascontiguousarray(t),
            kernel_code(self.kernel),
        )
        with np.errstate(divide="ignore", invalid="ignore"):
            dens = np.where(marginal > 0, joint / marginal, 0.0)
        return np.maximum(dens, EPS_Q)

    def to_dict(self) -> dict:
        return {
            "kind": "kde",
            "version": 1,
            "kernel": self.kernel,
            "bandwidths": self.bandwidths.tolist(),
            "training_points": self.training_points.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "KdeDensity":
        return cls(np.asarray(d["training_points"]), np.asarray(d["bandwidths"]), d.get("kernel", "gaussian"))


def fit_kde(
    dataset: LoggedDataset,
    kernel: str = "gaussian",
    bandwidths=None,
    action_bandwidth: float | None = None,
) -> KdeDensity:
    P = np.column_stack([dataset.contexts, dataset.actions])
    h = silverman_bandwidths(P) if bandwidths is None else np.asarray(bandwidths, dtype=np.float64)
    if action_bandwidth is not None:
        h = h.copy()
        h[-1] = action_bandwidth
    return KdeDensity(P, h, kernel)


def kde_conditional_density(model: KdeDensity, context, action: float) -> float:
    return float(model.conditional(np.asarray(context, dtype=np.float64).reshape(1, -1), [action])[0])
