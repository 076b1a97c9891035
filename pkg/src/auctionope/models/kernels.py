"""Smoothing kernels K(u) for the continuous estimator and the KDE."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import _kernels
from ..errors import NonDifferentiableKernel

KERNEL_CODES = {
    "gaussian": _kernels.GAUSSIAN,
    "epanechnikov": _kernels.EPANECHNIKOV,
    "triangular": _kernels.TRIANGULAR,
    "uniform": _kernels.UNIFORM,
}
KERNEL_KINDS = tuple(KERNEL_CODES)


def kernel_code(kind: str) -> int:
    try:
        return KERNEL_CODES[kind.lower()]
    except KeyError:
        raise ValueError(f"unknown kernel {kind!r}; choose from {KERNEL_KINDS}") from None


@dataclass(frozen=True)
class KernelSpec:
    kind: str = "gaussian"
    bandwidth: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "kind", self.kind.lower())
        kernel_code(self.kind)
        if not (np.isfinite(self.bandwidth) and self.bandwidth > 0):
            raise ValueError(f"bandwidth must be > 0, got {self.bandwidth}")

    @property
    def code(self) -> int:
        return KERNEL_CODES[self.kind]

    @property
    def differentiable(self) -> bool:
        return self.kind == "gaussian"

    def __call__(self, u) -> np.ndarray:
        return kernel(u, self.kind)

    def derivative(self, u) -> np.ndarray:
        """K'(u); only the Gaussian kernel is differentiable everywhere."""
        if not self.differentiable:
            raise NonDifferentiableKernel(f"{self.kind} kernel has no everywhere-defined derivative")
        u = np.asarray(u, dtype=np.float64)
        return -u * kernel(u, "gaussian")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "bandwidth": float(self.bandwidth)}

    @classmethod
    def from_dict(cls, d: dict) -> "KernelSpec":
        return cls(kind=d["kind"], bandwidth=float(d["bandwidth"]))


def kernel(u, kind: str = "gaussian") -> np.ndarray:
    return _kernels.kernel_eval_numpy(u, kernel_code(kind))
