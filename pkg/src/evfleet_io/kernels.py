"""Gaussian and linear kernels on standardized feature vectors."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist

from .errors import ConfigError, DimensionMismatch

KINDS = ("gaussian", "linear")


@dataclass(frozen=True)
class KernelSpec:
    """Kernel family and scale. ``gamma`` is ignored for the linear kernel."""

    kind: str = "gaussian"
    gamma: float = 0.1

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown kernel kind {self.kind!r}; expected one of {KINDS}")
        object.__setattr__(self, "gamma", float(self.gamma))
        if self.kind == "gaussian" and not self.gamma > 0:
            raise ConfigError(f"gaussian kernel needs gamma > 0, got {self.gamma}")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "gamma": self.gamma}

    @classmethod
    def from_dict(cls, d: dict) -> "KernelSpec":
        return cls(d["kind"], d.get("gamma", 0.1))


def _as_rows(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2:
        raise DimensionMismatch(f"expected feature vectors, got array of shape {x.shape}")
    return x


def kernel_eval(z_t, z_tau, spec: KernelSpec) -> float:
    a = np.asarray(z_t, dtype=float).ravel()
    b = np.asarray(z_tau, dtype=float).ravel()
    if a.size != b.size:
        raise DimensionMismatch(f"feature dimensions differ: {a.size} vs {b.size}")
    if spec.kind == "linear":
        return float(a @ b)
    return float(np.exp(-spec.gamma * np.sum((a - b) ** 2)))


def gram(queries, train, spec: KernelSpec) -> np.ndarray:
    """Dense kernel matrix with rows indexed by ``queries`` and columns by ``train``."""
    q = _as_rows(queries)
    t = _as_rows(train)
    if q.shape[1] != t.shape[1]:
        raise DimensionMismatch(f"feature dimensions differ: {q.shape[1]} vs {t.shape[1]}")
    if spec.kind == "linear":
        return q @ t.T
    # cdist gives exact zeros for identical rows, so the diagonal is exactly 1
    return np.exp(-spec.gamma * cdist(q, t, "sqeuclidean"))
