"""Persistence forecasts, kernel ridge regression and error metrics."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np
import pandas as pd
import scipy.linalg

from .errors import EmptySeries, InsufficientHistory, LengthMismatch, SingularSystem
from .kernels import KernelSpec, gram

NAIVE_LAGS = {"h-naive": 1, "d-naive": 24, "w-naive": 168}


def _pair(actual, predicted) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(actual, dtype=float).ravel()
    p = np.asarray(predicted, dtype=float).ravel()
    if a.size != p.size:
        raise LengthMismatch(f"series lengths differ: {a.size} vs {p.size}")
    if a.size == 0:
        raise EmptySeries("cannot score an empty series")
    return a, p


def rmse(actual, predicted) -> float:
    a, p = _pair(actual, predicted)
    return float(np.sqrt(np.mean((a - p) ** 2)))


def mae(actual, predicted) -> float:
    a, p = _pair(actual, predicted)
    return float(np.mean(np.abs(a - p)))


def naive_forecast(series, lag: int, periods: Iterable[int]) -> np.ndarray:
    """p_hat_t = series[t - lag]. ``series`` may be an array or a dataset."""
    values = np.asarray(getattr(series, "power", series), dtype=float)
    idx = np.asarray(list(periods), dtype=np.int64)
    if idx.size and idx.min() < lag:
        raise InsufficientHistory(f"lag {lag} needs t >= {lag}, got t = {int(idx.min())}")
    return values[idx - lag]


@dataclass
class KrrModel:
    weights: np.ndarray
    delta: float
    kernel: KernelSpec
    train_features: np.ndarray
    target_mean: float


def krr_fit(z_train, y, delta: float, kspec: KernelSpec) -> KrrModel:
    """Solve (K + delta n I) w = y - mean(y)."""
    z = np.atleast_2d(np.asarray(z_train, dtype=float))
    y = np.asarray(y, dtype=float).ravel()
    n = y.size
    if n == 0:
        raise EmptySeries("no training targets")
    if delta < 0:
        raise ValueError("delta must be nonnegative")
    K = gram(z, z, kspec)
    A = K + delta * n * np.eye(n)
    ybar = float(y.mean())
    if delta == 0:
        rank = np.linalg.matrix_rank(A)
        if rank < n:
            raise SingularSystem(f"Gram matrix has rank {rank} < {n} and delta = 0")
    try:
        w = scipy.linalg.solve(A, y - ybar, assume_a="sym")
    except np.linalg.LinAlgError as exc:
        raise SingularSystem(str(exc)) from None
    return KrrModel(w, float(delta), kspec, z.copy(), ybar)


def krr_predict(model: KrrModel, z) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    K = gram(np.atleast_2d(z), model.train_features, model.kernel)
    out = model.target_mean + K @ model.weights
    return out[0] if z.ndim == 1 else out


DEFAULT_DELTAS = (1e-4, 1e-3, 1e-2, 1e-1)
DEFAULT_GAMMAS = (0.1, 0.01)


def krr_tune(ds, deltas: Sequence[float] = DEFAULT_DELTAS,
             gammas: Sequence[float] = DEFAULT_GAMMAS) -> tuple[KrrModel, pd.DataFrame]:
    """Pick (delta, gamma) with the lowest validation RMSE; ties go to the
    smaller delta, then the smaller gamma."""
    tr, va = ds.split.train, ds.split.val
    rows = []
    best = None
    for gamma in sorted(gammas):
        for delta in sorted(deltas):
            try:
                m = krr_fit(ds.regressors[tr], ds.power[tr], delta, KernelSpec("gaussian", gamma))
                score = rmse(ds.power[va], krr_predict(m, ds.regressors[va]))
            except SingularSystem:
                m, score = None, np.inf
            rows.append({"delta": delta, "gamma": gamma, "rmse_val": score})
            key = (score, delta, gamma)
            if m is not None and (best is None or key < best[0]):
                best = (key, m)
    if best is None:
        raise SingularSystem("no kernel ridge candidate could be fitted")
    return best[1], pd.DataFrame(rows)


def evaluation_rows(actual, forecasts: dict, case: str) -> list[dict]:
    """Rows of the evaluation report ``model,case,rmse_kw,mae_kw``."""
    return [{"model": name, "case": case, "rmse_kw": rmse(actual, f), "mae_kw": mae(actual, f)}
            for name, f in forecasts.items()]


def write_evaluation_csv(rows: list[dict], path, float_format: Optional[str] = "%.10g") -> None:
    pd.DataFrame(rows, columns=["model", "case", "rmse_kw", "mae_kw"]).to_csv(
        path, index=False, float_format=float_format)
