"""Exhaustive (H, M, gamma) grid search scored on the validation split."""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import pandas as pd

from .baselines import mae, rmse
from .errors import AllTuplesFailed, ConfigError, EvFleetError
from .forward import forecast
from .kernels import KernelSpec
from .model import PriceResponseModel, fit_model
from .optimality import BlockConfig
from .qpsolve import SolverOptions


@dataclass(frozen=True)
class HyperGrid:
    H: tuple[float, ...]
    M: tuple[float, ...]
    gamma: tuple[float, ...] = (0.1,)

    def __post_init__(self):
        for name in ("H", "M", "gamma"):
            vals = tuple(sorted({float(v) for v in getattr(self, name)}))
            if not vals:
                raise ConfigError(f"grid dimension {name} is empty")
            object.__setattr__(self, name, vals)
        if any(not 0 <= h < 1 for h in self.H):
            raise ConfigError("H values must lie in [0, 1)")
        if any(not 0 <= m <= 1 for m in self.M):
            raise ConfigError("M values must lie in [0, 1]")
        if any(g <= 0 for g in self.gamma):
            raise ConfigError("gamma values must be positive")

    @classmethod
    def full(cls) -> "HyperGrid":
        """H in [0.5, 1.0) step 0.01, M in [0.0001, 0.0024] step 0.0001, gamma in {0.1, 0.01}."""
        return cls(tuple(np.round(np.arange(50, 100) / 100, 2)),
                   tuple(np.round(np.arange(1, 25) / 1e4, 4)), (0.1, 0.01))

    def tuples(self, bounds_kind: str = "gaussian") -> list[tuple[float, float, float]]:
        # gamma has no effect on a linear bounds kernel
        gammas = self.gamma if bounds_kind == "gaussian" else self.gamma[:1]
        return [(h, m, g) for h in self.H for m in self.M for g in gammas]

    def to_dict(self) -> dict:
        return {"H": list(self.H), "M": list(self.M), "gamma": list(self.gamma)}


@dataclass
class TupleScore:
    H: float
    M: float
    gamma: float
    rmse_val: float
    mae_val: float
    status: str

    @property
    def key(self):
        return (self.rmse_val, self.H, self.M, self.gamma)


@dataclass
class TuneResult:
    scores: list[TupleScore]
    best: TupleScore
    model: Optional[PriceResponseModel] = None
    diagnostics: object = field(default=None, repr=False)

    def report(self) -> pd.DataFrame:
        return pd.DataFrame([vars(s) for s in self.scores], columns=["H", "M", "gamma", "rmse_val", "mae_val", "status"])

    def write_report(self, path) -> None:
        self.report().to_csv(path, index=False, float_format="%.10g")


_STATE: dict = {}


def _init_worker(ds, blocks, bounds_kind, utility_kernel, opts):
    _STATE.update(ds=ds, blocks=blocks, bounds_kind=bounds_kind, utility_kernel=utility_kernel, opts=opts)


def _score(tup) -> TupleScore:
    H, M, gamma = tup
    ds = _STATE["ds"]
    try:
        kspec = KernelSpec(_STATE["bounds_kind"], gamma)
        model, _ = fit_model(ds, H, M, kspec, _STATE["utility_kernel"], _STATE["blocks"], _STATE["opts"])
        va = ds.split.val
        pred = forecast(model, ds, va)
        return TupleScore(H, M, gamma, rmse(ds.power[va], pred), mae(ds.power[va], pred), "ok")
    except EvFleetError as exc:
        return TupleScore(H, M, gamma, math.inf, math.inf, f"failed: {type(exc).__name__}")


def grid_search(ds, grid: HyperGrid, blocks: BlockConfig = BlockConfig(),
                bounds_kind: str = "gaussian", utility_kernel: KernelSpec = KernelSpec("linear"),
                jobs: int = 1, refit: bool = True, opts: Optional[SolverOptions] = None) -> TuneResult:
    """Fit every tuple on the training split and score it on validation.

    The winner has the lowest validation RMSE; ties go to the smaller H,
    then M, then gamma. The result does not depend on grid order or on
    ``jobs``. With ``refit`` the winning model is fitted again and attached.
    """
    if ds.split.val.size == 0:
        raise ConfigError("grid search needs a nonempty validation split")
    tuples = grid.tuples(bounds_kind)
    args = (ds, blocks, bounds_kind, utility_kernel, opts)
    if jobs > 1 and len(tuples) > 1:
        with ProcessPoolExecutor(max_workers=jobs, initializer=_init_worker, initargs=args) as pool:
            scores = list(pool.map(_score, tuples, chunksize=1))
    else:
        _init_worker(*args)
        try:
            scores = [_score(t) for t in tuples]
        finally:
            _STATE.clear()
    ok = [s for s in scores if math.isfinite(s.rmse_val)]
    if not ok:
        raise AllTuplesFailed(f"all {len(scores)} hyper-parameter tuples failed")
    best = min(ok, key=lambda s: s.key)
    result = TuneResult(scores, best)
    if refit:
        result.model, result.diagnostics = fit_model(
            ds, best.H, best.M, KernelSpec(bounds_kind, best.gamma), utility_kernel, blocks, opts)
        result.model.provenance["grid"] = grid.to_dict()
    return result
