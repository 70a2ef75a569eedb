"""The fitted price-response model: bounds, utilities and everything needed
to featurize new data, persisted as one self-contained JSON document."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .dataset import FeatureConfig, Standardizer, TimeSeriesDataset
from .errors import DataError, FeatureMismatch, InsufficientHistory
from .feasibility import BoundsModel, FeasibilitySlacks, fit_bounds, predict_bounds
from .kernels import KernelSpec
from .optimality import (BlockConfig, DualitySolution, UtilityModel, fit_utilities, predict_utilities,
                         snap_small)
from .qpsolve import SolverOptions

FORMAT = "evfleet-io/model"


@dataclass
class PriceResponseModel:
    bounds: BoundsModel
    utilities: UtilityModel
    blocks: BlockConfig
    features: FeatureConfig
    stats: Standardizer
    provenance: dict = field(default_factory=dict)

    def predict_bounds(self, z) -> tuple[np.ndarray, np.ndarray]:
        return predict_bounds(self.bounds, np.atleast_2d(z))

    def predict_utilities(self, z) -> np.ndarray:
        return predict_utilities(self.utilities, np.atleast_2d(z))

    def check_compatible(self, ds: TimeSeriesDataset) -> None:
        """Raise FeatureMismatch if ``ds`` was featurized differently."""
        if ds.features is not None and ds.features != self.features:
            raise FeatureMismatch(
                f"model expects {self.features.n_features} features {self.features.names()}, "
                f"data has {ds.features.n_features} {ds.features.names()}")
        if ds.regressors is not None and ds.regressors.shape[1] != self.features.n_features:
            raise FeatureMismatch(f"model expects {self.features.n_features} features, "
                                  f"data has {ds.regressors.shape[1]}")

    def featurize(self, ds: TimeSeriesDataset) -> TimeSeriesDataset:
        """Build this model's regressors on new data with the stored statistics."""
        from .dataset import build_features
        return build_features(ds, self.features, stats=self.stats)

    def to_dict(self) -> dict:
        return {
            "format": FORMAT,
            "bounds": self.bounds.to_dict(),
            "utilities": self.utilities.to_dict(),
            "blocks": self.blocks.to_dict(),
            "features": self.features.to_dict(),
            "stats": self.stats.to_dict(),
            "provenance": self.provenance,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PriceResponseModel":
        if d.get("format") != FORMAT:
            raise DataError("not a serialized price-response model")
        return cls(
            BoundsModel.from_dict(d["bounds"]),
            UtilityModel.from_dict(d["utilities"]),
            BlockConfig.from_dict(d["blocks"]),
            FeatureConfig.from_dict(d["features"]),
            Standardizer.from_dict(d["stats"]),
            dict(d.get("provenance", {})),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "PriceResponseModel":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


@dataclass
class FitDiagnostics:
    slacks: FeasibilitySlacks
    duality: DualitySolution
    train_bounds: tuple[np.ndarray, np.ndarray]


def fit_model(ds: TimeSeriesDataset, H: float, M: float, bounds_kernel: KernelSpec,
              utility_kernel: KernelSpec = KernelSpec("linear"),
              blocks: BlockConfig = BlockConfig(),
              opts: Optional[SolverOptions] = None) -> tuple[PriceResponseModel, FitDiagnostics]:
    """Fit bounds, then utilities given those bounds, on the training split."""
    if ds.regressors is None:
        raise InsufficientHistory("dataset has no regressors; build features first")
    tr = ds.split.train
    bmodel, slacks = fit_bounds(ds, H, M, bounds_kernel, opts=opts)
    z = ds.regressors[tr]
    p_obs, p_lo, p_hi = snap_small(ds.power[tr], *predict_bounds(bmodel, z))
    umodel, duality = fit_utilities(z, ds.price[tr], p_obs, p_lo, p_hi, blocks, utility_kernel, opts)
    provenance = {
        "software_version": __version__,
        "data_hash": ds.content_hash(),
        "chosen": {"H": float(H), "M": float(M), "gamma": bounds_kernel.gamma},
        "bounds_kernel": bounds_kernel.to_dict(),
        "utility_kernel": utility_kernel.to_dict(),
        "n_train": int(tr.size),
    }
    model = PriceResponseModel(bmodel, umodel, blocks, ds.features, ds.stats, provenance)
    return model, FitDiagnostics(slacks, duality, (p_lo, p_hi))
