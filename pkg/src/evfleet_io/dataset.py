"""Hourly price/power series, lagged regressors and chronological splits.

CSV input uses the header ``timestamp,price_eur_mwh,power_kw[,available_evs]``
with ISO-8601 timestamps on a gap-free hourly grid. Canonical units are
kW for power, EUR/MWh for price and (fractional) vehicle counts for
availability.

The JSON serialization written by :func:`save_json` has the layout::

    {
      "format": "evfleet-io/dataset", "version": 1,
      "timestamps": ["2018-01-09T00:00:00", ...],
      "price_eur_mwh": [...], "power_kw": [...],
      "available_evs": [...] | null,
      "split": {"train": [...], "val": [...], "test": [...]},
      "features": {"price_lags": [...], "power_lags": [...],
                   "availability_lags": [...], "hour_bits": bool} | null,
      "stats": {"mean": [...], "std": [...]} | null,
      "regressors": [[...] | null, ...] | null
    }

Floats are written with ``repr`` precision so a load/save cycle is exact.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import pandas as pd

from .errors import (
    DataError,
    GapInSeries,
    InsufficientHistory,
    MissingColumn,
    MissingValue,
    NonMonotonicTimestamps,
)

DEFAULT_SCHEMA = {
    "timestamp": "timestamp",
    "price": "price_eur_mwh",
    "power": "power_kw",
    "availability": "available_evs",
}

HOUR_BITS = 5
_ONE_HOUR = np.timedelta64(3600, "s")


@dataclass(frozen=True)
class Split:
    """Three disjoint, contiguous and chronologically ordered index sets."""

    train: np.ndarray
    val: np.ndarray
    test: np.ndarray

    def __post_init__(self):
        for name in ("train", "val", "test"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.int64))
        parts = [p for p in (self.train, self.val, self.test) if p.size]
        for a, b in zip(parts, parts[1:]):
            if a.max() >= b.min():
                raise DataError("splits must be chronological and disjoint")

    def filter(self, keep: np.ndarray) -> "Split":
        """Drop indices whose entry in the boolean mask ``keep`` is False."""
        return Split(*(p[keep[p]] for p in (self.train, self.val, self.test)))


def default_sizes(n: int) -> tuple[int, int, int]:
    """Two thirds train, one sixth validation, the rest test (672/168/168 for 1008 h)."""
    n_train = (2 * n) // 3
    n_val = n // 6
    return n_train, n_val, n - n_train - n_val


def make_split(n: int, sizes: Optional[Sequence[int]] = None) -> Split:
    n_train, n_val, n_test = default_sizes(n) if sizes is None else sizes
    if min(n_train, n_val, n_test) < 0 or n_train + n_val + n_test > n:
        raise DataError(f"split sizes {tuple(sizes)} do not fit {n} periods")
    idx = np.arange(n)
    return Split(
        idx[:n_train],
        idx[n_train:n_train + n_val],
        idx[n_train + n_val:n_train + n_val + n_test],
    )


@dataclass(frozen=True)
class FeatureConfig:
    """Which lagged series and calendar bits make up the regressor vector."""

    price_lags: tuple[int, ...] = ()
    power_lags: tuple[int, ...] = ()
    availability_lags: tuple[int, ...] = ()
    hour_bits: bool = False

    def __post_init__(self):
        for name in ("price_lags", "power_lags", "availability_lags"):
            lags = tuple(int(v) for v in getattr(self, name))
            if any(l < 1 for l in lags):
                raise DataError(f"{name} must be >= 1, got {lags}")
            object.__setattr__(self, name, lags)

    @property
    def n_continuous(self) -> int:
        return len(self.price_lags) + len(self.power_lags) + len(self.availability_lags)

    @property
    def n_features(self) -> int:
        return self.n_continuous + (HOUR_BITS if self.hour_bits else 0)

    @property
    def max_lag(self) -> int:
        return max(self.price_lags + self.power_lags + self.availability_lags, default=0)

    def names(self) -> list[str]:
        out = [f"price_lag{l}" for l in self.price_lags]
        out += [f"power_lag{l}" for l in self.power_lags]
        out += [f"available_lag{l}" for l in self.availability_lags]
        if self.hour_bits:
            out += [f"hour_bit{k}" for k in reversed(range(HOUR_BITS))]
        return out

    def to_dict(self) -> dict:
        return {
            "price_lags": list(self.price_lags),
            "power_lags": list(self.power_lags),
            "availability_lags": list(self.availability_lags),
            "hour_bits": self.hour_bits,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureConfig":
        return cls(
            tuple(d.get("price_lags", ())),
            tuple(d.get("power_lags", ())),
            tuple(d.get("availability_lags", ())),
            bool(d.get("hour_bits", False)),
        )


@dataclass(frozen=True)
class Standardizer:
    """Per-feature z-score statistics estimated on the training slice."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, values: np.ndarray) -> "Standardizer":
        values = np.atleast_2d(np.asarray(values, dtype=float).T).T
        return cls(values.mean(axis=0), values.std(axis=0))

    def apply(self, values) -> np.ndarray:
        return standardize(values, self.mean, self.std)

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Standardizer":
        return cls(np.asarray(d["mean"], dtype=float), np.asarray(d["std"], dtype=float))


def standardize(values, mean, std) -> np.ndarray:
    """Z-score ``values``; features with (numerically) zero spread use std 1."""
    values = np.asarray(values, dtype=float)
    mean = np.asarray(mean, dtype=float)
    std = np.asarray(std, dtype=float)
    degenerate = std <= 1e-12 * np.maximum(1.0, np.abs(mean))
    return (values - mean) / np.where(degenerate, 1.0, std)


@dataclass(frozen=True, eq=False)
class TimeSeriesDataset:
    """Aligned hourly records plus (optionally) engineered regressors.

    ``regressors`` has one row per period; rows without a full lag history
    are NaN and excluded from ``split``.
    """

    timestamps: np.ndarray
    price: np.ndarray
    power: np.ndarray
    availability: Optional[np.ndarray] = None
    split: Optional[Split] = None
    features: Optional[FeatureConfig] = None
    stats: Optional[Standardizer] = None
    regressors: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        ts = np.asarray(self.timestamps, dtype="datetime64[s]")
        object.__setattr__(self, "timestamps", ts)
        object.__setattr__(self, "price", np.asarray(self.price, dtype=float))
        object.__setattr__(self, "power", np.asarray(self.power, dtype=float))
        if self.availability is not None:
            object.__setattr__(self, "availability", np.asarray(self.availability, dtype=float))
        n = ts.size
        lengths = {self.price.size, self.power.size}
        if self.availability is not None:
            lengths.add(self.availability.size)
        if lengths != {n}:
            raise DataError("price, power and availability must match the timestamps")
        if self.regressors is not None and self.regressors.shape[0] != n:
            raise DataError("one regressor row per period is required")
        if self.split is None:
            object.__setattr__(self, "split", make_split(n))

    def __len__(self) -> int:
        return self.timestamps.size

    @property
    def n_features(self) -> int:
        return 0 if self.regressors is None else self.regressors.shape[1]

    def with_split(self, sizes: Sequence[int]) -> "TimeSeriesDataset":
        """Re-split the raw periods; drop any engineered features."""
        return replace(self, split=make_split(len(self), sizes), features=None,
                       stats=None, regressors=None)

    def hours(self) -> np.ndarray:
        days = self.timestamps.astype("datetime64[D]")
        return ((self.timestamps - days) // _ONE_HOUR).astype(np.int64)

    def content_hash(self) -> str:
        h = hashlib.sha256()
        for arr in (self.timestamps.astype(np.int64), self.price, self.power):
            h.update(np.ascontiguousarray(arr).tobytes())
        if self.availability is not None:
            h.update(self.availability.tobytes())
        return h.hexdigest()

    # serialization -------------------------------------------------------

    def to_dict(self) -> dict:
        regs = None
        if self.regressors is not None:
            regs = [None if np.isnan(row).any() else row.tolist() for row in self.regressors]
        return {
            "format": "evfleet-io/dataset",
            "version": 1,
            "timestamps": [str(t) for t in self.timestamps],
            "price_eur_mwh": self.price.tolist(),
            "power_kw": self.power.tolist(),
            "available_evs": None if self.availability is None else self.availability.tolist(),
            "split": {k: getattr(self.split, k).tolist() for k in ("train", "val", "test")},
            "features": None if self.features is None else self.features.to_dict(),
            "stats": None if self.stats is None else self.stats.to_dict(),
            "regressors": regs,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TimeSeriesDataset":
        if d.get("format") != "evfleet-io/dataset":
            raise DataError("not a serialized dataset")
        features = None if d["features"] is None else FeatureConfig.from_dict(d["features"])
        regs = None
        if d["regressors"] is not None:
            width = features.n_features
            regs = np.array([[np.nan] * width if r is None else r for r in d["regressors"]],
                            dtype=float).reshape(len(d["regressors"]), width)
        return cls(
            timestamps=np.array(d["timestamps"], dtype="datetime64[s]"),
            price=np.array(d["price_eur_mwh"], dtype=float),
            power=np.array(d["power_kw"], dtype=float),
            availability=None if d["available_evs"] is None else np.array(d["available_evs"], dtype=float),
            split=Split(**d["split"]),
            features=features,
            stats=None if d["stats"] is None else Standardizer.from_dict(d["stats"]),
            regressors=regs,
        )


def save_json(ds: TimeSeriesDataset, path) -> None:
    Path(path).write_text(json.dumps(ds.to_dict()), encoding="utf-8")


def load_json(path) -> TimeSeriesDataset:
    return TimeSeriesDataset.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def load_csv(path, schema: Optional[dict] = None, split_sizes: Optional[Sequence[int]] = None) -> TimeSeriesDataset:
    """Parse and validate an hourly price/power CSV.

    ``schema`` maps the canonical names (timestamp, price, power,
    availability) to CSV column names; missing keys fall back to
    :data:`DEFAULT_SCHEMA`.
    """
    cols = dict(DEFAULT_SCHEMA, **(schema or {}))
    try:
        frame = pd.read_csv(path, float_precision="round_trip")
    except pd.errors.EmptyDataError:
        raise MissingColumn(f"{path}: empty file, expected columns "
                            f"{cols['timestamp']},{cols['price']},{cols['power']}") from None
    for key in ("timestamp", "price", "power"):
        if cols[key] not in frame.columns:
            raise MissingColumn(f"{path}: missing column {cols[key]!r}")
    if frame.empty:
        raise MissingColumn(f"{path}: no data rows")

    ts = pd.to_datetime(frame[cols["timestamp"]], format="ISO8601")
    if ts.dt.tz is not None:
        ts = ts.dt.tz_convert("UTC").dt.tz_localize(None)
    if ts.isna().any():
        raise MissingValue(f"{path}: unparseable timestamps")
    stamps = ts.to_numpy().astype("datetime64[s]")

    numeric = {k: frame[cols[k]].astype(float).to_numpy()
               for k in ("price", "power", "availability") if cols[k] in frame.columns}
    for k, v in numeric.items():
        if np.isnan(v).any():
            raise MissingValue(f"{path}: NaN in column {cols[k]!r}")

    steps = np.diff(stamps)
    if (steps <= np.timedelta64(0, "s")).any():
        raise NonMonotonicTimestamps(f"{path}: timestamps must be strictly increasing")
    if (steps != _ONE_HOUR).any():
        first = int(np.flatnonzero(steps != _ONE_HOUR)[0])
        raise GapInSeries(f"{path}: hourly grid broken after {stamps[first]}")

    n = stamps.size
    return TimeSeriesDataset(
        timestamps=stamps,
        price=numeric["price"],
        power=numeric["power"],
        availability=numeric.get("availability"),
        split=make_split(n, split_sizes),
    )


def write_csv(ds: TimeSeriesDataset, path) -> None:
    data = {
        "timestamp": [str(t) for t in ds.timestamps],
        "price_eur_mwh": ds.price,
        "power_kw": ds.power,
    }
    if ds.availability is not None:
        data["available_evs"] = ds.availability
    pd.DataFrame(data).to_csv(path, index=False, float_format="%.17g")


def _lagged(series: np.ndarray, lag: int) -> np.ndarray:
    out = np.full(series.size, np.nan)
    out[lag:] = series[:-lag]
    return out


def hour_bit_matrix(hours: np.ndarray) -> np.ndarray:
    """Binary encoding of the hour of day, most significant bit first."""
    hours = np.asarray(hours, dtype=np.int64)
    shifts = np.arange(HOUR_BITS - 1, -1, -1)
    return ((hours[:, None] >> shifts) & 1).astype(float)


def build_features(ds: TimeSeriesDataset, cfg: FeatureConfig,
                   stats: Optional[Standardizer] = None) -> TimeSeriesDataset:
    """Attach standardized lagged regressors (and hour bits) to ``ds``.

    Statistics are estimated on the training periods that have a full lag
    history unless ``stats`` is supplied (prediction with a stored model).
    Periods without full history are removed from every split.
    """
    if cfg.n_features == 0:
        raise InsufficientHistory("feature configuration yields zero regressors")
    if cfg.availability_lags and ds.availability is None:
        raise MissingColumn("availability lags requested but dataset has no availability column")

    cols = [_lagged(ds.price, l) for l in cfg.price_lags]
    cols += [_lagged(ds.power, l) for l in cfg.power_lags]
    cols += [_lagged(ds.availability, l) for l in cfg.availability_lags]
    n = len(ds)
    raw = np.column_stack(cols) if cols else np.empty((n, 0))

    valid = np.arange(n) >= cfg.max_lag
    split = ds.split.filter(valid)
    if split.train.size == 0:
        raise InsufficientHistory(f"max lag {cfg.max_lag} leaves no training periods")

    if stats is None:
        stats = Standardizer.fit(raw[split.train])
    elif stats.mean.size != raw.shape[1]:
        raise DataError("standardization statistics do not match the feature configuration")
    z = stats.apply(raw)
    if cfg.hour_bits:
        z = np.hstack([z, hour_bit_matrix(ds.hours())])
    z[~valid] = np.nan
    return replace(ds, split=split, features=cfg, stats=stats, regressors=z)
