"""Command-line pipelines: simulate, tune, train, predict, bidcurve, evaluate, baseline.

All commands read one JSON config (``--config``); scalar fields can be
overridden with ``--set section.key=value`` (the value is parsed as JSON when
possible). Unknown keys are rejected. Outputs go to ``--out``, else to
``$EVFLEET_IO_OUTPUT_DIR``, else to ``output_dir`` from the config.

Exit codes: 0 success, 2 config error, 3 solver failure, 4 data error,
1 anything else raised by the package. Failures print one JSON object to
stderr: ``{"error": <class>, "message": <text>, "exit_code": <n>}``.
"""

from __future__ import annotations

import argparse
import copy
import json
import os
import sys
from pathlib import Path
from typing import Optional

import numpy as np
import pandas as pd

from . import __version__
from .baselines import (NAIVE_LAGS, evaluation_rows, krr_predict, krr_tune, naive_forecast,
                        write_evaluation_csv)
from .dataset import FeatureConfig, TimeSeriesDataset, build_features, load_csv, load_json, write_csv
from .errors import ConfigError, DataError, EvFleetError, MissingColumn, SolverFailure
from .fleetsim import (CommuterProfile, FleetRunConfig, FleetSpec, Patterns, build_dataset,
                       generate_patterns, simulate, synthetic_prices)
from .forward import extract_bid_curve, forecast, write_curves_csv
from .kernels import KernelSpec
from .model import PriceResponseModel, fit_model
from .optimality import BlockConfig
from .tuning import HyperGrid, grid_search

OUTPUT_ENV = "EVFLEET_IO_OUTPUT_DIR"

DEFAULTS: dict = {
    "data": None,
    "output_dir": "evfleet-out",
    "seed": 0,
    "jobs": 1,
    "split": None,
    "features": {"price_lags": [1, 2, 3, 4, 5, 6], "power_lags": [1, 2, 3, 4, 5, 6],
                 "availability_lags": [], "hour_bits": True},
    "blocks": {"n_charge": 6, "n_discharge": 0},
    "grid": {"H": [0.5, 0.6, 0.7, 0.8, 0.9], "M": [0.0001, 0.001], "gamma": [0.1, 0.01]},
    "bounds_kernel": "gaussian",
    "utility_kernel": "linear",
    "train": {"H": 0.8, "M": 0.001, "gamma": 0.1},
    "krr": {"deltas": [0.0001, 0.001, 0.01, 0.1], "gammas": [0.1, 0.01]},
    "periods": {"start": None, "end": None},
    "fleet": {"n_evs": 10, "charge_kw": 7.4, "discharge_kw": 0.0, "round_trip_efficiency": 0.95,
              "soc_min_kwh": 10.0, "soc_max_kwh": 51.0, "degradation_eur_kwh": 0.02,
              "motion_cost_eur": 0.0},
    "sim": {"days": 42, "start": "2018-01-01", "regime": "optimized", "dt_h": 0.25,
            "shedding_cost_eur_kwh": 1000.0, "sync_penalty_eur_mwh2": 0.0,
            "km_per_day": 30.0, "prices": None, "patterns": None},
}

# sections whose keys are free-form (validated by the owning module)
_OPEN_SECTIONS = {"fleet"}


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, val in override.items():
        where = f"{path}{key}"
        if key not in base and path.rstrip(".") not in _OPEN_SECTIONS:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base.get(key), dict) and key not in _OPEN_SECTIONS:
            if not isinstance(val, dict):
                raise ConfigError(f"config key {where!r} must be an object")
            out[key] = _merge(base[key], val, where + ".")
        else:
            out[key] = val
    return out


def _parse_set(item: str) -> tuple[list[str], object]:
    if "=" not in item:
        raise ConfigError(f"--set expects key=value, got {item!r}")
    key, raw = item.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip().split("."), value


def load_config(path: Optional[str], overrides=()) -> dict:
    user: dict = {}
    if path is not None:
        try:
            user = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from None
        if not isinstance(user, dict):
            raise ConfigError("config must be a JSON object")
    cfg = _merge(DEFAULTS, user)
    for item in overrides:
        keys, value = _parse_set(item)
        nested: dict = {}
        cur = nested
        for k in keys[:-1]:
            cur = cur.setdefault(k, {})
        cur[keys[-1]] = value
        cfg = _merge(cfg, nested)
    validate_config(cfg)
    return cfg


def validate_config(cfg: dict) -> None:
    """Build every typed object once so bad values fail before any solve."""
    try:
        feature_config(cfg)
        BlockConfig.from_dict(cfg["blocks"])
        hyper_grid(cfg)
        KernelSpec(cfg["bounds_kernel"], 0.1)
        KernelSpec(cfg["utility_kernel"], 0.1)
        FleetSpec.from_dict(cfg["fleet"])
        run_config(cfg)
        if not isinstance(cfg["seed"], int) or not isinstance(cfg["jobs"], int) or cfg["jobs"] < 1:
            raise ConfigError("seed must be an integer and jobs a positive integer")
        if cfg["split"] is not None and (len(cfg["split"]) != 3 or any(int(v) < 0 for v in cfg["split"])):
            raise ConfigError("split must be three nonnegative sizes")
        if int(cfg["sim"]["days"]) < 1:
            raise ConfigError("sim.days must be positive")
    except (TypeError, KeyError, ValueError) as exc:
        if isinstance(exc, EvFleetError):
            raise ConfigError(str(exc)) from None
        raise ConfigError(f"invalid config value: {exc}") from None


def feature_config(cfg: dict) -> FeatureConfig:
    return FeatureConfig.from_dict(cfg["features"])


def hyper_grid(cfg: dict) -> HyperGrid:
    g = cfg["grid"]
    return HyperGrid(tuple(g["H"]), tuple(g["M"]), tuple(g["gamma"]))


def run_config(cfg: dict) -> FleetRunConfig:
    s = cfg["sim"]
    dt = float(s["dt_h"])
    return FleetRunConfig(dt_h=dt, shedding_cost_eur_kwh=float(s["shedding_cost_eur_kwh"]),
                          sync_penalty_eur_mwh2=float(s["sync_penalty_eur_mwh2"]),
                          regime=s["regime"], steps_per_day=int(round(24 / dt)))


# data helpers -------------------------------------------------------------

def _load_data(cfg: dict, path: Optional[str] = None) -> TimeSeriesDataset:
    path = path or cfg["data"]
    if path is None:
        raise ConfigError("no data file given (config 'data' or --data)")
    if not Path(path).exists():
        raise DataError(f"data file not found: {path}")
    if str(path).endswith(".json"):
        ds = load_json(path)
        return ds if cfg["split"] is None or ds.regressors is not None else ds.with_split(cfg["split"])
    return load_csv(path, split_sizes=cfg["split"])


def _featurized(cfg: dict, path: Optional[str] = None) -> TimeSeriesDataset:
    ds = _load_data(cfg, path)
    return ds if ds.regressors is not None else build_features(ds, feature_config(cfg))


def _periods(cfg: dict, ds: TimeSeriesDataset) -> np.ndarray:
    start, end = cfg["periods"]["start"], cfg["periods"]["end"]
    if start is None and end is None:
        return ds.split.test
    ts = ds.timestamps
    mask = np.ones(ts.size, dtype=bool)
    if start is not None:
        mask &= ts >= np.datetime64(start, "s")
    if end is not None:
        mask &= ts <= np.datetime64(end, "s")
    idx = np.flatnonzero(mask)
    if idx.size == 0:
        raise DataError(f"no periods between {start} and {end}")
    return idx


def _load_prices(cfg: dict, n_days: int) -> np.ndarray:
    src = cfg["sim"]["prices"]
    if src is None:
        return synthetic_prices(n_days, seed=cfg["seed"] + 1)
    if not Path(src).exists():
        raise DataError(f"price file not found: {src}")
    frame = pd.read_csv(src, float_precision="round_trip")
    if "price_eur_mwh" not in frame.columns:
        raise MissingColumn(f"{src}: missing column 'price_eur_mwh'")
    prices = frame["price_eur_mwh"].to_numpy(dtype=float)
    if prices.size < 24 * n_days or np.isnan(prices[:24 * n_days]).any():
        raise DataError(f"{src}: need {24 * n_days} hourly prices without gaps")
    return prices[:24 * n_days]


def _out_dir(args, cfg: dict) -> Path:
    out = Path(args.out or os.environ.get(OUTPUT_ENV) or cfg["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def _tune(cfg: dict, ds, bounds_kind: str, jobs: int):
    return grid_search(ds, hyper_grid(cfg), BlockConfig.from_dict(cfg["blocks"]), bounds_kind,
                       KernelSpec(cfg["utility_kernel"]), jobs=jobs)


# commands -----------------------------------------------------------------

def cmd_simulate(args, cfg: dict) -> dict:
    s = cfg["sim"]
    fleet = FleetSpec.from_dict(cfg["fleet"])
    rc = run_config(cfg)
    if s["patterns"] is not None:
        if not Path(s["patterns"]).exists():
            raise DataError(f"pattern file not found: {s['patterns']}")
        patterns = Patterns.read_csv(s["patterns"])
        n_days = patterns.available.shape[1] // rc.steps_per_day
    else:
        n_days = int(s["days"])
        patterns = generate_patterns(len(fleet), n_days, seed=cfg["seed"],
                                     profile=CommuterProfile(km_per_day=float(s["km_per_day"])),
                                     start=s["start"], dt_h=rc.dt_h)
    if patterns.n_evs != len(fleet):
        raise DataError(f"patterns cover {patterns.n_evs} vehicles, fleet has {len(fleet)}")
    prices = _load_prices(cfg, n_days)
    results = simulate(fleet, patterns, prices, rc, jobs=args.jobs or cfg["jobs"])
    ds = build_dataset(results, prices, cfg["split"])
    out = _out_dir(args, cfg)
    write_csv(ds, out / "dataset.csv")
    patterns.write_csv(out / "patterns.csv")
    report = {
        "days": n_days,
        "regime": rc.regime,
        "objective_eur": [round(r.objective, 9) for r in results],
        "shedding_kwh": float(sum(r.shedding.sum() for r in results)),
        "mean_power_kw": float(ds.power.mean()),
        "peak_power_kw": float(np.abs(ds.power).max()),
        "software_version": __version__,
    }
    _write_json(out / "sim_report.json", report)
    return {"dataset": str(out / "dataset.csv"), "report": str(out / "sim_report.json")}


def cmd_tune(args, cfg: dict) -> dict:
    ds = _featurized(cfg, args.data)
    res = _tune(cfg, ds, cfg["bounds_kernel"], args.jobs or cfg["jobs"])
    out = _out_dir(args, cfg)
    res.write_report(out / "tune_report.csv")
    res.model.save(out / "model.json")
    return {"report": str(out / "tune_report.csv"), "model": str(out / "model.json"),
            "best": {"H": res.best.H, "M": res.best.M, "gamma": res.best.gamma}}


def cmd_train(args, cfg: dict) -> dict:
    ds = _featurized(cfg, args.data)
    t = cfg["train"]
    model, _ = fit_model(ds, float(t["H"]), float(t["M"]), KernelSpec(cfg["bounds_kernel"], float(t["gamma"])),
                         KernelSpec(cfg["utility_kernel"]), BlockConfig.from_dict(cfg["blocks"]))
    out = _out_dir(args, cfg)
    model.save(out / "model.json")
    return {"model": str(out / "model.json")}


def _model_and_data(args, cfg: dict) -> tuple[PriceResponseModel, TimeSeriesDataset]:
    if args.model is None:
        raise ConfigError("--model is required")
    if not Path(args.model).exists():
        raise DataError(f"model file not found: {args.model}")
    model = PriceResponseModel.load(args.model)
    ds = _load_data(cfg, args.data)
    if ds.regressors is None:
        ds = model.featurize(ds)
    model.check_compatible(ds)
    return model, ds


def cmd_predict(args, cfg: dict) -> dict:
    model, ds = _model_and_data(args, cfg)
    idx = _periods(cfg, ds)
    pred = forecast(model, ds, idx)
    out = _out_dir(args, cfg)
    pd.DataFrame({"timestamp": [str(t) for t in ds.timestamps[idx]], "p_hat_kw": pred}).to_csv(
        out / "forecast.csv", index=False, float_format="%.10g")
    return {"forecast": str(out / "forecast.csv"), "periods": int(idx.size)}


def cmd_bidcurve(args, cfg: dict) -> dict:
    model, ds = _model_and_data(args, cfg)
    idx = _periods(cfg, ds)
    if np.isnan(ds.regressors[idx]).any():
        raise DataError("some requested periods lack a full lag history")
    curves = [extract_bid_curve(model, ds.regressors[t], timestamp=str(ds.timestamps[t])) for t in idx]
    out = _out_dir(args, cfg)
    write_curves_csv(curves, out / "bidcurves.csv")
    return {"bidcurves": str(out / "bidcurves.csv"), "periods": int(idx.size)}


def _baseline_forecasts(cfg: dict, ds, idx) -> dict:
    k = cfg["krr"]
    krr, _ = krr_tune(ds, k["deltas"], k["gammas"])
    fc = {"krr": krr_predict(krr, ds.regressors[idx])}
    for name, lag in NAIVE_LAGS.items():
        fc[name] = naive_forecast(ds, lag, idx)
    return fc


def cmd_evaluate(args, cfg: dict) -> dict:
    ds = _featurized(cfg, args.data)
    idx = _periods(cfg, ds)
    jobs = args.jobs or cfg["jobs"]
    if args.model is not None:
        kio = PriceResponseModel.load(args.model)
        kio.check_compatible(ds)
    else:
        kio = _tune(cfg, ds, cfg["bounds_kernel"], jobs).model
    lio = _tune(cfg, ds, "linear", jobs).model
    fc = {"kio": forecast(kio, ds, idx), "lio": forecast(lio, ds, idx)}
    fc.update(_baseline_forecasts(cfg, ds, idx))
    out = _out_dir(args, cfg)
    rows = evaluation_rows(ds.power[idx], fc, args.case)
    write_evaluation_csv(rows, out / "evaluation.csv")
    return {"evaluation": str(out / "evaluation.csv"), "rows": len(rows)}


def cmd_baseline(args, cfg: dict) -> dict:
    ds = _featurized(cfg, args.data)
    idx = _periods(cfg, ds)
    fc = _baseline_forecasts(cfg, ds, idx)
    stamps = [str(t) for t in ds.timestamps[idx]]
    frame = pd.concat([pd.DataFrame({"timestamp": stamps, "model": name, "p_hat_kw": f})
                       for name, f in fc.items()], ignore_index=True)
    out = _out_dir(args, cfg)
    frame.to_csv(out / "baseline_forecast.csv", index=False, float_format="%.10g")
    write_evaluation_csv(evaluation_rows(ds.power[idx], fc, args.case), out / "baseline_metrics.csv")
    return {"forecast": str(out / "baseline_forecast.csv"), "metrics": str(out / "baseline_metrics.csv")}


COMMANDS = {
    "simulate": cmd_simulate,
    "tune": cmd_tune,
    "train": cmd_train,
    "predict": cmd_predict,
    "bidcurve": cmd_bidcurve,
    "evaluate": cmd_evaluate,
    "baseline": cmd_baseline,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="evfleet-io", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON run config")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config field, e.g. grid.H=[0.6,0.8]")
        p.add_argument("--out", help=f"output directory (default ${OUTPUT_ENV} or config output_dir)")
        p.add_argument("--jobs", type=int, help="worker processes")
        if name != "simulate":
            p.add_argument("--data", help="dataset CSV or JSON (overrides config 'data')")
        if name in ("predict", "bidcurve", "evaluate"):
            p.add_argument("--model", help="model JSON")
        if name in ("evaluate", "baseline"):
            p.add_argument("--case", default="default", help="label for the metrics rows")
    return parser


def _exit_code(exc: BaseException) -> int:
    if isinstance(exc, ConfigError):
        return 2
    if isinstance(exc, SolverFailure):
        return 3
    if isinstance(exc, DataError):
        return 4
    return 1


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.jobs is not None and args.jobs < 1:
            raise ConfigError("--jobs must be positive")
        cfg = load_config(args.config, args.set)
        summary = COMMANDS[args.command](args, cfg)
    except EvFleetError as exc:
        code = _exit_code(exc)
        json.dump({"error": type(exc).__name__, "message": str(exc), "exit_code": code}, sys.stderr)
        sys.stderr.write("\n")
        return code
    json.dump(summary, sys.stdout, sort_keys=True)
    sys.stdout.write("\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())
