"""Synthetic EV-fleet data: driving patterns, daily cost-minimizing charging
(optionally with vehicle-to-grid), and a rule-based immediate-charging regime.

Units: power kW, energy kWh, price EUR/MWh, time step in hours. The
synchronization penalty ``sync_penalty`` is in EUR/MWh^2 and is applied to
the aggregate energy per step in MWh.

Fleet spec JSON::

    {"n_evs": 10, "charge_kw": 7.4, "discharge_kw": 0.0,
     "round_trip_efficiency": 0.95, "soc_min_kwh": 10.0, "soc_max_kwh": 51.0,
     "degradation_eur_kwh": 0.02, "motion_cost_eur": 0.0}

Every field except ``n_evs`` may instead be given per vehicle in an
``"evs"`` list of objects with the same keys.
"""

from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import pandas as pd
import scipy.sparse as sp

from .dataset import TimeSeriesDataset, make_split
from .errors import ConfigError, DataError, ResolutionMismatch, SolverFailure
from .qpsolve import ConvexProgram, solve

KWH_PER_KM = 0.137
REGIMES = ("optimized", "naive-ch")


@dataclass(frozen=True)
class EvSpec:
    charge_kw: float = 7.4
    discharge_kw: float = 0.0
    round_trip_efficiency: float = 0.95
    soc_min_kwh: float = 10.0
    soc_max_kwh: float = 51.0
    degradation_eur_kwh: float = 0.02
    motion_cost_eur: float = 0.0
    soc0_kwh: Optional[float] = None

    def __post_init__(self):
        if not self.charge_kw > 0 or self.discharge_kw < 0:
            raise ConfigError("charging power must be positive and discharging power nonnegative")
        if not 0 < self.round_trip_efficiency <= 1:
            raise ConfigError("round-trip efficiency must lie in (0, 1]")
        if not self.soc_min_kwh <= self.soc_max_kwh:
            raise ConfigError("soc_min_kwh must not exceed soc_max_kwh")
        if self.soc0_kwh is not None and not self.soc_min_kwh <= self.soc0_kwh <= self.soc_max_kwh:
            raise ConfigError("initial state of charge outside the energy limits")

    @property
    def eta(self) -> float:
        """Charging and discharging efficiency, split evenly from the round trip."""
        return float(np.sqrt(self.round_trip_efficiency))

    @property
    def soc0(self) -> float:
        if self.soc0_kwh is not None:
            return float(self.soc0_kwh)
        return 0.5 * (self.soc_min_kwh + self.soc_max_kwh)


@dataclass(frozen=True)
class FleetSpec:
    evs: tuple[EvSpec, ...]

    def __len__(self) -> int:
        return len(self.evs)

    @classmethod
    def homogeneous(cls, n_evs: int, **kw) -> "FleetSpec":
        if n_evs < 1:
            raise ConfigError("a fleet needs at least one vehicle")
        return cls(tuple(EvSpec(**kw) for _ in range(n_evs)))

    @classmethod
    def from_dict(cls, d: dict) -> "FleetSpec":
        known = {f.name for f in fields(EvSpec)}
        unknown = set(d) - known - {"n_evs", "evs"}
        if unknown:
            raise ConfigError(f"unknown fleet keys: {sorted(unknown)}")
        shared = {k: v for k, v in d.items() if k in known}
        if "evs" in d:
            evs = []
            for e in d["evs"]:
                bad = set(e) - known
                if bad:
                    raise ConfigError(f"unknown vehicle keys: {sorted(bad)}")
                evs.append(EvSpec(**{**shared, **e}))
            return cls(tuple(evs))
        return cls.homogeneous(int(d.get("n_evs", 1)), **shared)

    def to_dict(self) -> dict:
        return {"evs": [asdict(e) for e in self.evs]}

    @classmethod
    def load(cls, path) -> "FleetSpec":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


@dataclass(frozen=True)
class FleetRunConfig:
    dt_h: float = 0.25
    shedding_cost_eur_kwh: float = 1000.0
    sync_penalty_eur_mwh2: float = 0.0
    regime: str = "optimized"
    steps_per_day: int = 96

    def __post_init__(self):
        if not self.dt_h > 0:
            raise ConfigError("time step must be positive")
        if self.shedding_cost_eur_kwh < 0 or self.sync_penalty_eur_mwh2 < 0:
            raise ConfigError("cost parameters must be nonnegative")
        if self.regime not in REGIMES:
            raise ConfigError(f"regime must be one of {REGIMES}")
        if abs(self.steps_per_day * self.dt_h - 24.0) > 1e-9:
            raise ConfigError("steps_per_day * dt_h must cover 24 h")


@dataclass
class Patterns:
    """Availability flags and trip energy, arrays of shape (n_evs, n_steps)."""

    timestamps: np.ndarray
    available: np.ndarray
    trip_energy: np.ndarray

    def __post_init__(self):
        self.available = np.asarray(self.available, dtype=bool)
        self.trip_energy = np.asarray(self.trip_energy, dtype=float)
        if self.available.shape != self.trip_energy.shape or self.available.shape[1] != len(self.timestamps):
            raise DataError("pattern arrays must share the shape (n_evs, n_steps)")
        if np.any(self.trip_energy[self.available] != 0) or np.any(self.trip_energy < 0):
            raise DataError("trip energy must be nonnegative and zero while a vehicle is parked")

    @property
    def n_evs(self) -> int:
        return self.available.shape[0]

    def to_frame(self) -> pd.DataFrame:
        V, T = self.available.shape
        return pd.DataFrame({
            "ev_id": np.repeat(np.arange(V), T),
            "timestamp": np.tile([str(t) for t in self.timestamps], V),
            "available": self.available.ravel().astype(int),
            "trip_energy_kwh": self.trip_energy.ravel(),
        })

    def write_csv(self, path) -> None:
        self.to_frame().to_csv(path, index=False, float_format="%.17g")

    @classmethod
    def read_csv(cls, path) -> "Patterns":
        frame = pd.read_csv(path, float_precision="round_trip")
        for col in ("ev_id", "timestamp", "available", "trip_energy_kwh"):
            if col not in frame.columns:
                raise DataError(f"pattern file lacks column {col!r}")
        frame = frame.sort_values(["ev_id", "timestamp"], kind="stable")
        ids = frame["ev_id"].unique()
        stamps = np.array(frame.loc[frame["ev_id"] == ids[0], "timestamp"], dtype="datetime64[s]")
        T = stamps.size
        if len(frame) != ids.size * T:
            raise DataError("every vehicle needs the same timestamps")
        return cls(stamps, frame["available"].to_numpy().reshape(ids.size, T),
                   frame["trip_energy_kwh"].to_numpy(dtype=float).reshape(ids.size, T))


@dataclass
class SimResult:
    """One simulated day (or any horizon) at native resolution."""

    timestamps: np.ndarray
    power: np.ndarray
    charge: np.ndarray
    discharge: np.ndarray
    soc: np.ndarray
    shedding: np.ndarray
    soc_start: np.ndarray
    objective: float
    available_count: np.ndarray
    dt_h: float

    def hourly_power(self) -> np.ndarray:
        return hourly_mean(self.power, self.dt_h)


@dataclass(frozen=True)
class CommuterProfile:
    """One round trip per day: leave in the morning, return in the evening."""

    depart_mean_h: float = 7.5
    depart_sd_h: float = 1.0
    return_mean_h: float = 17.5
    return_sd_h: float = 1.5
    km_per_day: float = 30.0
    km_spread: float = 0.3
    kwh_per_km: float = KWH_PER_KM


def generate_patterns(n_evs: int, n_days: int, seed: int,
                      profile: CommuterProfile = CommuterProfile(),
                      start: str = "2018-01-01", dt_h: float = 0.25) -> Patterns:
    """Seeded commuter patterns; trip energy is spread evenly over the trip steps."""
    if n_evs < 1 or n_days < 1:
        raise ConfigError("need at least one vehicle and one day")
    rng = np.random.default_rng(seed)
    spd = int(round(24 / dt_h))
    T = spd * n_days
    avail = np.ones((n_evs, T), dtype=bool)
    trip = np.zeros((n_evs, T))
    for day in range(n_days):
        dep = rng.normal(profile.depart_mean_h, profile.depart_sd_h, n_evs)
        ret = rng.normal(profile.return_mean_h, profile.return_sd_h, n_evs)
        km = profile.km_per_day * rng.uniform(1 - profile.km_spread, 1 + profile.km_spread, n_evs)
        for v in range(n_evs):
            d0 = int(np.clip(round(dep[v] / dt_h), 1, spd - 3))
            d1 = int(np.clip(round(ret[v] / dt_h), d0 + 1, spd - 1))
            sl = slice(day * spd + d0, day * spd + d1)
            avail[v, sl] = False
            trip[v, sl] = km[v] * profile.kwh_per_km / (d1 - d0)
    stamps = np.datetime64(start, "s") + np.arange(T) * np.timedelta64(int(dt_h * 3600), "s")
    return Patterns(stamps, avail, trip)


def synthetic_prices(n_days: int, seed: int, base: float = 45.0) -> np.ndarray:
    """Hourly day-ahead-like prices (EUR/MWh): two daily peaks plus AR(1) noise."""
    rng = np.random.default_rng(seed)
    h = np.arange(24)
    shape = 9 * np.exp(-0.5 * ((h - 9) / 2.0) ** 2) + 13 * np.exp(-0.5 * ((h - 20) / 2.0) ** 2) \
        - 8 * np.exp(-0.5 * ((h - 4) / 2.0) ** 2)
    out = np.empty(24 * n_days)
    noise = 0.0
    for d in range(n_days):
        level = base + rng.normal(0, 4)
        amp = rng.uniform(0.6, 1.4)
        for k in range(24):
            noise = 0.7 * noise + rng.normal(0, 2.5)
            out[24 * d + k] = level + amp * shape[k] + noise
    return np.round(out, 2)


def hourly_mean(values, dt_h: float) -> np.ndarray:
    values = np.asarray(values, dtype=float)
    per_hour = 1.0 / dt_h
    k = int(round(per_hour))
    if abs(per_hour - k) > 1e-9 or values.size % k:
        raise ResolutionMismatch(f"{values.size} steps of {dt_h} h do not fill whole hours")
    return values.reshape(-1, k).mean(axis=1)


def simulate_day(fleet: FleetSpec, available, trip_energy, prices, cfg: FleetRunConfig,
                 soc_start: Optional[np.ndarray] = None, timestamps=None) -> SimResult:
    """Simulate one horizon. ``prices`` are given per step (EUR/MWh)."""
    available = np.asarray(available, dtype=bool)
    trip_energy = np.asarray(trip_energy, dtype=float)
    prices = np.asarray(prices, dtype=float)
    V, T = available.shape
    if V != len(fleet) or trip_energy.shape != (V, T) or prices.size != T:
        raise DataError("fleet, pattern and price dimensions disagree")
    soc0 = np.array([e.soc0 for e in fleet.evs]) if soc_start is None else np.asarray(soc_start, dtype=float)
    if timestamps is None:
        timestamps = np.arange(T)
    if cfg.regime == "naive-ch":
        return _naive_day(fleet, available, trip_energy, prices, cfg, soc0, timestamps)
    return _optimized_day(fleet, available, trip_energy, prices, cfg, soc0, timestamps)


def _naive_day(fleet, avail, trip, prices, cfg, soc0, stamps) -> SimResult:
    V, T = avail.shape
    dt = cfg.dt_h
    c = np.zeros((V, T))
    s = np.zeros((V, T))
    soc = np.zeros((V, T))
    for v, ev in enumerate(fleet.evs):
        level = soc0[v]
        for t in range(T):
            if avail[v, t]:
                c[v, t] = max(0.0, min(ev.charge_kw, (ev.soc_max_kwh - level) / (ev.eta * dt)))
            nxt = level + dt * ev.eta * c[v, t] - trip[v, t]
            if nxt < ev.soc_min_kwh:
                s[v, t] = ev.soc_min_kwh - nxt
                nxt = ev.soc_min_kwh
            soc[v, t] = nxt
            level = nxt
    d = np.zeros((V, T))
    p = c.sum(axis=0)
    obj = _cost(fleet, p, d, s, prices, cfg, avail)
    return SimResult(stamps, p, c, d, soc, s, soc0.copy(), obj, avail.sum(axis=0).astype(float), dt)


def _cost(fleet, p, d, s, prices, cfg, avail) -> float:
    dt = cfg.dt_h
    F = np.array([e.degradation_eur_kwh for e in fleet.evs])
    A = np.array([e.motion_cost_eur for e in fleet.evs])
    cost = float(prices @ p) * dt / 1000.0
    cost += float(A.sum()) * p.size + float(F @ d.sum(axis=1)) * dt
    cost += cfg.shedding_cost_eur_kwh * float(s.sum())
    cost += cfg.sync_penalty_eur_mwh2 * float(np.sum((dt * p / 1000.0) ** 2))
    return cost


def _optimized_day(fleet, avail, trip, prices, cfg, soc0, stamps) -> SimResult:
    """Daily cost minimization as a convex QP.

    Variables per vehicle block: c (T), d (T), soc (T), s (T); then p (T).
    """
    V, T = avail.shape
    dt = cfg.dt_h
    nb = 4 * T
    nvar = V * nb + T
    ip = V * nb

    def idx(v, k):  # k: 0 c, 1 d, 2 soc, 3 s
        return v * nb + k * T

    c = np.zeros(nvar)
    lb = np.zeros(nvar)
    ub = np.full(nvar, np.inf)
    c[ip:] = prices * dt / 1000.0
    lb[ip:] = -np.inf
    rows, cols, vals, rhs = [], [], [], []
    r = 0
    diff = sp.diags([np.ones(T), -np.ones(T - 1)], [0, -1], shape=(T, T), format="coo")
    for v, ev in enumerate(fleet.evs):
        ic, idd, isoc, ish = idx(v, 0), idx(v, 1), idx(v, 2), idx(v, 3)
        ub[ic:ic + T] = ev.charge_kw * avail[v]
        ub[idd:idd + T] = ev.discharge_kw * avail[v]
        lb[isoc:isoc + T] = ev.soc_min_kwh
        ub[isoc:isoc + T] = ev.soc_max_kwh
        c[idd:idd + T] = ev.degradation_eur_kwh * dt
        c[ish:ish + T] = cfg.shedding_cost_eur_kwh
        # soc_t - soc_{t-1} - dt eta c_t + dt d_t / eta - s_t = -trip_t (soc_{-1} = soc0)
        t = np.arange(T)
        rows += [r + diff.row, r + t, r + t, r + t]
        cols += [isoc + diff.col, ic + t, idd + t, ish + t]
        vals += [diff.data, np.full(T, -dt * ev.eta), np.full(T, dt / ev.eta), -np.ones(T)]
        b = -trip[v].copy()
        b[0] += soc0[v]
        rhs.append(b)
        r += T
    # boundary condition
    for v in range(V):
        rows.append(np.array([r]))
        cols.append(np.array([idx(v, 2) + T - 1]))
        vals.append(np.array([1.0]))
        rhs.append(np.array([soc0[v]]))
        r += 1
    # aggregate balance p_t - sum_v (c - d) = 0
    t = np.arange(T)
    rows.append(r + t)
    cols.append(ip + t)
    vals.append(np.ones(T))
    for v in range(V):
        rows += [r + t, r + t]
        cols += [idx(v, 0) + t, idx(v, 1) + t]
        vals += [-np.ones(T), np.ones(T)]
    rhs.append(np.zeros(T))
    r += T
    A_eq = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(r, nvar))
    b_eq = np.concatenate(rhs)

    Q = None
    if cfg.sync_penalty_eur_mwh2 > 0:
        Qd = np.zeros(nvar)
        Qd[ip:] = 2 * cfg.sync_penalty_eur_mwh2 * (dt / 1000.0) ** 2
        Q = Qd
    offset = float(sum(e.motion_cost_eur for e in fleet.evs)) * T
    sol = solve(ConvexProgram(c=c, Q=Q, A_eq=A_eq, b_eq=b_eq, lb=lb, ub=ub, offset=offset))
    if not sol.ok:
        raise SolverFailure(f"fleet day failed: {sol.status} ({sol.message})", sol.status)
    x = sol.x
    cc = np.vstack([np.clip(x[idx(v, 0):idx(v, 0) + T], 0, None) for v in range(V)])
    dd = np.vstack([np.clip(x[idx(v, 1):idx(v, 1) + T], 0, None) for v in range(V)])
    ss = np.vstack([np.clip(x[idx(v, 3):idx(v, 3) + T], 0, None) for v in range(V)])
    soc = np.vstack([x[idx(v, 2):idx(v, 2) + T] for v in range(V)])
    p = cc.sum(axis=0) - dd.sum(axis=0)
    return SimResult(stamps, p, cc, dd, soc, ss, soc0.copy(), sol.objective,
                     avail.sum(axis=0).astype(float), dt)


def conservation_residuals(fleet: FleetSpec, result: SimResult, trip_energy, boundary: bool = True) -> dict:
    """Largest violation of each physical identity in one simulated horizon (kWh or kW).

    ``boundary`` checks that every vehicle ends where it started, which the
    optimized regime enforces and the immediate-charging regime does not.
    """
    trip = np.asarray(trip_energy, dtype=float)
    eta = np.array([e.eta for e in fleet.evs])[:, None]
    dt = result.dt_h
    prev = np.column_stack([result.soc_start, result.soc[:, :-1]])
    step = result.soc - prev - (dt * eta * result.charge - dt * result.discharge / eta - trip + result.shedding)
    out = {
        "soc_recursion": float(np.abs(step).max(initial=0.0)),
        "balance": float(np.abs(result.power - (result.charge - result.discharge).sum(axis=0)).max(initial=0.0)),
        "shedding_sign": float(max(0.0, -result.shedding.min(initial=0.0))),
    }
    if boundary:
        out["boundary"] = float(np.abs(result.soc[:, -1] - result.soc_start).max(initial=0.0))
    return out


def _day_job(args) -> SimResult:
    return simulate_day(*args)


def simulate(fleet: FleetSpec, patterns: Patterns, hourly_prices, cfg: FleetRunConfig,
             jobs: int = 1) -> list[SimResult]:
    """Simulate consecutive days, returned in date order.

    Optimized days are independent (each starts from the vehicles' nominal
    state of charge) and run on up to ``jobs`` processes. The
    immediate-charging regime carries each vehicle's state of charge over
    from the previous day, so it runs sequentially.
    """
    hourly_prices = np.asarray(hourly_prices, dtype=float)
    spd = cfg.steps_per_day
    T = patterns.available.shape[1]
    if T % spd:
        raise ResolutionMismatch(f"{T} pattern steps do not fill whole days of {spd} steps")
    n_days = T // spd
    per_hour = int(round(1 / cfg.dt_h))
    if hourly_prices.size < 24 * n_days:
        raise DataError(f"need {24 * n_days} hourly prices, got {hourly_prices.size}")
    step_prices = np.repeat(hourly_prices[:24 * n_days], per_hour)
    days = [slice(d * spd, (d + 1) * spd) for d in range(n_days)]

    if cfg.regime == "naive-ch":
        out = []
        soc = None
        for sl in days:
            res = simulate_day(fleet, patterns.available[:, sl], patterns.trip_energy[:, sl],
                               step_prices[sl], cfg, soc, patterns.timestamps[sl])
            soc = res.soc[:, -1].copy()
            out.append(res)
        return out

    work = [(fleet, patterns.available[:, sl], patterns.trip_energy[:, sl], step_prices[sl], cfg,
             None, patterns.timestamps[sl]) for sl in days]
    if jobs > 1 and n_days > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_day_job, work))
    return [_day_job(w) for w in work]


def build_dataset(results: Sequence[SimResult], hourly_prices,
                  split_sizes: Optional[Sequence[int]] = None) -> TimeSeriesDataset:
    """Hourly means of simulated power and available-vehicle counts, aligned with prices."""
    if not results:
        raise DataError("no simulation results")
    dt = results[0].dt_h
    if any(abs(r.dt_h - dt) > 1e-12 for r in results):
        raise ResolutionMismatch("simulation results use different time steps")
    stamps = np.concatenate([np.asarray(r.timestamps, dtype="datetime64[s]") for r in results])
    step = np.timedelta64(int(round(dt * 3600)), "s")
    if stamps.size > 1 and np.any(np.diff(stamps) != step):
        raise ResolutionMismatch("simulated steps are not on a contiguous grid")
    power = hourly_mean(np.concatenate([r.power for r in results]), dt)
    avail = hourly_mean(np.concatenate([r.available_count for r in results]), dt)
    k = int(round(1 / dt))
    hours = stamps[::k]
    if (hours.astype("datetime64[h]") != hours).any():
        raise ResolutionMismatch("simulation does not start on a full hour")
    prices = np.asarray(hourly_prices, dtype=float)[:power.size]
    if prices.size != power.size:
        raise DataError("not enough prices for the simulated horizon")
    n = power.size
    return TimeSeriesDataset(hours, prices, power, avail, split=make_split(n, split_sizes))
