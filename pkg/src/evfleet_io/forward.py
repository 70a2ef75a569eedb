"""Fleet response LP solved in closed form, forecasts and bid/offer curves.

For one period the fleet maximizes ``sum_b p_b (m_b - price)`` subject to
``P_lo <= sum_b p_b <= P_hi`` and per-block boxes ``lo_b <= p_b <= hi_b``.
This is a bounded continuous knapsack, solved exactly by sorting the
block coefficients.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import pandas as pd

from .errors import InsufficientHistory, InvalidInstance
from .optimality import BlockConfig, block_widths
from .qpsolve import ConvexProgram, Solution, solve

_TOL = 1e-9


@dataclass(frozen=True)
class ForwardInstance:
    """One period of the fleet response problem; block arrays in canonical order."""

    price: float
    utilities: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    p_lo: float
    p_hi: float

    def __post_init__(self):
        for name in ("utilities", "lo", "hi"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float).ravel())
        if not (self.utilities.size == self.lo.size == self.hi.size):
            raise InvalidInstance("utilities and block limits differ in length")
        u_tol = _TOL * (1.0 + float(np.abs(self.utilities).max(initial=0.0)))
        if np.any(np.diff(self.utilities) > u_tol):
            raise InvalidInstance("utilities must be non-increasing in canonical block order")
        if np.any(self.lo > 0) or np.any(self.hi < 0):
            raise InvalidInstance("block limits must satisfy lo <= 0 <= hi")
        if self.p_lo > self.p_hi:
            raise InvalidInstance(f"lower bound {self.p_lo} above upper bound {self.p_hi}")
        scale = _TOL * (1.0 + abs(self.p_lo) + abs(self.p_hi))
        if self.lo.sum() > self.p_hi + scale or self.hi.sum() < self.p_lo - scale:
            raise InvalidInstance("block limits cannot reach the aggregate bounds")

    @property
    def coefficients(self) -> np.ndarray:
        return self.utilities - self.price

    def objective(self, p_blocks) -> float:
        return float(np.asarray(p_blocks) @ self.coefficients)


def forward_solve(inst: ForwardInstance) -> tuple[float, np.ndarray]:
    """Optimal aggregate power and per-block powers.

    Blocks sit at the edge of their box favoured by the sign of
    ``m_b - price`` (zero on ties); a violated aggregate bound is then
    repaired by moving the least valuable blocks first. Ties between equal
    coefficients are broken by canonical block index.
    """
    coef = inst.coefficients
    p = np.where(coef > 0, inst.hi, np.where(coef < 0, inst.lo, 0.0))
    total = p.sum()
    if total > inst.p_hi:
        excess = total - inst.p_hi
        for b in np.argsort(coef, kind="stable"):
            step = min(excess, p[b] - inst.lo[b])
            p[b] -= step
            excess -= step
            if excess <= 0:
                break
    elif total < inst.p_lo:
        short = inst.p_lo - total
        for b in np.argsort(-coef, kind="stable"):
            step = min(short, inst.hi[b] - p[b])
            p[b] += step
            short -= step
            if short <= 0:
                break
    return float(p.sum()), p


def lp_program(inst: ForwardInstance) -> ConvexProgram:
    """The same problem as a generic LP (minimization form), used as an oracle."""
    B = inst.utilities.size
    ones = np.ones((1, B))
    return ConvexProgram(
        c=-inst.coefficients,
        A_in=np.vstack([ones, -ones]),
        b_in=np.array([inst.p_hi, -inst.p_lo]),
        lb=inst.lo,
        ub=inst.hi,
    )


def lp_solve(inst: ForwardInstance) -> Solution:
    return solve(lp_program(inst))


@dataclass(frozen=True)
class BidCurve:
    """Bid (charging) and offer (discharging) steps for one period.

    ``bid`` rows are (label, price, quantity) for c_1..c_N with non-increasing
    prices; ``offer`` rows are for d_1..d_N with non-decreasing prices.
    Quantities are nonnegative on both sides.
    """

    bid: tuple[tuple[int, float, float], ...]
    offer: tuple[tuple[int, float, float], ...]
    timestamp: Optional[str] = None

    def rows(self) -> list[dict]:
        out = [{"block": b, "side": "bid", "price_eur_mwh": pr, "quantity_kw": q} for b, pr, q in self.bid]
        out += [{"block": b, "side": "offer", "price_eur_mwh": pr, "quantity_kw": q} for b, pr, q in self.offer]
        return out

    def to_dict(self) -> dict:
        return {"timestamp": self.timestamp,
                "bid": [{"block": b, "price_eur_mwh": pr, "quantity_kw": q} for b, pr, q in self.bid],
                "offer": [{"block": b, "price_eur_mwh": pr, "quantity_kw": q} for b, pr, q in self.offer]}


def bid_curve_from_blocks(utilities, lo, hi, cfg: BlockConfig, timestamp: Optional[str] = None) -> BidCurve:
    utilities = np.asarray(utilities, dtype=float)
    nd = cfg.n_discharge
    bid = tuple((k + 1, float(utilities[nd + k]), float(hi[nd + k])) for k in range(cfg.n_charge))
    # d_1 sits at canonical position nd - 1, d_N at 0
    offer = tuple((-(k + 1), float(utilities[nd - 1 - k]), float(-lo[nd - 1 - k])) for k in range(nd))
    return BidCurve(bid, offer, timestamp)


def extract_bid_curve(model, z_t, cfg: Optional[BlockConfig] = None, timestamp: Optional[str] = None) -> BidCurve:
    """Bid curve of a fitted model at one regressor vector.

    ``model`` must provide ``predict_bounds(Z)`` and ``predict_utilities(Z)``
    and a ``blocks`` attribute (see :class:`evfleet_io.model.PriceResponseModel`).
    """
    cfg = cfg or model.blocks
    z = np.atleast_2d(np.asarray(z_t, dtype=float))
    p_lo, p_hi = model.predict_bounds(z)
    W = block_widths(p_lo, p_hi, cfg)
    m = model.predict_utilities(z)
    return bid_curve_from_blocks(m[0], W.lo[0], W.hi[0], cfg, timestamp)


def forecast(model, ds, periods: Optional[Sequence[int]] = None) -> np.ndarray:
    """One-step-ahead power forecasts from observed lagged regressors."""
    if ds.regressors is None:
        raise InsufficientHistory("dataset has no regressors; build features first")
    periods = ds.split.test if periods is None else np.asarray(periods, dtype=np.int64)
    z = ds.regressors[periods]
    if np.isnan(z).any():
        raise InsufficientHistory("some requested periods lack a full lag history")
    return forecast_from_features(model, z, ds.price[periods])


def forecast_from_features(model, z, price) -> np.ndarray:
    price = np.asarray(price, dtype=float)
    if price.size == 0:
        return np.zeros(0)
    p_lo, p_hi = model.predict_bounds(z)
    W = block_widths(p_lo, p_hi, model.blocks)
    if model.blocks.n_discharge == 0:
        p_lo, p_hi = np.maximum(p_lo, 0.0), np.maximum(p_hi, 0.0)
    m = model.predict_utilities(z)
    out = np.empty(price.size)
    for t in range(price.size):
        inst = ForwardInstance(price[t], m[t], W.lo[t], W.hi[t], p_lo[t], p_hi[t])
        out[t] = forward_solve(inst)[0]
    return out


def write_curves_csv(curves: Sequence[BidCurve], path) -> None:
    """One row per block; a ``timestamp`` column is added when curves carry one."""
    rows = []
    for c in curves:
        for r in c.rows():
            rows.append(({"timestamp": c.timestamp} if c.timestamp is not None else {}) | r)
    cols = (["timestamp"] if curves and curves[0].timestamp is not None else []) + \
        ["block", "side", "price_eur_mwh", "quantity_kw"]
    pd.DataFrame(rows, columns=cols).to_csv(path, index=False, float_format="%.10g")


def write_curves_json(curves: Sequence[BidCurve], path) -> None:
    Path(path).write_text(json.dumps([c.to_dict() for c in curves], indent=1), encoding="utf-8")
