"""Energy blocks and marginal-utility estimation by duality-gap minimization.

Blocks use one canonical order with non-increasing utilities: discharging
blocks first (d_N, ..., d_1), then charging blocks (c_1, ..., c_N). Every
block ``b`` has a box ``lo_b <= p_b <= hi_b`` where charging blocks have
``lo = 0 <= hi`` and discharging blocks have ``lo <= 0 = hi``.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np
import scipy.sparse as sp

from .errors import ConfigError, DimensionMismatch, InvalidBounds, SolverFailure
from .kernels import KernelSpec, gram
from .qpsolve import ConvexProgram, SolverOptions, solve

UTILITY_RIDGE = 1e-8
# relative threshold for dropping Gram eigen-directions
RANK_TOL = 1e-10
# powers within this fraction of the largest magnitude are solver residue
SNAP_TOL = 1e-7
# slack on each period's gap when searching the optimal face
FACE_TOL = 1e-9
FACE_METHOD = "highs-ds"


@dataclass(frozen=True)
class BlockConfig:
    n_charge: int = 6
    n_discharge: int = 0

    def __post_init__(self):
        if int(self.n_charge) < 1 or int(self.n_discharge) < 0:
            raise ConfigError("need at least one charging block and a nonnegative discharging count")
        object.__setattr__(self, "n_charge", int(self.n_charge))
        object.__setattr__(self, "n_discharge", int(self.n_discharge))

    @property
    def n_blocks(self) -> int:
        return self.n_charge + self.n_discharge

    @property
    def is_charge(self) -> np.ndarray:
        return np.r_[np.zeros(self.n_discharge, bool), np.ones(self.n_charge, bool)]

    def labels(self) -> list[int]:
        """Market labels in canonical order: -N_d..-1 then 1..N_c."""
        return list(range(-self.n_discharge, 0)) + list(range(1, self.n_charge + 1))

    def to_dict(self) -> dict:
        return {"n_charge": self.n_charge, "n_discharge": self.n_discharge}

    @classmethod
    def from_dict(cls, d: dict) -> "BlockConfig":
        return cls(d["n_charge"], d.get("n_discharge", 0))


@dataclass(frozen=True)
class BlockWidths:
    """Per-period block boxes, arrays of shape (T, N_B) in canonical order."""

    lo: np.ndarray
    hi: np.ndarray

    def __getitem__(self, idx) -> "BlockWidths":
        return BlockWidths(np.atleast_2d(self.lo[idx]), np.atleast_2d(self.hi[idx]))

    @property
    def charge(self) -> np.ndarray:
        return self.hi

    @property
    def discharge(self) -> np.ndarray:
        return self.lo


def block_widths(p_lo, p_hi, cfg: BlockConfig) -> BlockWidths:
    """Split the interval [P_lo, P_hi] into equal-length energy blocks.

    Block counts are taken per direction, so the charging widths add up to
    max(P_hi, 0) and the discharging widths to min(P_lo, 0). When both
    bounds are nonnegative the first charging block covers the must-run
    part [0, P_lo]; the mirror rule applies when both are nonpositive.
    Without discharging blocks the bounds are clipped at zero first.
    """
    p_lo = np.atleast_1d(np.asarray(p_lo, dtype=float))
    p_hi = np.atleast_1d(np.asarray(p_hi, dtype=float))
    if p_lo.shape != p_hi.shape:
        raise DimensionMismatch("lower and upper bounds differ in length")
    if np.any(p_hi < p_lo):
        raise InvalidBounds(f"upper bound below lower bound at {int(np.argmax(p_hi < p_lo))}")
    nc, nd = cfg.n_charge, cfg.n_discharge
    if nd == 0:
        p_lo = np.maximum(p_lo, 0.0)
        p_hi = np.maximum(p_hi, 0.0)
    T = p_lo.size
    charge = np.zeros((T, nc))
    disch = np.zeros((T, nd))  # disch[:, 0] is d_1

    pos = p_lo >= 0
    neg = (p_hi <= 0) & ~pos
    mid = ~pos & ~neg

    if nc == 1:
        charge[pos, 0] = p_hi[pos]
    else:
        charge[pos, 0] = p_lo[pos]
        charge[pos, 1:] = ((p_hi[pos] - p_lo[pos]) / (nc - 1))[:, None]
    charge[mid] = (p_hi[mid] / nc)[:, None]
    if nd:
        if nd == 1:
            disch[neg, 0] = p_lo[neg]
        else:
            disch[neg, 0] = p_hi[neg]
            disch[neg, 1:] = ((p_lo[neg] - p_hi[neg]) / (nd - 1))[:, None]
        disch[mid] = (p_lo[mid] / nd)[:, None]

    lo = np.hstack([disch[:, ::-1], np.zeros((T, nc))])
    hi = np.hstack([np.zeros((T, nd)), charge])
    return BlockWidths(lo, hi)


def snap_small(p_obs, p_lo, p_hi) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Zero out residue-sized powers and collapse residue-sized intervals.

    Simulated or fitted series carry values like 1e-22 kW or bounds of
    1e-10 kW where the true value is zero. Left in place they become
    coefficients the LP backend drops, and the utility programs crawl.
    Returns copies; applying it twice changes nothing.
    """
    arrays = [np.array(a, dtype=float, ndmin=1) for a in (p_obs, p_lo, p_hi)]
    tol = SNAP_TOL * max(1.0, *(float(np.abs(a).max(initial=0.0)) for a in arrays))
    for a in arrays:
        a[np.abs(a) <= tol] = 0.0
    p_obs, p_lo, p_hi = arrays
    close = (p_hi - p_lo) <= tol
    p_hi[close] = p_lo[close]
    return p_obs, p_lo, p_hi


def decompose_observed(p_obs, widths: BlockWidths, p_lo, p_hi) -> np.ndarray:
    """Split observed powers into per-block quantities, shape (T, N_B).

    Each observation is clamped into its bounds, then charging blocks are
    filled from c_1 upward (or discharging blocks from d_1 outward).
    """
    p_obs = np.atleast_1d(np.asarray(p_obs, dtype=float))
    lo, hi = np.atleast_2d(widths.lo), np.atleast_2d(widths.hi)
    target = np.clip(p_obs, np.atleast_1d(p_lo), np.atleast_1d(p_hi))
    # the bounds may have been clipped at zero when building the widths
    target = np.clip(target, lo.sum(axis=1), hi.sum(axis=1))
    T, B = hi.shape
    out = np.zeros((T, B))
    for t in range(T):
        if target[t] >= 0:
            order = np.flatnonzero(hi[t] > 0)
            caps = hi[t, order]
        else:
            order = np.flatnonzero(lo[t] < 0)[::-1]
            caps = lo[t, order]
        if order.size == 0:
            continue
        remaining = target[t]
        up = remaining >= 0
        for b, cap in zip(order, caps):
            take = min(max(remaining, 0.0), cap) if up else max(min(remaining, 0.0), cap)
            out[t, b] = take
            remaining -= take
        out[t, order[-1]] += remaining  # rounding residue only
    return out


@dataclass
class UtilityModel:
    """m_{b,t} = nu_b + sum_tau rho_tau K(z_t, z_tau); rho is shared by all blocks."""

    nu: np.ndarray
    rho: np.ndarray
    kernel: KernelSpec
    train_features: np.ndarray

    def to_dict(self) -> dict:
        return {"nu": self.nu.tolist(), "rho": self.rho.tolist(), "kernel": self.kernel.to_dict(),
                "train_features": self.train_features.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "UtilityModel":
        z = np.asarray(d["train_features"], dtype=float)
        return cls(np.asarray(d["nu"], dtype=float), np.asarray(d["rho"], dtype=float),
                   KernelSpec.from_dict(d["kernel"]), z.reshape(len(d["train_features"]), -1))


@dataclass
class DualitySolution:
    """Per-period duality gaps and dual multipliers of the forward problem.

    ``phi_hi``/``phi_lo`` have shape (T, N_B) and hold the multipliers of the
    upper/lower block limits; entries of blocks without width are zero.
    """

    epsilon: np.ndarray
    beta_lo: np.ndarray
    beta_hi: np.ndarray
    phi_lo: np.ndarray
    phi_hi: np.ndarray
    p_blocks: np.ndarray
    objective: float = 0.0


def predict_utilities(model: UtilityModel, z) -> np.ndarray:
    """Block utilities, shape (T, N_B) (or (N_B,) for a single vector)."""
    z = np.asarray(z, dtype=float)
    single = z.ndim == 1
    K = gram(np.atleast_2d(z), model.train_features, model.kernel)
    m = model.nu[None, :] + (K @ model.rho)[:, None]
    return m[0] if single else m


def reduced_basis(K: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Eigenvectors and eigenvalues of a PSD Gram matrix with negligible
    directions dropped. Returns (V_r, lambda_r)."""
    K = 0.5 * (K + K.T)
    lam, V = np.linalg.eigh(K)
    keep = lam > RANK_TOL * max(lam.max(), 1e-300)
    return V[:, keep], lam[keep]


def _dual_quantities(m, price, p_lo, p_hi, lo, hi, beta_lo, beta_hi):
    g = m - price[:, None] - beta_hi[:, None] + beta_lo[:, None]
    phi_hi = np.where(hi > 0, np.maximum(g, 0.0), 0.0)
    phi_lo = np.where(lo < 0, np.maximum(-g, 0.0), 0.0)
    dual_obj = p_hi * beta_hi - p_lo * beta_lo + (hi * phi_hi).sum(1) - (lo * phi_lo).sum(1)
    return phi_lo, phi_hi, dual_obj


def fit_utilities(z_train, price, p_obs, p_lo, p_hi, cfg: BlockConfig,
                  kspec: KernelSpec = KernelSpec("linear"),
                  opts: Optional[SolverOptions] = None,
                  center: bool = True) -> tuple[UtilityModel, DualitySolution]:
    """Estimate block utilities minimizing the total duality gap of the
    observed (clamped, decomposed) decisions.

    The minimal total gap is usually attained on a whole face of solutions:
    every utility between the largest price at which a block stayed idle
    and the smallest price at which it was dispatched explains the data
    equally well. Residue-sized inputs are cleaned with ``snap_small``
    first. With ``center`` (the default) the returned solution is
    the midpoint of the two optimal points with the smallest and the
    largest sum of block intercepts (per-period gaps held at their minimum),
    which keeps intercepts away from the edges of their identified
    intervals. Otherwise a ridge of 1e-8 on the kernel
    coordinates picks one optimum. Intercepts, bound multipliers and kernel coordinates are boxed
    well outside the range of any sensible solution so the face is bounded.
    """
    z_train = np.atleast_2d(np.asarray(z_train, dtype=float))
    price = np.asarray(price, dtype=float)
    n = price.size
    if not (z_train.shape[0] == np.size(p_obs) == np.size(p_lo) == np.size(p_hi) == n) or n == 0:
        raise DimensionMismatch("training arrays must share one nonzero length")
    p_obs, p_lo, p_hi = snap_small(p_obs, p_lo, p_hi)
    W = block_widths(p_lo, p_hi, cfg)
    if cfg.n_discharge == 0:
        p_lo, p_hi = np.maximum(p_lo, 0), np.maximum(p_hi, 0)
    lo, hi = W.lo, W.hi
    pb = decompose_observed(p_obs, W, p_lo, p_hi)
    B = cfg.n_blocks

    K = gram(z_train, z_train, kspec)
    V, lam = reduced_basis(K)
    # kernel term s = K rho = V g in orthonormal coordinates g; rho = V (g / lam)
    r = lam.size

    # variable layout: nu | g | eps | beta_lo | beta_hi | phi_hi | phi_lo
    act_hi = np.argwhere(hi > 0)
    act_lo = np.argwhere(lo < 0)
    nh, nl = len(act_hi), len(act_lo)
    i_nu, i_a, i_eps = 0, B, B + r
    i_bl, i_bh = i_eps + n, i_eps + 2 * n
    i_ph, i_pl = i_eps + 3 * n, i_eps + 3 * n + nh
    nvar = i_pl + nl

    c = np.zeros(nvar)
    c[i_eps:i_eps + n] = 1.0
    Qd = np.zeros(nvar)
    Qd[i_a:i_a + r] = 2 * UTILITY_RIDGE

    Ls = sp.csr_matrix(V)
    # strong-duality row per period
    A_eq = sp.lil_matrix((n, nvar))
    tt = np.arange(n)
    A_eq[tt, i_bh + tt] = p_hi
    A_eq[tt, i_bl + tt] = -p_lo
    A_eq[tt, i_eps + tt] = -1.0
    for k, (t, b) in enumerate(act_hi):
        A_eq[t, i_ph + k] = hi[t, b]
    for k, (t, b) in enumerate(act_lo):
        A_eq[t, i_pl + k] = -lo[t, b]
    A_eq[:, i_nu:i_nu + B] = -pb
    A_eq = sp.hstack([A_eq.tocsr()[:, :i_a], sp.diags(-pb.sum(1)) @ Ls, A_eq.tocsr()[:, i_a + r:]]).tocsr()
    b_eq = -price * pb.sum(1)

    # m - lambda - beta_hi + beta_lo - phi_hi <= 0 on active charge-side limits
    def block_rows(active, sign, i_phi):
        k = len(active)
        if k == 0:
            return sp.csr_matrix((0, nvar)), np.zeros(0)
        t, b = active[:, 0], active[:, 1]
        ar = np.arange(k)
        nu_part = sp.csr_matrix((np.full(k, sign), (ar, i_nu + b)), shape=(k, nvar))
        beta = sp.csr_matrix((np.r_[np.full(k, -sign), np.full(k, sign)],
                              (np.r_[ar, ar], np.r_[i_bh + t, i_bl + t])), shape=(k, nvar))
        phi = sp.csr_matrix((np.full(k, -1.0), (ar, i_phi + ar)), shape=(k, nvar))
        s_part = sp.hstack([sp.csr_matrix((k, i_a)), sign * Ls[t], sp.csr_matrix((k, nvar - i_a - r))])
        return (nu_part + beta + phi + s_part).tocsr(), sign * price[t]

    A1, b1 = block_rows(act_hi, 1.0, i_ph)
    A2, b2 = block_rows(act_lo, -1.0, i_pl)
    # nu_b >= nu_{b+1}
    mono = sp.csr_matrix((np.r_[-np.ones(B - 1), np.ones(B - 1)],
                          (np.r_[np.arange(B - 1), np.arange(B - 1)],
                           np.r_[np.arange(B - 1), np.arange(1, B)])), shape=(B - 1, nvar))
    A_in = sp.vstack([A1, A2, mono]).tocsr()
    b_in = np.r_[b1, b2, np.zeros(B - 1)]

    span = float(price.max() - price.min()) + 1.0
    lb = np.full(nvar, -np.inf)
    ub = np.full(nvar, np.inf)
    lb[i_nu:i_nu + B] = price.min() - span
    ub[i_nu:i_nu + B] = price.max() + span
    lb[i_bl:] = 0.0
    # |m - price| <= 2 span inside the box, so this cap never binds at a
    # sensible optimum; it keeps the optimal face bounded when P_lo = P_hi
    ub[i_bl:i_bh + n] = 4 * span

    # |s_t| <= 2 span for any sensible utility curve, so |g_i| <= ||s|| stays
    # well inside this box
    lb[i_a:i_a + r] = -4 * span * np.sqrt(n)
    ub[i_a:i_a + r] = 4 * span * np.sqrt(n)
    opts = opts or SolverOptions()

    if not center:
        prog = ConvexProgram(c=c, Q=Qd, A_eq=A_eq, b_eq=b_eq, A_in=A_in, b_in=b_in, lb=lb, ub=ub)
        sol = solve(prog, opts)
        if not sol.ok:
            raise SolverFailure(f"utility estimation failed: {sol.status} ({sol.message})", sol.status)
        x = sol.x
    else:
        x = _centered_solution(c, A_eq, b_eq, A_in, b_in, lb, ub, i_nu, B, opts=opts)

    nu = x[i_nu:i_nu + B].copy()
    # enforce the ordering exactly (solver output satisfies it to ~1e-9)
    nu = np.minimum.accumulate(nu)
    rho = V @ (x[i_a:i_a + r] / lam)
    model = UtilityModel(nu, rho, kspec, z_train.copy())

    m = nu[None, :] + (K @ rho)[:, None]
    beta_lo = np.maximum(x[i_bl:i_bl + n], 0.0)
    beta_hi = np.maximum(x[i_bh:i_bh + n], 0.0)
    phi_lo, phi_hi, dual_obj = _dual_quantities(m, price, p_lo, p_hi, lo, hi, beta_lo, beta_hi)
    eps = dual_obj - (pb * (m - price[:, None])).sum(1)
    return model, DualitySolution(eps, beta_lo, beta_hi, phi_lo, phi_hi, pb, float(eps.sum()))


def _centered_solution(c, A_eq, b_eq, A_in, b_in, lb, ub, i_nu, B, opts):
    """Minimize the total gap, then average the two points with the
    smallest and the largest sum of block intercepts among solutions whose
    per-period gaps do not exceed the minimizer's.

    Capping each gap variable keeps the face programs as well conditioned
    as the base program; a single budget row on the total gap makes them
    so thin that the LP backend can stall.
    """
    base = solve(ConvexProgram(c=c, A_eq=A_eq, b_eq=b_eq, A_in=A_in, b_in=b_in, lb=lb, ub=ub), opts)
    if not base.ok:
        raise SolverFailure(f"utility estimation failed: {base.status} ({base.message})", base.status)
    i_eps = np.flatnonzero(c)
    eps = base.x[i_eps]
    ub_face = ub.copy()
    ub_face[i_eps] = eps + FACE_TOL * (1.0 + np.abs(eps))
    face_opts = replace(opts, lp_method=FACE_METHOD)
    points = []
    for sign in (1.0, -1.0):
        obj = np.zeros(c.size)
        obj[i_nu:i_nu + B] = sign
        sol = solve(ConvexProgram(c=obj, A_eq=A_eq, b_eq=b_eq, A_in=A_in, b_in=b_in,
                                  lb=lb, ub=ub_face), face_opts)
        if sol.ok:
            points.append(sol.x)
    if len(points) < 2:
        return base.x
    return np.mean(points, axis=0)
