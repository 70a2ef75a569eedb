"""Thin convex-programming layer with an explicit accuracy contract.

Programs have the form::

    minimize    0.5 x'Qx + c'x + offset
    subject to  A_eq x  = b_eq
                A_in x <= b_in
                lb <= x <= ub

Pure LPs (``Q`` absent or zero) go to the HiGHS dual simplex shipped with
SciPy; programs with a quadratic term go to the Clarabel interior-point
solver. Whatever the backend reports, the returned status is decided here
from independently recomputed KKT residuals.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import clarabel
import numpy as np
import scipy.sparse as sp
from scipy.optimize import linprog

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
UNBOUNDED = "unbounded"
NUMERICAL_FAILURE = "numerical-failure"


def _sparse(a, n: int) -> sp.csr_matrix:
    if a is None:
        return sp.csr_matrix((0, n))
    if sp.issparse(a):
        return sp.csr_matrix(a, dtype=float)
    return sp.csr_matrix(np.atleast_2d(np.asarray(a, dtype=float)))


@dataclass
class ConvexProgram:
    """A convex QP/LP. ``Q`` may be a dense/sparse matrix or a 1-D diagonal."""

    c: np.ndarray
    Q: Optional[object] = None
    A_eq: Optional[object] = None
    b_eq: Optional[np.ndarray] = None
    A_in: Optional[object] = None
    b_in: Optional[np.ndarray] = None
    lb: Optional[np.ndarray] = None
    ub: Optional[np.ndarray] = None
    offset: float = 0.0

    def __post_init__(self):
        self.c = np.asarray(self.c, dtype=float).ravel()
        n = self.c.size
        if self.Q is not None:
            q = self.Q
            if not sp.issparse(q) and np.ndim(q) == 1:
                diag = np.asarray(q, dtype=float)
                if diag.size != n or (diag < 0).any():
                    raise ValueError("diagonal Q must be nonnegative with one entry per variable")
                q = sp.diags(diag)
            q = sp.csc_matrix(q, dtype=float)
            if q.shape != (n, n):
                raise ValueError(f"Q has shape {q.shape}, expected {(n, n)}")
            self.Q = q if q.nnz and abs(q).max() > 0 else None
        self.A_eq = _sparse(self.A_eq, n)
        self.A_in = _sparse(self.A_in, n)
        self.b_eq = np.zeros(0) if self.b_eq is None else np.asarray(self.b_eq, dtype=float).ravel()
        self.b_in = np.zeros(0) if self.b_in is None else np.asarray(self.b_in, dtype=float).ravel()
        self.lb = np.full(n, -np.inf) if self.lb is None else np.broadcast_to(np.asarray(self.lb, dtype=float), (n,)).copy()
        self.ub = np.full(n, np.inf) if self.ub is None else np.broadcast_to(np.asarray(self.ub, dtype=float), (n,)).copy()
        if self.A_eq.shape != (self.b_eq.size, n) or self.A_in.shape != (self.b_in.size, n):
            raise ValueError("constraint matrices and right-hand sides are inconsistent")

    @property
    def n(self) -> int:
        return self.c.size

    @property
    def is_lp(self) -> bool:
        return self.Q is None

    def objective(self, x: np.ndarray) -> float:
        val = float(self.c @ x) + self.offset
        if self.Q is not None:
            val += 0.5 * float(x @ (self.Q @ x))
        return val


@dataclass(frozen=True)
class SolverOptions:
    feas_tol: float = 1e-8
    gap_tol: float = 1e-7
    max_iter: int = 10_000
    # simplex pivots scale with problem size; None keeps the HiGHS default
    lp_max_iter: Optional[int] = None
    residual_tol: float = 1e-7
    lp_method: str = "highs-ds"
    # number of interior-point tolerance profiles tried on quadratic programs
    max_attempts: int = 3


@dataclass
class Residuals:
    primal: float
    dual: float
    complementarity: float

    @property
    def max(self) -> float:
        return max(self.primal, self.dual, self.complementarity)


@dataclass
class Solution:
    """Solver outcome. Multipliers follow the sign convention
    ``Qx + c + A_eq'y + A_in'z - w_lb + w_ub = 0`` with ``z, w >= 0``."""

    status: str
    x: Optional[np.ndarray] = None
    objective: float = np.nan
    residuals: Optional[Residuals] = None
    y_eq: Optional[np.ndarray] = None
    z_in: Optional[np.ndarray] = None
    w_lb: Optional[np.ndarray] = None
    w_ub: Optional[np.ndarray] = None
    iterations: int = 0
    backend: str = ""
    message: str = field(default="", repr=False)

    @property
    def ok(self) -> bool:
        return self.status == OPTIMAL


def kkt_residuals(p: ConvexProgram, x, y, z, wl, wu) -> Residuals:
    """Relative primal, dual and complementarity residuals of a candidate point."""
    ax_eq = p.A_eq @ x
    ax_in = p.A_in @ x
    fin_l = np.isfinite(p.lb)
    fin_u = np.isfinite(p.ub)

    viol = [np.abs(ax_eq - p.b_eq), np.maximum(ax_in - p.b_in, 0),
            np.maximum(p.lb[fin_l] - x[fin_l], 0), np.maximum(x[fin_u] - p.ub[fin_u], 0)]
    pscale = 1.0 + max(_inf(p.b_eq), _inf(p.b_in), _inf(ax_eq), _inf(ax_in))
    primal = max(_inf(v) for v in viol) / pscale

    qx = p.Q @ x if p.Q is not None else np.zeros(p.n)
    terms = [qx, p.c, p.A_eq.T @ y, p.A_in.T @ z, wl, wu]
    stat = qx + p.c + p.A_eq.T @ y + p.A_in.T @ z - wl + wu
    sign = max(_inf(np.minimum(z, 0)), _inf(np.minimum(wl, 0)), _inf(np.minimum(wu, 0)))
    dscale = 1.0 + max(_inf(t) for t in terms)
    dual = max(_inf(stat), sign) / dscale

    slack_in = np.maximum(p.b_in - ax_in, 0)
    comp = float(np.abs(z) @ slack_in)
    comp += float(np.abs(wl[fin_l]) @ np.maximum(x[fin_l] - p.lb[fin_l], 0))
    comp += float(np.abs(wu[fin_u]) @ np.maximum(p.ub[fin_u] - x[fin_u], 0))
    cscale = 1.0 + abs(p.objective(x) - p.offset) + abs(float(x @ qx))
    return Residuals(primal, dual, comp / cscale)


def _inf(v) -> float:
    v = np.asarray(v)
    return float(np.max(np.abs(v))) if v.size else 0.0


def solve(p: ConvexProgram, opts: SolverOptions = SolverOptions()) -> Solution:
    """Solve ``p``; never raises on solver trouble, reports it via ``status``."""
    if np.any(p.lb > p.ub):
        return Solution(INFEASIBLE, message="lower bound exceeds upper bound")
    attempts = [None] if p.is_lp else _QP_PROFILES[:max(1, opts.max_attempts)]
    sol = None
    for profile in attempts:
        try:
            sol = _solve_lp(p, opts) if p.is_lp else _solve_qp(p, opts, *profile)
        except (ValueError, ArithmeticError, np.linalg.LinAlgError) as exc:
            sol = Solution(NUMERICAL_FAILURE, message=str(exc))
            continue
        if sol.x is None:
            if sol.status in (INFEASIBLE, UNBOUNDED):
                return sol
            continue
        sol.residuals = kkt_residuals(p, sol.x, sol.y_eq, sol.z_in, sol.w_lb, sol.w_ub)
        sol.objective = p.objective(sol.x)
        if sol.status == OPTIMAL and not sol.residuals.max <= opts.residual_tol:
            sol.status = NUMERICAL_FAILURE
            sol.message = f"KKT residual {sol.residuals.max:.3e} above contract"
        if sol.ok:
            return sol
    return sol


def _solve_lp(p: ConvexProgram, opts: SolverOptions) -> Solution:
    res = linprog(
        p.c,
        A_ub=p.A_in if p.A_in.shape[0] else None,
        b_ub=p.b_in if p.b_in.size else None,
        A_eq=p.A_eq if p.A_eq.shape[0] else None,
        b_eq=p.b_eq if p.b_eq.size else None,
        bounds=np.column_stack([np.where(np.isfinite(p.lb), p.lb, -np.inf),
                                np.where(np.isfinite(p.ub), p.ub, np.inf)]),
        method=opts.lp_method,
        options={"primal_feasibility_tolerance": min(opts.feas_tol, 1e-9),
                 "dual_feasibility_tolerance": min(opts.feas_tol, 1e-9),
                 **({} if opts.lp_max_iter is None else {"maxiter": opts.lp_max_iter})},
    )
    nit = int(getattr(res, "nit", 0) or 0)
    if res.status == 2:
        return Solution(INFEASIBLE, iterations=nit, backend="highs", message=res.message)
    if res.status == 3:
        return Solution(UNBOUNDED, iterations=nit, backend="highs", message=res.message)
    if res.status != 0 or res.x is None:
        return Solution(NUMERICAL_FAILURE, iterations=nit, backend="highs", message=res.message)

    def marg(block, size):
        return np.zeros(size) if block is None or block.marginals is None else np.asarray(block.marginals, dtype=float)

    return Solution(
        OPTIMAL,
        x=np.asarray(res.x, dtype=float),
        y_eq=-marg(getattr(res, "eqlin", None), p.b_eq.size),
        z_in=-marg(getattr(res, "ineqlin", None), p.b_in.size),
        w_lb=marg(getattr(res, "lower", None), p.n),
        w_ub=-marg(getattr(res, "upper", None), p.n),
        iterations=nit,
        backend="highs",
        message=res.message,
    )


# (gap tolerance, feasibility tolerance, linear solver), tried in order until
# the residual contract holds; interior-point runs stop erratically close to
# machine precision, so a fixed fallback sequence is more robust than any
# single setting and keeps results deterministic
_QP_PROFILES = (
    (1e-10, 1e-9, "faer"),
    (1e-12, 1e-10, "faer"),
    (1e-11, 1e-10, "qdldl"),
)


def _solve_qp(p: ConvexProgram, opts: SolverOptions, gap_tol: float = 1e-10,
              feas_tol: float = 1e-9, method: str = "faer") -> Solution:
    n = p.n
    fin_l = np.flatnonzero(np.isfinite(p.lb))
    fin_u = np.flatnonzero(np.isfinite(p.ub))
    eye = sp.identity(n, format="csr")
    A = sp.vstack([p.A_eq, p.A_in, -eye[fin_l], eye[fin_u]]).tocsc()
    b = np.concatenate([p.b_eq, p.b_in, -p.lb[fin_l], p.ub[fin_u]])
    n_eq, n_in = p.b_eq.size, p.b_in.size
    cones = []
    if n_eq:
        cones.append(clarabel.ZeroConeT(n_eq))
    if A.shape[0] > n_eq:
        cones.append(clarabel.NonnegativeConeT(A.shape[0] - n_eq))

    s = clarabel.DefaultSettings()
    s.verbose = False
    s.max_iter = int(opts.max_iter)
    s.tol_feas = min(opts.feas_tol * 0.1, feas_tol)
    s.tol_gap_abs = min(opts.gap_tol * 1e-3, gap_tol)
    s.tol_gap_rel = min(opts.gap_tol * 1e-3, gap_tol)
    s.tol_ktratio = 1e-8
    s.direct_solve_method = method
    s.max_threads = 1
    P = sp.triu(p.Q, format="csc")
    res = clarabel.DefaultSolver(P, p.c, A, b, cones, s).solve()
    status = str(res.status)
    nit = int(res.iterations)
    if "PrimalInfeasible" in status:
        return Solution(INFEASIBLE, iterations=nit, backend="clarabel", message=status)
    if "DualInfeasible" in status:
        return Solution(UNBOUNDED, iterations=nit, backend="clarabel", message=status)
    x = np.asarray(res.x, dtype=float)
    if not np.all(np.isfinite(x)):
        return Solution(NUMERICAL_FAILURE, iterations=nit, backend="clarabel", message=status)
    z = np.asarray(res.z, dtype=float)
    k = n_eq + n_in
    wl = np.zeros(n)
    wu = np.zeros(n)
    wl[fin_l] = z[k:k + fin_l.size]
    wu[fin_u] = z[k + fin_l.size:]
    # "AlmostSolved" is accepted only if the residual check below passes
    ok = status.endswith("Solved")
    return Solution(
        OPTIMAL if ok else NUMERICAL_FAILURE,
        x=x, y_eq=z[:n_eq], z_in=z[n_eq:k], w_lb=wl, w_ub=wu,
        iterations=nit, backend="clarabel", message=status,
    )
