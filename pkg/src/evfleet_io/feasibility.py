"""Kernel regressions for the fleet's lower and upper power bounds.

The bounds ``P = mu + K alpha`` are fitted by an asymmetrically weighted
slack loss: observations outside the band cost ``H`` per kW, band margin
costs ``1 - H`` per kW, and ``M`` trades this loss against ``||alpha||^2``.

Two equivalent solution routes are implemented:

* ``dual``: the Lagrangian dual in the multipliers of the two slack
  equalities. It only involves ``K^2`` and is much faster for full-rank
  Gaussian Gram matrices. Requires ``M > 0``.
* ``primal``: the problem itself in the eigenbasis of ``K`` with
  negligible directions removed. Used for ``M = 0``, low-rank (linear)
  kernels, and as a fallback when the dual recovery fails its gap check.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np
import scipy.sparse as sp

from .errors import ConfigError, DimensionMismatch, SolverFailure
from .kernels import KernelSpec, gram
from .optimality import reduced_basis
from .qpsolve import ConvexProgram, SolverOptions, solve

# relative primal/dual objective mismatch accepted from the dual route
DUAL_GAP_TOL = 1e-7
# interior-point iterations granted to the dual with a dense K^2 term
DENSE_DUAL_ITER = 100


@dataclass
class BoundsModel:
    mu_lo: float
    mu_hi: float
    alpha_lo: np.ndarray
    alpha_hi: np.ndarray
    kernel: KernelSpec
    train_features: np.ndarray
    H: float
    M: float

    def raw_bounds(self, z) -> tuple[np.ndarray, np.ndarray]:
        K = gram(np.atleast_2d(np.asarray(z, dtype=float)), self.train_features, self.kernel)
        return self.mu_lo + K @ self.alpha_lo, self.mu_hi + K @ self.alpha_hi

    def to_dict(self) -> dict:
        return {"mu_lo": self.mu_lo, "mu_hi": self.mu_hi, "alpha_lo": self.alpha_lo.tolist(),
                "alpha_hi": self.alpha_hi.tolist(), "kernel": self.kernel.to_dict(),
                "train_features": self.train_features.tolist(), "H": self.H, "M": self.M}

    @classmethod
    def from_dict(cls, d: dict) -> "BoundsModel":
        z = np.asarray(d["train_features"], dtype=float).reshape(len(d["train_features"]), -1)
        return cls(float(d["mu_lo"]), float(d["mu_hi"]), np.asarray(d["alpha_lo"], dtype=float),
                   np.asarray(d["alpha_hi"], dtype=float), KernelSpec.from_dict(d["kernel"]), z,
                   float(d["H"]), float(d["M"]))


@dataclass
class FeasibilitySlacks:
    """Per-period margins (``*_plus``) and violations (``*_minus``), kW."""

    hi_plus: np.ndarray
    hi_minus: np.ndarray
    lo_plus: np.ndarray
    lo_minus: np.ndarray
    objective: float
    route: str = ""


def predict_bounds(model: BoundsModel, z) -> tuple[np.ndarray, np.ndarray]:
    """Ordered bounds; crossed predictions collapse to their midpoint."""
    lo, hi = model.raw_bounds(z)
    crossed = hi < lo
    mid = 0.5 * (lo + hi)
    lo = np.where(crossed, mid, lo)
    hi = np.where(crossed, mid, hi)
    if np.ndim(z) == 1:
        return lo[0], hi[0]
    return lo, hi


def objective_value(p_obs, p_lo, p_hi, alpha_lo, alpha_hi, H, M) -> float:
    loss = H * (np.maximum(p_obs - p_hi, 0) + np.maximum(p_lo - p_obs, 0)).sum()
    loss += (1 - H) * (np.maximum(p_hi - p_obs, 0) + np.maximum(p_obs - p_lo, 0)).sum()
    return float(M * (alpha_lo @ alpha_lo + alpha_hi @ alpha_hi) + (1 - M) * loss)


def _slacks(p_obs, p_lo, p_hi, objective, route) -> FeasibilitySlacks:
    d_hi = p_hi - p_obs
    d_lo = p_obs - p_lo
    return FeasibilitySlacks(np.maximum(d_hi, 0), np.maximum(-d_hi, 0),
                             np.maximum(d_lo, 0), np.maximum(-d_lo, 0), objective, route)


def fit_bounds(ds, H: float, M: float, kspec: KernelSpec = KernelSpec("gaussian", 0.1),
               route: str = "auto", opts: Optional[SolverOptions] = None):
    """Fit bounds on the training periods of a featurized dataset."""
    tr = ds.split.train
    return fit_bounds_arrays(ds.regressors[tr], ds.power[tr], H, M, kspec, route, opts)


def fit_bounds_arrays(z_train, p_obs, H: float, M: float,
                      kspec: KernelSpec = KernelSpec("gaussian", 0.1),
                      route: str = "auto", opts: Optional[SolverOptions] = None):
    """Returns ``(BoundsModel, FeasibilitySlacks)``."""
    z_train = np.atleast_2d(np.asarray(z_train, dtype=float))
    p_obs = np.asarray(p_obs, dtype=float).ravel()
    n = p_obs.size
    if n == 0 or z_train.shape[0] != n:
        raise DimensionMismatch("need one regressor row per training observation")
    if not 0 <= H < 1 or not 0 <= M <= 1:
        raise ConfigError(f"H must lie in [0, 1) and M in [0, 1], got H={H}, M={M}")
    if route not in ("auto", "dual", "primal"):
        raise ConfigError(f"unknown route {route!r}")
    opts = opts or SolverOptions()
    K = gram(z_train, z_train, kspec)

    if route == "dual" or (route == "auto" and 0 < M < 1 and kspec.kind == "gaussian"):
        if M <= 0:
            raise ConfigError("the dual route needs M > 0")
        fitted = _fit_dual(K, p_obs, H, M, opts)
        if fitted is not None or route == "dual":
            if fitted is None:
                raise SolverFailure("dual bound estimation failed its optimality check")
            return _package(fitted, K, z_train, p_obs, kspec, H, M, "dual")
    return _package(_fit_primal(K, p_obs, H, M, opts), K, z_train, p_obs, kspec, H, M, "primal")


def _package(fitted, K, z_train, p_obs, kspec, H, M, route):
    mu_lo, mu_hi, a_lo, a_hi = fitted
    model = BoundsModel(float(mu_lo), float(mu_hi), a_lo, a_hi, kspec, z_train.copy(), float(H), float(M))
    p_lo = mu_lo + K @ a_lo
    p_hi = mu_hi + K @ a_hi
    obj = objective_value(p_obs, p_lo, p_hi, a_lo, a_hi, H, M)
    return model, _slacks(p_obs, p_lo, p_hi, obj, route)


def _fit_dual(K, p, H, M, opts):
    """Solve the dual; return primal coefficients or None if recovery is inexact.

    Dual variables u, v (one per period, for the upper and lower slack
    equalities) and kappa (for the ordering constraint). With a = 1 - M:
    minimize (u'K^2u + v'K^2v)/(4M) - p'(u - v) subject to
    -a(1-H) <= u - kappa <= aH, -a(1-H) <= v - kappa <= aH, kappa >= 0,
    sum(u) = sum(v) = 0. Then alpha_hi = Ku/(2M), alpha_lo = -Kv/(2M) and the
    intercepts are the multipliers of the two sum constraints.

    The quadratic term is first tried with K^2 as is, under a short
    iteration budget. Very smooth kernels make that form badly scaled, so on
    failure the same dual is solved with q = V'u as extra variables, which
    turns the quadratic term into the diagonal sum of lam^2 q^2.
    """
    n = p.size
    a = 1.0 - M
    I = sp.identity(n, format="csr")
    O = sp.csr_matrix((n, n))
    ones = sp.csr_matrix(np.ones((1, n)))
    zeros = sp.csr_matrix((1, n))
    A_eq = sp.vstack([sp.hstack([ones, zeros, zeros]), sp.hstack([zeros, ones, zeros])])
    A_in = sp.vstack([
        sp.hstack([I, O, -I]), sp.hstack([-I, O, I]),
        sp.hstack([O, I, -I]), sp.hstack([O, -I, I]),
    ])
    b_in = np.r_[np.full(n, a * H), np.full(n, a * (1 - H)), np.full(n, a * H), np.full(n, a * (1 - H))]
    c = np.r_[-p, p, np.zeros(n)]
    lb = np.r_[np.full(2 * n, -np.inf), np.zeros(n)]

    K2 = K @ K
    Kq = sp.csc_matrix(0.5 * (K2 + K2.T) / (2 * M))
    Q = sp.block_diag([Kq, Kq, sp.csc_matrix((n, n))], format="csc")
    sol = solve(ConvexProgram(c=c, Q=Q, A_eq=A_eq, b_eq=np.zeros(2), A_in=A_in, b_in=b_in, lb=lb),
                replace(opts, max_iter=min(opts.max_iter, DENSE_DUAL_ITER), max_attempts=1))
    if not sol.ok:
        V, lam = reduced_basis(K)
        r = lam.size
        Vt = sp.csr_matrix(V.T)
        Ir = sp.identity(r, format="csr")
        Orn, Orr = sp.csr_matrix((r, n)), sp.csr_matrix((r, r))
        A_q = sp.vstack([
            sp.hstack([A_eq, sp.csr_matrix((2, 2 * r))]),
            sp.hstack([-Vt, Orn, Orn, Ir, Orr]),
            sp.hstack([Orn, -Vt, Orn, Orr, Ir]),
        ]).tocsr()
        Qd = np.r_[np.zeros(3 * n), lam ** 2 / (2 * M), lam ** 2 / (2 * M)]
        sol = solve(ConvexProgram(c=np.r_[c, np.zeros(2 * r)], Q=Qd, A_eq=A_q, b_eq=np.zeros(2 + 2 * r),
                                  A_in=sp.hstack([A_in, sp.csr_matrix((4 * n, 2 * r))]).tocsr(), b_in=b_in,
                                  lb=np.r_[lb, np.full(2 * r, -np.inf)]), opts)
        if not sol.ok:
            return None
    u, v = sol.x[:n], sol.x[n:2 * n]
    a_hi = K @ u / (2 * M)
    a_lo = -(K @ v) / (2 * M)
    mu_hi, mu_lo = sol.y_eq[0], -sol.y_eq[1]
    p_hi = mu_hi + K @ a_hi
    p_lo = mu_lo + K @ a_lo
    primal = objective_value(p, p_lo, p_hi, a_lo, a_hi, H, M)
    dual = -sol.objective
    if abs(primal - dual) > DUAL_GAP_TOL * (1.0 + abs(primal)):
        return None
    if np.min(p_hi - p_lo, initial=0.0) < -1e-6 * (1.0 + np.abs(p).max()):
        return None
    return mu_lo, mu_hi, a_lo, a_hi


def _fit_primal(K, p, H, M, opts):
    """Primal problem in the reduced eigenbasis of K.

    Layout: mu_hi, mu_lo | b_hi, b_lo (r each) | xi_hi+, xi_hi-, xi_lo+, xi_lo- (n each),
    with alpha = V b and K alpha = (V diag(lam)) b.
    """
    n = p.size
    if M >= 1.0:
        V, lam = np.zeros((n, 0)), np.zeros(0)
    else:
        V, lam = reduced_basis(K)
    # without regularization the problem only sees K alpha, so work in the
    # orthonormal coordinates g = diag(lam) b; this keeps the LP well
    # conditioned when the Gram matrix has tiny eigenvalues
    L = V if M == 0 else V * lam
    r = lam.size
    nv = 2 + 2 * r + 4 * n
    iu, il, ibh, ibl, ix = 0, 1, 2, 2 + r, 2 + 2 * r

    # with M = 1 alpha is forced to zero; the intercepts then minimize the
    # slack loss (the limit of the optimum as M approaches 1)
    w = 1.0 if M >= 1.0 else 1 - M
    c = np.zeros(nv)
    c[ix:ix + n] = w * (1 - H)              # xi_hi+
    c[ix + n:ix + 2 * n] = w * H            # xi_hi-
    c[ix + 2 * n:ix + 3 * n] = w * (1 - H)  # xi_lo+
    c[ix + 3 * n:ix + 4 * n] = w * H        # xi_lo-
    Qd = np.zeros(nv)
    Qd[ibh:ibh + 2 * r] = 2 * M

    I = sp.identity(n, format="csr")
    col1 = sp.csr_matrix(np.ones((n, 1)))
    colz = sp.csr_matrix((n, 1))
    Ls = sp.csr_matrix(L)
    Lz = sp.csr_matrix((n, r))
    Oz = sp.csr_matrix((n, n))
    A_eq = sp.vstack([
        sp.hstack([col1, colz, Ls, Lz, -I, I, Oz, Oz]),
        sp.hstack([colz, -col1, Lz, -Ls, Oz, Oz, -I, I]),
    ]).tocsr()
    b_eq = np.r_[p, -p]
    A_in = sp.hstack([-col1, col1, -Ls, Ls, sp.csr_matrix((n, 4 * n))]).tocsr()
    b_in = np.zeros(n)
    lb = np.r_[np.full(2 + 2 * r, -np.inf), np.zeros(4 * n)]

    sol = solve(ConvexProgram(c=c, Q=Qd, A_eq=A_eq, b_eq=b_eq, A_in=A_in, b_in=b_in, lb=lb), opts)
    if not sol.ok:
        raise SolverFailure(f"bound estimation failed: {sol.status} ({sol.message})", sol.status)
    x = sol.x
    b_lo, b_hi = x[ibl:ibl + r], x[ibh:ibh + r]
    if M == 0:
        b_lo, b_hi = b_lo / lam, b_hi / lam
    return x[il], x[iu], V @ b_lo, V @ b_hi
