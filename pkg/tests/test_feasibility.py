import numpy as np
import pytest
from scipy.optimize import linprog

from evfleet_io.errors import ConfigError, DimensionMismatch
from evfleet_io.feasibility import (BoundsModel, fit_bounds_arrays, objective_value,
                                    predict_bounds)
from evfleet_io.kernels import KernelSpec

G = KernelSpec("gaussian", 0.1)


def synthetic(n, seed=0, dim=2):
    rng = np.random.default_rng(seed)
    z = rng.normal(size=(n, dim))
    p = 50 + 10 * z[:, 0] + rng.normal(0, 8, n)
    return z, p


def mean_width(model, z):
    lo, hi = predict_bounds(model, z)
    return float(np.mean(hi - lo))


def lp_oracle_linear_m0(z, p, H):
    """M = 0 with a linear kernel, written in weight space (P = mu + z w)."""
    n, d = z.shape
    # x = [mu_lo, mu_hi, w_lo(d), w_hi(d), hp(n), hm(n), lp(n), lm(n)]
    off = 2 + 2 * d
    c = np.zeros(off + 4 * n)
    c[off:off + n] = 1 - H
    c[off + n:off + 2 * n] = H
    c[off + 2 * n:off + 3 * n] = 1 - H
    c[off + 3 * n:off + 4 * n] = H
    I = np.eye(n)
    O = np.zeros((n, n))
    Zd = np.zeros((n, d))
    one, zero = np.ones((n, 1)), np.zeros((n, 1))
    # P_hi - p = hp - hm ; p - P_lo = lp - lm
    A_eq = np.vstack([
        np.hstack([zero, one, Zd, z, -I, I, O, O]),
        np.hstack([-one, zero, -z, Zd, O, O, -I, I]),
    ])
    A_ub = np.hstack([one, -one, z, -z, O, O, O, O])
    bounds = [(None, None)] * off + [(0, None)] * (4 * n)
    res = linprog(c, A_ub=A_ub, b_ub=np.zeros(n), A_eq=A_eq, b_eq=np.r_[p, -p], bounds=bounds,
                  method="highs")
    assert res.status == 0
    return res.fun


def test_single_point_is_pinned():
    model, sl = fit_bounds_arrays([[0.3, 1.0]], [10.0], H=0.7, M=0.0, kspec=G)
    lo, hi = predict_bounds(model, np.array([0.3, 1.0]))
    assert sl.objective == pytest.approx(0.0, abs=1e-9)
    assert lo == pytest.approx(10.0, abs=1e-7) and hi == pytest.approx(10.0, abs=1e-7)
    assert np.all(sl.hi_minus <= 1e-9) and np.all(sl.lo_plus <= 1e-7)


def test_interpolating_kernel_reaches_zero_loss():
    z, p = synthetic(20, seed=1)
    for H in (0.5, 0.8, 0.95):
        _, sl = fit_bounds_arrays(z, p, H=H, M=0.0, kspec=KernelSpec("gaussian", 1.0))
        assert sl.objective <= 1e-6


@pytest.mark.parametrize("H", [0.55, 0.75, 0.9])
def test_m0_matches_independent_lp(H):
    z, p = synthetic(31, seed=2, dim=3)
    _, sl = fit_bounds_arrays(z, p, H=H, M=0.0, kspec=KernelSpec("linear"))
    ref = lp_oracle_linear_m0(z, p, H)
    assert ref > 1.0
    assert sl.objective == pytest.approx(ref, abs=1e-6 * (1 + ref))


def test_high_h_gives_wider_bounds():
    z, p = synthetic(50, seed=3)
    wide, _ = fit_bounds_arrays(z, p, 0.99, 1e-3, G)
    narrow, _ = fit_bounds_arrays(z, p, 0.51, 1e-3, G)
    assert mean_width(wide, z) >= mean_width(narrow, z)


@pytest.mark.parametrize("M", [0.0, 1e-4, 1e-2])
def test_width_monotone_in_h(M):
    z, p = synthetic(50, seed=4)
    widths = [mean_width(fit_bounds_arrays(z, p, H, M, G)[0], z) for H in (0.5, 0.6, 0.7, 0.8, 0.9)]
    assert all(b >= a - 1e-6 for a, b in zip(widths, widths[1:]))


@pytest.mark.parametrize("H,M", [(0.6, 1e-3), (0.85, 0.05), (0.95, 0.5)])
def test_dual_and_primal_routes_agree(H, M):
    # n = 41 keeps (1 - H) n fractional, so the intercepts are unique
    z, p = synthetic(41, seed=5)
    md, sd = fit_bounds_arrays(z, p, H, M, G, route="dual")
    mp, sp_ = fit_bounds_arrays(z, p, H, M, G, route="primal")
    assert sd.route == "dual" and sp_.route == "primal"
    scale = 1 + abs(sp_.objective)
    assert abs(sd.objective - sp_.objective) <= 1e-6 * scale
    lo_d, hi_d = predict_bounds(md, z)
    lo_p, hi_p = predict_bounds(mp, z)
    assert np.max(np.abs(hi_d - hi_p)) <= 1e-3
    assert np.max(np.abs(lo_d - lo_p)) <= 1e-3


def test_objective_matches_recomputation():
    z, p = synthetic(30, seed=6)
    model, sl = fit_bounds_arrays(z, p, 0.8, 1e-3, G)
    lo, hi = model.raw_bounds(z)
    ref = objective_value(p, lo, hi, model.alpha_lo, model.alpha_hi, 0.8, 1e-3)
    assert sl.objective == pytest.approx(ref, rel=1e-12)


def test_slack_identities_and_complementarity():
    z, p = synthetic(30, seed=7)
    model, sl = fit_bounds_arrays(z, p, 0.7, 1e-3, G)
    lo, hi = model.raw_bounds(z)
    for arr in (sl.hi_plus, sl.hi_minus, sl.lo_plus, sl.lo_minus):
        assert np.all(arr >= 0)
    assert np.allclose(hi - p, sl.hi_plus - sl.hi_minus, atol=1e-7)
    assert np.allclose(p - lo, sl.lo_plus - sl.lo_minus, atol=1e-7)
    assert np.all(np.minimum(sl.hi_plus, sl.hi_minus) <= 1e-7)
    assert np.all(np.minimum(sl.lo_plus, sl.lo_minus) <= 1e-7)


def test_training_bounds_ordered():
    z, p = synthetic(40, seed=8)
    for H in (0.5, 0.7, 0.9):
        model, _ = fit_bounds_arrays(z, p, H, 1e-3, G)
        lo, hi = model.raw_bounds(z)
        # the ordering constraint holds to solver precision on the raw fit
        assert np.all(hi >= lo - 1e-6 * (1 + np.abs(p).max()))
        lo, hi = predict_bounds(model, z)
        assert np.all(hi >= lo)


def test_full_regularization_zeroes_alpha():
    z, p = synthetic(25, seed=9)
    model, _ = fit_bounds_arrays(z, p, 0.8, 1.0, G)
    assert np.all(model.alpha_lo == 0) and np.all(model.alpha_hi == 0)
    assert model.mu_hi >= model.mu_lo


def test_linear_kernel_fit():
    z, p = synthetic(40, seed=10, dim=3)
    model, sl = fit_bounds_arrays(z, p, 0.8, 1e-3, KernelSpec("linear"))
    assert sl.route == "primal"
    lo, hi = model.raw_bounds(z)
    assert np.all(hi >= lo - 1e-7)


def test_intercept_only_prediction():
    m = BoundsModel(2.0, 9.0, np.zeros(3), np.zeros(3), G, np.eye(3), 0.8, 0.0)
    assert predict_bounds(m, np.array([5.0, 5.0, 5.0])) == (2.0, 9.0)


def test_large_gamma_isolates_training_point():
    z = np.array([[0.0], [5.0], [10.0]])
    m = BoundsModel(1.0, 2.0, np.array([3.0, 4.0, 5.0]), np.array([6.0, 7.0, 8.0]),
                    KernelSpec("gaussian", 1e3), z, 0.8, 0.0)
    lo, hi = predict_bounds(m, z[1])
    assert lo == pytest.approx(1.0 + 4.0, abs=1e-12)
    assert hi == pytest.approx(2.0 + 7.0, abs=1e-12)


def test_crossed_prediction_collapses_to_midpoint():
    m = BoundsModel(5.0, 3.0, np.zeros(1), np.zeros(1), G, np.zeros((1, 1)), 0.8, 0.0)
    assert predict_bounds(m, np.array([0.0])) == (4.0, 4.0)


def test_bad_inputs():
    z, p = synthetic(5)
    with pytest.raises(ConfigError):
        fit_bounds_arrays(z, p, 1.0, 0.0, G)
    with pytest.raises(ConfigError):
        fit_bounds_arrays(z, p, 0.5, 1.5, G)
    with pytest.raises(DimensionMismatch):
        fit_bounds_arrays(z[:3], p, 0.5, 0.0, G)
    with pytest.raises(ConfigError):
        fit_bounds_arrays(z, p, 0.5, 0.0, G, route="dual")


def test_serialization_round_trip():
    z, p = synthetic(10)
    model, _ = fit_bounds_arrays(z, p, 0.8, 1e-3, G)
    back = BoundsModel.from_dict(model.to_dict())
    probe = np.random.default_rng(1).normal(size=(7, 2))
    assert np.array_equal(np.array(predict_bounds(back, probe)), np.array(predict_bounds(model, probe)))
