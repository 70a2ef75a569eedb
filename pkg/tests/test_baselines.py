import math

import numpy as np
import pandas as pd
import pytest

from helpers import toy_dataset

from evfleet_io.baselines import (krr_fit, krr_predict, krr_tune, mae, naive_forecast, rmse,
                                  evaluation_rows, write_evaluation_csv)
from evfleet_io.dataset import FeatureConfig, build_features
from evfleet_io.errors import EmptySeries, InsufficientHistory, LengthMismatch, SingularSystem
from evfleet_io.kernels import KernelSpec


def test_lag_one():
    assert naive_forecast([5, 7, 9], 1, [2]).tolist() == [7]


def test_daily_lag_exact_on_periodic_series():
    series = np.tile(np.arange(24.0) ** 1.5, 5)
    periods = np.arange(24, series.size)
    assert rmse(series[periods], naive_forecast(series, 24, periods)) == 0.0


def test_weekly_lag_needs_history():
    with pytest.raises(InsufficientHistory):
        naive_forecast(np.zeros(200), 168, [100, 170])


def test_naive_accepts_dataset():
    ds = toy_dataset(n=30)
    assert np.array_equal(naive_forecast(ds, 1, [3, 4]), ds.power[[2, 3]])


def test_metric_examples():
    assert rmse([0, 0], [3, 4]) == math.sqrt(12.5)
    assert mae([0, 0], [3, 4]) == 3.5
    assert rmse([1.0], [3.0]) == mae([1.0], [3.0]) == 2.0
    assert rmse([1, 2, 3], [1, 2, 3]) == mae([1, 2, 3], [1, 2, 3]) == 0.0


def test_rmse_dominates_mae():
    rng = np.random.default_rng(8)
    for _ in range(200):
        n = int(rng.integers(1, 50))
        a, p = rng.normal(size=n) * 10, rng.normal(size=n) * 10
        assert rmse(a, p) >= mae(a, p) - 1e-12
    # equality when all absolute errors coincide
    assert rmse([0, 0, 0], [2, -2, 2]) == pytest.approx(mae([0, 0, 0], [2, -2, 2]), abs=1e-15)


def test_metric_errors():
    with pytest.raises(LengthMismatch):
        rmse([1, 2], [1])
    with pytest.raises(EmptySeries):
        mae([], [])


def test_krr_three_point_manual_solve():
    z = np.array([[0.0], [1.0], [3.0]])
    y = np.array([2.0, 4.0, 9.0])
    gamma, delta = 0.5, 0.1
    K = np.array([[math.exp(-gamma * (a - b) ** 2) for b in (0.0, 1.0, 3.0)] for a in (0.0, 1.0, 3.0)])
    A = K + delta * 3 * np.eye(3)
    rhs = y - y.mean()
    # Cramer's rule as an independent 3x3 solve
    det = np.linalg.det(A)
    w_ref = np.array([np.linalg.det(np.column_stack([rhs if j == i else A[:, j] for j in range(3)])) / det
                      for i in range(3)])
    model = krr_fit(z, y, delta, KernelSpec("gaussian", gamma))
    assert np.allclose(model.weights, w_ref, atol=1e-12)
    assert np.abs(A @ model.weights - rhs).max() <= 1e-8
    q = 2.0
    k_q = np.array([math.exp(-gamma * (q - b) ** 2) for b in (0.0, 1.0, 3.0)])
    assert krr_predict(model, np.array([q])) == pytest.approx(y.mean() + k_q @ w_ref, abs=1e-12)


def test_krr_interpolates_without_ridge():
    rng = np.random.default_rng(1)
    z = rng.normal(size=(15, 3))
    y = rng.normal(size=15)
    model = krr_fit(z, y, 0.0, KernelSpec("gaussian", 0.5))
    assert np.abs(krr_predict(model, z) - y).max() <= 1e-6


def test_krr_converges_to_targets_as_ridge_vanishes():
    rng = np.random.default_rng(2)
    z = rng.normal(size=(10, 2))
    y = rng.normal(size=10)
    errs = [np.abs(krr_predict(krr_fit(z, y, d, KernelSpec("gaussian", 0.5)), z) - y).max()
            for d in (1e-2, 1e-4, 1e-6, 1e-8, 1e-10, 1e-12)]
    assert all(b <= a for a, b in zip(errs, errs[1:]))
    assert errs[-1] < 1e-6


def test_krr_large_ridge_shrinks_to_mean():
    rng = np.random.default_rng(3)
    z = rng.normal(size=(12, 2))
    y = rng.normal(size=12) + 5
    pred = krr_predict(krr_fit(z, y, 1e9, KernelSpec("gaussian", 0.5)), rng.normal(size=(4, 2)))
    assert np.allclose(pred, y.mean(), atol=1e-8)


def test_krr_singular_without_ridge():
    z = np.array([[0.0], [0.0], [1.0]])
    with pytest.raises(SingularSystem):
        krr_fit(z, [1.0, 2.0, 3.0], 0.0, KernelSpec("gaussian", 0.5))


def test_krr_tune_picks_lowest_validation_rmse():
    ds = build_features(toy_dataset(n=120, seed=6), FeatureConfig((1, 2), (1, 2), (), False))
    model, table = krr_tune(ds)
    assert len(table) == 8
    best = table.loc[table.rmse_val.idxmin()]
    assert (model.delta, model.kernel.gamma) == (best.delta, best.gamma)


def test_evaluation_csv(tmp_path):
    rows = evaluation_rows([0, 0], {"a": [3, 4], "b": [0, 0]}, "sync")
    write_evaluation_csv(rows, tmp_path / "e.csv")
    df = pd.read_csv(tmp_path / "e.csv")
    assert list(df.columns) == ["model", "case", "rmse_kw", "mae_kw"]
    assert df.rmse_kw.tolist() == pytest.approx([math.sqrt(12.5), 0.0])
    assert df.mae_kw.tolist() == [3.5, 0.0]
