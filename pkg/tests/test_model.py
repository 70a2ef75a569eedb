import json

import numpy as np
import pytest

from helpers import toy_dataset

from evfleet_io.dataset import FeatureConfig, build_features
from evfleet_io.errors import DataError, FeatureMismatch, InsufficientHistory
from evfleet_io.forward import forecast
from evfleet_io.kernels import KernelSpec
from evfleet_io.model import PriceResponseModel, fit_model
from evfleet_io.optimality import BlockConfig

SMALL = FeatureConfig((1, 2), (1, 2), (), False)
WITH_HOURS = FeatureConfig((1, 2), (1, 2), (), True)


@pytest.fixture(scope="module")
def fitted():
    ds = build_features(toy_dataset(n=96, seed=4), SMALL)
    model, diag = fit_model(ds, 0.8, 1e-3, KernelSpec("gaussian", 0.1), blocks=BlockConfig(3, 0))
    return ds, model, diag


def test_fit_outputs(fitted):
    ds, model, diag = fitted
    lo, hi = diag.train_bounds
    assert lo.size == ds.split.train.size
    assert np.all(hi >= lo)
    assert np.all(diag.duality.epsilon >= -1e-8)
    assert model.provenance["chosen"] == {"H": 0.8, "M": 0.001, "gamma": 0.1}
    assert model.provenance["data_hash"] == ds.content_hash()


def test_round_trip_preserves_predictions(fitted, tmp_path):
    ds, model, _ = fitted
    model.save(tmp_path / "m.json")
    back = PriceResponseModel.load(tmp_path / "m.json")
    assert np.array_equal(forecast(back, ds), forecast(model, ds))
    again = back.featurize(toy_dataset(n=96, seed=4))
    assert np.array_equal(again.regressors[ds.split.test], ds.regressors[ds.split.test])
    back.save(tmp_path / "m2.json")
    assert (tmp_path / "m.json").read_bytes() == (tmp_path / "m2.json").read_bytes()


def test_feature_mismatch(fitted):
    _, model, _ = fitted
    other = build_features(toy_dataset(n=96, seed=4), WITH_HOURS)
    with pytest.raises(FeatureMismatch, match="model expects 4 features"):
        model.check_compatible(other)


def test_wrong_format_rejected(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"format": "something else"}))
    with pytest.raises(DataError):
        PriceResponseModel.load(path)


def test_fit_needs_regressors():
    with pytest.raises(InsufficientHistory):
        fit_model(toy_dataset(n=48), 0.8, 1e-3, KernelSpec("gaussian", 0.1))
