import numpy as np
import pytest

from evfleet_io.errors import ConfigError, DataError, ResolutionMismatch
from evfleet_io.fleetsim import (KWH_PER_KM, CommuterProfile, EvSpec, FleetRunConfig, FleetSpec, Patterns,
                                 SimResult, _cost, build_dataset, conservation_residuals, generate_patterns,
                                 hourly_mean, simulate, simulate_day, synthetic_prices)

THREE_STEPS = FleetRunConfig(dt_h=8.0, steps_per_day=3)


def _assert_conserved(fleet, res, trip, boundary=True, tol=1e-6):
    for name, val in conservation_residuals(fleet, res, trip, boundary).items():
        assert val <= tol, name


def test_cheap_period_takes_all_charging():
    # parked for two steps, then a 5 kWh trip; prices 10 and 100 while parked
    fleet = FleetSpec.homogeneous(1)
    avail = np.array([[True, True, False]])
    trip = np.array([[0.0, 0.0, 5.0]])
    res = simulate_day(fleet, avail, trip, [10.0, 100.0, 50.0], THREE_STEPS)
    eta = fleet.evs[0].eta
    assert res.charge[0] == pytest.approx([5.0 / (8.0 * eta), 0.0, 0.0], abs=1e-7)
    assert res.shedding.max() <= 1e-9
    _assert_conserved(fleet, res, trip)


def test_no_availability_costs_only_motion():
    fleet = FleetSpec.homogeneous(3, motion_cost_eur=0.5)
    T = 96
    res = simulate_day(fleet, np.zeros((3, T), bool), np.zeros((3, T)), np.full(T, 40.0), FleetRunConfig())
    assert np.all(res.power == 0)
    assert res.objective == pytest.approx(3 * 0.5 * T)


@pytest.fixture(scope="module")
def one_day():
    fleet = FleetSpec.homogeneous(6, discharge_kw=7.4)
    pat = generate_patterns(6, 1, seed=4)
    prices = np.repeat(synthetic_prices(1, seed=5), 4)
    return fleet, pat, prices


def test_sync_penalty_flattens(one_day):
    fleet, pat, prices = one_day
    runs = []
    for cs in (0.0, 52.0, 520.0, 5200.0):
        cfg = FleetRunConfig(sync_penalty_eur_mwh2=cs)
        res = simulate_day(fleet, pat.available, pat.trip_energy, prices, cfg)
        _assert_conserved(fleet, res, pat.trip_energy)
        runs.append(res)
    peaks = [np.abs(r.power).max() for r in runs]
    energy = [float(np.sum(r.power ** 2)) for r in runs]
    assert peaks[-1] <= peaks[0] + 1e-6
    assert all(b <= a * (1 + 1e-6) + 1e-6 for a, b in zip(energy, energy[1:]))


def test_penalty_only_adds_cost(one_day):
    fleet, pat, prices = one_day
    res = simulate_day(fleet, pat.available, pat.trip_energy, prices, FleetRunConfig())
    plain = _cost(fleet, res.power, res.discharge, res.shedding, prices, FleetRunConfig(), pat.available)
    assert plain == pytest.approx(res.objective, rel=1e-7, abs=1e-7)
    penalized = _cost(fleet, res.power, res.discharge, res.shedding, prices,
                      FleetRunConfig(sync_penalty_eur_mwh2=520.0), pat.available)
    assert plain <= penalized


def test_without_discharge_power_is_nonnegative():
    fleet = FleetSpec.homogeneous(4)
    pat = generate_patterns(4, 2, seed=9)
    res = simulate(fleet, pat, synthetic_prices(2, seed=1), FleetRunConfig())
    for day in res:
        assert day.power.min() >= -1e-9
        assert day.shedding.max() <= 1e-9
        _assert_conserved(fleet, day, pat.trip_energy[:, :96] if day is res[0] else pat.trip_energy[:, 96:])


def test_naive_charges_immediately():
    fleet = FleetSpec.homogeneous(1, soc0_kwh=49.0)
    avail = np.ones((1, 96), bool)
    res = simulate_day(fleet, avail, np.zeros((1, 96)), np.full(96, 40.0), FleetRunConfig(regime="naive-ch"))
    eta = fleet.evs[0].eta
    assert res.charge[0, 0] == pytest.approx(min(7.4, 2.0 / (eta * 0.25)))
    assert res.soc[0, -1] == pytest.approx(51.0)
    assert np.all(res.power >= 0)
    _assert_conserved(fleet, res, np.zeros((1, 96)), boundary=False)


def test_naive_carries_state_between_days():
    fleet = FleetSpec.homogeneous(2)
    pat = generate_patterns(2, 3, seed=2)
    days = simulate(fleet, pat, synthetic_prices(3, seed=0), FleetRunConfig(regime="naive-ch"))
    for prev, cur in zip(days, days[1:]):
        assert np.array_equal(cur.soc_start, prev.soc[:, -1])


def test_parallel_days_match_sequential():
    fleet = FleetSpec.homogeneous(2)
    pat = generate_patterns(2, 3, seed=3)
    prices = synthetic_prices(3, seed=3)
    a = simulate(fleet, pat, prices, FleetRunConfig(), jobs=1)
    b = simulate(fleet, pat, prices, FleetRunConfig(), jobs=2)
    assert all(np.array_equal(x.power, y.power) for x, y in zip(a, b))


def test_patterns_reproducible_and_bounded():
    a = generate_patterns(100, 3, seed=7)
    b = generate_patterns(100, 3, seed=7)
    assert np.array_equal(a.available, b.available) and np.array_equal(a.trip_energy, b.trip_energy)
    counts = a.available.sum(axis=0)
    assert counts.min() >= 0 and counts.max() <= 100
    assert np.all(a.trip_energy[a.available] == 0)
    # each vehicle leaves at least once per day
    assert np.all((~a.available).reshape(100, 3, 96).any(axis=2))


def test_mean_daily_trip_energy():
    pat = generate_patterns(200, 10, seed=0, profile=CommuterProfile(km_per_day=30.0))
    per_day = pat.trip_energy.reshape(200, 10, 96).sum(axis=2)
    assert 30 * KWH_PER_KM == pytest.approx(4.11)
    assert per_day.mean() == pytest.approx(4.11, rel=0.02)


def test_patterns_csv_round_trip(tmp_path):
    pat = generate_patterns(3, 2, seed=1)
    pat.write_csv(tmp_path / "p.csv")
    back = Patterns.read_csv(tmp_path / "p.csv")
    assert np.array_equal(back.available, pat.available)
    assert np.array_equal(back.trip_energy, pat.trip_energy)
    assert np.array_equal(back.timestamps, pat.timestamps)


def test_trip_energy_while_parked_rejected():
    with pytest.raises(DataError):
        Patterns(np.arange(2), [[True, False]], [[1.0, 0.0]])


def test_hourly_mean_example():
    assert hourly_mean([0, 0, 0, 4], 0.25).tolist() == [1.0]
    with pytest.raises(ResolutionMismatch):
        hourly_mean(np.zeros(7), 0.25)


def test_six_weeks_give_1008_rows():
    fleet = FleetSpec.homogeneous(2)
    pat = generate_patterns(2, 42, seed=0)
    prices = synthetic_prices(42, seed=0)
    days = simulate(fleet, pat, prices, FleetRunConfig(regime="naive-ch"))
    ds = build_dataset(days, prices)
    assert len(ds) == 1008
    assert (ds.split.train.size, ds.split.val.size, ds.split.test.size) == (672, 168, 168)
    assert np.array_equal(ds.price, prices)
    assert ds.availability.max() <= 2


def test_missing_quarter_hour_rejected():
    fleet = FleetSpec.homogeneous(1)
    pat = generate_patterns(1, 1, seed=0)
    day = simulate(fleet, pat, synthetic_prices(1, seed=0), FleetRunConfig(regime="naive-ch"))[0]
    keep = np.r_[0:10, 11:96]
    gap = SimResult(day.timestamps[keep], day.power[keep], day.charge[:, keep], day.discharge[:, keep],
                    day.soc[:, keep], day.shedding[:, keep], day.soc_start, day.objective,
                    day.available_count[keep], day.dt_h)
    with pytest.raises(ResolutionMismatch):
        build_dataset([gap], np.zeros(24))


@pytest.mark.parametrize("kwargs", [dict(charge_kw=0), dict(round_trip_efficiency=1.2),
                                    dict(soc_min_kwh=60), dict(soc0_kwh=5)])
def test_ev_validation(kwargs):
    with pytest.raises(ConfigError):
        EvSpec(**kwargs)


def test_run_config_validation():
    with pytest.raises(ConfigError):
        FleetRunConfig(regime="greedy")
    with pytest.raises(ConfigError):
        FleetRunConfig(dt_h=0.5, steps_per_day=96)
    with pytest.raises(ConfigError):
        FleetRunConfig(sync_penalty_eur_mwh2=-1)


def test_fleet_from_dict():
    fleet = FleetSpec.from_dict({"n_evs": 3, "discharge_kw": 5.0})
    assert len(fleet) == 3 and fleet.evs[0].discharge_kw == 5.0
    mixed = FleetSpec.from_dict({"charge_kw": 11.0, "evs": [{}, {"charge_kw": 3.7}]})
    assert [e.charge_kw for e in mixed.evs] == [11.0, 3.7]
    assert FleetSpec.from_dict(mixed.to_dict()) == mixed
    with pytest.raises(ConfigError):
        FleetSpec.from_dict({"n_evs": 2, "wheels": 4})
