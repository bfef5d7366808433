from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from capeq.scenario import (DemandCurve, DemandFileError, ScenarioConfig, ScenarioError, TechnologySpec,
                            aggregate_blocks, build_scenario_set, load_demand_curve,
                            make_availability_profiles, synthetic_hourly_load)


def _curve(blocks=48):
    lengths, load = aggregate_blocks(synthetic_hourly_load(), blocks, "graded")
    return DemandCurve(lengths, load, responsive=0.05 * load.max(), voll=10_000.0)


def _techs():
    return [TechnologySpec("baseload", 290e3, (15.0, 30.0), 1.0, "baseload"),
            TechnologySpec("peaker", 55e3, (80.0, 160.0), 1.0, "peaker"),
            TechnologySpec("variable", 90e3, [0.0], 0.375, "variable")]


def test_identity_aggregation(tmp_path):
    hourly = synthetic_hourly_load()
    path = tmp_path / "load.txt"
    path.write_text("\n".join(f"{v}" for v in hourly))
    curve = load_demand_curve(path, 8760)
    assert curve.n_blocks == 8760
    assert np.all(curve.lengths == 1.0)
    np.testing.assert_array_equal(curve.fixed, hourly)


def test_constant_series_four_blocks(tmp_path):
    path = tmp_path / "flat.txt"
    path.write_text("100\n" * 8760)
    curve = load_demand_curve(path, 4)
    np.testing.assert_array_equal(curve.lengths, [2190.0] * 4)
    np.testing.assert_array_equal(curve.fixed, [100.0] * 4)


def test_sawtooth_block_means_and_energy(tmp_path):
    hourly = np.tile(np.arange(1000.0), 9)[:8760]
    path = tmp_path / "saw.txt"
    path.write_text("".join(f"{h},{v}\n" for h, v in enumerate(hourly)))
    curve = load_demand_curve(path, 24)
    # recompute block means independently from contiguous slices
    start = 0
    for length, demand in zip(curve.lengths, curve.fixed):
        stop = start + int(length)
        assert demand == pytest.approx(hourly[start:stop].mean(), rel=1e-14)
        start = stop
    assert curve.energy == pytest.approx(hourly.sum(), rel=1e-14)


@pytest.mark.parametrize("text,row", [("1\n2\nx\n", 3), ("1\n-5\n", 2), ("1\n2 3 4\n", 2)])
def test_bad_rows_report_index(tmp_path, text, row):
    path = tmp_path / "bad.txt"
    path.write_text(text)
    with pytest.raises(DemandFileError) as err:
        load_demand_curve(path, 1)
    assert err.value.row == row


def test_empty_file_rejected(tmp_path):
    path = tmp_path / "empty.txt"
    path.write_text("# nothing\n\n")
    with pytest.raises(DemandFileError):
        load_demand_curve(path, 1)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(0, 1e5, allow_nan=False), min_size=1, max_size=300),
       st.integers(1, 300), st.sampled_from(["chronological", "duration", "graded"]))
def test_aggregation_preserves_energy(hourly, blocks, mode):
    hourly = np.array(hourly)
    blocks = min(blocks, hourly.size)
    lengths, demand = aggregate_blocks(hourly, blocks, mode)
    assert lengths.sum() == hourly.size
    assert np.all(lengths >= 1)
    assert lengths @ demand == pytest.approx(hourly.sum(), rel=1e-12, abs=1e-9)


def test_degenerate_single_scenario():
    cfg = ScenarioConfig(1, 1, 1)
    scen = build_scenario_set(cfg, _curve(24), _techs()[:2])
    assert scen.n_scenarios == 1
    assert scen.probabilities[0] == 1.0
    assert scen.net_shift[0] == 0.0


def test_four_hundred_scenarios_and_variable_mean():
    cfg = ScenarioConfig(10, 4, 10, (0.0, 8000.0), (0.0, 8000.0), [-0.3, -0.1, 0.1, 0.3], 8.0, 0)
    curve = _curve()
    scen = build_scenario_set(cfg, curve, _techs())
    assert scen.n_scenarios == 400
    np.testing.assert_allclose(scen.probabilities, 1 / 400, rtol=0, atol=1e-15)
    assert abs(scen.probabilities.sum() - 1.0) <= 1e-12
    var = scen.technologies[2].availability
    mean = (var @ curve.lengths).sum() / (var.shape[0] * curve.hours)
    assert abs(mean - 0.375) <= 1e-3


def test_downward_shift_rises_with_fuel_cost():
    cfg = ScenarioConfig(5, 1, 1, (0.0, 0.0), (0.0, 4000.0))
    scen = build_scenario_set(cfg, _curve(24), _techs()[:2])
    assert np.all(np.diff(scen.shift_down) >= 0)
    assert np.all(np.diff(scen.technologies[1].fuel_cost) >= 0)


def test_negative_net_demand_rejected_with_location():
    curve = DemandCurve(np.array([10.0, 10.0]), np.array([50.0, 5.0]))
    cfg = ScenarioConfig(2, 1, 1, (0.0, 0.0), (0.0, 10.0))
    with pytest.raises(ScenarioError, match=r"f=1, s=0, t=1"):
        build_scenario_set(cfg, curve, _techs()[:1])


def test_same_seed_bit_identical():
    cfg = ScenarioConfig(2, 3, 2, (0.0, 100.0), (0.0, 100.0), [-0.2, 0.0, 0.2], 2.0, 11)
    a = build_scenario_set(cfg, _curve(24), _techs())
    b = build_scenario_set(cfg, _curve(24), _techs())
    assert a.availability().tobytes() == b.availability().tobytes()
    assert a.fuel_costs().tobytes() == b.fuel_costs().tobytes()


def test_full_availability_is_all_ones():
    prof = make_availability_profiles(_curve(24), 1.0, [-0.5, 0.5])
    assert np.all(prof == 1.0)


def _corr(profile, curve):
    w = curve.lengths / curve.lengths.sum()
    a, b = profile - w @ profile, curve.fixed - w @ curve.fixed
    return (w @ (a * b)) / np.sqrt((w @ a**2) * (w @ b**2))


def test_zero_correlation_target():
    curve = _curve()
    prof = make_availability_profiles(curve, 0.375, [0.0], seed=3)[0]
    assert abs(_corr(prof, curve)) < 0.02
    assert abs(curve.lengths @ prof / curve.hours - 0.375) <= 1e-3


def test_correlation_targets_ordered_and_met():
    curve = _curve()
    profiles = make_availability_profiles(curve, 0.375, [-0.3, 0.3], seed=1)
    measured = [_corr(p, curve) for p in profiles]
    assert measured[0] < measured[1]
    np.testing.assert_allclose(measured, [-0.3, 0.3], atol=1e-2)
    for p in profiles:
        assert np.all((p >= 0) & (p <= 1))
        assert abs(curve.lengths @ p / curve.hours - 0.375) <= 1e-3


def test_unordered_correlations_rejected():
    with pytest.raises(ScenarioError):
        make_availability_profiles(_curve(24), 0.375, [0.3, -0.3])


def test_unreachable_correlation_names_profile():
    with pytest.raises(ScenarioError, match="profile 1"):
        make_availability_profiles(_curve(24), 0.375, [0.0, 0.999], retries=2)
