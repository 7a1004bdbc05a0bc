import math

import numpy as np
import pytest

from bldc_ann.estimation import (EstimationFault, Estimator, EstimatorConfig, EstimateTrace, StateClass,
                                 classify_state, decode_position, estimate_position, estimate_speed,
                                 estimate_trace, position_dataset, speed_dataset, stratified_choice)
from bldc_ann.mlp import Mlp
from bldc_ann.simulator import SpeedProfile, run_profile

KP = 8


@pytest.fixture(scope="module")
def trace():
    return run_profile(SpeedProfile.constant(600, 0.3), seed=11).slice(50_000)


def test_decode_examples():
    est = decode_position((0.0, 1.0), KP, "mechanical")
    assert est.angle_hat == 0.0 and est.nearest_vsn == 1
    # a slot edge is 2 sin(w/4) from the midpoint, a hair beyond the default sin(w/2)
    assert est.vsn_hat is None
    assert decode_position((0.0, 1.0), KP, "mechanical", threshold=0.04).elec_cycle == 1
    est = decode_position((0.098, 0.995), KP, "mechanical")
    assert est.angle_hat == pytest.approx(5.63, abs=0.01)
    assert est.vsn_hat == 2 and est.confidence < 1e-3
    est = decode_position((1.2, 0.3), KP, "mechanical")
    assert math.isfinite(est.angle_hat) and est.vsn_hat is None and est.nearest_vsn is not None


def test_electrical_frame_angle_is_within_one_cycle():
    s, c = math.sin(math.radians(195.0)), math.cos(math.radians(195.0))
    est = decode_position((s, c), KP, "electrical")
    assert est.angle_hat == pytest.approx(195.0 / KP)
    assert est.vsn_hat == 7 and est.elec_cycle is None


def test_zero_output_is_unknown():
    est = decode_position((0.0, 0.0), KP, "mechanical")
    assert math.isnan(est.angle_hat) and est.vsn_hat is None
    assert classify_state(est, 1) == StateClass.UNKNOWN


def test_non_finite_output_is_unknown():
    est = decode_position((math.nan, 1.0), KP)
    assert est.vsn_hat is None and est.confidence == math.inf


@pytest.mark.parametrize("k", [1e-3, 0.5, 7.0])
def test_angle_is_scale_invariant(k):
    a = decode_position((0.3, -0.7), KP, "mechanical")
    b = decode_position((0.3 * k, -0.7 * k), KP, "mechanical")
    assert a.angle_hat == pytest.approx(b.angle_hat, abs=1e-12)
    assert a.nearest_vsn == b.nearest_vsn


def test_classify_state():
    est = decode_position((0.098, 0.995), KP, "mechanical")
    assert classify_state(est, 2) == StateClass.SUCCESSFUL
    assert classify_state(est, 3) == StateClass.ERRONEOUS
    assert classify_state(est, 2, cycle_true=2) == StateClass.ERRONEOUS
    assert classify_state(est, 2, threshold=1e-9) == StateClass.UNKNOWN
    with pytest.raises(ValueError):
        classify_state(est, 2, threshold=0.0)


def test_estimate_position_checks_topology():
    with pytest.raises(EstimationFault):
        estimate_position(Mlp.zeros((10, 4, 2)), np.zeros(10))
    assert estimate_position(Mlp.zeros((10, 5, 2)), np.zeros(10)).vsn_hat is None


def test_estimate_speed():
    assert estimate_speed(Mlp.zeros((21, 10, 1)), np.ones(21)).speed_hat == 0.0
    with pytest.raises(EstimationFault):
        estimate_speed(Mlp.zeros((21, 10, 1)), np.full(21, np.nan))
    with pytest.raises(EstimationFault):
        estimate_speed(Mlp.zeros((21, 10, 1)), np.ones(20))


def test_config_validation():
    with pytest.raises(ValueError):
        EstimatorConfig(frame="stator")
    with pytest.raises(ValueError):
        EstimatorConfig(observe_every=5, observe_phase=5)
    with pytest.raises(ValueError):
        EstimatorConfig.from_dict({"gain": 1})
    cfg = EstimatorConfig(debounce=3)
    assert EstimatorConfig.from_dict(cfg.to_dict()) == cfg
    np.testing.assert_array_equal(cfg.observed(np.arange(7)), [0, 1, 0, 0, 0, 0, 1])


def test_oracle_estimator_is_always_right(trace):
    est = estimate_trace(trace, None, None)
    assert len(est) == len(trace) // 5
    assert np.all(est.state == StateClass.SUCCESSFUL)
    np.testing.assert_array_equal(est.vsn_hat, est.vsn_true)
    np.testing.assert_array_equal(est.cycle_hat, est.cycle_true)
    assert np.all(est.sample % 5 == 1)
    err = (est.angle_hat - est.angle_true + 180.0) % 360.0 - 180.0
    assert np.max(np.abs(err)) <= 3.75 / 2 + 360.0 / 1024


def test_mechanical_frame_oracle(trace):
    est = estimate_trace(trace, None, None, EstimatorConfig(frame="mechanical"))
    assert np.all(est.state == StateClass.SUCCESSFUL)


def test_chunked_processing_matches_whole(trace):
    whole = estimate_trace(trace, None, None)
    e = Estimator(None, None)
    cuts = [0, 3, 1001, 1002, 7777, len(trace)]
    parts = [e.process(trace.time[a:b], trace.conditioned[a:b], trace.enc_deg[a:b], trace.speed_rpm[a:b])
             for a, b in zip(cuts, cuts[1:])]
    joined = EstimateTrace.concat(parts)
    for name in EstimateTrace._FIELDS:
        np.testing.assert_array_equal(getattr(joined, name), getattr(whole, name))


def test_gaps_are_rejected(trace):
    e = Estimator(None, None)
    e.process(trace.time[:100], trace.conditioned[:100], trace.enc_deg[:100], trace.speed_rpm[:100])
    with pytest.raises(EstimationFault):
        e.process(trace.time[200:300], trace.conditioned[200:300], trace.enc_deg[200:300],
                  trace.speed_rpm[200:300])


def test_zero_speed_net_gives_zero_rpm(trace):
    est = estimate_trace(trace, None, Mlp.zeros((21, 10, 1)))
    known = est.speed_hat[np.isfinite(est.speed_hat)]
    assert len(known) > 0.9 * len(est) and np.all(known == 0.0)


def test_oracle_speed_events_track_speed(trace):
    ds = speed_dataset([trace], None, EstimatorConfig(), KP, 1e-5)
    assert ds.x.shape[1] == 21 and ds.m > 100
    # the intra-window ratio over nine events is the mean speed in deg/s
    rpm_from_ratio = ds.x[:, 8] / 6.0
    assert np.median(np.abs(rpm_from_ratio - ds.y[:, 0])) < 0.03 * 600


def test_position_dataset_targets_are_unit_vectors(trace):
    ds, speeds = position_dataset([trace], EstimatorConfig(), KP, 1e-5, max_examples=500, seed=0)
    assert ds.m == 500 and len(speeds) == 500
    np.testing.assert_allclose(np.hypot(ds.y[:, 0], ds.y[:, 1]), 1.0)


def test_stratified_choice_balances_bins():
    speed = np.concatenate([np.full(1000, 150.0), np.full(100, 950.0)])
    idx = stratified_choice(speed, 200, seed=0)
    assert len(idx) == 200 and np.all(np.diff(idx) > 0)
    assert np.sum(speed[idx] == 950.0) == 100
    np.testing.assert_array_equal(stratified_choice(speed, None, 0), np.arange(1100))
