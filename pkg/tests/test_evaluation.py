import json
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from bldc_ann.estimation import EstimateTrace, StateClass
from bldc_ann.evaluation import (ConfusionCounts, angular_mae, confusion_counts, constant_speed_profile,
                                 f_score, mae, per_speed_report, wrapped_difference, write_tracking_data)

S, U, E = StateClass.SUCCESSFUL, StateClass.UNKNOWN, StateClass.ERRONEOUS


def _trace(state, n_turns=1.0, angle_err=0.0, speed_err=0.0):
    state = np.asarray(state, dtype=np.int64)
    n = len(state)
    angle = np.linspace(0, 360 * n_turns, n, endpoint=False) % 360.0
    vt = (np.floor(angle / 3.75).astype(int) % 12) + 1
    vh = np.where(state == S, vt, np.where(state == E, vt % 12 + 1, 0))
    spd = np.full(n, 600.0)
    cyc = np.floor(angle / 45.0).astype(np.int64) + 1
    return EstimateTrace(np.arange(n) * 5e-5, np.arange(n) * 5 + 1, angle, (angle + angle_err) % 360.0,
                         vt, vh, cyc, cyc, state, spd, spd + speed_err)


def test_f_score_examples():
    assert f_score(ConfusionCounts(10, 0, 0, 0)) == 1.0
    assert f_score(ConfusionCounts(0, 5, 5, 0)) == 0.0
    assert f_score(ConfusionCounts(0, 0, 0, 0)) == 0.0
    assert f_score(ConfusionCounts(6, 2, 4, 0)) == pytest.approx(2 * 0.75 * 0.6 / 1.35)
    with pytest.raises(ValueError):
        ConfusionCounts(-1, 0, 0, 0)


@given(st.integers(0, 10**6), st.integers(0, 10**6), st.integers(0, 10**6))
def test_f_score_brute_force(tp, fp, fn):
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    expected = 2 * p * r / (p + r) if p + r else 0.0
    assert f_score(ConfusionCounts(tp, fp, fn, 0)) == pytest.approx(expected, rel=1e-12, abs=0)


def test_mae_examples():
    assert mae([1, 2, 3], [1, 2, 3]) == 0.0
    assert mae([0, 0], [1, -3]) == 2.0
    assert angular_mae([359.0], [1.0]) == pytest.approx(2.0)
    assert mae([359.0], [1.0]) == pytest.approx(358.0)
    np.testing.assert_allclose(wrapped_difference([10, 350], [350, 10]), [20, 20])
    with pytest.raises(ValueError):
        mae([1, 2], [1])
    with pytest.raises(ValueError):
        angular_mae([], [])


def test_micro_counts_treat_unknown_as_miss():
    state = [S] * 92 + [U] * 7 + [E] * 1
    total, per = confusion_counts(state, [1] * 100, [1] * 92 + [0] * 7 + [2])
    assert (total.tp, total.fp, total.fn) == (92, 1, 8)
    assert per[1].fp == 1 and per[0].fn == 8


def test_mostly_successful_anchor():
    # 92 % successful, 7.5 % unknown, 0.5 % erroneous
    st_ = [S] * 1840 + [U] * 150 + [E] * 10
    row = per_speed_report({600.0: _trace(st_)}).rows[0]
    assert row.successful == pytest.approx(0.92)
    assert row.f_score == pytest.approx(0.9558, abs=5e-4)


def test_f_equals_accuracy_without_unknowns():
    rng = np.random.default_rng(0)
    st_ = rng.choice([S, E], size=3000, p=[0.9, 0.1])
    row = per_speed_report({600.0: _trace(st_)}).rows[0]
    assert row.f_score == pytest.approx(row.accuracy)


def test_perfect_trace():
    rep = per_speed_report({600.0: _trace([S] * 4000, n_turns=3.0)})
    row = rep.rows[0]
    assert row.f_score == 1.0 and row.mae_mech_deg == 0.0 and row.mae_elec_deg == 0.0
    assert row.speed_mae_rpm == 0.0
    assert row.mech_cycles == pytest.approx(3.0, abs=0.01)


def test_angle_and_speed_errors():
    row = per_speed_report({600.0: _trace([S] * 1000, angle_err=0.5, speed_err=-12.0)}).rows[0]
    assert row.mae_mech_deg == pytest.approx(0.5)
    assert row.mae_elec_deg == pytest.approx(4.0)
    assert row.mae_mech_per_pole_pair == pytest.approx(0.0625)
    assert row.speed_rel_err_pct == pytest.approx(2.0)


def test_empty_trace_is_flagged(tmp_path):
    rep = per_speed_report({125.0: EstimateTrace.empty(), 600.0: _trace([S] * 100)})
    assert rep.rows[0].flagged == "empty trace" and math.isnan(rep.rows[0].f_score)
    assert rep.aggregate.f_score == 1.0
    rep.write(tmp_path)
    d = json.loads((tmp_path / "report.json").read_text())
    assert d["rows"][0]["f_score"] is None
    assert "empty trace" in (tmp_path / "report.csv").read_text()
    assert "empty trace" in rep.summary()


def test_aggregate_weights_by_cycles():
    low = _trace([S] * 1000 + [U] * 1000, n_turns=1.0)
    high = _trace([S] * 2000, n_turns=9.0)
    rep = per_speed_report({125.0: low, 1125.0: high})
    assert rep.pooled.successful == pytest.approx(0.75)
    assert rep.aggregate.successful == pytest.approx(0.1 * 0.5 + 0.9 * 1.0, abs=1e-3)


def test_constant_speed_profile_holds_requested_cycles():
    prof, t_eval = constant_speed_profile(600.0, 50, settle=0.5)
    assert prof.duration - t_eval == pytest.approx(5.0)


def test_tracking_file(tmp_path):
    write_tracking_data(_trace([S] * 50), tmp_path / "t.dat", stride=10)
    lines = (tmp_path / "t.dat").read_text().splitlines()
    assert lines[0].startswith("#") and len(lines) == 6
    assert len(lines[1].split()) == 5
