import numpy as np
import pytest
from hypothesis import given, strategies as st

from bldc_ann.features import (InsufficientData, SpeedFeatureStream, position_features, position_matrix,
                               position_scaling, speed_matrix, speed_ratio1, speed_ratio2)

finite = st.floats(-10, 10, allow_nan=False)


@given(st.tuples(finite, finite, finite), st.tuples(finite, finite, finite), st.floats(1e-7, 1.0))
def test_position_features_layout(a, b, dt):
    f = position_features(a, b, dt).as_array()
    assert f.shape == (10,)
    np.testing.assert_array_equal(f[:3], a)
    np.testing.assert_array_equal(f[3:6], b)
    assert f[6] == dt
    np.testing.assert_array_equal(f[7:], np.multiply(a, b))


def test_position_features_validation():
    with pytest.raises(ValueError):
        position_features((1, 2, 3), (1, 2, 3), 0.0)
    with pytest.raises(ValueError):
        position_features((1, 2), (1, 2, 3), 1e-5)


def test_position_matrix_matches_single_rows_with_stride():
    rng = np.random.default_rng(0)
    v = rng.normal(size=(40, 3))
    t = np.arange(40) * 1e-5
    rows = position_matrix(v, t, stride=5)
    assert rows.shape == (35, 10)
    for i in (0, 17, 34):
        np.testing.assert_array_equal(rows[i], position_features(v[i], v[i + 5], t[i + 5] - t[i]).as_array())
    assert position_matrix(v[:3], t[:3], stride=5).shape == (0, 10)


def test_position_scaling():
    s = position_scaling(5.0, 1e-5)["input_scale"]
    assert s[0] == pytest.approx(0.2)
    assert s[6] == pytest.approx(1e5)
    assert s[9] == pytest.approx(0.04)


def test_ratio1_constant_speed():
    t = np.arange(10) * 1e-3
    b = 7.5 + 3000.0 * t
    np.testing.assert_allclose(speed_ratio1(b, t), np.full(9, 3000.0))


def test_ratio1_errors():
    with pytest.raises(InsufficientData):
        speed_ratio1(np.arange(5.0), np.arange(5.0))
    with pytest.raises(ValueError):
        speed_ratio1(np.arange(10.0), np.zeros(10))


def test_ratio2_fallback_and_stale_flags():
    prev = np.full(12, np.nan)
    prev[0], prev[1] = 0.0, 3.75
    pt = np.full(12, np.nan)
    pt[0], pt[1] = 0.0, 0.001
    cur = prev + 45.0
    ct = pt + 0.01
    fb = np.arange(12.0)
    r, stale = speed_ratio2(prev, pt, cur, ct, fallback=fb)
    assert r[0] == pytest.approx(4500.0) and r[1] == pytest.approx(4500.0)
    np.testing.assert_array_equal(r[2:], fb[2:])
    assert not stale[:2].any() and stale[2:].all()
    with pytest.raises(ValueError):
        speed_ratio2(prev, pt, cur, pt - 1.0)


def test_stream_at_constant_speed():
    # 60 rpm electrical-frame events: one slot of 3.75 deg every 3.75/360 s
    w = 3.75
    s = SpeedFeatureStream()
    out = []
    for k in range(40):
        out.append(s.push(k * w / 360.0, k * w, k % 12 + 1))
    assert all(o is None for o in out[:9])
    first, last = out[9], out[-1]
    np.testing.assert_allclose(first.ratio1, 360.0)
    # VSNs not yet revisited are seeded with the mean intra-window ratio
    assert first.stale.all()
    np.testing.assert_allclose(first.ratio2, 360.0)
    np.testing.assert_allclose(last.ratio2, 360.0)
    assert not last.stale.any()


def test_stream_rejects_bad_events():
    s = SpeedFeatureStream()
    s.push(1.0, 0.0, 1)
    with pytest.raises(ValueError):
        s.push(1.0, 3.75, 2)
    with pytest.raises(ValueError):
        s.push(2.0, 3.75, 13)
    with pytest.raises(ValueError):
        SpeedFeatureStream(1)


def test_speed_matrix_indices():
    t = np.arange(30) * 0.01
    rows, idx = speed_matrix(t, np.arange(30) * 3.75, np.arange(30) % 12 + 1)
    assert rows.shape == (21, 21)
    np.testing.assert_array_equal(idx, np.arange(9, 30))
    assert speed_matrix(t[:5], t[:5], np.ones(5, int))[0].shape == (0, 21)


def test_ratios_match_true_speed_on_a_quiet_run():
    from bldc_ann.estimation import EstimatorConfig, speed_dataset
    from bldc_ann.simulator import SimConfig, SpeedProfile, run_profile

    tr = run_profile(SpeedProfile.constant(600, 1.0), seed=0, sim=SimConfig(noise_sigma=0.0)).slice(80_000)
    ds = speed_dataset([tr], None, EstimatorConfig(), 8, 1e-5)
    omega = np.mean(tr.speed_rpm) * 6.0  # deg/s
    assert ds.x[:, :9].mean() == pytest.approx(omega, rel=1e-3)
    assert ds.x[:, 9:].mean() == pytest.approx(omega, rel=1e-3)
