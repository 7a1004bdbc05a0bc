import numpy as np
import pytest

from bldc_ann.datasets import (ConditionedDataset, DataError, read_conditioned, read_labeled, write_conditioned,
                               write_estimates, write_labeled, write_raw_trace)
from bldc_ann.estimation import estimate_trace
from bldc_ann.simulator import SpeedProfile, run_profile


@pytest.fixture(scope="module")
def trace():
    return run_profile(SpeedProfile.constant(400, 0.05), seed=1)


def test_conditioned_roundtrip(trace, tmp_path):
    ds = ConditionedDataset.from_trace(trace)
    ds.meta["pole_pairs"] = 8
    write_conditioned(ds, tmp_path / "d.csv", tmp_path / "d.json")
    back = read_conditioned(tmp_path / "d.csv")
    np.testing.assert_allclose(back.volts, ds.volts, rtol=1e-9, atol=1e-12)
    np.testing.assert_allclose(back.time, ds.time, atol=5e-7)
    np.testing.assert_allclose(back.enc_deg, ds.enc_deg, rtol=1e-9)
    assert back.meta["pole_pairs"] == 8 and back.meta["seed"] == 1
    np.testing.assert_array_equal(back.sample_index(1e-5), np.arange(len(ds)))


def test_writers_are_byte_stable(trace, tmp_path):
    ds = ConditionedDataset.from_trace(trace)
    write_conditioned(ds, tmp_path / "a.csv")
    write_conditioned(read_conditioned(tmp_path / "a.csv"), tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_labeled_roundtrip(trace, tmp_path):
    lt = ConditionedDataset.from_trace(trace).labeled(8)
    write_labeled(lt, tmp_path / "l.csv")
    back = read_labeled(tmp_path / "l.csv")
    np.testing.assert_array_equal(back.global_idx, lt.global_idx)
    np.testing.assert_allclose(back.sin_label, lt.sin_label, atol=1e-12)


def test_raw_trace_header(trace, tmp_path):
    write_raw_trace(trace.slice(0, 10), tmp_path / "r.csv")
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == "t_s,v_a,v_b,v_c,enc_deg,mech_deg,speed_rpm,seq" and len(lines) == 11


def test_missing_file_and_column(tmp_path):
    with pytest.raises(DataError):
        read_conditioned(tmp_path / "nope.csv")
    (tmp_path / "c.csv").write_text("t_s,v_as,v_bs,v_cs,speed_rpm\n0,1,2,3,4\n")
    with pytest.raises(DataError, match="enc_deg"):
        read_conditioned(tmp_path / "c.csv")
    assert read_conditioned(tmp_path / "c.csv", require_encoder=False).enc_deg is None


@pytest.mark.parametrize("body", ["0,1,2,3,4,5\n0,1,2,3,4,5\n", "0,1,2,3,4,5\n1e-5,nan,2,3,4,5\n",
                                  "0,1,2,3,4\n", "0,a,2,3,4,5\n"])
def test_malformed_rows(tmp_path, body):
    (tmp_path / "c.csv").write_text("t_s,v_as,v_bs,v_cs,enc_deg,speed_rpm\n" + body)
    with pytest.raises(DataError):
        read_conditioned(tmp_path / "c.csv")


def test_estimates_format(trace, tmp_path):
    est = estimate_trace(trace.slice(45_000), None, None)
    write_estimates(est, tmp_path / "e.csv")
    lines = (tmp_path / "e.csv").read_text().splitlines()
    assert lines[0] == "t_s,angle_true,angle_hat,vsn_true,vsn_hat,state_class,speed_true,speed_hat"
    assert len(lines) == len(est) + 1
    first = lines[1].split(",")
    assert first[5] == "successful" and first[7] == ""
