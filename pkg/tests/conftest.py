import numpy as np
import pytest

from bldc_ann.estimation import (EstimatorConfig, position_dataset, position_train_config, speed_dataset,
                                 speed_train_config, train_position_net, train_speed_net)
from bldc_ann.simulator import SpeedProfile, run_profile

ACQ = 1e-5
KP = 8

_acceptance_lines: dict[int, str] = {}


def record_acceptance(number: int, passed: bool, detail: str):
    line = f"acceptance {number}: {'PASS' if passed else 'FAIL'}  {detail}"
    _acceptance_lines[number] = line
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if not _acceptance_lines:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_acceptance_lines):
        terminalreporter.write_line(_acceptance_lines[n])


@pytest.fixture(scope="session")
def training_traces():
    """Triangle and up-down runs with the start-up ramp and 0.1 s of settling removed."""
    skip = 50_000
    return [
        run_profile(SpeedProfile.triangle(), seed=3).slice(skip),
        run_profile(SpeedProfile.up_down(), seed=4).slice(skip),
    ]


@pytest.fixture(scope="session")
def trained_models(training_traces):
    cfg = EstimatorConfig()
    ds, _ = position_dataset(training_traces, cfg, KP, ACQ, 60_000, seed=0)
    pos, _, _ = train_position_net(ds, position_train_config(seed=1))
    sds = speed_dataset(training_traces, pos, cfg, KP, ACQ)
    spd, _, _ = train_speed_net(sds, speed_train_config(seed=1))
    return pos, spd


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
