"""BLDC machine model: six-step commutation table, trapezoidal back-EMF,
lumped electrical/mechanical dynamics and the incremental encoder.

The hot loops live in small ``numba`` kernels that operate on a packed
parameter vector; the public functions below wrap them with the typed
dataclasses used everywhere else.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from numba import njit

PHASES = ("A", "B", "C")

# sequence number -> (high phase, low phase, floating phase), clockwise rotation
_STEP_PHASES = {
    1: (0, 1, 2),
    2: (0, 2, 1),
    3: (1, 2, 0),
    4: (1, 0, 2),
    5: (2, 0, 1),
    6: (2, 1, 0),
}
_HIGH_SWITCH = ("Q1", "Q3", "Q5")
_LOW_SWITCH = ("Q2", "Q4", "Q6")

# packed layout shared with the kernels
P_VDC, P_KP, P_R, P_L, P_M, P_KE, P_J, P_B, P_TLOAD = range(9)

ENCODER_COUNTS = 1024


class SimulationFault(RuntimeError):
    """Raised when the integrated state stops being finite."""

    def __init__(self, message, time=None, state=None):
        super().__init__(message)
        self.time = time
        self.state = state


@dataclass(frozen=True)
class MotorParams:
    rated_voltage: float = 12.0
    pole_pairs: int = 8
    phase_resistance: float = 1.4
    phase_inductance: float = 0.56e-3
    mutual_inductance: float = 0.0
    # per-phase flat-top BEMF per mechanical rad/s; two phases conduct in
    # series so the line constant (= torque constant) is twice this value
    bemf_constant: float = 0.5 * 53.2e-3 / 1.96
    rotor_inertia: float = 92.5e-7
    viscous_friction: float = 1.0e-5
    rated_torque: float = 53.2e-3
    load_torque: float = 35e-3

    def __post_init__(self):
        positive = {
            "rated_voltage": self.rated_voltage,
            "pole_pairs": self.pole_pairs,
            "phase_resistance": self.phase_resistance,
            "phase_inductance": self.phase_inductance,
            "bemf_constant": self.bemf_constant,
            "rotor_inertia": self.rotor_inertia,
            "viscous_friction": self.viscous_friction,
            "rated_torque": self.rated_torque,
        }
        for name, value in positive.items():
            if not (value > 0 and math.isfinite(value)):
                raise ValueError(f"{name} must be positive, got {value!r}")
        if self.mutual_inductance < 0 or self.load_torque < 0:
            raise ValueError("mutual_inductance and load_torque must be >= 0")
        if not self.phase_inductance > self.mutual_inductance:
            raise ValueError("phase_inductance must exceed mutual_inductance")
        if int(self.pole_pairs) != self.pole_pairs:
            raise ValueError("pole_pairs must be an integer")

    @property
    def line_bemf_constant(self) -> float:
        return 2.0 * self.bemf_constant

    def no_load_speed(self, voltage: float | None = None) -> float:
        """Steady mechanical speed (rad/s) of the implemented model with two
        phases permanently on at ``voltage`` and zero load torque."""
        v = self.rated_voltage if voltage is None else voltage
        ke = self.bemf_constant
        return v / (2.0 * ke + self.phase_resistance * self.viscous_friction / ke)

    def packed(self) -> np.ndarray:
        return np.array(
            [
                self.rated_voltage,
                float(self.pole_pairs),
                self.phase_resistance,
                self.phase_inductance,
                self.mutual_inductance,
                self.bemf_constant,
                self.rotor_inertia,
                self.viscous_friction,
                self.load_torque,
            ],
            dtype=np.float64,
        )

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d: dict) -> "MotorParams":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown motor parameters: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class CommutationStep:
    sequence_number: int
    high: str
    low: str
    active_phases: tuple[str, str]
    floating_phase: str


@dataclass(frozen=True)
class GateCommand:
    """Inverter command held for one integration step.

    ``step`` selects the transistor pair of that commutation step (None leaves every
    switch open); ``on_fraction`` is the share of the step during which the
    high-side switch conducts under PWM.
    """

    step: int | None
    on_fraction: float = 1.0


@dataclass(frozen=True)
class DriveState:
    mech_angle: float  # degrees [0, 360)
    elec_angle: float  # degrees [0, 360)
    speed: float  # rpm
    phase_currents: tuple[float, float, float] = (0.0, 0.0, 0.0)
    time: float = 0.0
    step: int | None = field(default=None, compare=False)

    @classmethod
    def at_rest(cls, mech_angle: float = 0.0, pole_pairs: int = 8) -> "DriveState":
        mech = mech_angle % 360.0
        return cls(mech, (mech * pole_pairs) % 360.0, 0.0)


def commutation_step(elec_angle: float) -> CommutationStep:
    """Six-step table lookup on half-open 60 degree ranges."""
    if not (0.0 <= elec_angle < 360.0) or not math.isfinite(elec_angle):
        raise ValueError(f"electrical angle {elec_angle!r} outside [0, 360)")
    n = int(elec_angle // 60.0) + 1
    hi, lo, fl = _STEP_PHASES[n]
    return CommutationStep(
        sequence_number=n,
        high=_HIGH_SWITCH[hi],
        low=_LOW_SWITCH[lo],
        active_phases=(PHASES[min(hi, lo)], PHASES[max(hi, lo)]),
        floating_phase=PHASES[fl],
    )


@njit(cache=True)
def trapezoid(x):
    """Unit trapezoid of electrical angle ``x`` (degrees): +1 on [0, 120),
    falling ramp on [120, 180), -1 on [180, 300), rising ramp on [300, 360)."""
    x = x % 360.0
    if x < 120.0:
        return 1.0
    if x < 180.0:
        return 1.0 - (x - 120.0) / 30.0
    if x < 300.0:
        return -1.0
    return -1.0 + (x - 300.0) / 30.0


def bemf(elec_angle: float, speed: float, params: MotorParams) -> tuple[float, float, float]:
    """Phase back-EMF (volts) at ``elec_angle`` degrees and ``speed`` rpm."""
    if speed < 0:
        raise ValueError("speed must be >= 0")
    omega = speed * 2.0 * math.pi / 60.0
    amp = params.bemf_constant * omega
    return (
        amp * trapezoid(elec_angle),
        amp * trapezoid(elec_angle - 120.0),
        amp * trapezoid(elec_angle - 240.0),
    )


def encoder_read(mech_angle: float) -> float:
    """Floor-quantise a mechanical angle to the 1024-line encoder grid."""
    if not (0.0 <= mech_angle < 360.0):
        raise ValueError(f"mechanical angle {mech_angle!r} outside [0, 360)")
    return _encoder_deg(mech_angle)


@njit(cache=True)
def _encoder_deg(mech_deg):
    count = math.floor(mech_deg * ENCODER_COUNTS / 360.0)
    return (count % ENCODER_COUNTS) * (360.0 / ENCODER_COUNTS)


@njit(cache=True)
def _step_phases(step):
    if step == 1:
        return 0, 1, 2
    if step == 2:
        return 0, 2, 1
    if step == 3:
        return 1, 2, 0
    if step == 4:
        return 1, 0, 2
    if step == 5:
        return 2, 0, 1
    if step == 6:
        return 2, 1, 0
    return -1, -1, -1


@njit(cache=True)
def _carry_current(prev_step, new_step, i_loop):
    """Loop current after a commutation: it survives only when the outgoing
    and incoming pairs share a phase with the same polarity."""
    if prev_step == new_step:
        return i_loop
    ph, pl, _ = _step_phases(prev_step)
    nh, nl, _ = _step_phases(new_step)
    if ph < 0 or nh < 0:
        return 0.0
    if ph == nh or pl == nl:
        return i_loop
    return 0.0


@njit(cache=True)
def _substep(theta_m, omega, i_loop, step, on_frac, dt, p, volts):
    """Advance one integration step; writes terminal voltages (w.r.t. the
    negative DC rail) into ``volts`` and returns (theta_m, omega, i_loop)."""
    vdc = p[0]
    kp = p[1]
    r = p[2]
    l_eff = p[3] - p[4]
    ke = p[5]
    j = p[6]
    b = p[7]
    t_load = p[8]

    theta_e = (kp * theta_m * 180.0 / math.pi) % 360.0
    sa = trapezoid(theta_e)
    sb = trapezoid(theta_e - 120.0)
    sc = trapezoid(theta_e - 240.0)
    shapes = (sa, sb, sc)
    emf_a = ke * omega * sa
    emf_b = ke * omega * sb
    emf_c = ke * omega * sc

    hi, lo, fl = _step_phases(step)
    if hi < 0:
        i_new = 0.0
        t_e = 0.0
        vn = 0.5 * vdc
        volts[0] = vn + emf_a
        volts[1] = vn + emf_b
        volts[2] = vn + emf_c
    else:
        s_hi = shapes[hi]
        s_lo = shapes[lo]
        e_loop = ke * omega * (s_hi - s_lo)
        v_applied = on_frac * vdc
        di = (v_applied - 2.0 * r * i_loop - e_loop) / (2.0 * l_eff)
        i_new = i_loop + di * dt
        if i_new < 0.0:
            i_new = 0.0
        t_e = ke * (s_hi - s_lo) * i_new
        emfs = (emf_a, emf_b, emf_c)
        if i_new > 0.0:
            v_hi = v_applied
            v_lo = 0.0
            vn = 0.5 * (v_hi + v_lo - emfs[hi] - emfs[lo])
        else:
            # no conduction: only the low-side switch ties its phase to the rail
            v_lo = 0.0
            vn = v_lo - emfs[lo]
            v_hi = vn + emfs[hi]
        volts[hi] = v_hi
        volts[lo] = v_lo
        volts[fl] = vn + emfs[fl]

    # constant load opposes rotation; the rotor does not back-drive from rest
    if omega <= 0.0 and t_e <= t_load:
        omega_new = 0.0
    else:
        domega = (t_e - t_load - b * omega) / j
        omega_new = omega + domega * dt
        if omega_new < 0.0:
            omega_new = 0.0
    theta_new = (theta_m + omega * dt) % (2.0 * math.pi)
    return theta_new, omega_new, i_new


def _loop_current(state: DriveState, step: int | None) -> float:
    if step is None:
        return 0.0
    hi, lo, _ = _STEP_PHASES[step]
    cur = state.phase_currents
    if cur[hi] > 0.0:
        return cur[hi]
    if cur[lo] < 0.0:
        return -cur[lo]
    return 0.0


def step_dynamics(state: DriveState, gate: GateCommand, dt: float, params: MotorParams) -> DriveState:
    """Integrate the per-phase circuit and rotor equations over ``dt``."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    if gate.step is not None and gate.step not in _STEP_PHASES:
        raise ValueError(f"invalid commutation step {gate.step!r}")
    if not 0.0 <= gate.on_fraction <= 1.0:
        raise ValueError("on_fraction must lie in [0, 1]")
    theta = math.radians(state.mech_angle)
    omega = state.speed * 2.0 * math.pi / 60.0
    i_loop = _loop_current(state, gate.step)
    volts = np.zeros(3)
    step = -1 if gate.step is None else gate.step
    theta, omega, i_loop = _substep(theta, omega, i_loop, step, gate.on_fraction, dt, params.packed(), volts)
    if not (math.isfinite(theta) and math.isfinite(omega) and math.isfinite(i_loop)):
        raise SimulationFault("non-finite state", time=state.time + dt, state=(theta, omega, i_loop))
    currents = [0.0, 0.0, 0.0]
    if gate.step is not None:
        hi, lo, _ = _STEP_PHASES[gate.step]
        currents[hi] = i_loop
        currents[lo] = -i_loop
    mech = math.degrees(theta) % 360.0
    return replace(
        state,
        mech_angle=mech,
        elec_angle=(mech * params.pole_pairs) % 360.0,
        speed=omega * 60.0 / (2.0 * math.pi),
        phase_currents=tuple(currents),
        time=state.time + dt,
        step=gate.step,
    )
