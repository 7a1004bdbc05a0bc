"""Six-step PWM drive bench: inverter + motor + conditioning + encoder.

The bench starts from standstill with an open-loop ramp (commanded
commutation at a linearly increasing rate), then hands over to closed-loop
operation where commutation follows a VSN source (the encoder, or an
external estimator) and a PI loop on PWM duty tracks the speed profile.
Everything runs inside one jitted kernel, one acquisition sample per
iteration, so the fast path and the per-sample sensorless path share
arithmetic bit for bit.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Iterator, Sequence

import numpy as np
from numba import njit

from .conditioning import ConditioningConfig, filter_sample, packed_coefficients, quantize_value
from .motor import ENCODER_COUNTS, MotorParams, SimulationFault, _carry_current, _substep
from .vsn import TRACKER_SIZE, new_tracker_state, tracker_update

MODE_RAMP, MODE_CLOSED, MODE_FIXED = 0, 1, 2
SOURCE_ENCODER, SOURCE_EXTERNAL = 0, 1
STATUS_OK, STATUS_FAULT, STATUS_LOSS_OF_LOCK = 0, 1, 2

# float state slots
F_THETA, F_OMEGA, F_I, F_DUTY, F_INTEG, F_CMD, F_VA, F_VB, F_VC, F_CA, F_CB, F_CC = range(12)
# int state slots
I_SAMPLE, I_SUBSTEP, I_MODE, I_STEP, I_SOURCE, I_ENC_U, I_ENC_LAST, I_TICK, I_STATUS, I_CA, I_CB, I_CC = range(12)

# output columns
OUT_T, OUT_VA, OUT_VB, OUT_VC, OUT_MECH, OUT_ENC, OUT_RPM, OUT_SA, OUT_SB, OUT_SC, OUT_DUTY, OUT_ELEC = range(12)
N_OUT_F = 12
OUT_SEQ, OUT_CODE_A, OUT_CODE_B, OUT_CODE_C = range(4)
N_OUT_I = 4

RPM = 60.0 / (2.0 * math.pi)


class ConfigError(ValueError):
    """Invalid simulation or profile configuration."""


@dataclass(frozen=True)
class SimConfig:
    dt: float = 1e-6
    substeps: int = 10
    pwm_frequency: float = 20_000.0
    pwm_duty: float = 0.5
    noise_sigma: float = 0.01  # fraction of rated voltage
    ramp_time: float = 0.4
    handoff_rpm: float = 100.0
    speed_kp: float = 2e-4  # duty per rpm of error
    speed_ki: float = 4e-3  # duty per rpm·s
    control_period: float = 1e-3
    speed_window: int = 10  # control ticks in the encoder speed estimate
    feedforward: bool = True
    debounce: int = 2
    max_unknown: int = 200  # consecutive unknown observations
    max_speed_rpm: float = 1500.0
    chunk_samples: int = 100_000

    def __post_init__(self):
        if not self.dt > 0 or self.substeps < 1:
            raise ConfigError("dt and substeps must be positive")
        per = 1.0 / (self.pwm_frequency * self.dt)
        if abs(per - round(per)) > 1e-6:
            raise ConfigError("PWM period must be a whole number of integration steps")
        if not 0.0 <= self.pwm_duty <= 1.0:
            raise ConfigError("pwm_duty must lie in [0, 1]")
        ticks = self.control_period / self.acquisition_period
        if abs(ticks - round(ticks)) > 1e-6 or ticks < 1:
            raise ConfigError("control_period must be a whole number of samples")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")

    @property
    def acquisition_period(self) -> float:
        return self.dt * self.substeps

    @property
    def pwm_period_steps(self) -> int:
        return int(round(1.0 / (self.pwm_frequency * self.dt)))

    @property
    def control_ticks(self) -> int:
        return int(round(self.control_period / self.acquisition_period))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SimConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown simulation parameters: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class SpeedProfile:
    """Commanded speed against time since the closed-loop handoff."""

    kind: str
    setpoints: tuple[tuple[float, float], ...]
    duration: float

    def __post_init__(self):
        if self.kind not in ("ramp-up", "triangle", "up-down", "constant"):
            raise ConfigError(f"unknown profile kind {self.kind!r}")
        if not self.setpoints:
            raise ConfigError("profile has no setpoints")
        times = [t for t, _ in self.setpoints]
        if any(b < a for a, b in zip(times, times[1:])):
            raise ConfigError("profile setpoints are not time-ordered")
        if not self.duration > 0:
            raise ConfigError("profile duration must be positive")

    def speed_at(self, t):
        ts = np.array([p[0] for p in self.setpoints])
        vs = np.array([p[1] for p in self.setpoints])
        return np.interp(t, ts, vs)

    def arrays(self) -> tuple[np.ndarray, np.ndarray]:
        ts = np.array([p[0] for p in self.setpoints], dtype=np.float64)
        vs = np.array([p[1] for p in self.setpoints], dtype=np.float64)
        return ts, vs

    def check_limits(self, max_rpm: float):
        speeds = [v for _, v in self.setpoints]
        if min(speeds) < 0 or max(speeds) > max_rpm:
            raise ConfigError(f"profile speeds must lie in [0, {max_rpm}] rpm")

    @classmethod
    def constant(cls, rpm: float, duration: float, start_rpm: float = 100.0, accel: float = 2000.0):
        t_acc = abs(rpm - start_rpm) / accel
        return cls("constant", ((0.0, start_rpm), (t_acc, rpm), (t_acc + duration, rpm)), t_acc + duration)

    @classmethod
    def ramp_up(cls, target: float, duration: float, start_rpm: float = 100.0):
        return cls("ramp-up", ((0.0, start_rpm), (duration, target)), duration)

    @classmethod
    def triangle(cls, low: float = 85.0, high: float = 950.0, duration: float = 6.0,
                 periods: Sequence[float] = (3.0, 2.0, 1.0), start_rpm: float = 100.0):
        """Repeated low→high→low sweeps; successive sweeps get faster."""
        scale = duration / sum(periods)
        pts = [(0.0, start_rpm)]
        t = 0.0
        for p in periods:
            p *= scale
            pts.append((t + 0.05 * p, low))
            pts.append((t + 0.5 * p, high))
            pts.append((t + p, low))
            t += p
        return cls("triangle", tuple(pts), duration)

    @classmethod
    def up_down(cls, levels: Sequence[float] = (85, 250, 125, 600, 400, 950, 750, 1500),
                duration: float = 8.0, accel: float = 2000.0, start_rpm: float = 100.0):
        hold = duration / len(levels)
        pts = [(0.0, start_rpm)]
        prev = start_rpm
        t = 0.0
        for lv in levels:
            ramp = min(abs(lv - prev) / accel, 0.5 * hold)
            pts.append((t + ramp, float(lv)))
            pts.append((t + hold, float(lv)))
            prev = lv
            t += hold
        return cls("up-down", tuple(pts), duration)

    @classmethod
    def parse(cls, text: str, duration: float | None = None) -> "SpeedProfile":
        """Build a profile from a CLI token: ``triangle``, ``up-down``,
        ``ramp-up[:rpm]`` or ``constant:rpm``."""
        name, _, arg = text.partition(":")
        if name == "triangle":
            return cls.triangle(duration=duration or 6.0)
        if name == "up-down":
            return cls.up_down(duration=duration or 8.0)
        if name == "ramp-up":
            return cls.ramp_up(float(arg or 1500.0), duration or 2.0)
        if name == "constant":
            if not arg:
                raise ConfigError("constant profile needs a speed, e.g. constant:850")
            return cls.constant(float(arg), duration or 2.0)
        raise ConfigError(f"unknown profile {text!r}")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "setpoints": [list(p) for p in self.setpoints], "duration": self.duration}


@dataclass
class DriveTrace:
    """Samples at the acquisition rate.

    ``volts`` are the raw terminal voltages (w.r.t. the negative rail);
    ``conditioned`` the dequantised ADC readings of V_XS^AF and ``codes``
    the matching ADC codes.
    """

    time: np.ndarray
    volts: np.ndarray
    mech_deg: np.ndarray
    enc_deg: np.ndarray
    speed_rpm: np.ndarray
    seq: np.ndarray
    conditioned: np.ndarray
    codes: np.ndarray
    duty: np.ndarray
    elec_deg: np.ndarray
    pole_pairs: int = 8
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.time)

    @classmethod
    def from_buffers(cls, out_f, out_i, pole_pairs):
        return cls(
            time=out_f[:, OUT_T].copy(),
            volts=out_f[:, OUT_VA:OUT_VC + 1].copy(),
            mech_deg=out_f[:, OUT_MECH].copy(),
            enc_deg=out_f[:, OUT_ENC].copy(),
            speed_rpm=out_f[:, OUT_RPM].copy(),
            seq=out_i[:, OUT_SEQ].copy(),
            conditioned=out_f[:, OUT_SA:OUT_SC + 1].copy(),
            codes=out_i[:, OUT_CODE_A:OUT_CODE_C + 1].copy(),
            duty=out_f[:, OUT_DUTY].copy(),
            elec_deg=out_f[:, OUT_ELEC].copy(),
            pole_pairs=pole_pairs,
        )

    @classmethod
    def concat(cls, parts: Sequence["DriveTrace"]) -> "DriveTrace":
        parts = list(parts)
        if not parts:
            raise ValueError("nothing to concatenate")
        names = ["time", "volts", "mech_deg", "enc_deg", "speed_rpm", "seq", "conditioned", "codes", "duty", "elec_deg"]
        cols = {n: np.concatenate([getattr(p, n) for p in parts]) for n in names}
        return cls(**cols, pole_pairs=parts[0].pole_pairs, meta=dict(parts[0].meta))

    def slice(self, start: int, stop: int | None = None) -> "DriveTrace":
        s = np.s_[start:stop]
        return DriveTrace(
            self.time[s], self.volts[s], self.mech_deg[s], self.enc_deg[s], self.speed_rpm[s], self.seq[s],
            self.conditioned[s], self.codes[s], self.duty[s], self.elec_deg[s], self.pole_pairs, dict(self.meta),
        )


@njit(cache=True)
def _wrap_count(c, last):
    return (c - last + ENCODER_COUNTS // 2) % ENCODER_COUNTS - ENCODER_COUNTS // 2


@njit(cache=True)
def _drive(n, p, ctrl, coeffs, fs, ist, filt, tstate, hist, prof_t, prof_v, noise, ext_vsn, ext_speed,
           out_f, out_i):
    """Advance ``n`` acquisition samples. Per sample: measure, decide the
    commutation step and duty, record, then integrate ``substeps`` steps."""
    dt = ctrl[0]
    substeps = int(ctrl[1])
    acq = ctrl[2]
    pwm_steps = ctrl[3]
    gain = ctrl[4]
    clamp = ctrl[5]
    lsb = ctrl[6]
    bits = int(ctrl[7])
    ramp_duty = ctrl[8]
    ramp_time = ctrl[9]
    handoff_rpm = ctrl[10]
    kp_gain = ctrl[11]
    ki_gain = ctrl[12]
    ticks = int(ctrl[13])
    use_ff = ctrl[14] > 0.5
    window = int(ctrl[15])
    max_unknown = int(ctrl[16])
    fixed_duty = ctrl[17]
    t_offset = ctrl[18]
    kpp = p[1]
    slot_w = 30.0 / kpp
    nslots = int(12 * kpp)
    volts = np.zeros(3)

    for j in range(n):
        s = ist[I_SAMPLE]
        t = s * acq
        mech = (fs[F_THETA] * 180.0 / math.pi) % 360.0
        count = int(math.floor(mech * ENCODER_COUNTS / 360.0)) % ENCODER_COUNTS
        ist[I_ENC_U] += _wrap_count(count, ist[I_ENC_LAST])
        ist[I_ENC_LAST] = count
        enc = count * (360.0 / ENCODER_COUNTS)
        g_enc = int(math.floor(enc / slot_w))
        if g_enc >= nslots:
            g_enc = nslots - 1

        mode = ist[I_MODE]
        if mode == MODE_RAMP:
            if t >= ramp_time:
                mode = MODE_CLOSED
                ist[I_MODE] = MODE_CLOSED
                tstate[0] = g_enc
                tstate[1] = -1
                tstate[2] = 0
                tstate[4] = 0
                fs[F_INTEG] = 0.0
                for h in range(hist.shape[0]):
                    hist[h] = ist[I_ENC_U]
                ist[I_TICK] = 0
            else:
                # commanded electrical angle of a linear speed ramp
                w_e = handoff_rpm * 6.0 * kpp * (t / ramp_time)
                fs[F_CMD] = (fs[F_CMD] + w_e * acq) % 360.0
                step = int(fs[F_CMD] // 60.0) + 1
                fs[F_DUTY] = ramp_duty
        if mode != MODE_RAMP:
            if ist[I_SOURCE] == SOURCE_ENCODER:
                raw = g_enc % 12
            else:
                raw = ext_vsn[j]
            tracker_update(tstate, raw, s)
            if tstate[4] > max_unknown and ist[I_STATUS] == STATUS_OK:
                ist[I_STATUS] = STATUS_LOSS_OF_LOCK
            step = (tstate[0] % 12) // 2 + 1
            if mode == MODE_FIXED:
                fs[F_DUTY] = fixed_duty
            elif ist[I_TICK] % ticks == 0:
                n_tick = ist[I_TICK] // ticks
                k_hist = n_tick % window
                span = min(n_tick, window)
                if span > 0:
                    old = hist[(n_tick - span) % window]
                hist[k_hist] = ist[I_ENC_U]
                ref = np.interp(t - ramp_time + t_offset, prof_t, prof_v)
                if not math.isnan(ext_speed[j]):
                    meas = ext_speed[j]
                elif span > 0:
                    meas = (ist[I_ENC_U] - old) * (360.0 / ENCODER_COUNTS) / (span * ticks * acq) / 6.0
                else:
                    meas = ref
                err = ref - meas
                ff = 0.0
                if use_ff:
                    w_ref = ref / (60.0 / (2.0 * math.pi))
                    ff = (2.0 * p[5] * w_ref + p[2] * p[8] / p[5]) / p[0]
                fs[F_INTEG] += ki_gain * err * ticks * acq
                lim_hi = 1.0 - ff
                lim_lo = -ff
                if fs[F_INTEG] > lim_hi:
                    fs[F_INTEG] = lim_hi
                elif fs[F_INTEG] < lim_lo:
                    fs[F_INTEG] = lim_lo
                d = ff + kp_gain * err + fs[F_INTEG]
                if d > 1.0:
                    d = 1.0
                elif d < 0.0:
                    d = 0.0
                fs[F_DUTY] = d
            ist[I_TICK] += 1

        out_f[j, 0] = t
        out_f[j, 1] = fs[F_VA]
        out_f[j, 2] = fs[F_VB]
        out_f[j, 3] = fs[F_VC]
        out_f[j, 4] = mech
        out_f[j, 5] = enc
        out_f[j, 6] = fs[F_OMEGA] * 60.0 / (2.0 * math.pi)
        out_f[j, 7] = fs[F_CA]
        out_f[j, 8] = fs[F_CB]
        out_f[j, 9] = fs[F_CC]
        out_f[j, 10] = fs[F_DUTY]
        out_f[j, 11] = (mech * kpp) % 360.0
        out_i[j, 0] = step
        out_i[j, 1] = ist[I_CA]
        out_i[j, 2] = ist[I_CB]
        out_i[j, 3] = ist[I_CC]

        i_loop = _carry_current(ist[I_STEP], step, fs[F_I])
        ist[I_STEP] = step
        theta = fs[F_THETA]
        omega = fs[F_OMEGA]
        duty = fs[F_DUTY]
        for m in range(substeps):
            pos = ist[I_SUBSTEP] % int(pwm_steps)
            frac = duty * pwm_steps - pos
            if frac > 1.0:
                frac = 1.0
            elif frac < 0.0:
                frac = 0.0
            theta, omega, i_loop = _substep(theta, omega, i_loop, step, frac, dt, p, volts)
            ist[I_SUBSTEP] += 1
            va = volts[0] + noise[j, m, 0]
            vb = volts[1] + noise[j, m, 1]
            vc = volts[2] + noise[j, m, 2]
            vs = (va + vb + vc) / 3.0
            ya = filter_sample(gain * (va - vs), 0, coeffs, filt)
            yb = filter_sample(gain * (vb - vs), 1, coeffs, filt)
            yc = filter_sample(gain * (vc - vs), 2, coeffs, filt)
        if not (math.isfinite(theta) and math.isfinite(omega) and math.isfinite(i_loop)):
            ist[I_STATUS] = STATUS_FAULT
            return j
        fs[F_THETA] = theta
        fs[F_OMEGA] = omega
        fs[F_I] = i_loop
        fs[F_VA] = va
        fs[F_VB] = vb
        fs[F_VC] = vc
        ya = min(max(ya, -clamp), clamp)
        yb = min(max(yb, -clamp), clamp)
        yc = min(max(yc, -clamp), clamp)
        ist[I_CA] = quantize_value(ya, lsb, bits)
        ist[I_CB] = quantize_value(yb, lsb, bits)
        ist[I_CC] = quantize_value(yc, lsb, bits)
        fs[F_CA] = ist[I_CA] * lsb
        fs[F_CB] = ist[I_CB] * lsb
        fs[F_CC] = ist[I_CC] * lsb
        ist[I_SAMPLE] += 1
    return n


class NoiseSource:
    """White measurement noise, one draw per phase and integration step.

    Draws are made in fixed-size blocks so the stream is identical however
    the caller slices it (a run advanced one sample at a time sees the same
    noise as one advanced in large chunks).
    """

    def __init__(self, seed: int, sigma: float, block: int, substeps: int):
        self.rng = np.random.default_rng(seed)
        self.sigma = sigma
        self.block_size = block
        self.substeps = substeps
        self._buf = np.empty((0, substeps, 3))
        self._pos = 0

    def take(self, n: int) -> np.ndarray:
        out = np.empty((n, self.substeps, 3))
        got = 0
        while got < n:
            if self._pos >= len(self._buf):
                self._buf = self.sigma * self.rng.standard_normal((self.block_size, self.substeps, 3))
                self._pos = 0
            k = min(n - got, len(self._buf) - self._pos)
            out[got:got + k] = self._buf[self._pos:self._pos + k]
            self._pos += k
            got += k
        return out


class Simulator:
    """Stateful bench for one run. Not shareable between threads; create one
    per run."""

    def __init__(self, params: MotorParams | None = None, sim: SimConfig | None = None,
                 cond: ConditioningConfig | None = None, seed: int = 0, initial_angle: float = 0.0):
        self.params = params or MotorParams()
        self.sim = sim or SimConfig()
        self.cond = cond or ConditioningConfig()
        if abs(self.cond.sim_rate * self.sim.dt - 1.0) > 1e-9:
            raise ConfigError("conditioning sim_rate must equal 1/dt")
        if abs(self.cond.adc_rate * self.sim.acquisition_period - 1.0) > 1e-9:
            raise ConfigError("adc_rate must equal the acquisition rate")
        self.seed = seed
        self._p = self.params.packed()
        self._coeffs = packed_coefficients(self.cond)
        self._fs = np.zeros(12)
        self._fs[F_THETA] = math.radians(initial_angle % 360.0)
        self._ist = np.zeros(12, dtype=np.int64)
        self._ist[I_STEP] = -1
        count = int(math.floor((initial_angle % 360.0) * ENCODER_COUNTS / 360.0)) % ENCODER_COUNTS
        self._ist[I_ENC_LAST] = count
        self._filt = np.zeros((3, 3))
        self._tstate = new_tracker_state(0, self.sim.debounce)
        self._hist = np.zeros(self.sim.speed_window, dtype=np.int64)
        self._noise = NoiseSource(seed, self.sim.noise_sigma * self.params.rated_voltage,
                                  self.sim.chunk_samples, self.sim.substeps)
        self._profile = SpeedProfile.constant(self.sim.handoff_rpm, 1.0)
        self._prof = self._profile.arrays()
        self._fixed_duty = -1.0
        self._t_offset = 0.0
        self._prev_cond = np.zeros(3)
        self.max_unknown = self.sim.max_unknown
        self._prime_voltages()

    def _prime_voltages(self):
        # terminal voltages at rest with every switch open
        vn = 0.5 * self.params.rated_voltage
        self._fs[F_VA] = self._fs[F_VB] = self._fs[F_VC] = vn

    # -- configuration ---------------------------------------------------
    def set_profile(self, profile: SpeedProfile, time_offset: float = 0.0):
        profile.check_limits(self.sim.max_speed_rpm)
        self._profile = profile
        self._prof = profile.arrays()
        self._t_offset = time_offset

    def hold_duty(self, duty: float):
        """Closed-loop commutation from the encoder at a fixed duty (no speed loop)."""
        if not 0.0 <= duty <= 1.0:
            raise ConfigError("duty must lie in [0, 1]")
        self._ist[I_MODE] = MODE_FIXED
        self._fixed_duty = duty
        self._init_tracker()

    def _init_tracker(self):
        mech = math.degrees(self._fs[F_THETA]) % 360.0
        count = int(math.floor(mech * ENCODER_COUNTS / 360.0)) % ENCODER_COUNTS
        g = min(int(math.floor(count * (360.0 / ENCODER_COUNTS) / (30.0 / self.params.pole_pairs))),
                12 * self.params.pole_pairs - 1)
        self._tstate[:] = new_tracker_state(g, self.sim.debounce)

    @property
    def status(self) -> int:
        return int(self._ist[I_STATUS])

    @property
    def sample_index(self) -> int:
        return int(self._ist[I_SAMPLE])

    @property
    def time(self) -> float:
        return self.sample_index * self.sim.acquisition_period

    @property
    def closed_loop(self) -> bool:
        return self._ist[I_MODE] != MODE_RAMP

    @property
    def tracker_slot(self) -> int:
        return int(self._tstate[0])

    @property
    def tracker_start(self) -> int:
        """First sample of the most recently accepted VSN run."""
        return int(self._tstate[3])

    @property
    def unknown_streak(self) -> int:
        return int(self._tstate[4])

    def current_conditioned(self) -> np.ndarray:
        return self._fs[[F_CA, F_CB, F_CC]].copy()

    def previous_conditioned(self) -> np.ndarray:
        """Conditioned reading recorded at the sample before the current one."""
        return self._prev_cond.copy()

    def reference_rpm(self) -> float:
        """Speed command at the current sample."""
        t = self.time - self.sim.ramp_time + self._t_offset
        return float(np.interp(t, self._prof[0], self._prof[1]))

    def current_encoder_deg(self) -> float:
        """Encoder reading the next sample will record."""
        mech = (self._fs[F_THETA] * 180.0 / math.pi) % 360.0
        count = int(math.floor(mech * ENCODER_COUNTS / 360.0)) % ENCODER_COUNTS
        return count * (360.0 / ENCODER_COUNTS)

    def current_mech_deg(self) -> float:
        return math.degrees(self._fs[F_THETA]) % 360.0

    def current_speed_rpm(self) -> float:
        return float(self._fs[F_OMEGA] * RPM)

    def _ctrl(self) -> np.ndarray:
        s, c = self.sim, self.cond
        return np.array([
            s.dt, s.substeps, s.acquisition_period, s.pwm_period_steps,
            c.front_end_gain(self.params.rated_voltage), c.clamp_range, c.lsb, c.adc_bits,
            s.pwm_duty, s.ramp_time, s.handoff_rpm, s.speed_kp, s.speed_ki, s.control_ticks,
            1.0 if s.feedforward else 0.0, s.speed_window, self.max_unknown, self._fixed_duty, self._t_offset,
        ], dtype=np.float64)

    # -- stepping --------------------------------------------------------
    def advance(self, n: int, ext_vsn: np.ndarray | None = None, ext_speed: np.ndarray | None = None) -> DriveTrace:
        """Run ``n`` acquisition samples and return them.

        ``ext_vsn`` (0..11, -1 unknown, -2 no observation) switches commutation to an external
        source for these samples; ``ext_speed`` (rpm, NaN for none) replaces
        the encoder speed measurement in the PI loop.
        """
        if ext_vsn is None:
            self._ist[I_SOURCE] = SOURCE_ENCODER
            ext_vsn = np.full(n, -1, dtype=np.int64)
        else:
            self._ist[I_SOURCE] = SOURCE_EXTERNAL
            ext_vsn = np.asarray(ext_vsn, dtype=np.int64)
        if ext_speed is None:
            ext_speed = np.full(n, np.nan)
        noise = self._noise.take(n)
        out_f = np.empty((n, N_OUT_F))
        out_i = np.empty((n, N_OUT_I), dtype=np.int64)
        done = _drive(n, self._p, self._ctrl(), self._coeffs, self._fs, self._ist, self._filt, self._tstate,
                      self._hist, self._prof[0], self._prof[1], noise, ext_vsn, np.asarray(ext_speed, dtype=np.float64),
                      out_f, out_i)
        if done:
            self._prev_cond = out_f[done - 1, OUT_SA:OUT_SC + 1].copy()
        if self._ist[I_STATUS] == STATUS_FAULT:
            raise SimulationFault(
                f"non-finite state at t={self.time:.6f}s",
                time=self.time,
                state=dict(theta=self._fs[F_THETA], omega=self._fs[F_OMEGA], current=self._fs[F_I]),
            )
        return DriveTrace.from_buffers(out_f[:done], out_i[:done], self.params.pole_pairs)

    def stream(self, total_samples: int) -> Iterator[DriveTrace]:
        left = total_samples
        while left > 0:
            k = min(left, self.sim.chunk_samples)
            yield self.advance(k)
            left -= k


def run_profile_chunks(profile: SpeedProfile, params: MotorParams | None = None, seed: int = 0,
                       sim: SimConfig | None = None, cond: ConditioningConfig | None = None) -> Iterator[DriveTrace]:
    """Stream a profile run (open-loop ramp, then closed loop) in chunks."""
    bench = Simulator(params, sim, cond, seed)
    bench.set_profile(profile)
    total = int(round((bench.sim.ramp_time + profile.duration) / bench.sim.acquisition_period))
    yield from bench.stream(total)


def run_profile(profile: SpeedProfile, params: MotorParams | None = None, seed: int = 0,
                sim: SimConfig | None = None, cond: ConditioningConfig | None = None) -> DriveTrace:
    trace = DriveTrace.concat(run_profile_chunks(profile, params, seed, sim, cond))
    trace.meta.update(profile=profile.to_dict(), seed=seed)
    return trace
