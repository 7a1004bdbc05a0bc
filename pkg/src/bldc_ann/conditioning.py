"""Phase-voltage conditioning: virtual neutral, differential gain, two
low-pass stages, clamp, and the ADC.

Filters are designed as analog prototypes (first-order RC, second-order
Butterworth for the Pi section) and discretised with the bilinear transform
at the simulator rate, so they can be run sample-by-sample inside the drive
kernel as well as on standalone streams.
"""
from __future__ import annotations

from dataclasses import dataclass, asdict
from typing import Iterable, Iterator

import numpy as np
from numba import njit
from scipy import signal


@dataclass(frozen=True)
class ConditioningConfig:
    diff_gain: float = 5.0
    lp1_cutoff: float = 20_000.0
    lp2_cutoff: float = 100_000.0
    clamp_range: float = 5.0
    adc_bits: int = 16
    adc_rate: float = 100_000.0
    sim_rate: float = 1_000_000.0
    # rated-voltage swing lands at this fraction of the clamp range
    full_scale_fraction: float = 0.8
    attenuation: float | None = None

    def __post_init__(self):
        if not (self.lp1_cutoff > 0 and self.lp2_cutoff > 0):
            raise ValueError("filter cutoffs must be positive")
        if not 8 <= self.adc_bits <= 24:
            raise ValueError("adc_bits must lie in [8, 24]")
        if not self.clamp_range > 0:
            raise ValueError("clamp_range must be positive")
        if max(self.lp1_cutoff, self.lp2_cutoff) >= self.sim_rate / 2:
            raise ValueError("cutoffs must sit below the simulator Nyquist rate")
        ratio = self.sim_rate / self.adc_rate
        if abs(ratio - round(ratio)) > 1e-9 or ratio < 1:
            raise ValueError("sim_rate must be an integer multiple of adc_rate")

    @property
    def decimation(self) -> int:
        return int(round(self.sim_rate / self.adc_rate))

    @property
    def lsb(self) -> float:
        return 2.0 * self.clamp_range / 2**self.adc_bits

    def front_end_gain(self, rated_voltage: float) -> float:
        """Overall volts-out per volt of V_XS before the filters."""
        if self.attenuation is not None:
            return self.attenuation * self.diff_gain
        return self.full_scale_fraction * self.clamp_range / rated_voltage

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ConditioningConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown conditioning parameters: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class ConditionedSample:
    time: float
    v_as: float
    v_bs: float
    v_cs: float
    adc_codes: tuple[int, int, int]


@dataclass(frozen=True)
class ConditionedBlock:
    """A run of ADC samples: ``volts`` holds the dequantised V_XS^AF."""

    time: np.ndarray
    volts: np.ndarray
    codes: np.ndarray

    def __len__(self):
        return len(self.time)

    def samples(self) -> Iterator[ConditionedSample]:
        for t, v, c in zip(self.time, self.volts, self.codes):
            yield ConditionedSample(float(t), float(v[0]), float(v[1]), float(v[2]), tuple(int(x) for x in c))


def virtual_neutral(v_a: float, v_b: float, v_c: float) -> tuple[float, tuple[float, float, float]]:
    """Star point of three equal resistors and the phase voltages against it."""
    v_s = (v_a + v_b + v_c) / 3.0
    xs = (v_a - v_s, v_b - v_s, v_c - v_s)
    # force an exact zero sum against rounding in the subtraction
    return v_s, (xs[0], xs[1], -(xs[0] + xs[1]))


def design_filters(cfg: ConditioningConfig) -> dict:
    b1, a1 = signal.butter(1, cfg.lp1_cutoff, btype="low", fs=cfg.sim_rate)
    b2, a2 = signal.butter(2, cfg.lp2_cutoff, btype="low", fs=cfg.sim_rate)
    return {"lp1": {"b": b1.tolist(), "a": a1.tolist()}, "lp2": {"b": b2.tolist(), "a": a2.tolist()}}


def packed_coefficients(cfg: ConditioningConfig) -> np.ndarray:
    """[b0, b1, a1] of the RC stage followed by [b0, b1, b2, a1, a2] of the Pi stage."""
    f = design_filters(cfg)
    b1, a1 = f["lp1"]["b"], f["lp1"]["a"]
    b2, a2 = f["lp2"]["b"], f["lp2"]["a"]
    return np.array([b1[0], b1[1], a1[1], b2[0], b2[1], b2[2], a2[1], a2[2]], dtype=np.float64)


def analog_magnitude(freq_hz: float | np.ndarray, cfg: ConditioningConfig) -> np.ndarray:
    """|H(j2πf)| of the analog cascade the digital filters were designed from."""
    f = np.asarray(freq_hz, dtype=float)
    h1 = 1.0 / np.sqrt(1.0 + (f / cfg.lp1_cutoff) ** 2)
    h2 = 1.0 / np.sqrt(1.0 + (f / cfg.lp2_cutoff) ** 4)
    return h1 * h2


def digital_magnitude(freq_hz: float | np.ndarray, cfg: ConditioningConfig) -> np.ndarray:
    f = design_filters(cfg)
    w = np.atleast_1d(np.asarray(freq_hz, dtype=float))
    _, h1 = signal.freqz(f["lp1"]["b"], f["lp1"]["a"], worN=w, fs=cfg.sim_rate)
    _, h2 = signal.freqz(f["lp2"]["b"], f["lp2"]["a"], worN=w, fs=cfg.sim_rate)
    return np.abs(h1 * h2)


def group_delay(cfg: ConditioningConfig) -> float:
    """Low-frequency group delay of the cascade in seconds."""
    return 1.0 / (2 * np.pi * cfg.lp1_cutoff) + np.sqrt(2.0) / (2 * np.pi * cfg.lp2_cutoff)


@njit(cache=True)
def filter_sample(x, ch, coeffs, state):
    """One sample of the RC + Pi cascade on channel ``ch`` (transposed
    direct form II); ``state`` has shape (3, 3)."""
    y1 = coeffs[0] * x + state[ch, 0]
    state[ch, 0] = coeffs[1] * x - coeffs[2] * y1
    y2 = coeffs[3] * y1 + state[ch, 1]
    state[ch, 1] = coeffs[4] * y1 - coeffs[6] * y2 + state[ch, 2]
    state[ch, 2] = coeffs[5] * y1 - coeffs[7] * y2
    return y2


@njit(cache=True)
def quantize_value(v, lsb, bits):
    hi = 2 ** (bits - 1) - 1
    lo = -(2 ** (bits - 1))
    code = np.floor(v / lsb + 0.5)
    if code > hi:
        code = hi
    elif code < lo:
        code = lo
    return int(code)


@njit(cache=True)
def _filter_block(x, coeffs, state):
    n = x.shape[0]
    y = np.empty_like(x)
    for k in range(n):
        for ch in range(3):
            y[k, ch] = filter_sample(x[k, ch], ch, coeffs, state)
    return y


def quantize(v: float, cfg: ConditioningConfig) -> int:
    """Mid-tread ADC code of a clamped voltage."""
    return quantize_value(float(v), cfg.lsb, cfg.adc_bits)


def dequantize(code: int, cfg: ConditioningConfig) -> float:
    return code * cfg.lsb


class SignalChain:
    """Streaming conditioner for one three-phase stream at the simulator rate.

    Filter state and decimation phase persist between :meth:`process` calls,
    so a long stream can be fed in arbitrary chunks.
    """

    def __init__(self, cfg: ConditioningConfig, rated_voltage: float):
        self.cfg = cfg
        self.gain = cfg.front_end_gain(rated_voltage)
        self.coeffs = packed_coefficients(cfg)
        self.state = np.zeros((3, 3))
        self._phase = 0
        self._t_last = None
        self._dt = 1.0 / cfg.sim_rate

    def filtered(self, raw: np.ndarray) -> np.ndarray:
        """Virtual neutral, gain and both filters, without clamp or ADC."""
        raw = np.asarray(raw, dtype=np.float64)
        xs = raw - raw.mean(axis=1, keepdims=True)
        return _filter_block(np.ascontiguousarray(xs * self.gain), self.coeffs, self.state)

    def process(self, times: np.ndarray, raw: np.ndarray) -> ConditionedBlock:
        times = np.asarray(times, dtype=np.float64)
        raw = np.asarray(raw, dtype=np.float64).reshape(-1, 3)
        if len(times) != len(raw):
            raise ValueError("times and raw samples differ in length")
        if len(times) == 0:
            return ConditionedBlock(np.empty(0), np.empty((0, 3)), np.empty((0, 3), dtype=np.int64))
        self._check_uniform(times)
        y = np.clip(self.filtered(raw), -self.cfg.clamp_range, self.cfg.clamp_range)
        dec = self.cfg.decimation
        first = (dec - 1 - self._phase) % dec
        idx = np.arange(first, len(times), dec)
        self._phase = (self._phase + len(times)) % dec
        codes = np.floor(y[idx] / self.cfg.lsb + 0.5)
        top = 2 ** (self.cfg.adc_bits - 1)
        codes = np.clip(codes, -top, top - 1).astype(np.int64)
        return ConditionedBlock(times[idx], codes * self.cfg.lsb, codes)

    def _check_uniform(self, times):
        tol = 1e-6 * self._dt
        steps = np.diff(times)
        if self._t_last is not None:
            steps = np.concatenate(([times[0] - self._t_last], steps))
        if steps.size and np.max(np.abs(steps - self._dt)) > tol:
            raise ValueError("raw stream is not uniformly sampled at the simulator rate")
        self._t_last = times[-1]


def condition(stream: Iterable[tuple[np.ndarray, np.ndarray]], cfg: ConditioningConfig,
              rated_voltage: float) -> Iterator[ConditionedBlock]:
    """Condition a stream of (times, raw (n, 3) volts) chunks."""
    chain = SignalChain(cfg, rated_voltage)
    for times, raw in stream:
        yield chain.process(times, raw)
