"""Input vectors of the two networks.

Position: the three conditioned phase voltages at two consecutive
acquisition instants, the time step between them, and their element-wise
products (a negative product flags a zero crossing), ten values in all.

Speed: nine intra-window ratios over the last ``n`` VSN events plus twelve
cycle-to-cycle ratios, one per VSN value, 21 values in all. Positions fed to
both must be unwrapped (monotonic across revolutions).
"""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass

import numpy as np

POSITION_WIDTH = 10
SPEED_WIDTH = 21
WINDOW = 10
POSITION_COLUMNS = ("v_a_now", "v_b_now", "v_c_now", "v_a_next", "v_b_next", "v_c_next", "dt",
                    "mul_a", "mul_b", "mul_c")
SPEED_COLUMNS = tuple(f"ratio1_{p}" for p in range(1, 10)) + tuple(f"ratio2_{q}" for q in range(1, 13))


class InsufficientData(ValueError):
    """Not enough history yet to build the requested features."""


@dataclass(frozen=True)
class PositionFeatures:
    v_now: tuple[float, float, float]
    v_next: tuple[float, float, float]
    dt: float
    volt_mul: tuple[float, float, float]

    def as_array(self) -> np.ndarray:
        return np.array([*self.v_now, *self.v_next, self.dt, *self.volt_mul])


@dataclass(frozen=True)
class SpeedFeatures:
    ratio1: np.ndarray  # 9 values, deg/s
    ratio2: np.ndarray  # 12 values, deg/s, index q-1
    stale: np.ndarray  # 12 flags, True where ratio2 was carried forward

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.ratio1, self.ratio2])


def position_features(v_now, v_next, dt: float) -> PositionFeatures:
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt!r}")
    a = tuple(float(v) for v in v_now)
    b = tuple(float(v) for v in v_next)
    if len(a) != 3 or len(b) != 3:
        raise ValueError("expected three phase voltages per instant")
    return PositionFeatures(a, b, float(dt), (a[0] * b[0], a[1] * b[1], a[2] * b[2]))


def position_matrix(volts: np.ndarray, times: np.ndarray, stride: int = 1) -> np.ndarray:
    """Feature rows for every instant ``k >= stride``: pairs (k - stride, k).

    Row ``i`` belongs to sample ``i + stride``.
    """
    volts = np.asarray(volts, dtype=np.float64)
    times = np.asarray(times, dtype=np.float64)
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if len(volts) <= stride:
        return np.empty((0, POSITION_WIDTH))
    now, nxt = volts[:-stride], volts[stride:]
    dt = times[stride:] - times[:-stride]
    if np.any(dt <= 0):
        raise ValueError("timestamps must be strictly increasing")
    return np.column_stack([now, nxt, dt, now * nxt])


def position_scaling(clamp_range: float, acquisition_period: float) -> dict:
    """Input scaling stored with the position network: voltages by
    1/clamp, the time step by 1/acquisition period, products by 1/clamp^2."""
    c = 1.0 / clamp_range
    scale = np.array([c] * 6 + [1.0 / acquisition_period] + [c * c] * 3)
    return {"input_offset": np.zeros(POSITION_WIDTH), "input_scale": scale}


def speed_scaling(ratio_full_scale: float = 9000.0, rpm_full_scale: float = 1500.0) -> dict:
    return {
        "input_offset": np.zeros(SPEED_WIDTH),
        "input_scale": np.full(SPEED_WIDTH, 1.0 / ratio_full_scale),
        "output_offset": np.zeros(1),
        "output_scale": np.array([1.0 / rpm_full_scale]),
    }


def speed_ratio1(positions, times, n: int = WINDOW) -> np.ndarray:
    """``(b[n] - b[n-p]) / (t[n] - t[n-p])`` for p = 1..n-1 over the last
    ``n`` entries of the window."""
    b = np.asarray(positions, dtype=np.float64)
    t = np.asarray(times, dtype=np.float64)
    if len(b) != len(t):
        raise ValueError("positions and times differ in length")
    if len(b) < n:
        raise InsufficientData(f"window holds {len(b)} samples, need {n}")
    b, t = b[-n:], t[-n:]
    if np.any(np.diff(t) <= 0):
        raise ValueError("window timestamps must be strictly increasing")
    p = np.arange(1, n)
    return (b[-1] - b[-1 - p]) / (t[-1] - t[-1 - p])


def speed_ratio2(prev_pos, prev_t, cur_pos, cur_t, fallback=None):
    """Per-VSN ratio across two consecutive cycles.

    Inputs are length-12 arrays indexed by q-1, NaN where VSN q was not
    observed. Missing slots take ``fallback[q-1]`` (the previous cycle's
    ratio) and are flagged. Returns ``(ratios, stale_flags)``.
    """
    pp, pt = np.asarray(prev_pos, float), np.asarray(prev_t, float)
    cp, ct = np.asarray(cur_pos, float), np.asarray(cur_t, float)
    ok = np.isfinite(pp) & np.isfinite(pt) & np.isfinite(cp) & np.isfinite(ct)
    dt = np.where(ok, ct - pt, 1.0)
    if np.any(dt[ok] <= 0):
        raise ValueError("cycle k timestamps must follow cycle k-1")
    ratios = np.where(ok, (cp - pp) / dt, np.nan)
    if fallback is not None:
        ratios = np.where(ok, ratios, np.asarray(fallback, float))
    return ratios, ~ok


class SpeedFeatureStream:
    """Builds a 21-value speed vector at each VSN event.

    Feed ``push(t, beta, q)`` with the event time, the unwrapped mechanical
    position reached and the VSN value entered (1..12). Returns ``None``
    until ``n`` events have been seen; before a VSN has been entered twice,
    its cycle ratio is seeded with the mean intra-window ratio and flagged.
    A cycle ratio not refreshed during the last 12 events is flagged stale.
    """

    def __init__(self, n: int = WINDOW):
        if n < 2:
            raise ValueError("window must hold at least two events")
        self.n = n
        self._t = deque(maxlen=n)
        self._b = deque(maxlen=n)
        self._last_t = [math.nan] * 12
        self._last_b = [math.nan] * 12
        self._ratio2 = [math.nan] * 12
        self._fresh_at = [-(10**9)] * 12
        self._count = 0

    def push(self, t: float, beta: float, q: int) -> SpeedFeatures | None:
        if not 1 <= q <= 12:
            raise ValueError(f"VSN {q!r} outside 1..12")
        if self._t and t <= self._t[-1]:
            raise ValueError("event timestamps must be strictly increasing")
        i = q - 1
        if not math.isnan(self._last_t[i]):
            self._ratio2[i] = (beta - self._last_b[i]) / (t - self._last_t[i])
            self._fresh_at[i] = self._count
        self._last_t[i], self._last_b[i] = t, beta
        self._t.append(t)
        self._b.append(beta)
        self._count += 1
        if len(self._t) < self.n:
            return None
        tn, bn = self._t[-1], self._b[-1]
        r1 = np.array([(bn - self._b[-1 - p]) / (tn - self._t[-1 - p]) for p in range(1, self.n)])
        r2 = np.array(self._ratio2)
        missing = np.isnan(r2)
        if missing.any():
            r2[missing] = r1.mean()
        stale = missing | (self._count - 1 - np.array(self._fresh_at) >= 12)
        return SpeedFeatures(r1, r2, stale)


def speed_matrix(times, betas, vsns, n: int = WINDOW) -> tuple[np.ndarray, np.ndarray]:
    """Speed vectors for an event sequence; returns (rows, event index of each row)."""
    s = SpeedFeatureStream(n)
    rows, idx = [], []
    for k, (t, b, q) in enumerate(zip(times, betas, vsns)):
        f = s.push(float(t), float(b), int(q))
        if f is not None:
            rows.append(f.as_array())
            idx.append(k)
    if not rows:
        return np.empty((0, SPEED_WIDTH)), np.empty(0, dtype=np.int64)
    return np.vstack(rows), np.asarray(idx, dtype=np.int64)
