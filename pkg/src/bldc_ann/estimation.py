"""Position and speed estimation from the conditioned phase voltages.

The position network maps a pair of consecutive conditioned readings to a
point near the unit circle; the angle is recovered with a four-quadrant
arctangent and the VSN is the nearest target point. Accepted VSN changes
(debounced by the commutation tracker) become events carrying a time and a
boundary position, which feed the speed features and the speed network.

Observations are PWM-synchronous: one feature vector per carrier period,
taken at a fixed phase of the carrier (``observe_every`` samples apart,
starting at ``observe_phase``). Setting ``observe_every=1`` observes every
acquisition sample.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from enum import IntEnum
from typing import Iterable, Iterator

import numpy as np

from .features import (SPEED_WIDTH, WINDOW, SpeedFeatures, SpeedFeatureStream, position_features,
                       position_scaling, speed_scaling)
from .mlp import LabeledDataset, Mlp, TrainConfig, predict, split_dataset, train
from .simulator import STATUS_LOSS_OF_LOCK, DriveTrace, Simulator
from .vsn import (NO_OBSERVATION, UNKNOWN, VSN_PER_CYCLE, frame_index, frame_points, global_slots,
                  new_tracker_state, slot_width, track_block, unknown_threshold)

POSITION_TOPOLOGY = (10, 5, 2)
SPEED_TOPOLOGY = (21, 10, 1)
FRAMES = ("electrical", "mechanical")


class EstimationFault(ValueError):
    """Input the estimator cannot evaluate (non-finite features, wrong net)."""


class LossOfLock(RuntimeError):
    """Too many consecutive unknown observations in sensorless mode."""

    def __init__(self, message: str, result: "SensorlessResult"):
        super().__init__(message)
        self.result = result


class StateClass(IntEnum):
    SUCCESSFUL = 0
    UNKNOWN = 1
    ERRONEOUS = 2


@dataclass(frozen=True)
class EstimatorConfig:
    frame: str = "electrical"
    observe_every: int = 5  # acquisition samples per observation (one PWM carrier period)
    observe_phase: int = 1
    threshold: float | None = None  # None: half the chord between adjacent targets
    debounce: int = 2
    window: int = WINDOW
    max_unknown: int = 200  # consecutive unknown observations before loss-of-lock

    def __post_init__(self):
        if self.frame not in FRAMES:
            raise ValueError(f"frame must be one of {FRAMES}, got {self.frame!r}")
        if self.observe_every < 1 or not 0 <= self.observe_phase < self.observe_every:
            raise ValueError("need observe_every >= 1 and 0 <= observe_phase < observe_every")
        if self.threshold is not None and not self.threshold > 0:
            raise ValueError("threshold must be positive")
        if self.debounce < 1 or self.window < 2 or self.max_unknown < 1:
            raise ValueError("debounce, window and max_unknown must be positive (window >= 2)")

    def threshold_for(self, pole_pairs: int) -> float:
        return self.threshold if self.threshold is not None else unknown_threshold(self.frame, pole_pairs)

    def observed(self, sample_index) -> np.ndarray:
        return np.asarray(sample_index) % self.observe_every == self.observe_phase

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EstimatorConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown estimator parameters: {sorted(unknown)}")
        return cls(**d)


# -- single-vector operations ---------------------------------------------------
@dataclass(frozen=True)
class PositionEstimate:
    sin_hat: float
    cos_hat: float
    angle_hat: float  # mech degrees; NaN when the output is (0, 0)
    vsn_hat: int | None  # None when unknown
    nearest_vsn: int  # VSN of the nearest target, regardless of the threshold
    confidence: float  # distance to the nearest target point
    elec_cycle: int | None = None  # 1-based, mechanical frame only


@dataclass(frozen=True)
class SpeedEstimate:
    speed_hat: float  # rpm
    window_time: float  # s spanned by the event window, NaN if unknown


@dataclass
class _Decoded:
    frame_deg: np.ndarray
    nearest: np.ndarray  # row of frame_points
    confidence: np.ndarray
    known: np.ndarray


def _decode(out: np.ndarray, points: np.ndarray, threshold: float) -> _Decoded:
    """Angle, nearest target and confidence for network outputs (n, 2)."""
    s, c = out[:, 0], out[:, 1]
    finite = np.isfinite(s) & np.isfinite(c)
    zero = (s == 0.0) & (c == 0.0)
    ss, cc = np.where(finite, s, 0.0), np.where(finite, c, 0.0)
    ang = np.degrees(np.arctan2(ss, cc)) % 360.0
    n = len(points)
    # targets sit at the midpoints of n equal arcs, so the nearest one is
    # the arc holding the angle
    idx = np.floor(ang * n / 360.0).astype(np.int64) % n
    conf = np.hypot(ss - points[idx, 0], cc - points[idx, 1])
    conf = np.where(finite, conf, np.inf)
    ang = np.where(finite & ~zero, ang, np.nan)
    return _Decoded(ang, idx, conf, conf <= threshold)


def _frame_to_mech(frame, frame_deg, pole_pairs):
    return frame_deg if frame == "mechanical" else frame_deg / pole_pairs


def estimate_position(net: Mlp, f, pole_pairs: int = 8, frame: str = "electrical",
                      threshold: float | None = None) -> PositionEstimate:
    """Run the position network on one feature vector and decode it.

    ``f`` is a :class:`~bldc_ann.features.PositionFeatures` or a 10-vector.
    In the electrical frame ``angle_hat`` is the mechanical angle within the
    electrical cycle, in [0, 360/K_p).
    """
    if net.topology != POSITION_TOPOLOGY:
        raise EstimationFault(f"position net must be {POSITION_TOPOLOGY}, got {net.topology}")
    x = f.as_array() if hasattr(f, "as_array") else np.asarray(f, dtype=float)
    out = predict(net, x[None, :])
    return decode_position(out[0], pole_pairs, frame, threshold)


def decode_position(out, pole_pairs: int = 8, frame: str = "electrical",
                    threshold: float | None = None) -> PositionEstimate:
    """Decode a (sin, cos) pair; the arctangent part of :func:`estimate_position`."""
    pts = frame_points(frame, pole_pairs)
    thr = threshold if threshold is not None else unknown_threshold(frame, pole_pairs)
    o = np.asarray(out, dtype=float).reshape(1, 2)
    d = _decode(o, pts, thr)
    near = int(d.nearest[0])
    vsn = near % VSN_PER_CYCLE + 1
    cycle = near // VSN_PER_CYCLE + 1 if frame == "mechanical" else None
    return PositionEstimate(
        sin_hat=float(o[0, 0]),
        cos_hat=float(o[0, 1]),
        angle_hat=float(_frame_to_mech(frame, d.frame_deg[0], pole_pairs)),
        vsn_hat=vsn if d.known[0] else None,
        nearest_vsn=vsn,
        confidence=float(d.confidence[0]),
        elec_cycle=cycle if d.known[0] else None,
    )


def estimate_speed(net: Mlp, f) -> SpeedEstimate:
    """Speed network on one 21-value vector (or :class:`SpeedFeatures`)."""
    if net.topology != SPEED_TOPOLOGY:
        raise EstimationFault(f"speed net must be {SPEED_TOPOLOGY}, got {net.topology}")
    x = f.as_array() if isinstance(f, SpeedFeatures) else np.asarray(f, dtype=float)
    if x.shape != (SPEED_WIDTH,) or not np.all(np.isfinite(x)):
        raise EstimationFault("speed features must be 21 finite values")
    return SpeedEstimate(float(predict(net, x[None, :])[0, 0]), math.nan)


def classify_state(est: PositionEstimate, vsn_true: int, threshold: float | None = None,
                   cycle_true: int | None = None, cycle_hat: int | None = None) -> StateClass:
    """Unknown above the threshold, else successful when the VSN (and the
    electrical cycle, when both are given) match the truth."""
    if threshold is not None and not threshold > 0:
        raise ValueError("threshold must be positive")
    unknown = est.vsn_hat is None if threshold is None else not est.confidence <= threshold
    if unknown:
        return StateClass.UNKNOWN
    if cycle_hat is None:
        cycle_hat = est.elec_cycle
    match = est.nearest_vsn == vsn_true and (cycle_true is None or cycle_hat is None or cycle_hat == cycle_true)
    return StateClass.SUCCESSFUL if match else StateClass.ERRONEOUS


# -- estimate traces ---------------------------------------------------------------
@dataclass
class EstimateTrace:
    """One row per observation instant, with the truth at the same instant."""

    time: np.ndarray
    sample: np.ndarray
    angle_true: np.ndarray  # encoder, mech degrees
    angle_hat: np.ndarray
    vsn_true: np.ndarray
    vsn_hat: np.ndarray  # 0 = unknown
    cycle_true: np.ndarray  # 1-based electrical cycle
    cycle_hat: np.ndarray
    state: np.ndarray
    speed_true: np.ndarray
    speed_hat: np.ndarray  # NaN before the first speed estimate
    pole_pairs: int = 8
    meta: dict = field(default_factory=dict)

    _FIELDS = ("time", "sample", "angle_true", "angle_hat", "vsn_true", "vsn_hat", "cycle_true", "cycle_hat",
               "state", "speed_true", "speed_hat")

    def __len__(self):
        return len(self.time)

    @classmethod
    def empty(cls, pole_pairs: int = 8) -> "EstimateTrace":
        i, f = np.empty(0, dtype=np.int64), np.empty(0)
        return cls(f, i, f, f, i, i, i, i, i, f, f, pole_pairs)

    @classmethod
    def concat(cls, parts) -> "EstimateTrace":
        parts = list(parts)
        if not parts:
            raise ValueError("nothing to concatenate")
        cols = {n: np.concatenate([getattr(p, n) for p in parts]) for n in cls._FIELDS}
        return cls(**cols, pole_pairs=parts[0].pole_pairs, meta=dict(parts[0].meta))

    def select(self, mask) -> "EstimateTrace":
        cols = {n: getattr(self, n)[mask] for n in self._FIELDS}
        return EstimateTrace(**cols, pole_pairs=self.pole_pairs, meta=dict(self.meta))


def _assemble(frame, pole_pairs, threshold, k, t, out, u, enc_deg, speed_true, speed_hat, held_cycle):
    """Vectorised decode of one block of observations.

    ``u`` is the tracker counter after each observation; ``held_cycle`` the
    electrical cycle carried in from the previous block (mechanical frame).
    Returns the trace and the cycle to carry on.
    """
    pts = frame_points(frame, pole_pairs)
    d = _decode(out, pts, threshold)
    near12 = d.nearest % VSN_PER_CYCLE
    if frame == "mechanical":
        cyc = np.where(d.known, d.nearest // VSN_PER_CYCLE, -1)
        # hold the last confident cycle through unknown observations
        pos = np.where(cyc >= 0, np.arange(len(cyc)), -1)
        if len(pos):
            np.maximum.accumulate(pos, out=pos)
        cyc_hat = np.where(pos >= 0, cyc[np.maximum(pos, 0)], held_cycle)
        if len(cyc_hat):
            held_cycle = int(cyc_hat[-1])
        mech_hat = d.frame_deg
    else:
        g_hat = u + ((near12 - u % VSN_PER_CYCLE + 6) % VSN_PER_CYCLE - 6)
        cyc_hat = (g_hat // VSN_PER_CYCLE) % pole_pairs
        mech_hat = (cyc_hat * (360.0 / pole_pairs) + d.frame_deg / pole_pairs) % 360.0
    g_true = global_slots(enc_deg, pole_pairs)
    vsn_true = g_true % VSN_PER_CYCLE
    cyc_true = g_true // VSN_PER_CYCLE
    ok = (near12 == vsn_true) & (cyc_hat == cyc_true)
    state = np.where(~d.known, StateClass.UNKNOWN, np.where(ok, StateClass.SUCCESSFUL, StateClass.ERRONEOUS))
    tr = EstimateTrace(
        time=np.asarray(t, dtype=float),
        sample=np.asarray(k, dtype=np.int64),
        angle_true=np.asarray(enc_deg, dtype=float),
        angle_hat=mech_hat,
        vsn_true=(vsn_true + 1).astype(np.int64),
        vsn_hat=np.where(d.known, near12 + 1, 0).astype(np.int64),
        cycle_true=(cyc_true + 1).astype(np.int64),
        cycle_hat=(np.asarray(cyc_hat) + 1).astype(np.int64),
        state=state.astype(np.int64),
        speed_true=np.asarray(speed_true, dtype=float),
        speed_hat=np.asarray(speed_hat, dtype=float),
        pole_pairs=pole_pairs,
    )
    return tr, held_cycle


def event_boundary(u_new: int, u_old: int, pole_pairs: int) -> float:
    """Unwrapped mechanical position (deg) of the slot boundary crossed when
    the tracker moves from ``u_old`` to ``u_new``."""
    w = slot_width(pole_pairs)
    return (u_new if u_new > u_old else u_new + 1) * w


class Estimator:
    """Streaming position and speed estimation over recorded data.

    ``pos_net=None`` substitutes an oracle that reports the encoder slot at
    each observation with full confidence. ``speed_net=None`` skips speed
    estimation. Set ``collect_events`` to keep each speed feature vector
    with the true speed at its event (training data for the speed network).
    """

    def __init__(self, pos_net: Mlp | None, speed_net: Mlp | None, cfg: EstimatorConfig | None = None,
                 pole_pairs: int = 8, acquisition_period: float = 1e-5, collect_events: bool = False):
        self.cfg = cfg or EstimatorConfig()
        if pos_net is not None and pos_net.topology != POSITION_TOPOLOGY:
            raise EstimationFault(f"position net must be {POSITION_TOPOLOGY}, got {pos_net.topology}")
        if speed_net is not None and speed_net.topology != SPEED_TOPOLOGY:
            raise EstimationFault(f"speed net must be {SPEED_TOPOLOGY}, got {speed_net.topology}")
        self.pos_net, self.speed_net = pos_net, speed_net
        self.pole_pairs = pole_pairs
        self.acq = acquisition_period
        self.threshold = self.cfg.threshold_for(pole_pairs)
        self._points = frame_points(self.cfg.frame, pole_pairs)
        self._ts = None
        self._stream = SpeedFeatureStream(self.cfg.window)
        self._speed_hat = math.nan
        self._last = None  # (sample, volts) of the previous chunk's final row
        self._held = 0
        self.collect_events = collect_events
        self.event_features: list[np.ndarray] = []
        self.event_speed: list[float] = []

    def _outputs(self, x, enc_deg):
        if self.pos_net is not None:
            return predict(self.pos_net, x)
        g = global_slots(enc_deg, self.pole_pairs)
        return self._points[frame_index(self.cfg.frame, g)]

    def process(self, time, volts, enc_deg, speed_rpm) -> EstimateTrace:
        """Estimate over the next contiguous chunk of samples."""
        time = np.asarray(time, dtype=float)
        volts = np.asarray(volts, dtype=float)
        enc_deg = np.asarray(enc_deg, dtype=float)
        speed_rpm = np.asarray(speed_rpm, dtype=float)
        if len(time) == 0:
            return EstimateTrace.empty(self.pole_pairs)
        k = np.rint(time / self.acq).astype(np.int64)
        if len(k) > 1 and np.any(np.diff(k) != 1):
            raise EstimationFault("samples must be contiguous at the acquisition period")
        if self._last is not None and k[0] != self._last[0] + 1:
            raise EstimationFault("chunk does not continue the previous one")
        prev_v = np.vstack([self._last[1][None, :] if self._last is not None else np.full((1, 3), np.nan),
                            volts[:-1]])
        self._last = (int(k[-1]), volts[-1].copy())
        sel = np.flatnonzero(self.cfg.observed(k) & np.all(np.isfinite(prev_v), axis=1))
        if len(sel) == 0:
            return EstimateTrace.empty(self.pole_pairs)
        ks, ts_, enc, spd = k[sel], time[sel], enc_deg[sel], speed_rpm[sel]
        vp, vn = prev_v[sel], volts[sel]
        x = np.column_stack([vp, vn, np.full(len(sel), self.acq), vp * vn])
        out = self._outputs(x, enc)
        if self._ts is None:
            g0 = int(global_slots(enc[:1], self.pole_pairs)[0])
            self._ts = new_tracker_state(g0, self.cfg.debounce)
            self._held = g0 // VSN_PER_CYCLE
        d = _decode(out, self._points, self.threshold)
        raw = np.where(d.known, d.nearest % VSN_PER_CYCLE, UNKNOWN).astype(np.int64)
        n = len(raw)
        u = np.empty(n, dtype=np.int64)
        ev_idx, ev_start, ev_u = (np.empty(n, dtype=np.int64) for _ in range(3))
        u_before = int(self._ts[0])
        n_ev = track_block(raw, self._ts, ks, u, ev_idx, ev_start, ev_u)
        speed_hat = self._speeds(ev_idx[:n_ev], ev_start[:n_ev], ev_u[:n_ev], u_before, spd, n)
        tr, self._held = _assemble(self.cfg.frame, self.pole_pairs, self.threshold, ks, ts_, out, u, enc, spd,
                                   speed_hat, self._held)
        return tr

    def _speeds(self, ev_idx, ev_start, ev_u, u_before, speed_true, n):
        """Push events into the speed features; zero-order hold of the estimates."""
        vals = []
        u_old = u_before
        for j, st, un in zip(ev_idx, ev_start, ev_u):
            beta = event_boundary(int(un), u_old, self.pole_pairs)
            u_old = int(un)
            f = self._stream.push(st * self.acq, beta, int(un) % VSN_PER_CYCLE + 1)
            if f is None:
                continue
            if self.collect_events:
                self.event_features.append(f.as_array())
                self.event_speed.append(float(speed_true[j]))
            if self.speed_net is not None:
                vals.append((j, f.as_array()))
        out = np.full(n, np.nan)
        if vals:
            est = predict(self.speed_net, np.vstack([v for _, v in vals]))[:, 0]
            out[[j for j, _ in vals]] = est
        # hold each estimate until the next one
        idx = np.where(np.isnan(out), -1, np.arange(n))
        np.maximum.accumulate(idx, out=idx)
        filled = np.where(idx >= 0, out[np.maximum(idx, 0)], self._speed_hat)
        self._speed_hat = float(filled[-1])
        return filled


def estimate_chunks(chunks: Iterable, pos_net: Mlp | None, speed_net: Mlp | None,
                    cfg: EstimatorConfig | None = None, pole_pairs: int = 8,
                    acquisition_period: float = 1e-5) -> Iterator[EstimateTrace]:
    """Stream :class:`EstimateTrace` blocks over chunks that carry ``time``,
    ``conditioned`` (or ``volts``), ``enc_deg`` and ``speed_rpm``."""
    est = Estimator(pos_net, speed_net, cfg, pole_pairs, acquisition_period)
    for ch in chunks:
        v = ch.conditioned if hasattr(ch, "conditioned") else ch.volts
        yield est.process(ch.time, v, ch.enc_deg, ch.speed_rpm)


def estimate_trace(data, pos_net: Mlp | None, speed_net: Mlp | None, cfg: EstimatorConfig | None = None,
                   pole_pairs: int = 8, acquisition_period: float = 1e-5) -> EstimateTrace:
    return EstimateTrace.concat(estimate_chunks([data], pos_net, speed_net, cfg, pole_pairs, acquisition_period))


# -- training sets -----------------------------------------------------------------
def position_examples(data, cfg: EstimatorConfig, pole_pairs: int, acquisition_period: float):
    """Observation rows of one trace: (features, targets, true speed)."""
    v = np.asarray(data.conditioned if hasattr(data, "conditioned") else data.volts, dtype=float)
    t = np.asarray(data.time, dtype=float)
    k = np.rint(t / acquisition_period).astype(np.int64)
    sel = np.flatnonzero(cfg.observed(k))
    sel = sel[sel >= 1]
    sel = sel[k[sel] - k[sel - 1] == 1]
    vp, vn = v[sel - 1], v[sel]
    x = np.column_stack([vp, vn, t[sel] - t[sel - 1], vp * vn])
    g = global_slots(np.asarray(data.enc_deg)[sel], pole_pairs)
    y = frame_points(cfg.frame, pole_pairs)[frame_index(cfg.frame, g)]
    return x, y, np.asarray(data.speed_rpm)[sel]


def stratified_choice(speed_rpm, max_examples: int | None, seed: int, bin_rpm: float = 100.0) -> np.ndarray:
    """Indices with (up to) equal counts per speed bin, in ascending order."""
    m = len(speed_rpm)
    if max_examples is None or max_examples >= m:
        return np.arange(m)
    rng = np.random.default_rng(seed)
    bins = np.floor(np.abs(speed_rpm) / bin_rpm).astype(np.int64)
    groups = [np.flatnonzero(bins == b) for b in np.unique(bins)]
    groups.sort(key=len)
    picked, left = [], max_examples
    for i, grp in enumerate(groups):
        share = left // (len(groups) - i)
        take = min(share, len(grp))
        picked.append(rng.choice(grp, take, replace=False))
        left -= take
    return np.sort(np.concatenate(picked))


def position_dataset(traces, cfg: EstimatorConfig, pole_pairs: int, acquisition_period: float,
                     max_examples: int | None = 60_000, seed: int = 0) -> tuple[LabeledDataset, np.ndarray]:
    parts = [position_examples(tr, cfg, pole_pairs, acquisition_period) for tr in traces]
    x = np.vstack([p[0] for p in parts])
    y = np.vstack([p[1] for p in parts])
    s = np.concatenate([p[2] for p in parts])
    idx = stratified_choice(s, max_examples, seed)
    return LabeledDataset(x[idx], y[idx]), s[idx]


def speed_dataset(traces, pos_net: Mlp | None, cfg: EstimatorConfig, pole_pairs: int,
                  acquisition_period: float) -> LabeledDataset:
    """Speed vectors at every event, with the true speed as target. Events
    come from ``pos_net`` estimates (or the encoder oracle when None)."""
    xs, ys = [], []
    for tr in traces:
        est = Estimator(pos_net, None, cfg, pole_pairs, acquisition_period, collect_events=True)
        v = tr.conditioned if hasattr(tr, "conditioned") else tr.volts
        est.process(tr.time, v, tr.enc_deg, tr.speed_rpm)
        xs += est.event_features
        ys += est.event_speed
    if not xs:
        return LabeledDataset(np.empty((0, SPEED_WIDTH)), np.empty((0, 1)))
    return LabeledDataset(np.vstack(xs), np.asarray(ys))


def position_train_config(seed: int = 0, max_epochs: int = 3000) -> TrainConfig:
    return TrainConfig(learning_rate=0.5, max_epochs=max_epochs, batch_size=64, early_stop_patience=100, seed=seed)


def speed_train_config(seed: int = 0, max_epochs: int = 2000) -> TrainConfig:
    return TrainConfig(learning_rate=0.1, max_epochs=max_epochs, batch_size=64, early_stop_patience=100, seed=seed)


def train_position_net(ds: LabeledDataset, tcfg: TrainConfig, clamp_range: float = 5.0,
                       acquisition_period: float = 1e-5, frame: str = "electrical"):
    """Train the 10-5-2 network; returns (net, history, test cost)."""
    tr, va, te = split_dataset(ds, tcfg)
    net, hist = train((tr, va), POSITION_TOPOLOGY, tcfg, scaling=position_scaling(clamp_range, acquisition_period))
    net.meta.update(target="position", frame=frame, examples=ds.m)
    test_cost = _test_cost(net, te)
    net.meta["test_cost"] = test_cost
    return net, hist, test_cost


def train_speed_net(ds: LabeledDataset, tcfg: TrainConfig):
    tr, va, te = split_dataset(ds, tcfg)
    net, hist = train((tr, va), SPEED_TOPOLOGY, tcfg, scaling=speed_scaling())
    net.meta.update(target="speed", examples=ds.m)
    test_cost = _test_cost(net, te)
    net.meta["test_cost"] = test_cost
    return net, hist, test_cost


def _test_cost(net, te):
    if te.m == 0:
        return math.nan
    h = net.scale_targets(predict(net, te.x))
    d = h - net.scale_targets(te.y)
    return 0.5 * float(np.sum(d * d)) / te.m


# -- sensorless operation -------------------------------------------------------------
class NetObserver:
    """Position network observing once per carrier period; speed from the
    speed network (the profile reference until the first estimate).

    The voltages show the back-EMF zero crossing in the middle of each
    commutation step but nothing at the step boundary itself, where the
    applied pattern only changes once commutation has happened. The
    boundary is therefore timed: commutation follows the mid-step VSN by
    half the last crossing-to-crossing interval (30 electrical degrees).
    """

    timed = True

    def __init__(self, pos_net: Mlp, speed_net: Mlp | None, cfg: EstimatorConfig, pole_pairs: int):
        if pos_net.topology != POSITION_TOPOLOGY:
            raise EstimationFault(f"position net must be {POSITION_TOPOLOGY}, got {pos_net.topology}")
        if speed_net is not None and speed_net.topology != SPEED_TOPOLOGY:
            raise EstimationFault(f"speed net must be {SPEED_TOPOLOGY}, got {speed_net.topology}")
        self.pos_net, self.speed_net, self.cfg = pos_net, speed_net, cfg
        self.every, self.phase = cfg.observe_every, cfg.observe_phase
        self.points = frame_points(cfg.frame, pole_pairs)
        self.threshold = cfg.threshold_for(pole_pairs)

    def output(self, sim: Simulator, acq: float) -> np.ndarray:
        vp, vn = sim.previous_conditioned(), sim.current_conditioned()
        x = position_features(vp, vn, acq).as_array()
        return predict(self.pos_net, x[None, :])[0]

    def raw(self, out: np.ndarray) -> int:
        d = _decode(out[None, :], self.points, self.threshold)
        return int(d.nearest[0] % VSN_PER_CYCLE) if d.known[0] else UNKNOWN

    def control_speed(self, speed_hat: float, sim: Simulator) -> float:
        return sim.reference_rpm() if math.isnan(speed_hat) else speed_hat


class OracleObserver:
    """Encoder slot reported as a perfect estimate at every sample; the
    speed loop keeps the encoder measurement. Behaves exactly like the
    sensor-based drive."""

    timed = False

    def __init__(self, cfg: EstimatorConfig, pole_pairs: int, speed_net: Mlp | None = None):
        self.cfg = cfg
        self.speed_net = speed_net
        self.every, self.phase = 1, 0
        self.pole_pairs = pole_pairs
        self.points = frame_points(cfg.frame, pole_pairs)

    def output(self, sim: Simulator, acq: float) -> np.ndarray:
        g = global_slots(np.array([sim.current_encoder_deg()]), self.pole_pairs)
        return self.points[frame_index(self.cfg.frame, g)][0]

    def raw(self, out: np.ndarray) -> int:
        idx = int(np.floor((math.degrees(math.atan2(out[0], out[1])) % 360.0) * len(self.points) / 360.0))
        return idx % len(self.points) % VSN_PER_CYCLE

    def control_speed(self, speed_hat: float, sim: Simulator) -> float:
        return math.nan


@dataclass
class SensorlessResult:
    trace: DriveTrace
    estimates: EstimateTrace
    status: str  # "ok" or "loss-of-lock"
    mech_cycles: float
    meta: dict = field(default_factory=dict)


def sensorless_loop(pos_net: Mlp | None, speed_net: Mlp | None, sim: Simulator, duration: float,
                    cfg: EstimatorConfig | None = None, observer=None) -> SensorlessResult:
    """Drive ``sim`` for ``duration`` seconds with commutation taken from
    the estimator instead of the encoder.

    The simulator must already be in closed loop (past the open-loop ramp).
    ``pos_net=None`` with no explicit observer uses the encoder oracle.
    Raises :class:`LossOfLock` (carrying the partial result) when the
    unknown streak exceeds ``cfg.max_unknown``.
    """
    cfg = cfg or EstimatorConfig()
    kp = sim.params.pole_pairs
    acq = sim.sim.acquisition_period
    if not sim.closed_loop:
        raise ValueError("sensorless operation needs a rotating, closed-loop drive")
    if observer is None:
        observer = OracleObserver(cfg, kp, speed_net) if pos_net is None else NetObserver(pos_net, speed_net, cfg, kp)
    sim.max_unknown = cfg.max_unknown
    thr = cfg.threshold_for(kp)
    end = sim.sample_index + int(round(duration / acq))
    every, phase = observer.every, observer.phase

    stream = SpeedFeatureStream(cfg.window)
    speed_hat = math.nan
    parts, pending = [], []
    rows = {n: [] for n in ("k", "t", "s", "c", "u", "enc", "spd", "shat")}
    u_old = sim.tracker_slot
    held = u_old // VSN_PER_CYCLE
    status = "ok"
    crossings = []  # start samples of the last two mid-step VSNs

    def commutation_due(u):
        if len(crossings) == 2 and crossings[-1] == sim.tracker_start:
            delay = (crossings[1] - crossings[0]) // 2
        else:
            rpm = speed_hat if speed_hat > 0 else sim.reference_rpm()
            delay = int(round(slot_width(kp) / (6.0 * max(rpm, 1.0)) / acq))
        return sim.tracker_start + delay

    def flush():
        if pending:
            parts.append(DriveTrace.concat(pending))
            pending.clear()

    lead = min((phase - sim.sample_index) % every, end - sim.sample_index)
    if lead > 0:
        pending.append(sim.advance(lead, ext_vsn=np.full(lead, NO_OBSERVATION),
                                   ext_speed=np.full(lead, observer.control_speed(speed_hat, sim))))
    while sim.sample_index < end:
        k = sim.sample_index
        out = observer.output(sim, acq)
        raw = observer.raw(out)
        n = min(every, end - k)
        ext = np.full(n, NO_OBSERVATION, dtype=np.int64)
        ext[0] = raw
        u = sim.tracker_slot
        if observer.timed and u % 2 == 1:
            j0 = max(commutation_due(u) - k, 0)
            if j0 < n:
                ext[j0:] = (u + 1) % VSN_PER_CYCLE
        rows["k"].append(k)
        rows["t"].append(k * acq)
        rows["s"].append(out[0])
        rows["c"].append(out[1])
        rows["enc"].append(sim.current_encoder_deg())
        rows["spd"].append(sim.current_speed_rpm())
        rows["shat"].append(speed_hat)
        block = sim.advance(n, ext_vsn=ext, ext_speed=np.full(n, observer.control_speed(speed_hat, sim)))
        pending.append(block)
        if len(pending) >= 4096:
            flush()
        u = sim.tracker_slot
        rows["u"].append(u)
        if u != u_old:
            if u % 2 == 1 and u > u_old:
                crossings[:] = (crossings + [sim.tracker_start])[-2:]
            beta = event_boundary(u, u_old, kp)
            f = stream.push(sim.tracker_start * acq, beta, u % VSN_PER_CYCLE + 1)
            u_old = u
            if f is not None and observer.speed_net is not None:
                speed_hat = estimate_speed(observer.speed_net, f).speed_hat
        if sim.status == STATUS_LOSS_OF_LOCK:
            status = "loss-of-lock"
            break
    flush()
    trace = DriveTrace.concat(parts) if parts else sim.advance(0)
    cycles = _mech_cycles(trace.mech_deg)
    if rows["k"]:
        out = np.column_stack([rows["s"], rows["c"]])
        n_rows = len(rows["u"])
        est, _ = _assemble(cfg.frame, kp, thr, np.array(rows["k"][:n_rows]), np.array(rows["t"][:n_rows]),
                           out[:n_rows], np.array(rows["u"], dtype=np.int64), np.array(rows["enc"][:n_rows]),
                           np.array(rows["spd"][:n_rows]), np.array(rows["shat"][:n_rows]), held)
    else:
        est = EstimateTrace.empty(kp)
    res = SensorlessResult(trace, est, status, cycles,
                           meta={"estimator": cfg.to_dict(), "observer": type(observer).__name__})
    if status != "ok":
        raise LossOfLock(f"loss of lock at t={sim.time:.6f}s after {cycles:.1f} mechanical cycles", res)
    return res


def _mech_cycles(mech_deg: np.ndarray) -> float:
    if len(mech_deg) < 2:
        return 0.0
    d = (np.diff(mech_deg) + 180.0) % 360.0 - 180.0
    return float(np.sum(d) / 360.0)
