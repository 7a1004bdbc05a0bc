"""Virtual sequence numbers: twelve half-step slots per electrical cycle.

Slot ``g`` (0-based, global over a mechanical revolution) covers the
half-open mechanical range ``[g*w, (g+1)*w)`` with ``w = 30/K_p`` degrees.
Within an electrical cycle the VSN is ``g % 12 + 1`` and the cycle is
``g // 12 + 1``. Labels are the sine/cosine of the slot midpoint.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit

VSN_PER_CYCLE = 12
FRAMES = ("mechanical", "electrical")


@dataclass(frozen=True)
class VsnLabel:
    vsn: int
    elec_cycle: int
    global_index: int
    sin_label: float
    cos_label: float


def slot_width(pole_pairs: int) -> float:
    return 30.0 / pole_pairs


def n_slots(pole_pairs: int) -> int:
    return VSN_PER_CYCLE * pole_pairs


def slot_range(global_index: int, pole_pairs: int) -> tuple[float, float]:
    """Mechanical [lo, hi) of a 1-based global slot."""
    w = slot_width(pole_pairs)
    return (global_index - 1) * w, global_index * w


def slot_midpoint(global_index: int, pole_pairs: int) -> float:
    lo, hi = slot_range(global_index, pole_pairs)
    return 0.5 * (lo + hi)


def _check_kp(pole_pairs):
    if int(pole_pairs) != pole_pairs or pole_pairs < 1:
        raise ValueError(f"pole_pairs must be a positive integer, got {pole_pairs!r}")


def vsn_to_label(vsn: int, elec_cycle: int, pole_pairs: int) -> tuple[float, float]:
    _check_kp(pole_pairs)
    if not 1 <= vsn <= VSN_PER_CYCLE:
        raise ValueError(f"vsn {vsn!r} outside 1..12")
    if not 1 <= elec_cycle <= pole_pairs:
        raise ValueError(f"electrical cycle {elec_cycle!r} outside 1..{pole_pairs}")
    g = (elec_cycle - 1) * VSN_PER_CYCLE + vsn
    mid = math.radians(slot_midpoint(g, pole_pairs))
    return math.sin(mid), math.cos(mid)


def angle_to_vsn(mech_angle: float, pole_pairs: int) -> VsnLabel:
    _check_kp(pole_pairs)
    if not (0.0 <= mech_angle < 360.0):
        raise ValueError(f"mechanical angle {mech_angle!r} outside [0, 360)")
    g0 = int(mech_angle // slot_width(pole_pairs))
    # guard the float edge where angle/width rounds up to the next slot
    g0 = min(g0, n_slots(pole_pairs) - 1)
    vsn = g0 % VSN_PER_CYCLE + 1
    cycle = g0 // VSN_PER_CYCLE + 1
    s, c = vsn_to_label(vsn, cycle, pole_pairs)
    return VsnLabel(vsn, cycle, g0 + 1, s, c)


def global_slots(mech_deg: np.ndarray, pole_pairs: int) -> np.ndarray:
    """0-based global slot for each mechanical angle (vectorised)."""
    g = np.floor(np.asarray(mech_deg) / slot_width(pole_pairs)).astype(np.int64)
    return np.clip(g, 0, n_slots(pole_pairs) - 1)


def label_points(pole_pairs: int) -> np.ndarray:
    """(12*K_p, 2) array of (sin, cos) for every global slot."""
    w = slot_width(pole_pairs)
    mids = np.radians((np.arange(n_slots(pole_pairs)) + 0.5) * w)
    return np.column_stack([np.sin(mids), np.cos(mids)])


def frame_points(frame: str, pole_pairs: int) -> np.ndarray:
    """Target points of the position network.

    ``mechanical``: the 12*K_p absolute slot labels. ``electrical``: the
    twelve slot midpoints of one electrical cycle expressed in electrical
    degrees, so they span the whole circle.
    """
    _check_kp(pole_pairs)
    if frame == "mechanical":
        return label_points(pole_pairs)
    if frame == "electrical":
        mids = np.radians((np.arange(VSN_PER_CYCLE) + 0.5) * 30.0)
        return np.column_stack([np.sin(mids), np.cos(mids)])
    raise ValueError(f"unknown label frame {frame!r}")


def frame_index(frame: str, global_slot):
    """Row of :func:`frame_points` that is the target of a 0-based global slot."""
    g = np.asarray(global_slot)
    return g if frame == "mechanical" else g % VSN_PER_CYCLE


def frame_to_mech(frame: str, angle_deg, pole_pairs: int):
    """Frame angle to mechanical degrees (within the first electrical cycle
    for the electrical frame)."""
    return angle_deg if frame == "mechanical" else np.asarray(angle_deg) / pole_pairs


def unknown_threshold(frame: str, pole_pairs: int) -> float:
    """Half the chord between adjacent target points of ``frame``."""
    n = len(frame_points(frame, pole_pairs))
    return math.sin(math.pi / n)


@dataclass(frozen=True)
class LabeledTrace:
    time: np.ndarray
    volts: np.ndarray
    enc_deg: np.ndarray
    speed_rpm: np.ndarray
    vsn: np.ndarray
    cycle: np.ndarray
    global_idx: np.ndarray
    sin_label: np.ndarray
    cos_label: np.ndarray
    stats: dict

    def __len__(self):
        return len(self.time)


def label_dataset(trace, pole_pairs: int) -> LabeledTrace:
    """Attach the VSN label of each sample's encoder angle.

    ``trace`` needs ``time``, ``volts``, ``enc_deg`` and ``speed_rpm``
    attributes (a :class:`~bldc_ann.datasets.ConditionedDataset`).
    """
    enc = getattr(trace, "enc_deg", None)
    if enc is None:
        raise ValueError("trace carries no encoder column")
    enc = np.asarray(enc, dtype=float)
    g = global_slots(enc, pole_pairs)
    pts = label_points(pole_pairs)
    counts = np.bincount(g, minlength=n_slots(pole_pairs))
    stats = {
        "samples": int(len(g)),
        "labels_present": int(np.count_nonzero(counts)),
        "labels_total": n_slots(pole_pairs),
        "per_label_counts": counts.tolist(),
    }
    return LabeledTrace(
        time=np.asarray(trace.time, dtype=float),
        volts=np.asarray(trace.volts, dtype=float),
        enc_deg=enc,
        speed_rpm=np.asarray(trace.speed_rpm, dtype=float),
        vsn=(g % VSN_PER_CYCLE + 1).astype(np.int64),
        cycle=(g // VSN_PER_CYCLE + 1).astype(np.int64),
        global_idx=(g + 1).astype(np.int64),
        sin_label=pts[g, 0] if len(g) else np.empty(0),
        cos_label=pts[g, 1] if len(g) else np.empty(0),
        stats=stats,
    )


# -- transition tracking -----------------------------------------------------
# int64 state vector shared with the drive kernel
T_U, T_PEND, T_COUNT, T_START, T_UNKNOWN, T_DEBOUNCE = range(6)
TRACKER_SIZE = 6
UNKNOWN = -1
NO_OBSERVATION = -2


def new_tracker_state(initial_slot: int, debounce: int = 2) -> np.ndarray:
    """Tracker seeded at 0-based global slot ``initial_slot``."""
    if debounce < 1:
        raise ValueError("debounce must be >= 1")
    s = np.zeros(TRACKER_SIZE, dtype=np.int64)
    s[T_U] = initial_slot
    s[T_PEND] = -1
    s[T_DEBOUNCE] = debounce
    return s


@njit(cache=True)
def tracker_update(ts, raw, k):
    """Feed one raw VSN observation (0..11, -1 for unknown, -2 for "no
    observation at this sample") at sample ``k``. A new VSN is accepted
    once it has been seen on ``debounce`` consecutive observations; the
    unwrapped slot counter moves by the signed shortest step. Returns the
    first sample of the accepted run, or -1."""
    if raw == NO_OBSERVATION:
        return -1
    if raw < 0:
        ts[4] += 1
        ts[1] = -1
        ts[2] = 0
        return -1
    ts[4] = 0
    acc = ts[0] % 12
    if raw == acc:
        ts[1] = -1
        ts[2] = 0
        return -1
    if raw == ts[1]:
        ts[2] += 1
    else:
        ts[1] = raw
        ts[2] = 1
        ts[3] = k
    if ts[2] >= ts[5]:
        delta = (raw - acc + 5) % 12 - 5
        ts[0] += delta
        start = ts[3]
        ts[1] = -1
        ts[2] = 0
        return start
    return -1


@njit(cache=True)
def track_block(raw, ts, ks, accepted, ev_idx, ev_start, ev_u):
    """Run :func:`tracker_update` over observations ``raw`` taken at sample
    indices ``ks``. Fills the accepted counter per observation and returns
    the number of events written (observation position, first sample of
    the accepted run, new counter)."""
    n_ev = 0
    for j in range(raw.shape[0]):
        st = tracker_update(ts, raw[j], ks[j])
        if st >= 0:
            ev_idx[n_ev] = j
            ev_start[n_ev] = st
            ev_u[n_ev] = ts[0]
            n_ev += 1
        accepted[j] = ts[0]
    return n_ev
