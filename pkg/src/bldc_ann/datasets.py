"""CSV readers and writers for traces and datasets.

Every writer uses fixed ``printf`` formats so the same arrays always give
the same bytes.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .vsn import LabeledTrace, label_dataset

RAW_COLUMNS = ("t_s", "v_a", "v_b", "v_c", "enc_deg", "mech_deg", "speed_rpm", "seq")
CONDITIONED_COLUMNS = ("t_s", "v_as", "v_bs", "v_cs", "enc_deg", "speed_rpm")
LABEL_COLUMNS = CONDITIONED_COLUMNS + ("vsn", "cycle", "global_idx", "sin_label", "cos_label")
ESTIMATE_COLUMNS = ("t_s", "angle_true", "angle_hat", "vsn_true", "vsn_hat", "state_class", "speed_true", "speed_hat")

_T = "%.6f"
_V = "%.10g"
_A = "%.10g"


class DataError(ValueError):
    """Malformed or inconsistent data file."""


@dataclass
class ConditionedDataset:
    """Conditioned phase voltages with the encoder and speed references."""

    time: np.ndarray
    volts: np.ndarray
    enc_deg: np.ndarray
    speed_rpm: np.ndarray
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.time)

    @classmethod
    def from_trace(cls, trace) -> "ConditionedDataset":
        return cls(trace.time, trace.conditioned, trace.enc_deg, trace.speed_rpm, dict(trace.meta))

    def sample_index(self, acquisition_period: float) -> np.ndarray:
        return np.rint(self.time / acquisition_period).astype(np.int64)

    def labeled(self, pole_pairs: int) -> LabeledTrace:
        return label_dataset(self, pole_pairs)


def _write(path, header, columns, fmts):
    path = Path(path)
    data = np.column_stack(columns) if len(columns[0]) else np.empty((0, len(header)))
    with open(path, "w", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        if len(data):
            np.savetxt(fh, data, fmt=fmts, delimiter=",")


def _read(path, expected: tuple[str, ...], required: tuple[str, ...] | None = None) -> dict[str, np.ndarray]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: no such file")
    with open(path) as fh:
        header = fh.readline().strip().split(",")
    need = required or expected
    missing = [c for c in need if c not in header]
    if missing:
        raise DataError(f"{path}: missing column(s) {', '.join(missing)}")
    try:
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from None
    if data.size and data.shape[1] != len(header):
        raise DataError(f"{path}: rows do not match the header")
    if data.size == 0:
        data = np.empty((0, len(header)))
    if not np.all(np.isfinite(data[:, [header.index(c) for c in need]])):
        raise DataError(f"{path}: non-finite values")
    return {name: data[:, i] for i, name in enumerate(header)}


def write_raw_trace(trace, path):
    _write(path, RAW_COLUMNS,
           [trace.time, trace.volts[:, 0], trace.volts[:, 1], trace.volts[:, 2], trace.enc_deg, trace.mech_deg,
            trace.speed_rpm, trace.seq],
           [_T, _V, _V, _V, _A, _A, "%.6f", "%d"])


def write_conditioned(ds: ConditionedDataset, path, meta_path=None):
    _write(path, CONDITIONED_COLUMNS,
           [ds.time, ds.volts[:, 0], ds.volts[:, 1], ds.volts[:, 2], ds.enc_deg, ds.speed_rpm],
           [_T, _V, _V, _V, _A, "%.6f"])
    if meta_path is not None:
        Path(meta_path).write_text(json.dumps(ds.meta, indent=1, sort_keys=True))


def read_conditioned(path, require_encoder: bool = True) -> ConditionedDataset:
    req = CONDITIONED_COLUMNS if require_encoder else tuple(c for c in CONDITIONED_COLUMNS if c != "enc_deg")
    cols = _read(path, CONDITIONED_COLUMNS, req)
    t = cols["t_s"]
    if len(t) > 1 and np.any(np.diff(t) <= 0):
        raise DataError(f"{path}: timestamps are not strictly increasing")
    meta_file = Path(path).with_suffix(".json")
    meta = json.loads(meta_file.read_text()) if meta_file.exists() else {}
    return ConditionedDataset(
        t,
        np.column_stack([cols["v_as"], cols["v_bs"], cols["v_cs"]]),
        cols.get("enc_deg"),
        cols["speed_rpm"],
        meta,
    )


def write_labeled(lt: LabeledTrace, path):
    _write(path, LABEL_COLUMNS,
           [lt.time, lt.volts[:, 0], lt.volts[:, 1], lt.volts[:, 2], lt.enc_deg, lt.speed_rpm, lt.vsn, lt.cycle,
            lt.global_idx, lt.sin_label, lt.cos_label],
           [_T, _V, _V, _V, _A, "%.6f", "%d", "%d", "%d", "%.12f", "%.12f"])


def read_labeled(path) -> LabeledTrace:
    cols = _read(path, LABEL_COLUMNS)
    return LabeledTrace(
        time=cols["t_s"],
        volts=np.column_stack([cols["v_as"], cols["v_bs"], cols["v_cs"]]),
        enc_deg=cols["enc_deg"],
        speed_rpm=cols["speed_rpm"],
        vsn=cols["vsn"].astype(np.int64),
        cycle=cols["cycle"].astype(np.int64),
        global_idx=cols["global_idx"].astype(np.int64),
        sin_label=cols["sin_label"],
        cos_label=cols["cos_label"],
        stats={},
    )


STATE_NAMES = ("successful", "unknown", "erroneous")


def write_estimates(est, path):
    """Write an :class:`~bldc_ann.estimation.EstimateTrace`; ``vsn_hat`` is 0
    for unknown estimates and ``speed_hat`` is empty before the first
    speed estimate."""
    names = np.array(STATE_NAMES)[est.state]
    with open(path, "w", newline="\n") as fh:
        fh.write(",".join(ESTIMATE_COLUMNS) + "\n")
        for row in zip(est.time, est.angle_true, est.angle_hat, est.vsn_true, est.vsn_hat, names, est.speed_true,
                       est.speed_hat):
            sh = "" if np.isnan(row[7]) else f"{row[7]:.6f}"
            ah = "" if np.isnan(row[2]) else f"{row[2]:.6f}"
            fh.write(f"{row[0]:.6f},{row[1]:.6f},{ah},{row[3]:d},{row[4]:d},{row[5]},{row[6]:.6f},{sh}\n")
