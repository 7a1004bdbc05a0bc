"""Metrics and per-speed reports.

The VSN classifier may abstain (an "unknown" estimate), so the confusion
counts treat abstentions as misses: per class, a successful estimate is a
true positive, an erroneous one a false positive for the predicted class
and a false negative for the true class, and an unknown one a false
negative only. Aggregation over the twelve classes is micro-averaged,
which gives P = s / (s + e) and R = s / n.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .estimation import EstimateTrace, EstimatorConfig, Estimator, StateClass
from .mlp import Mlp
from .simulator import SimConfig, Simulator, SpeedProfile

N_CLASSES = 12


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise ValueError("confusion counts must be non-negative")

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)

    @property
    def precision(self) -> float:
        d = self.tp + self.fp
        return self.tp / d if d else 0.0

    @property
    def recall(self) -> float:
        d = self.tp + self.fn
        return self.tp / d if d else 0.0


def f_score(counts: ConfusionCounts) -> float:
    """Harmonic mean of precision and recall; 0 when both are 0."""
    p, r = counts.precision, counts.recall
    return 0.0 if p + r == 0 else 2.0 * p * r / (p + r)


def confusion_counts(state, vsn_true, vsn_hat) -> tuple[ConfusionCounts, list[ConfusionCounts]]:
    """Micro-aggregate and per-class (VSN 1..12) counts."""
    state = np.asarray(state)
    vt = np.asarray(vsn_true)
    vh = np.asarray(vsn_hat)
    n = len(state)
    succ = state == StateClass.SUCCESSFUL
    err = state == StateClass.ERRONEOUS
    per = []
    for c in range(1, N_CLASSES + 1):
        tp = int(np.sum(succ & (vt == c)))
        fp = int(np.sum(err & (vh == c)))
        fn = int(np.sum(~succ & (vt == c)))
        per.append(ConfusionCounts(tp, fp, fn, n - tp - fp - fn))
    total = ConfusionCounts(0, 0, 0, 0)
    for c in per:
        total = total + c
    return total, per


def _micro(s: float, e: float, u: float) -> float:
    """F from (possibly weighted) state counts."""
    p = s / (s + e) if s + e else 0.0
    r = s / (s + e + u) if s + e + u else 0.0
    return 0.0 if p + r == 0 else 2.0 * p * r / (p + r)


def mae(estimates, targets) -> float:
    a = np.asarray(estimates, dtype=float)
    b = np.asarray(targets, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape} vs {b.shape}")
    if a.size == 0:
        raise ValueError("mae of an empty vector")
    return float(np.mean(np.abs(a - b)))


def wrapped_difference(a, b, period: float = 360.0):
    d = (np.asarray(a, dtype=float) - np.asarray(b, dtype=float)) % period
    return np.minimum(d, period - d)


def angular_mae(estimates, targets, period: float = 360.0) -> float:
    a = np.asarray(estimates, dtype=float)
    b = np.asarray(targets, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape} vs {b.shape}")
    if a.size == 0:
        raise ValueError("mae of an empty vector")
    return float(np.mean(wrapped_difference(a, b, period)))


class RunAccumulator:
    """Running sums for one speed, fed with estimate-trace chunks."""

    def __init__(self, pole_pairs: int):
        self.pole_pairs = pole_pairs
        self.n = 0
        self.states = np.zeros(3, dtype=np.int64)
        self.counts = ConfusionCounts(0, 0, 0, 0)
        self.angle_n = 0
        self.err_mech = 0.0
        self.err_elec = 0.0
        self.speed_n = 0
        self.speed_abs = 0.0
        self.speed_true_sum = 0.0
        self.turned = 0.0
        self._last_angle = None

    def add(self, est: EstimateTrace):
        if len(est) == 0:
            return
        self.n += len(est)
        self.states += np.bincount(est.state, minlength=3)[:3]
        total, _ = confusion_counts(est.state, est.vsn_true, est.vsn_hat)
        self.counts = self.counts + total
        ok = np.isfinite(est.angle_hat)
        self.angle_n += int(ok.sum())
        d = wrapped_difference(est.angle_hat[ok], est.angle_true[ok])
        self.err_mech += float(d.sum())
        de = wrapped_difference(est.angle_hat[ok] * self.pole_pairs % 360.0,
                                est.angle_true[ok] * self.pole_pairs % 360.0)
        self.err_elec += float(de.sum())
        sp = np.isfinite(est.speed_hat)
        self.speed_n += int(sp.sum())
        self.speed_abs += float(np.abs(est.speed_hat[sp] - est.speed_true[sp]).sum())
        self.speed_true_sum += float(est.speed_true[sp].sum())
        a = est.angle_true if self._last_angle is None else np.concatenate([[self._last_angle], est.angle_true])
        self.turned += float(np.sum((np.diff(a) + 180.0) % 360.0 - 180.0)) / 360.0
        self._last_angle = float(est.angle_true[-1])

    def row(self, speed_rpm: float) -> "EvalRow":
        if self.n == 0:
            return EvalRow.empty(speed_rpm, self.pole_pairs)
        s, u, e = (int(v) for v in self.states)
        mae_mech = self.err_mech / self.angle_n if self.angle_n else math.nan
        spd_mae = self.speed_abs / self.speed_n if self.speed_n else math.nan
        mean_true = self.speed_true_sum / self.speed_n if self.speed_n else math.nan
        return EvalRow(
            speed_rpm=float(speed_rpm),
            estimates=self.n,
            mech_cycles=self.turned,
            f_score=f_score(self.counts),
            accuracy=s / self.n,
            successful=s / self.n,
            unknown=u / self.n,
            erroneous=e / self.n,
            mae_mech_deg=mae_mech,
            mae_elec_deg=self.err_elec / self.angle_n if self.angle_n else math.nan,
            mae_mech_per_pole_pair=mae_mech / self.pole_pairs,
            speed_mae_rpm=spd_mae,
            speed_rel_err_pct=100.0 * spd_mae / mean_true if mean_true else math.nan,
            counts=asdict(self.counts),
            pole_pairs=self.pole_pairs,
        )


@dataclass
class EvalRow:
    speed_rpm: float
    estimates: int
    mech_cycles: float
    f_score: float
    accuracy: float  # successful fraction
    successful: float
    unknown: float
    erroneous: float
    mae_mech_deg: float
    mae_elec_deg: float  # wrapped electrical error (mechanical x K_p)
    mae_mech_per_pole_pair: float  # mechanical MAE / K_p, the other unit pairing in use
    speed_mae_rpm: float
    speed_rel_err_pct: float
    counts: dict = field(default_factory=dict)
    pole_pairs: int = 8
    flagged: str = ""

    @classmethod
    def empty(cls, speed_rpm, pole_pairs):
        nan = math.nan
        return cls(float(speed_rpm), 0, 0.0, nan, nan, nan, nan, nan, nan, nan, nan, nan, nan, {}, pole_pairs,
                   "empty trace")


REPORT_COLUMNS = ("speed_rpm", "estimates", "mech_cycles", "f_score", "accuracy", "successful", "unknown",
                  "erroneous", "mae_mech_deg", "mae_elec_deg", "mae_mech_per_pole_pair", "speed_mae_rpm",
                  "speed_rel_err_pct", "flagged")


@dataclass
class EvalReport:
    rows: list[EvalRow]
    aggregate: EvalRow
    pooled: EvalRow
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "f_score_aggregation": "micro",
            "aggregate_weighting": "per speed, proportional to mechanical cycles",
            "rows": [asdict(r) for r in self.rows],
            "aggregate": asdict(self.aggregate),
            "pooled": asdict(self.pooled),
            "meta": self.meta,
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("# f_score micro-averaged over 12 VSN classes; unknown estimates count as misses\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("row",) + REPORT_COLUMNS)
        for name, r in [("speed", r) for r in self.rows] + [("aggregate", self.aggregate), ("pooled", self.pooled)]:
            w.writerow([name] + [_fmt(getattr(r, c)) for c in REPORT_COLUMNS])
        return buf.getvalue()

    def write(self, directory, stem: str = "report"):
        d = Path(directory)
        (d / f"{stem}.csv").write_text(self.to_csv())
        (d / f"{stem}.json").write_text(json.dumps(_clean(self.to_dict()), indent=1, sort_keys=True) + "\n")

    def summary(self) -> str:
        lines = [f"{'rpm':>7} {'F':>6} {'succ':>6} {'unk':>6} {'err':>6} {'MAE mech':>9} {'MAE elec':>9} "
                 f"{'spd MAE':>8} {'spd %':>6}"]
        for r in self.rows + [self.aggregate]:
            label = f"{r.speed_rpm:7.0f}" if r is not self.aggregate else "    all"
            if r.flagged:
                lines.append(f"{label}  ({r.flagged})")
                continue
            lines.append(f"{label} {r.f_score:6.3f} {r.successful:6.3f} {r.unknown:6.3f} {r.erroneous:6.3f} "
                         f"{r.mae_mech_deg:9.3f} {r.mae_elec_deg:9.3f} {r.speed_mae_rpm:8.2f} "
                         f"{r.speed_rel_err_pct:6.2f}")
        return "\n".join(lines)


def _fmt(v):
    if isinstance(v, float):
        return "" if math.isnan(v) else f"{v:.6f}"
    return v


def _clean(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    return obj


def _combine(rows: list[EvalRow], weights: list[float], pole_pairs: int) -> EvalRow:
    """Weighted combination of rows; weights apply per estimate."""
    rows_w = [(r, w) for r, w in zip(rows, weights) if not r.flagged and r.estimates]
    if not rows_w:
        return EvalRow.empty(math.nan, pole_pairs)
    W = sum(w * r.estimates for r, w in rows_w)

    def avg(name):
        vals = [(getattr(r, name), w * r.estimates) for r, w in rows_w if math.isfinite(getattr(r, name))]
        tot = sum(x for _, x in vals)
        return sum(v * x for v, x in vals) / tot if tot else math.nan

    s, u, e = avg("successful"), avg("unknown"), avg("erroneous")
    spd_true = [(r.speed_mae_rpm / (r.speed_rel_err_pct / 100.0), w * r.estimates) for r, w in rows_w
                if math.isfinite(r.speed_rel_err_pct) and r.speed_rel_err_pct > 0]
    mean_true = sum(v * x for v, x in spd_true) / sum(x for _, x in spd_true) if spd_true else math.nan
    smae = avg("speed_mae_rpm")
    mae_mech = avg("mae_mech_deg")
    return EvalRow(
        speed_rpm=math.nan,
        estimates=sum(r.estimates for r, _ in rows_w),
        mech_cycles=sum(r.mech_cycles for r, _ in rows_w),
        f_score=_micro(s, e, u),
        accuracy=s,
        successful=s,
        unknown=u,
        erroneous=e,
        mae_mech_deg=mae_mech,
        mae_elec_deg=avg("mae_elec_deg"),
        mae_mech_per_pole_pair=mae_mech / pole_pairs,
        speed_mae_rpm=smae,
        speed_rel_err_pct=100.0 * smae / mean_true if mean_true else math.nan,
        counts={k: sum(r.counts.get(k, 0) for r, _ in rows_w) for k in ("tp", "fp", "fn", "tn")},
        pole_pairs=pole_pairs,
    ) if W else EvalRow.empty(math.nan, pole_pairs)


def report_from_rows(rows: list[EvalRow], pole_pairs: int, meta: dict | None = None) -> EvalReport:
    """Aggregate row weighting each speed by its mechanical cycles, plus the
    sample-pooled row."""
    good = [r for r in rows if not r.flagged and r.estimates]
    cyc_w = [r.mech_cycles / r.estimates if r.estimates else 0.0 for r in rows]
    agg = _combine(rows, cyc_w, pole_pairs) if good else EvalRow.empty(math.nan, pole_pairs)
    pooled = _combine(rows, [1.0] * len(rows), pole_pairs) if good else EvalRow.empty(math.nan, pole_pairs)
    return EvalReport(rows, agg, pooled, dict(meta or {}))


def per_speed_report(runs: Mapping[float, EstimateTrace], pole_pairs: int | None = None,
                     meta: dict | None = None) -> EvalReport:
    rows = []
    for speed, est in sorted(runs.items()):
        kp = pole_pairs or est.pole_pairs
        acc = RunAccumulator(kp)
        acc.add(est)
        rows.append(acc.row(speed))
    kp = pole_pairs or (next(iter(runs.values())).pole_pairs if runs else 8)
    return report_from_rows(rows, kp, meta)


def constant_speed_profile(rpm: float, mech_cycles: float, settle: float = 0.5):
    """Profile reaching ``rpm`` then holding it for ``mech_cycles``
    revolutions after a ``settle`` interval; returns (profile, time after
    handoff from which to evaluate)."""
    base = SpeedProfile.constant(rpm, 1.0)
    t_acc = base.setpoints[1][0]
    hold = settle + mech_cycles * 60.0 / rpm
    return SpeedProfile.constant(rpm, hold), t_acc + settle


def evaluate_speeds(pos_net: Mlp, speed_net: Mlp | None, speeds: Iterable[float], mech_cycles: float = 500,
                    seed: int = 0, cfg: EstimatorConfig | None = None, sim: SimConfig | None = None,
                    settle: float = 0.5, params=None, cond=None, keep_traces: bool = False):
    """Encoder-commutated constant-speed runs, estimated and scored in a
    single streaming pass per speed. Speed ``i`` uses seed ``seed + i``.

    Returns the report and a dict of estimate traces (filled only with
    ``keep_traces``).
    """
    speeds = [float(v) for v in speeds]
    if not speeds:
        raise ValueError("no speeds to evaluate")
    rows, traces = [], {}
    kp = None
    for i, rpm in enumerate(speeds):
        bench = Simulator(params, sim, cond, seed + i)
        kp = bench.params.pole_pairs
        prof, t_eval = constant_speed_profile(rpm, mech_cycles, settle)
        bench.set_profile(prof)
        start = bench.sim.ramp_time + t_eval
        total = int(round((bench.sim.ramp_time + prof.duration) / bench.sim.acquisition_period))
        est = Estimator(pos_net, speed_net, cfg, kp, bench.sim.acquisition_period)
        acc = RunAccumulator(kp)
        kept = []
        for chunk in bench.stream(total):
            e = est.process(chunk.time, chunk.conditioned, chunk.enc_deg, chunk.speed_rpm)
            e = e.select(e.time >= start - 1e-12)
            acc.add(e)
            if keep_traces:
                kept.append(e)
        rows.append(acc.row(rpm))
        if keep_traces:
            traces[rpm] = EstimateTrace.concat(kept) if kept else EstimateTrace.empty(kp)
    meta = {"mech_cycles_requested": mech_cycles, "seed": seed, "settle_s": settle,
            "estimator": (cfg or EstimatorConfig()).to_dict()}
    return report_from_rows(rows, kp, meta), traces


def write_tracking_data(est: EstimateTrace, path, stride: int = 1):
    """Whitespace-separated columns for plotting: t, true and estimated
    angle, true and estimated speed."""
    with open(path, "w") as fh:
        fh.write("# t_s angle_true angle_hat speed_true speed_hat\n")
        for i in range(0, len(est), stride):
            fh.write(f"{est.time[i]:.6f} {est.angle_true[i]:.4f} {est.angle_hat[i]:.4f} "
                     f"{est.speed_true[i]:.3f} {est.speed_hat[i]:.3f}\n")
