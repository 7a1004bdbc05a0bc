"""Command line: simulate -> label -> train -> eval -> run.

Exit codes: 0 success, 1 usage error, 2 data or configuration error,
3 runtime fault (simulation fault, training divergence, loss of lock).
Every file a subcommand writes lives under ``--output-dir``; file
arguments are names relative to it.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .conditioning import design_filters
from .config import ConfigError, RunConfig
from .datasets import (ConditionedDataset, DataError, read_conditioned, write_conditioned, write_estimates,
                       write_labeled, write_raw_trace)
from .estimation import (EstimationFault, LossOfLock, position_dataset, sensorless_loop, speed_dataset,
                         train_position_net, train_speed_net)
from .evaluation import constant_speed_profile, evaluate_speeds, write_tracking_data
from .mlp import Mlp, TrainingFault
from .motor import SimulationFault
from .simulator import ConfigError as SimConfigError
from .simulator import Simulator, SpeedProfile, run_profile
from .vsn import label_dataset

log = logging.getLogger("bldc_ann")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_FAULT = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _dump(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=True, default=_json_default) + "\n"


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    raise TypeError(f"cannot serialise {type(o).__name__}")


class Workspace:
    """Output directory guard: resolves names and refuses anything outside."""

    def __init__(self, root: str):
        self.root = Path(root).resolve()
        self.root.mkdir(parents=True, exist_ok=True)

    def path(self, name: str) -> Path:
        p = (self.root / name).resolve()
        if p != self.root and self.root not in p.parents:
            raise UsageError(f"{name!r} lies outside the output directory {self.root}")
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def write_config(self, cfg: RunConfig, command: str, args: dict):
        body = {"command": command, "arguments": args, "config": cfg.to_dict(), "version": __version__}
        self.path(f"{command}_config.json").write_text(_dump(body))


def _config(args) -> RunConfig:
    cfg = RunConfig.load(args.config)
    if getattr(args, "noise_sigma", None) is not None:
        cfg = cfg.override("simulation", noise_sigma=args.noise_sigma)
    return cfg


def _args_dict(args) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "verbose")}


# -- subcommands -------------------------------------------------------------------
def cmd_simulate(args) -> int:
    cfg = _config(args)
    ws = Workspace(args.output_dir)
    out = ws.path(args.out)
    profile = SpeedProfile.parse(args.profile, args.duration)
    trace = run_profile(profile, cfg.motor, args.seed, cfg.simulation, cfg.conditioning)
    ds = ConditionedDataset.from_trace(trace)
    ds.meta.update(profile=profile.to_dict(), seed=args.seed, pole_pairs=cfg.motor.pole_pairs,
                   acquisition_period=cfg.simulation.acquisition_period, ramp_time=cfg.simulation.ramp_time,
                   config=cfg.to_dict())
    write_conditioned(ds, out, out.with_suffix(".json"))
    if args.raw:
        write_raw_trace(trace, ws.path(args.raw))
    filt = design_filters(cfg.conditioning)
    ws.path("filter_coefficients.json").write_text(_dump(filt))
    ws.write_config(cfg, "simulate", _args_dict(args))
    print(f"wrote {len(ds)} samples to {out}")
    return EXIT_OK


def cmd_label(args) -> int:
    cfg = _config(args)
    ws = Workspace(args.output_dir)
    ds = read_conditioned(args.data, require_encoder=False)
    kp = ds.meta.get("pole_pairs", cfg.motor.pole_pairs)
    if ds.enc_deg is None:
        raise DataError(f"{args.data}: no encoder column, cannot label")
    lt = label_dataset(ds, kp)
    out = ws.path(args.out)
    write_labeled(lt, out)
    ws.path(Path(args.out).stem + "_stats.json").write_text(_dump(lt.stats))
    ws.write_config(cfg, "label", _args_dict(args))
    print(f"labeled {len(lt)} samples; {lt.stats['labels_present']}/{lt.stats['labels_total']} labels present")
    return EXIT_OK


def _parse_split(text: str) -> tuple[float, float, float]:
    try:
        parts = [float(v) for v in text.split(",")]
    except ValueError:
        raise UsageError(f"--split expects three numbers, got {text!r}") from None
    if len(parts) != 3 or min(parts) < 0 or sum(parts) <= 0:
        raise UsageError(f"--split expects three non-negative numbers, got {text!r}")
    s = sum(parts)
    return tuple(p / s for p in parts)


def _load_datasets(paths, skip):
    out = []
    for p in paths:
        ds = read_conditioned(p)
        acq = ds.meta.get("acquisition_period", float(np.median(np.diff(ds.time))) if len(ds) > 1 else 1e-5)
        t0 = ds.meta.get("ramp_time", 0.0) + skip
        keep = ds.time >= t0 - 1e-12
        out.append(ConditionedDataset(ds.time[keep], ds.volts[keep], ds.enc_deg[keep], ds.speed_rpm[keep],
                                      ds.meta))
    return out, acq


def cmd_train(args) -> int:
    cfg = _config(args)
    ws = Workspace(args.output_dir)
    section = "train_position" if args.target == "position" else "train_speed"
    split = _parse_split(args.split)
    cfg = cfg.override(section, learning_rate=args.lr, max_epochs=args.epochs, early_stop_patience=args.patience,
                       batch_size=args.batch_size, seed=args.seed, split_fractions=split)
    tcfg = getattr(cfg, section)
    data, acq = _load_datasets(args.data, args.skip)
    kp = data[0].meta.get("pole_pairs", cfg.motor.pole_pairs)
    out = ws.path(args.out)
    hist_path = out.with_name(out.stem + "_history.csv")
    try:
        if args.target == "position":
            ds, _ = position_dataset(data, cfg.estimator, kp, acq, args.max_examples, tcfg.seed)
            net, hist, test_cost = train_position_net(ds, tcfg, cfg.conditioning.clamp_range, acq,
                                                      cfg.estimator.frame)
        else:
            pos = Mlp.load(_existing(args.position_model)) if args.position_model else None
            ds = speed_dataset(data, pos, cfg.estimator, kp, acq)
            if ds.m < 10:
                raise DataError("too few VSN events in the data to train the speed network")
            net, hist, test_cost = train_speed_net(ds, tcfg)
            net.meta["events_from"] = "position model" if pos is not None else "encoder"
    except TrainingFault as exc:
        hist_path.write_text(exc.history.to_csv())
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_FAULT
    net.meta.update(split=list(split), pole_pairs=kp, estimator=cfg.estimator.to_dict(),
                    data=[str(p) for p in args.data])
    net.save(out)
    hist_path.write_text(hist.to_csv())
    ws.write_config(cfg, "train", _args_dict(args))
    print(f"topology {net.topology}; best validation cost {hist.best_val_cost:.6g} at epoch {hist.best_epoch}; "
          f"test cost {test_cost:.6g}")
    return EXIT_OK


def _existing(path: str) -> str:
    if not Path(path).exists():
        raise DataError(f"{path}: no such model file")
    return path


def _load_model(path, what) -> Mlp:
    try:
        return Mlp.load(_existing(path))
    except (KeyError, ValueError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: not a valid {what} model ({exc})") from None


def _parse_speeds(text: str) -> list[float]:
    items = [v for v in text.split(",") if v.strip()]
    if not items:
        raise UsageError("--speeds needs at least one speed")
    try:
        return [float(v) for v in items]
    except ValueError:
        raise UsageError(f"--speeds expects comma-separated numbers, got {text!r}") from None


def cmd_eval(args) -> int:
    speeds = _parse_speeds(args.speeds)
    cfg = _config(args)
    ws = Workspace(args.output_dir)
    pos = _load_model(args.position_model, "position")
    spd = _load_model(args.speed_model, "speed") if args.speed_model else None
    report, traces = evaluate_speeds(pos, spd, speeds, args.cycles, args.seed, cfg.estimator, cfg.simulation,
                                     params=cfg.motor, cond=cfg.conditioning, keep_traces=args.tracking)
    report.write(ws.root, "report")
    for rpm, est in traces.items():
        write_tracking_data(est, ws.path(f"tracking_{rpm:g}.dat"), stride=args.tracking_stride)
    ws.write_config(cfg, "eval", _args_dict(args))
    print(report.summary())
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = _config(args)
    ws = Workspace(args.output_dir)
    pos = None if args.oracle else _load_model(args.position_model, "position")
    spd = _load_model(args.speed_model, "speed") if args.speed_model else None
    duration = args.duration if args.duration is not None else args.cycles * 60.0 / args.speed
    prof, settle = constant_speed_profile(args.speed, (duration + 1.0) * args.speed / 60.0)
    sim = Simulator(cfg.motor, cfg.simulation, cfg.conditioning, args.seed)
    sim.set_profile(prof)
    sim.advance(int(round((cfg.simulation.ramp_time + settle) / cfg.simulation.acquisition_period)))
    status, code = "ok", EXIT_OK
    try:
        res = sensorless_loop(pos, spd, sim, duration, cfg.estimator)
    except LossOfLock as exc:
        res, status, code = exc.result, "loss-of-lock", EXIT_FAULT
        print(f"loss of lock after {res.mech_cycles:.1f} mechanical cycles", file=sys.stderr)
    write_estimates(res.estimates, ws.path(args.out))
    if args.trace:
        write_raw_trace(res.trace, ws.path(args.trace))
    summary = {"status": status, "mech_cycles": res.mech_cycles, "speed_rpm": args.speed, "duration_s": duration,
               "observer": res.meta.get("observer")}
    ws.path("run_status.json").write_text(_dump(summary))
    ws.write_config(cfg, "run", _args_dict(args))
    print(f"{status}: {res.mech_cycles:.1f} mechanical cycles")
    return code


# -- parser ----------------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="bldc-ann", description="Sensorless BLDC position and speed estimation with small MLPs.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def common(sp, seed=0):
        sp.add_argument("--config", help="JSON config with per-module sections")
        sp.add_argument("--seed", type=int, default=seed)
        sp.add_argument("--output-dir", default=".", help="directory for every file written (default: .)")
        sp.add_argument("--noise-sigma", type=float, help="measurement noise, fraction of the rated voltage")

    s = sub.add_parser("simulate", help="simulate a speed profile and write the conditioned dataset")
    common(s)
    s.add_argument("--profile", default="triangle", help="triangle | up-down | ramp-up[:rpm] | constant:rpm")
    s.add_argument("--duration", type=float, help="profile duration in s (after the start-up ramp)")
    s.add_argument("--out", default="dataset.csv")
    s.add_argument("--raw", help="also write the raw terminal-voltage trace to this file")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("label", help="attach VSN labels to a conditioned dataset")
    common(s)
    s.add_argument("--data", required=True)
    s.add_argument("--out", default="labeled.csv")
    s.set_defaults(func=cmd_label)

    s = sub.add_parser("train", help="train the position (10-5-2) or speed (21-10-1) network")
    common(s)
    s.add_argument("--data", required=True, nargs="+", help="conditioned dataset(s)")
    s.add_argument("--target", required=True, choices=("position", "speed"))
    s.add_argument("--position-model", help="speed target: take VSN events from this position model")
    s.add_argument("--split", default="40,10,50", help="train,validation,test percentages")
    s.add_argument("--lr", type=float)
    s.add_argument("--epochs", type=int)
    s.add_argument("--patience", type=int)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--max-examples", type=int, default=60_000, help="position target: speed-stratified subsample")
    s.add_argument("--skip", type=float, default=0.1, help="s of closed-loop data to drop after the start-up ramp")
    s.add_argument("--out", default="model.json")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="per-speed evaluation on simulated constant-speed runs")
    common(s)
    s.add_argument("--position-model", required=True)
    s.add_argument("--speed-model")
    s.add_argument("--speeds", default="125,175,325,475,600,725,850")
    s.add_argument("--cycles", type=float, default=500, help="mechanical cycles per speed")
    s.add_argument("--tracking", action="store_true", help="write tracking_<rpm>.dat plot files")
    s.add_argument("--tracking-stride", type=int, default=10)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("run", help="sensorless closed-loop run at a constant speed")
    common(s)
    s.add_argument("--position-model")
    s.add_argument("--speed-model")
    s.add_argument("--oracle", action="store_true", help="use the encoder as a perfect estimator")
    s.add_argument("--speed", type=float, default=850.0)
    s.add_argument("--cycles", type=float, default=100.0, help="mechanical cycles to run (if no --duration)")
    s.add_argument("--duration", type=float)
    s.add_argument("--out", default="estimates.csv")
    s.add_argument("--trace", help="also write the drive trace to this file")
    s.set_defaults(func=cmd_run)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(message)s")
    if args.command == "run" and not args.oracle and not args.position_model:
        parser.error("run needs --position-model (or --oracle)")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"bldc-ann: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, ConfigError, SimConfigError, EstimationFault, ValueError) as exc:
        print(f"bldc-ann: error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except SimulationFault as exc:
        print(f"bldc-ann: simulation fault: {exc}", file=sys.stderr)
        return EXIT_FAULT


if __name__ == "__main__":
    sys.exit(main())
