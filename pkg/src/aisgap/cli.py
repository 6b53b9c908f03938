"""Operator CLI wiring the pipeline stages together.

Subcommands mirror the three processes of the system: data collection
(simulate, decode), dataset construction and training (build-dataset,
train, eval, ablate) and live operation (detect). Every command is
reproducible from its config and seed; configs are echoed into output
artifacts. Exit codes: 0 success, 1 usage, 2 data error, 3 internal.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import sys
import time

import numpy as np

from . import dataset as ds_mod
from . import detector as det_mod
from . import features as feat_mod
from . import model as model_mod
from . import nmea, sim
from .errors import AisGapError
from .geo import GeoPoint, PortIndex, load_ports_csv, save_ports_csv

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _load_config(path) -> dict:
    if path is None:
        return {}
    with open(path) as f:
        return json.load(f)


def _open_in(path):
    return sys.stdin if path in (None, "-") else open(path)


def _open_out(path):
    return sys.stdout if path in (None, "-") else open(path, "w")


def _ports_index(args, cfg: dict) -> PortIndex:
    path = args.ports or cfg.get("ports")
    if not path:
        raise AisGapError("a ports CSV is required (--ports)")
    return PortIndex(load_ports_csv(path),
                     cell_size_deg=cfg.get("port_cell_deg", 1.0))


# --- subcommands ----------------------------------------------------------

def cmd_decode(args, cfg: dict) -> int:
    counters = nmea.DecodeCounters()
    fin = _open_in(args.infile)
    fout = _open_out(args.out)
    try:
        for report in nmea.decode_stream(fin, counters):
            fout.write(nmea.report_to_json(report) + "\n")
    finally:
        if fin is not sys.stdin:
            fin.close()
        if fout is not sys.stdout:
            fout.close()
    print(f"decoded {counters.reports} reports from {counters.lines} lines "
          f"({counters.skipped_types} non-dynamic, {counters.unavailable} "
          f"unavailable, {counters.errors} errors)", file=sys.stderr)
    return EXIT_OK


def _scenario_from_config(cfg: dict, seed: int | None) -> sim.ScenarioConfig:
    sc = dict(cfg.get("scenario", cfg))
    if seed is not None:
        sc["seed"] = seed
    for key, cls in (("mix", sim.MovementMix), ("coverage", sim.CoverageModel),
                     ("shutdown", sim.ShutdownModel)):
        if key in sc and isinstance(sc[key], dict):
            sc[key] = cls(**sc[key])
    if "ports" in sc and sc["ports"]:
        sc["ports"] = tuple(GeoPoint(p[0], p[1]) for p in sc["ports"])
    allowed = {f.name for f in dataclasses.fields(sim.ScenarioConfig)}
    unknown = set(sc) - allowed
    if unknown:
        raise AisGapError(f"unknown scenario fields: {sorted(unknown)}")
    return sim.ScenarioConfig(**sc)


def cmd_simulate(args, cfg: dict) -> int:
    scenario = _scenario_from_config(cfg, args.seed)
    lines, truth = sim.generate(scenario)
    prefix = args.out
    with open(f"{prefix}.nmea", "w") as f:
        for line in lines:
            f.write(line + "\n")
    sim.write_truth(f"{prefix}.truth.jsonl", truth)
    save_ports_csv(f"{prefix}.ports.csv", sim.scenario_ports(scenario))
    with open(f"{prefix}.config.json", "w") as f:
        json.dump({"scenario": _jsonable(scenario)}, f, indent=2)
    print(f"wrote {len(lines)} received messages, {len(truth.shutdowns)} "
          f"shutdowns -> {prefix}.nmea", file=sys.stderr)
    return EXIT_OK


def _jsonable(obj):
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return {k: _jsonable(v) for k, v in dataclasses.asdict(obj).items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def _dataset_config(args, cfg: dict) -> ds_mod.DatasetConfig:
    d = dict(cfg.get("dataset", {}))
    if args.tau is not None:
        d["tau_s"] = args.tau
    if args.window is not None:
        d["w"] = args.window
    if args.seed is not None:
        d["seed"] = args.seed
    if getattr(args, "size", None) is not None:
        d["target_size"] = args.size
    return ds_mod.DatasetConfig(**d)


def cmd_build_dataset(args, cfg: dict) -> int:
    ports = _ports_index(args, cfg)
    dcfg = _dataset_config(args, cfg)
    with _open_in(args.infile) as f:
        reports = [nmea.report_from_json(line) for line in f if line.strip()]
    trajs = feat_mod.assemble(reports, ports)
    period_end = args.period_end if args.period_end is not None else \
        max((float(tr.t[-1]) for tr in trajs.values()), default=0.0)
    built = ds_mod.build_dataset(trajs, dcfg, period_end)
    ds_mod.save_dataset(args.out, built)
    print(ds_mod.format_stats(ds_mod.dataset_stats(built)))
    print(f"wrote {len(built)} samples -> {args.out}", file=sys.stderr)
    return EXIT_OK


def cmd_train(args, cfg: dict) -> int:
    train_ds = ds_mod.load_dataset(args.train)
    val_ds = ds_mod.load_dataset(args.val)
    mcfg_d = dict(cfg.get("model", {}))
    mcfg_d.setdefault("w", train_ds.config.w)
    mcfg_d.setdefault("tau_s", train_ds.config.tau_s)
    if "head_dims" in mcfg_d:
        mcfg_d["head_dims"] = tuple(mcfg_d["head_dims"])
    mcfg = model_mod.ModelConfig(**mcfg_d)
    tcfg_d = dict(cfg.get("train", {}))
    if args.seed is not None:
        tcfg_d["seed"] = args.seed
    tcfg = model_mod.TrainConfig(**tcfg_d)
    model = model_mod.build_model(mcfg, seed=tcfg.seed)
    print(f"model: {model.param_count()} trainable parameters", file=sys.stderr)
    train_arrays = _encode(train_ds)
    val_arrays = _encode(val_ds)
    result = model_mod.train(model, train_arrays, val_arrays, tcfg,
                             verbose=not args.quiet)
    model_mod.save_checkpoint(model, args.out)
    if args.history:
        with open(args.history, "w") as f:
            f.write("epoch,train_loss,val_loss\n")
            for row in result.history:
                f.write(f"{row['epoch']},{row['train_loss']},{row['val_loss']}\n")
    print(f"best epoch {result.best_epoch} (val loss {result.best_val_loss:.5f})"
          f" -> {args.out}", file=sys.stderr)
    return EXIT_OK


def _encode(built: ds_mod.Dataset):
    from .encoding import encode_dataset
    return encode_dataset(built)


def cmd_eval(args, cfg: dict) -> int:
    model = model_mod.load_checkpoint(args.checkpoint)
    test_ds = ds_mod.load_dataset(args.test)
    report = model_mod.evaluate(model, _encode(test_ds))
    print(report.as_text())
    if args.out:
        with open(args.out, "w") as f:
            f.write("tp,fp,fn,tn,accuracy,ppv,npv\n")
            f.write(f"{report.tp},{report.fp},{report.fn},{report.tn},"
                    f"{report.accuracy},{report.ppv},{report.npv}\n")
    return EXIT_OK


def _follow_lines(path, poll_s: float = 0.25):
    with open(path) as f:
        while True:
            line = f.readline()
            if line:
                yield line
            else:
                time.sleep(poll_s)


def cmd_detect(args, cfg: dict) -> int:
    model = model_mod.load_checkpoint(args.checkpoint)
    ports = _ports_index(args, cfg)
    det_d = dict(cfg.get("detector", {}))
    if args.tau is not None:
        det_d["tau_s"] = args.tau
    det_d.setdefault("tau_s", model.cfg.tau_s)
    det_d.setdefault("w", model.cfg.w)
    dcfg = det_mod.DetectorConfig(**det_d)
    lines = _follow_lines(args.infile) if args.follow else _open_in(args.infile)
    reports = nmea.decode_stream(lines)
    engine = det_mod.StreamDetector(model, ports, dcfg)
    fout = _open_out(args.out)
    try:
        fout.write(json.dumps({"type": "config", "detector": _jsonable(dcfg),
                               "model": _jsonable(model.cfg)}) + "\n")
        for record in engine.run(reports):
            fout.write(json.dumps(record) + "\n")
            if args.follow:
                fout.flush()
    finally:
        if fout is not sys.stdout:
            fout.close()
        if not args.follow and lines is not sys.stdin:
            lines.close()
    c = engine.counters
    print(f"{c.messages} messages, {c.predictions} predictions, "
          f"{c.alerts} alerts, {c.model_errors} model errors", file=sys.stderr)
    return EXIT_OK


def cmd_ablate(args, cfg: dict) -> int:
    train_trajs = feat_mod.read_trajectories(args.train_trajectories)
    test_trajs = feat_mod.read_trajectories(args.test_trajectories)
    dcfg = ds_mod.DatasetConfig(**cfg.get("dataset", {}))
    mcfg_d = dict(cfg.get("model", {}))
    if "head_dims" in mcfg_d:
        mcfg_d["head_dims"] = tuple(mcfg_d["head_dims"])
    mcfg = model_mod.ModelConfig(**mcfg_d)
    tcfg_d = dict(cfg.get("train", {}))
    if args.seed is not None:
        tcfg_d["seed"] = args.seed
    tcfg = model_mod.TrainConfig(**tcfg_d)
    ctx = model_mod.AblationContext(
        train_trajs=train_trajs, test_trajs=test_trajs,
        train_period_end=max(float(tr.t[-1]) for tr in train_trajs.values()),
        test_period_end=max(float(tr.t[-1]) for tr in test_trajs.values()),
        dataset_cfg=dcfg, model_cfg=mcfg, train_cfg=tcfg)
    grid = _parse_grid(args.axis, args.grid)
    rows = model_mod.ablation_run(args.axis, grid, ctx, verbose=not args.quiet)
    model_mod.write_ablation_csv(rows, args.out, config_echo={
        "axis": args.axis, "grid": grid, "dataset": _jsonable(dcfg),
        "model": _jsonable(mcfg), "train": _jsonable(tcfg)})
    print(f"wrote {len(rows)} grid rows -> {args.out}", file=sys.stderr)
    return EXIT_OK


def _parse_grid(axis: str, text: str) -> list:
    items = [s.strip() for s in text.split(",") if s.strip()]
    if axis == "architecture":
        return items
    if axis == "horizon":
        return [float(s) for s in items]
    return [int(s) for s in items]


# --- parser ----------------------------------------------------------------

def make_parser() -> _Parser:
    p = _Parser(prog="aisgap",
                description="AIS missing-reception anomaly pipeline")
    p.add_argument("--config", help="JSON config file; flags override it")
    sub = p.add_subparsers(dest="command", required=True)

    d = sub.add_parser("decode", help="raw NMEA -> JSONL position reports")
    d.add_argument("--in", dest="infile", help="input file or - for stdin")
    d.add_argument("--out", help="output JSONL (default stdout)")
    d.set_defaults(func=cmd_decode)

    s = sub.add_parser("simulate", help="synthetic scenario -> NMEA + truth")
    s.add_argument("--out", required=True, help="output path prefix")
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_simulate)

    b = sub.add_parser("build-dataset", help="reports JSONL -> balanced dataset")
    b.add_argument("--in", dest="infile", required=True)
    b.add_argument("--out", required=True)
    b.add_argument("--ports", help="ports CSV (label,lat,lon)")
    b.add_argument("--tau", type=float)
    b.add_argument("--window", type=int)
    b.add_argument("--size", type=int, help="target sample count")
    b.add_argument("--seed", type=int)
    b.add_argument("--period-end", type=float, dest="period_end")
    b.set_defaults(func=cmd_build_dataset)

    t = sub.add_parser("train", help="train on a dataset, write a checkpoint")
    t.add_argument("--train", required=True)
    t.add_argument("--val", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--history", help="training history CSV")
    t.add_argument("--seed", type=int)
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--test", required=True)
    e.add_argument("--out", help="metrics CSV")
    e.set_defaults(func=cmd_eval)

    de = sub.add_parser("detect", help="stream NMEA through the detector")
    de.add_argument("--checkpoint", required=True)
    de.add_argument("--in", dest="infile", required=True)
    de.add_argument("--out", help="alerts JSONL (default stdout)")
    de.add_argument("--ports")
    de.add_argument("--tau", type=float)
    de.add_argument("--follow", action="store_true",
                    help="tail a growing file instead of replaying")
    de.set_defaults(func=cmd_detect)

    a = sub.add_parser("ablate", help="robustness grid along one axis")
    a.add_argument("--axis", required=True, choices=model_mod.ABLATION_AXES)
    a.add_argument("--grid", required=True, help="comma-separated grid values")
    a.add_argument("--train-trajectories", required=True)
    a.add_argument("--test-trajectories", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--seed", type=int)
    a.add_argument("--quiet", action="store_true")
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        cfg = _load_config(args.config)
        return args.func(args, cfg)
    except (AisGapError, FileNotFoundError, json.JSONDecodeError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except KeyboardInterrupt:
        return EXIT_INTERNAL
    except Exception as e:  # pragma: no cover - defensive
        print(f"internal error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
