"""Command-line entry point: ``rachpred <command> [options]``.

Exit codes: 0 success, 2 configuration error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from . import analysis, pipeline
from .nn.model import save_checkpoint
from .nn.train import TrainingError
from .predict import DRIVERS, FLSP, run_stream
from .seeding import MAX_SEED
from .sim import ConfigError

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


def _seed(text):
    v = int(text, 0)
    if not 0 <= v <= MAX_SEED:
        raise argparse.ArgumentTypeError("seed must fit in 64 unsigned bits")
    return v


def _config(args):
    cfg = pipeline.load_config(args.config)
    over = {}
    if args.seed is not None:
        over["seed"] = args.seed
    stream = {k: v for k, v in (("l_f", args.lf), ("l_p", args.lp), ("l_buff", args.lbuff)) if v is not None}
    if stream:
        over["streaming"] = stream
    if getattr(args, "slots", None) is not None:
        over["total_slots"] = args.slots
    if args.command == "train-burst" and args.driver:
        over["burst_driver"] = args.driver
    return cfg.replace(**over) if over else cfg


def _out(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _log(msg):
    print(msg, file=sys.stderr, flush=True)


def _traces(args, cfg, role, count):
    if args.traces:
        return [pipeline.read_trace_csv(p, cfg.rach.slot_period)[0] for p in args.traces]
    _log(f"simulating {count} {role} traces of {pipeline.pool_slots(cfg, role)} slots")
    return pipeline.simulate_pool(cfg, role, count)


def cmd_simulate(args):
    cfg = _config(args)
    out = _out(args)
    man = pipeline.start_manifest(cfg, "simulate")
    trace = pipeline.simulate(cfg)
    path = out / "trace.csv"
    pipeline.write_trace_csv(path, trace, cfg)
    man.add("trace", path)
    man.write(out / "manifest.json")
    _log(f"wrote {len(trace)} slots to {path}")


def cmd_train(args):
    cfg = _config(args)
    out = _out(args)
    man = pipeline.start_manifest(cfg, "train")
    traces = _traces(args, cfg, "train", cfg.train_traces)
    params, history = pipeline.train_forecaster(traces, cfg, log=lambda e, l: _log(f"epoch {e} loss {l:.5f}"))
    save_checkpoint(params, out / "model.json")
    pipeline.write_loss_csv(out / "loss.csv", history)
    man.add("model", out / "model.json")
    man.add("loss", out / "loss.csv")
    man.write(out / "manifest.json")


def cmd_train_burst(args):
    cfg = _config(args)
    out = _out(args)
    man = pipeline.start_manifest(cfg, "train-burst")
    model = pipeline.load_model(args.checkpoint)
    traces = _traces(args, cfg, "train", cfg.train_traces)
    det, history = pipeline.train_detector(model, traces, cfg,
                                           log=lambda h: _log(f"epoch {h['epoch']} loss {h['loss']:.5f} f1 {h['f1']:.3f}"))
    det.save(out / "burst.json")
    with open(out / "burst_loss.csv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write("epoch,loss,precision,recall,f1\n")
        for h in history:
            fh.write(f"{h['epoch']},{h['loss']:.6e},{h['precision']:.6f},{h['recall']:.6f},{h['f1']:.6f}\n")
    man.add("burst", out / "burst.json")
    man.add("burst_loss", out / "burst_loss.csv")
    man.write(out / "manifest.json")


def cmd_predict(args):
    cfg = _config(args)
    out = _out(args)
    man = pipeline.start_manifest(cfg, "predict")
    model = pipeline.load_model(args.checkpoint)
    trace, _, _ = pipeline.read_trace_csv(args.trace, cfg.rach.slot_period)
    if len(trace) < cfg.streaming.l_hist:
        raise ConfigError(f"trace has {len(trace)} slots, history needs {cfg.streaming.l_hist}")
    session = run_stream(model, pipeline.features(trace, cfg), cfg.streaming, args.driver,
                         float(cfg.rach.preamble_count))
    pipeline.write_predictions_csv(out / "predictions.csv", session)
    pipeline.write_chunks_csv(out / "chunks.csv", session)
    arch = analysis.arch_of(model)
    report = analysis.cost_report(arch, cfg.streaming).to_dict()
    report["measured"] = dataclasses.asdict(analysis.empirical_cost(session))
    report["driver"] = args.driver
    pipeline.write_json(out / "cost.json", report)
    for name, fname in (("predictions", "predictions.csv"), ("chunks", "chunks.csv"), ("cost", "cost.json")):
        man.add(name, out / fname)
    man.write(out / "manifest.json")


def cmd_evaluate(args):
    cfg = _config(args)
    out = _out(args)
    man = pipeline.start_manifest(cfg, "evaluate")
    doc = pipeline.evaluate_files(args.chunks, args.trace, args.burst, args.predictions, cfg, out)
    for name in ("metrics.json", "decisions.csv", "plot_bursts.csv", "plot_traffic.csv"):
        man.add(name.split(".")[0], out / name)
    man.write(out / "manifest.json")
    m = doc["metrics"]
    print(f"precision {m['precision']:.4f} recall {m['recall']:.4f} f1 {m['f1']:.4f}")


def cmd_flops(args):
    cfg = _config(args)
    if args.arch:
        with open(args.arch, encoding="utf-8") as fh:
            arch = analysis.ArchDescriptor.from_dict(json.load(fh))
    else:
        arch = analysis.reference_arch(args.reference)
    report = analysis.cost_report(arch, cfg.streaming)
    if args.format == "json":
        sys.stdout.write(pipeline.dumps(report.to_dict(), digits=None))
    else:
        print(report.table())


def cmd_compare_drivers(args):
    cfg = _config(args)
    out = _out(args)
    man = pipeline.start_manifest(cfg, "compare-drivers")
    model = pipeline.load_model(args.checkpoint)
    traces = _traces(args, cfg, "test", cfg.test_traces)
    buffers = [int(b) for b in args.buffers.split(",")] if args.buffers else [100, 200, 400, 800]
    res = pipeline.compare_drivers(model, traces, cfg, buffers)
    pipeline.write_json(out / "compare.json", res)
    man.add("compare", out / "compare.json")
    man.write(out / "manifest.json")
    leads = sorted(next(iter(res.values())))
    print("driver".ljust(14) + "".join(f"{f'{T:g}s':>10}" for T in leads))
    for name, row in res.items():
        print(name.ljust(14) + "".join(f"{row[T]:10.3f}" for T in leads))


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config JSON (a run manifest also works)")
    common.add_argument("--seed", type=_seed, help="64-bit master seed")
    common.add_argument("--lf", type=int, help="fresh slots per step")
    common.add_argument("--lp", type=int, help="recursive prediction horizon in slots")
    common.add_argument("--lbuff", type=int, help="rolling buffer length in slots")
    common.add_argument("--out", default=".", help="output directory")

    p = argparse.ArgumentParser(prog="rachpred", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", parents=[common], help="simulate one RACH trace")
    s.add_argument("--slots", type=int, help="override the trace length")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("train", parents=[common], help="train the traffic forecaster")
    s.add_argument("--traces", nargs="*", help="trace CSVs (default: simulate from the seed)")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("train-burst", parents=[common], help="train the congestion detector")
    s.add_argument("--checkpoint", required=True, help="forecaster model.json")
    s.add_argument("--traces", nargs="*", help="trace CSVs (default: simulate from the seed)")
    s.add_argument("--driver", choices=DRIVERS, default=None, help="driver producing training chunks")
    s.set_defaults(func=cmd_train_burst)

    s = sub.add_parser("predict", parents=[common], help="stream forecasts over a trace")
    s.add_argument("--checkpoint", required=True, help="forecaster model.json")
    s.add_argument("--trace", required=True, help="trace CSV to stream")
    s.add_argument("--driver", choices=DRIVERS, default=FLSP)
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("evaluate", parents=[common], help="score congestion decisions")
    s.add_argument("--chunks", required=True, help="chunks.csv written by predict")
    s.add_argument("--trace", required=True, help="trace CSV holding the labels")
    s.add_argument("--burst", required=True, help="detector burst.json")
    s.add_argument("--predictions", help="predictions.csv, adds forecast traffic to the plot data")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("flops", parents=[common], help="parameter and FLOP report")
    s.add_argument("--arch", help="ArchDescriptor JSON")
    s.add_argument("--reference", choices=("lstm", "gru"), default="lstm")
    s.add_argument("--format", choices=("table", "json"), default="table")
    s.set_defaults(func=cmd_flops)

    s = sub.add_parser("compare-drivers", parents=[common], help="forecast MSE of FLSP vs rolling")
    s.add_argument("--checkpoint", required=True, help="forecaster model.json")
    s.add_argument("--traces", nargs="*", help="trace CSVs (default: simulate the test pool)")
    s.add_argument("--buffers", help="comma-separated rolling buffer sizes")
    s.set_defaults(func=cmd_compare_drivers)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.func(args)
    except ConfigError as exc:
        _log(f"config error: {exc}")
        return EXIT_CONFIG
    except (TrainingError, FloatingPointError) as exc:
        _log(f"numeric failure: {exc}")
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
