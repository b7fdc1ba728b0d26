"""Command-line entry point.

Every command writes its artifact atomically and a ``<out>.manifest.json`` next
to it recording the resolved arguments. ``ldmquant rerun MANIFEST`` replays a
manifest and must reproduce the artifact byte for byte.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from . import __version__, formats
from .diffusion import DEFAULT_GUIDANCE, DEFAULT_T, make_scheduler
from .graph import ModuleGraph, build_toy_unet, graph_from_obj, graph_to_obj, load_graph, save_graph
from .planner import HybridPlan, make_plan, plan_report, render_report, report_json
from .quantizer import PRESETS, CalibrationTable, PrecisionConfig, apply_config, calibrate, parse_format_pair
from .sensitivity import DEFAULT_TOP_K, BlockSweepCurve, block_sweep, rank_modules, select_cut_block
from .smoothing import DEFAULT_ALPHA, scales_csv, smooth_selected, smoothed_nodes
from .sqnr import time_averaged_output_sqnr

SEED_ENV = "LDMQUANT_SEED"
MANIFEST_FORMAT = "ldmquant.manifest"
QGRAPH_FORMAT = "ldmquant.qgraph"


class CliError(Exception):
    pass


def _default_seed() -> int:
    raw = os.environ.get(SEED_ENV, "0")
    try:
        return int(raw)
    except ValueError:
        raise CliError(f"{SEED_ENV} must be an integer, got {raw!r}") from None


def _positive_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def _latent(text: str) -> tuple[int, ...]:
    try:
        shape = tuple(int(p) for p in text.replace("x", ",").split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"latent must look like 1,4,16,16, got {text!r}") from None
    if len(shape) != 4:
        raise argparse.ArgumentTypeError(f"latent needs 4 extents [N,C,H,W], got {len(shape)}")
    return shape


def _bits(text: str) -> str:
    try:
        parse_format_pair(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None
    return text


def _read(path) -> bytes:
    try:
        with open(path, "rb") as fh:
            return fh.read()
    except OSError as exc:
        raise CliError(f"cannot read {path}: {exc.strerror}") from None


# -- qgraph bundle ---------------------------------------------------------------------


def qgraph_text(graph: ModuleGraph, config: PrecisionConfig, table: CalibrationTable | None) -> str:
    body = {
        "config": config.to_text(),
        "calibration": table.to_text() if table is not None else None,
        "graph": graph_to_obj(graph),
    }
    return formats.dumps(QGRAPH_FORMAT, body)


def load_qgraph(data):
    doc = formats.loads(data, QGRAPH_FORMAT)
    try:
        graph = graph_from_obj(doc["graph"])
        config = PrecisionConfig.from_text(doc["config"])
        table = CalibrationTable.from_text(doc["calibration"]) if doc["calibration"] is not None else None
    except (KeyError, TypeError) as exc:
        raise formats.FormatError(f"malformed qgraph bundle: {exc}") from None
    return apply_config(graph, config, table)


# -- commands --------------------------------------------------------------------------


def cmd_build(args) -> dict:
    graph = build_toy_unet(depth=args.depth, base_channels=args.channels, latent=args.latent, seed=args.seed)
    save_graph(graph, args.out)
    return {"blocks": len(graph.blocks), "nodes": len(graph.nodes)}


def _steps(spec: str, T: int) -> list[int]:
    if spec == "all":
        return list(range(1, T + 1))
    if spec == "last":
        return [T]
    try:
        steps = sorted({int(p) for p in spec.split(",") if p.strip()})
    except ValueError:
        raise CliError(f"--steps must be all, last or a comma list of timesteps, got {spec!r}") from None
    if not steps or steps[0] < 1 or steps[-1] > T:
        raise CliError(f"--steps values must lie in [1, {T}], got {spec!r}")
    return steps


def cmd_calibrate(args) -> dict:
    graph = load_graph(args.graph)
    scheduler = make_scheduler(args.T)
    table = calibrate(graph, scheduler, _steps(args.steps, args.T), args.samples, seed=args.seed)
    formats.write_atomic(args.out, table.to_text())
    return {"steps": list(table.steps), "nodes": len(table.stats)}


def _load_table(path) -> CalibrationTable:
    return CalibrationTable.from_text(_read(path))


def cmd_sensitivity(args) -> dict:
    graph = load_graph(args.graph)
    table = _load_table(args.calib)
    scheduler = make_scheduler(args.T)
    if args.mode == "blocks":
        curve = block_sweep(graph, table, args.bits, scheduler, args.samples, args.seed, args.guidance)
        formats.write_atomic(args.out, curve.to_csv())
        formats.write_atomic(_sibling(args.out, ".plot.csv"), curve.plot_data())
        return {"points": len(curve), "plot": str(_sibling(args.out, ".plot.csv"))}
    qgraph = apply_config(graph, PrecisionConfig.homogeneous(args.bits), table)
    trace = time_averaged_output_sqnr(qgraph, scheduler, args.samples, args.seed, args.guidance)
    modules = [n for n in graph.execution_order if n in qgraph.formats]
    ranking = rank_modules(trace, args.top_k, modules)
    text = trace.to_csv() + "\n# averages\n" + ranking.to_csv()
    formats.write_atomic(args.out, text)
    return {"output_avg_db": trace.output_avg_db, "selected": list(ranking.selected)}


def cmd_plan(args) -> dict:
    graph = load_graph(args.graph)
    try:
        curve = BlockSweepCurve.from_csv(_read(args.sweep).decode("utf-8"))
    except (UnicodeDecodeError, ValueError) as exc:
        raise CliError(f"{args.sweep}: {exc}") from None
    if len(curve) != len(graph.blocks) + 1:
        raise CliError(f"sweep has {len(curve)} points, graph needs {len(graph.blocks) + 1}")
    choice = select_cut_block(curve, args.policy, args.threshold_db)
    plan = make_plan(graph, choice.block_position, args.low_bits)
    formats.write_atomic(args.out, plan.to_text())
    return {"cut": plan.cut, "cut_block": choice.block_name, "no_cut_needed": choice.no_cut_needed}


def cmd_report(args) -> dict:
    graph = load_graph(args.graph)
    plan = HybridPlan.from_text(_read(args.plan))
    report = plan_report(graph, plan)
    sys.stdout.write(render_report(report))
    if args.out:
        formats.write_atomic(args.out, report_json(report))
    return {"fp32_over_homogeneous_bops": report["fp32_over_homogeneous_bops"]}


def _config_from_args(args) -> PrecisionConfig:
    chosen = [x for x in (args.config, args.plan, args.bits) if x is not None]
    if len(chosen) != 1:
        raise CliError("give exactly one of --config, --plan or --bits")
    if args.config is not None:
        return PrecisionConfig.from_text(_read(args.config).decode("utf-8"))
    if args.plan is not None:
        return HybridPlan.from_text(_read(args.plan)).config
    return PrecisionConfig.homogeneous(args.bits)


def cmd_quantize(args) -> dict:
    graph = load_graph(args.graph)
    table = _load_table(args.calib) if args.calib else None
    config = _config_from_args(args)
    config.validate(graph)
    selected: tuple[str, ...] = ()
    if args.smooth_top_k > 0:
        if table is None:
            raise CliError("smoothing needs --calib")
        trace = time_averaged_output_sqnr(apply_config(graph, config, table), make_scheduler(args.T),
                                          args.samples, args.seed, args.guidance)
        modules = [n for n in graph.execution_order if graph.nodes[n].parameterized]
        selected = rank_modules(trace, args.smooth_top_k, modules).selected
        graph = smooth_selected(graph, selected, table, args.alpha)
        formats.write_atomic(_sibling(args.out, ".scales.csv"), scales_csv(graph))
    qgraph = apply_config(graph, config, table)
    formats.write_atomic(args.out, qgraph_text(graph, config, table))
    for nid, wf, af in qgraph.precision_listing():
        print(f"{nid} {wf}/{af}")
    return {"smoothed": list(selected), "smoothed_in_graph": smoothed_nodes(graph)}


def cmd_eval(args) -> dict:
    qgraph = load_qgraph(_read(args.qgraph))
    trace = time_averaged_output_sqnr(qgraph, make_scheduler(args.T), args.samples, args.seed, args.guidance,
                                      conditional=not args.unconditional)
    formats.write_atomic(args.out, trace.to_text())
    print(f"output_avg_db {trace.output_avg_db!r}")
    return {"output_avg_db": trace.output_avg_db}


# -- parser ----------------------------------------------------------------------------


def _sibling(path, suffix: str) -> Path:
    path = Path(path)
    return path.with_name(path.name + suffix)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ldmquant", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, fn, help_text):
        p = sub.add_parser(name, help=help_text)
        p.set_defaults(func=fn)
        return p

    def seeded(p):
        p.add_argument("--seed", type=int, default=None, help=f"default: ${SEED_ENV} or 0")

    def sampler(p, samples=8):
        p.add_argument("--T", type=_positive_int, default=DEFAULT_T)
        p.add_argument("--samples", type=_positive_int, default=samples)
        p.add_argument("--guidance", type=float, default=DEFAULT_GUIDANCE)
        seeded(p)

    p = command("build", cmd_build, "emit a seeded toy UNet graph")
    p.add_argument("--depth", type=_positive_int, default=3)
    p.add_argument("--channels", type=_positive_int, default=8)
    p.add_argument("--latent", type=_latent, default=(1, 4, 16, 16))
    seeded(p)
    p.add_argument("--out", required=True)

    p = command("calibrate", cmd_calibrate, "record activation ranges")
    p.add_argument("--graph", required=True)
    p.add_argument("--steps", default="last", help="all, last, or comma list such as 50,25")
    p.add_argument("--T", type=_positive_int, default=DEFAULT_T)
    p.add_argument("--samples", type=_positive_int, default=64)
    seeded(p)
    p.add_argument("--out", required=True)

    p = command("sensitivity", cmd_sensitivity, "block sweep or per-module SQNR ranking")
    p.add_argument("--graph", required=True)
    p.add_argument("--calib", required=True)
    p.add_argument("--bits", type=_bits, default="8W8A")
    p.add_argument("--mode", choices=("blocks", "modules"), default="blocks")
    p.add_argument("--top-k", type=float, default=DEFAULT_TOP_K)
    sampler(p)
    p.add_argument("--out", required=True)

    p = command("plan", cmd_plan, "choose a cut from a sweep and emit a hybrid plan")
    p.add_argument("--sweep", required=True)
    p.add_argument("--graph", required=True)
    p.add_argument("--policy", choices=("largest_drop", "threshold"), default="largest_drop")
    p.add_argument("--threshold-db", type=float, default=None)
    p.add_argument("--low-bits", type=_bits, default="8W8A")
    p.add_argument("--out", required=True)

    p = command("report", cmd_report, "print size and BOPs for fp32, homogeneous and hybrid")
    p.add_argument("--plan", required=True)
    p.add_argument("--graph", required=True)
    p.add_argument("--out", default=None, help="also write the report as JSON")

    p = command("quantize", cmd_quantize, "bundle a graph, precision config and calibration")
    p.add_argument("--graph", required=True)
    p.add_argument("--calib", default=None)
    p.add_argument("--config", default=None)
    p.add_argument("--plan", default=None)
    p.add_argument("--bits", type=_bits, default=None, help=f"homogeneous preset, e.g. {', '.join(PRESETS)}")
    p.add_argument("--smooth-top-k", type=float, default=0.0, help="percent of modules to smooth; 0 disables")
    p.add_argument("--alpha", type=float, default=DEFAULT_ALPHA)
    sampler(p)
    p.add_argument("--out", required=True)

    p = command("eval", cmd_eval, "time-averaged output SQNR of a quantized bundle")
    p.add_argument("--qgraph", required=True)
    p.add_argument("--unconditional", action="store_true")
    sampler(p)
    p.add_argument("--out", required=True)

    p = sub.add_parser("rerun", help="replay a manifest")
    p.add_argument("manifest")
    p.add_argument("--out", default=None, help="write the artifact here instead of the recorded path")
    p.set_defaults(func=None)
    return parser


def _resolved_argv(args) -> list[str]:
    argv = [args.command]
    for key, value in sorted(vars(args).items()):
        if key in ("command", "func") or value is None or value is False:
            continue
        flag = "--" + key.replace("_", "-")
        if value is True:
            argv.append(flag)
        elif isinstance(value, tuple):
            argv += [flag, ",".join(str(v) for v in value)]
        else:
            argv += [flag, str(value)]
    return argv


def _write_manifest(args, argv, extra) -> None:
    doc = {
        "command": args.command,
        "argv": argv,
        "params": {k: (list(v) if isinstance(v, tuple) else v)
                   for k, v in sorted(vars(args).items()) if k not in ("command", "func")},
        "tool_version": __version__,
        "result": extra,
    }
    formats.write_atomic(_sibling(args.out, ".manifest.json"), formats.dumps(MANIFEST_FORMAT, doc))


def _replay_argv(manifest_path, out) -> list[str]:
    doc = formats.loads(_read(manifest_path), MANIFEST_FORMAT)
    argv = list(doc.get("argv") or [])
    if not argv:
        raise CliError(f"{manifest_path}: manifest has no argv")
    if out is not None:
        if "--out" not in argv:
            raise CliError(f"{manifest_path}: command {argv[0]!r} has no --out to redirect")
        argv[argv.index("--out") + 1] = out
    return argv


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "rerun":
            return main(_replay_argv(args.manifest, args.out))
        if getattr(args, "seed", 0) is None:
            args.seed = _default_seed()
        extra = args.func(args)
        if getattr(args, "out", None):
            _write_manifest(args, _resolved_argv(args), _jsonable(extra))
    except (CliError, formats.FormatError, ValueError, KeyError, TypeError, OSError) as exc:
        print(f"ldmquant {args.command}: error: {_message(exc)}", file=sys.stderr)
        return 1
    return 0


def _message(exc) -> str:
    return exc.args[0] if isinstance(exc, KeyError) and exc.args else str(exc)


def _jsonable(obj):
    return json.loads(json.dumps(obj, default=float))


if __name__ == "__main__":
    sys.exit(main())
