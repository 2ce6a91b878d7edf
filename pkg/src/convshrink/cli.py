"""Command-line front end.

Exit codes: 0 success, 1 tolerance exceeded or generic failure, 2 parse or
validation problem, 3 the mask collapses the network.
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from . import formats, maskgen
from .graph import (
    Graph,
    GraphError,
    ShapeError,
    count_macs,
    count_params,
    spatial_shapes,
    validate_graph,
)
from .interpreter import MaskError, run_graph, run_single
from .shrinker import CollapseError, shrink_pipeline, structural_mask_doc

EXIT_OK = 0
EXIT_FAIL = 1
EXIT_INVALID = 2
EXIT_COLLAPSE = 3


def _load_valid_graph(path: str) -> Graph:
    graph = formats.load_graph(path)
    violations = validate_graph(graph)
    if violations:
        raise GraphError(
            f"{path}: " + "; ".join(str(v) for v in violations))
    return graph


def _cmd_prune(args) -> int:
    graph = _load_valid_graph(args.model)
    config = maskgen.PruningConfig(
        target_rate=args.rate, scope=args.scope, iterations=args.iterations)
    if args.emit_schedule:
        schedule = maskgen.iteration_schedule(
            config.target_rate, config.iterations)
        print(json.dumps({"schedule": schedule}))
    mask = maskgen.build_mask(graph, config)
    formats.save_mask(args.out_mask, mask)
    total = sum(int(k.shape[0]) for k in mask.values())
    pruned = sum(int((~k).sum()) for k in mask.values())
    print(f"pruned {pruned} of {total} filters "
          f"({args.scope}, rate {args.rate:g}) -> {args.out_mask}")
    return EXIT_OK


def _cmd_shrink(args) -> int:
    graph = _load_valid_graph(args.model)
    mask = formats.load_mask(args.mask)
    result, report = shrink_pipeline(graph, mask)
    formats.save_graph(args.out, result.graph)
    if args.report:
        with open(args.report, "w") as f:
            f.write(report.to_json())
    if args.emit_structural_mask:
        with open(args.emit_structural_mask, "w") as f:
            f.write(json.dumps(structural_mask_doc(result.structural), indent=2) + "\n")
    print(f"params {report.params_before} -> {report.params_after} "
          f"(x{report.param_compression:.4f}), "
          f"filters pruned {report.filters_pruned}/{report.filters_total}, "
          f"nodes {report.nodes_before} -> {report.nodes_after}")
    return EXIT_OK


def _cmd_run(args) -> int:
    graph = _load_valid_graph(args.model)
    x = formats.load_tensor(args.input)
    y = run_single(graph, x)
    formats.save_tensor(args.output, y)
    print(f"ran {args.model} on {x.shape}, wrote {y.shape} -> {args.output}")
    return EXIT_OK


def _cmd_compare(args) -> int:
    ga = _load_valid_graph(args.model_a)
    gb = _load_valid_graph(args.model_b)
    if ga.input_shape != gb.input_shape:
        raise GraphError(
            f"input shapes differ: {ga.input_shape} vs {gb.input_shape}")
    if len(ga.output_ids) != len(gb.output_ids):
        raise GraphError(
            f"output counts differ: {len(ga.output_ids)} vs {len(gb.output_ids)}")
    rng = np.random.default_rng(args.seed)
    worst = 0.0
    worst_bound = 0.0
    for _ in range(args.inputs):
        x = rng.standard_normal(ga.input_shape, dtype=np.float32)
        ya = run_graph(ga, x)
        yb = run_graph(gb, x)
        for oa, ob in zip(ga.output_ids, gb.output_ids):
            ta, tb = ya[oa], yb[ob]
            if ta.shape != tb.shape:
                raise GraphError(
                    f"output {oa}/{ob}: shapes differ {ta.shape} vs {tb.shape}")
            dev = float(np.max(np.abs(ta - tb)))
            bound = args.tolerance * (1.0 + float(np.max(np.abs(ta))))
            worst = max(worst, dev)
            worst_bound = max(worst_bound, bound)
            if dev > bound:
                print(f"max deviation {dev:.8g} exceeds tolerance "
                      f"(bound {bound:.8g}) on output {oa}")
                return EXIT_FAIL
    print(f"max deviation {worst:.8g} within tolerance "
          f"(worst bound {worst_bound:.8g}) over {args.inputs} inputs")
    return EXIT_OK


def _cmd_analyze(args) -> int:
    graph = _load_valid_graph(args.model)
    hw = None
    if args.input_size:
        try:
            h, w = (int(p) for p in args.input_size.lower().split("x"))
        except ValueError:
            raise GraphError(
                f"--input-size wants HxW, got {args.input_size!r}") from None
        hw = (h, w)
    convs = graph.conv_ids()
    filters = sum(graph.node(c).op.out_channels for c in convs)
    print(f"nodes: {len(graph.nodes)}")
    print(f"convs: {len(convs)} ({filters} filters)")
    print(f"params: {count_params(graph)}")
    print(f"macs: {count_macs(graph, hw)}")
    shapes = spatial_shapes(graph, hw)
    print(f"{'layer':<16} {'shape':>12} {'k':>5} {'stride':>6} "
          f"{'params':>10} {'macs':>12}")
    for cid in convs:
        op = graph.node(cid).op
        oh, ow = shapes[cid]
        params = op.weights.size + (op.bias.size if op.bias is not None else 0)
        macs = op.out_channels * op.in_channels * op.kernel[0] * op.kernel[1] * oh * ow
        print(f"{cid:<16} {f'{op.in_channels}->{op.out_channels}':>12} "
              f"{f'{op.kernel[0]}x{op.kernel[1]}':>5} {op.stride:>6} "
              f"{params:>10} {macs:>12}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="convshrink",
        description="Prune conv filters and rewrite the graph without them.")
    sub = p.add_subparsers(dest="command", required=True)

    pr = sub.add_parser("prune", help="score filters and write a keep/drop mask")
    pr.add_argument("--model", required=True)
    pr.add_argument("--criterion", choices=["bn-gamma"], default="bn-gamma")
    pr.add_argument("--scope", choices=["global", "local"], default="global")
    pr.add_argument("--rate", type=float, required=True)
    pr.add_argument("--iterations", type=int, default=1)
    pr.add_argument("--emit-schedule", action="store_true")
    pr.add_argument("--out-mask", required=True)
    pr.set_defaults(fn=_cmd_prune)

    sh = sub.add_parser("shrink", help="rewrite a model under a filter mask")
    sh.add_argument("--model", required=True)
    sh.add_argument("--mask", required=True)
    sh.add_argument("--out", required=True)
    sh.add_argument("--report")
    sh.add_argument("--emit-structural-mask")
    sh.set_defaults(fn=_cmd_shrink)

    rn = sub.add_parser("run", help="run a model on one input tensor")
    rn.add_argument("--model", required=True)
    rn.add_argument("--input", required=True)
    rn.add_argument("--output", required=True)
    rn.set_defaults(fn=_cmd_run)

    cp = sub.add_parser("compare", help="compare two models on random inputs")
    cp.add_argument("--model-a", required=True)
    cp.add_argument("--model-b", required=True)
    cp.add_argument("--inputs", type=int, default=10)
    cp.add_argument("--seed", type=int, default=0)
    cp.add_argument("--tolerance", type=float, default=1e-5)
    cp.set_defaults(fn=_cmd_compare)

    an = sub.add_parser("analyze", help="print size and cost counters")
    an.add_argument("--model", required=True)
    an.add_argument("--input-size", help="override spatial size, HxW")
    an.set_defaults(fn=_cmd_analyze)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except CollapseError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_COLLAPSE
    except (formats.ParseError, GraphError, ShapeError, MaskError,
            maskgen.MaskCriterionError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID
    except (ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
