"""Times the compiled kernel lane against the numpy fallback.

The lane is fixed at import time by CONVSHRINK_NUMBA, so the script
re-invokes itself once per lane and merges the numbers.  Direct use:

    python3 benchmarks/bench_kernels.py            # both lanes, table
    python3 benchmarks/bench_kernels.py --repeats 50

Workloads cover the two hot kernels plus whole-graph inference on a
small residual network before and after shrinking at a 50% global rate,
which is the comparison the package exists for.
"""

from __future__ import annotations

import argparse
import json
import os
import subprocess
import sys
import time

import numpy as np

from convshrink import (
    Add,
    BatchNorm2d,
    Conv2d,
    Graph,
    InputOp,
    Node,
    OutputOp,
    PruningConfig,
    ReLU,
    build_mask,
    run_single,
    shrink_pipeline,
)
from convshrink.kernels import active_lane, conv2d_padded, index_add_channels


def _conv(rng, f_out, f_in, k=3, stride=1):
    w = rng.standard_normal((f_out, f_in, k, k)).astype(np.float32)
    w /= np.float32(f_in * k * k) ** np.float32(0.5)
    b = rng.standard_normal(f_out).astype(np.float32)
    return Conv2d(f_out, f_in, (k, k), stride, "same", w, b)


def _bn(rng, ch):
    return BatchNorm2d(
        gamma=np.abs(rng.standard_normal(ch)).astype(np.float32),
        beta=rng.standard_normal(ch).astype(np.float32) * np.float32(0.1),
        running_mean=np.zeros(ch, dtype=np.float32),
        running_var=np.ones(ch, dtype=np.float32),
        eps=1e-5,
    )


def residual_net(seed: int = 0) -> Graph:
    """Stem plus two identity-skip blocks at 16 and 32 channels."""
    rng = np.random.default_rng(seed)
    nodes = [Node("in", InputOp())]
    names = iter(f"n{i}" for i in range(100))

    def emit(op, *inputs):
        nid = next(names)
        nodes.append(Node(nid, op, tuple(inputs)))
        return nid

    def conv_bn_relu(src, f_out, f_in, stride=1, relu=True):
        c = emit(_conv(rng, f_out, f_in, stride=stride), src)
        b = emit(_bn(rng, f_out), c)
        return emit(ReLU(), b) if relu else b

    def block(src, width):
        a = conv_bn_relu(src, width, width)
        b = conv_bn_relu(a, width, width, relu=False)
        return emit(ReLU(), emit(Add(), b, src))

    x = conv_bn_relu("in", 16, 3)
    x = block(x, 16)
    x = conv_bn_relu(x, 32, 16, stride=2)
    x = block(x, 32)
    head = emit(_conv(rng, 10, 32, k=1), x)
    out = emit(OutputOp(), head)
    return Graph(input_shape=(3, 32, 32), nodes=tuple(nodes),
                 output_ids=(out,))


def _best_of(fn, repeats: int) -> float:
    fn()  # warmup; first call pays any jit compile cost
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def measure(repeats: int) -> dict[str, float]:
    rng = np.random.default_rng(7)
    results: dict[str, float] = {}

    x = rng.standard_normal((32, 34, 34)).astype(np.float32)
    w = rng.standard_normal((64, 32, 3, 3)).astype(np.float32)
    b = rng.standard_normal(64).astype(np.float32)
    results["conv 32->64 3x3 @32x32"] = _best_of(
        lambda: conv2d_padded(x, w, b, 1, (32, 32)), repeats)

    xs = rng.standard_normal((8, 18, 18)).astype(np.float32)
    ws = rng.standard_normal((8, 8, 3, 3)).astype(np.float32)
    bs = rng.standard_normal(8).astype(np.float32)
    results["conv 8->8 3x3 @16x16"] = _best_of(
        lambda: conv2d_padded(xs, ws, bs, 1, (16, 16)), repeats)

    n = 256
    a = rng.standard_normal((n - 40, 32, 32)).astype(np.float32)
    c = rng.standard_normal((n - 80, 32, 32)).astype(np.float32)
    i_a = [0] * n
    i_b = [0] * n
    ka = kb = 0
    for k in range(n):
        if k % 6 != 0 and ka < a.shape[0]:
            ka += 1
            i_a[k] = ka
        if k % 3 != 0 and kb < c.shape[0]:
            kb += 1
            i_b[k] = kb
        if i_a[k] == 0 and i_b[k] == 0:
            ka = min(ka + 1, a.shape[0])
            i_a[k] = ka
    ia = np.asarray(i_a, dtype=np.int64)
    ib = np.asarray(i_b, dtype=np.int64)
    results["index_add 256ch @32x32"] = _best_of(
        lambda: index_add_channels(a, c, ia, ib), repeats)

    g = residual_net()
    mask = build_mask(g, PruningConfig(target_rate=0.5, scope="global"))
    shrunk, report = shrink_pipeline(g, mask)
    xg = rng.standard_normal((3, 32, 32)).astype(np.float32)
    results["net forward (full)"] = _best_of(
        lambda: run_single(g, xg), repeats)
    results["net forward (shrunk 50%)"] = _best_of(
        lambda: run_single(shrunk.graph, xg), repeats)
    results["_param_compression"] = report.param_compression
    return results


def run_worker(repeats: int) -> None:
    print(json.dumps({"lane": active_lane(), "times": measure(repeats)}))


def run_driver(repeats: int) -> None:
    per_lane: dict[str, dict[str, float]] = {}
    for flag, want in (("1", "numba"), ("0", "numpy")):
        env = dict(os.environ, CONVSHRINK_NUMBA=flag)
        proc = subprocess.run(
            [sys.executable, __file__, "--lane-worker",
             "--repeats", str(repeats)],
            capture_output=True, text=True, env=env, check=True)
        doc = json.loads(proc.stdout.splitlines()[-1])
        if doc["lane"] != want:
            print(f"note: wanted lane {want}, got {doc['lane']} "
                  f"(numba unavailable?)", file=sys.stderr)
        per_lane[doc["lane"]] = doc["times"]

    lanes = list(per_lane)
    if len(lanes) < 2:
        print("only one lane available; no comparison")
        lane = lanes[0]
        for name, t in per_lane[lane].items():
            if not name.startswith("_"):
                print(f"{name:<28} {t * 1e3:9.3f} ms   [{lane}]")
        return

    compression = per_lane[lanes[0]].pop("_param_compression", None)
    per_lane[lanes[1]].pop("_param_compression", None)
    header = f"{'workload':<28} {'numba':>12} {'numpy':>12} {'speedup':>9}"
    print(header)
    print("-" * len(header))
    for name in per_lane["numba"]:
        tn = per_lane["numba"][name]
        tp = per_lane["numpy"][name]
        print(f"{name:<28} {tn * 1e3:10.3f}ms {tp * 1e3:10.3f}ms "
              f"{tp / tn:8.2f}x")
    if compression is not None:
        print(f"\nshrunk net parameter compression: {compression:.2f}x")


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=30,
                    help="timed repetitions per workload (best-of)")
    ap.add_argument("--lane-worker", action="store_true",
                    help=argparse.SUPPRESS)
    args = ap.parse_args()
    if args.lane_worker:
        run_worker(args.repeats)
    else:
        run_driver(args.repeats)


if __name__ == "__main__":
    main()
