"""Hand-built graphs shared across test modules.

rb1: the canonical 3-channel residual block used throughout the unit
tests; its mask prunes the last filter of the skip-side conv and the
middle filter of the branch-side conv, which forces a routed addition
with one copied channel per side.
"""

from __future__ import annotations

import numpy as np

from convshrink import (
    Add,
    BatchNorm2d,
    Conv2d,
    GlobalAvgPool,
    Graph,
    InputOp,
    Node,
    OutputOp,
    ReLU,
)


def seeded_conv(rng, f_out, f_in, k=3, stride=1, padding="same", bias=True) -> Conv2d:
    w = rng.standard_normal((f_out, f_in, k, k)).astype(np.float32)
    b = rng.standard_normal(f_out).astype(np.float32) if bias else None
    return Conv2d(f_out, f_in, (k, k), stride, padding, w, b)


def rb1_graph(seed: int = 7) -> Graph:
    rng = np.random.default_rng(seed)
    nodes = (
        Node("in", InputOp()),
        Node("conv1", seeded_conv(rng, 3, 2), ("in",)),
        Node("relu1", ReLU(), ("conv1",)),
        Node("conv2", seeded_conv(rng, 3, 3), ("relu1",)),
        Node("relu2", ReLU(), ("conv2",)),
        Node("conv3", seeded_conv(rng, 3, 3), ("relu2",)),
        Node("add", Add(), ("conv3", "conv1")),
        Node("conv4", seeded_conv(rng, 2, 3), ("add",)),
        Node("out", OutputOp(), ("conv4",)),
    )
    return Graph(input_shape=(2, 8, 8), nodes=nodes, output_ids=("out",))


def rb1_mask() -> dict[str, np.ndarray]:
    return {
        "conv1": np.array([True, True, False]),
        "conv2": np.ones(3, dtype=bool),
        "conv3": np.array([True, False, True]),
        "conv4": np.ones(2, dtype=bool),
    }


def rb1_branch_wipe_mask() -> dict[str, np.ndarray]:
    m = rb1_mask()
    m["conv1"] = np.ones(3, dtype=bool)
    m["conv3"] = np.zeros(3, dtype=bool)
    return m


def chain_graph(seed: int = 11) -> Graph:
    """Input(3) -> Conv(3->4) -> Conv(4->4) -> Output, 3x3 with bias."""
    rng = np.random.default_rng(seed)
    nodes = (
        Node("in", InputOp()),
        Node("convA", seeded_conv(rng, 4, 3), ("in",)),
        Node("convB", seeded_conv(rng, 4, 4), ("convA",)),
        Node("out", OutputOp(), ("convB",)),
    )
    return Graph(input_shape=(3, 8, 8), nodes=nodes, output_ids=("out",))


def single_path_graph(seed: int = 13) -> Graph:
    rng = np.random.default_rng(seed)
    nodes = (
        Node("in", InputOp()),
        Node("conv", seeded_conv(rng, 3, 2), ("in",)),
        Node("out", OutputOp(), ("conv",)),
    )
    return Graph(input_shape=(2, 6, 6), nodes=nodes, output_ids=("out",))


def _bn_absnormal(rng, ch) -> BatchNorm2d:
    """Batch norm whose gammas are |N(0,1)|: magnitudes span orders of
    magnitude, so global ranking has meaningful spread."""
    return BatchNorm2d(
        gamma=np.abs(rng.standard_normal(ch)).astype(np.float32),
        beta=rng.standard_normal(ch).astype(np.float32) * np.float32(0.1),
        running_mean=rng.standard_normal(ch).astype(np.float32) * np.float32(0.1),
        running_var=rng.uniform(0.5, 1.5, ch).astype(np.float32),
        eps=1e-5,
    )


def mini_resnet(seed: int) -> Graph:
    """Three stages of 8/16/32 channels: stem, two identity-skip blocks
    per stage, strided transitions between stages, pooled 1x1 head."""
    rng = np.random.default_rng(seed)
    nodes: list[Node] = [Node("in", InputOp())]
    n = 0

    def emit(prefix, op, *inputs):
        nonlocal n
        n += 1
        nid = f"{prefix}{n}"
        nodes.append(Node(nid, op, tuple(inputs)))
        return nid

    def conv_bn_relu(src, f_out, f_in, k=3, stride=1, relu=True):
        c = emit("conv", seeded_conv(rng, f_out, f_in, k=k, stride=stride), src)
        b = emit("bn", _bn_absnormal(rng, f_out), c)
        return emit("relu", ReLU(), b) if relu else b

    def block(src, width):
        a = conv_bn_relu(src, width, width)
        b = conv_bn_relu(a, width, width, relu=False)
        s = emit("res", Add(), b, src)
        return emit("relu", ReLU(), s)

    x = conv_bn_relu("in", 8, 3)
    for _ in range(2):
        x = block(x, 8)
    x = conv_bn_relu(x, 16, 8, stride=2)
    for _ in range(2):
        x = block(x, 16)
    x = conv_bn_relu(x, 32, 16, stride=2)
    for _ in range(2):
        x = block(x, 32)
    x = emit("pool", GlobalAvgPool(), x)
    head = emit("head", seeded_conv(rng, 10, 32, k=1), x)
    out = emit("out", OutputOp(), head)
    return Graph(input_shape=(3, 16, 16), nodes=tuple(nodes), output_ids=(out,))
