"""Computation-graph data model, validation, ordering and cost accounting.

A :class:`Graph` is a DAG of typed nodes over (channels, height, width)
float32 tensors.  The model is deliberately small: convolutions,
inference-mode batch normalisation, ReLU, element-wise addition, channel
routed addition, concatenation, nearest upsampling and global average
pooling.  That covers classification and HRNet-style fusion topologies
while keeping every op analysable for channel liveness.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Union

import numpy as np


class GraphError(Exception):
    """Base class for structural graph failures."""


class CycleError(GraphError):
    """The node list admits no topological order."""


class ShapeError(GraphError):
    """A spatial or channel shape cannot be inferred or is inconsistent."""


def _frozen_f32(values) -> np.ndarray:
    arr = np.array(values, dtype=np.float32)
    arr.setflags(write=False)
    return arr


# ---------------------------------------------------------------------------
# operations


@dataclass
class InputOp:
    kind = "input"


@dataclass
class Conv2d:
    """2-D convolution (cross-correlation), NCHW single-sample layout.

    ``weights`` has shape (out_channels, in_channels, kh, kw).  ``padding``
    is either "same" (zero padding, output spatial = ceil(input / stride))
    or "valid" (no padding; input must tile exactly under the stride).
    """

    out_channels: int
    in_channels: int
    kernel: tuple[int, int]
    stride: int
    padding: str
    weights: np.ndarray
    bias: np.ndarray | None = None

    kind = "conv2d"

    def __post_init__(self) -> None:
        self.out_channels = int(self.out_channels)
        self.in_channels = int(self.in_channels)
        self.kernel = (int(self.kernel[0]), int(self.kernel[1]))
        self.stride = int(self.stride)
        self.weights = _frozen_f32(self.weights)
        if self.bias is not None:
            self.bias = _frozen_f32(self.bias)


@dataclass
class BatchNorm2d:
    """Inference-mode batch normalisation with frozen statistics."""

    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5

    kind = "batchnorm2d"

    def __post_init__(self) -> None:
        self.gamma = _frozen_f32(self.gamma)
        self.beta = _frozen_f32(self.beta)
        self.running_mean = _frozen_f32(self.running_mean)
        self.running_var = _frozen_f32(self.running_var)
        self.eps = float(self.eps)

    @property
    def channels(self) -> int:
        return int(self.gamma.shape[0])


@dataclass
class ReLU:
    kind = "relu"


@dataclass
class Add:
    """Element-wise addition of two operands with equal shapes."""

    kind = "add"


@dataclass
class IndexMap:
    """Channel routing table for an indexation-addition.

    Output channel ``k`` receives operand-a channel ``i_a[k]`` plus
    operand-b channel ``i_b[k]``.  Indices are 1-based; 0 means the operand
    contributes nothing to that channel.  Both entries may not be 0 at once.
    """

    i_a: tuple[int, ...]
    i_b: tuple[int, ...]
    n_a: int
    n_b: int

    def __post_init__(self) -> None:
        self.i_a = tuple(int(v) for v in self.i_a)
        self.i_b = tuple(int(v) for v in self.i_b)
        self.n_a = int(self.n_a)
        self.n_b = int(self.n_b)

    @property
    def n_c(self) -> int:
        return len(self.i_a)

    def check(self) -> list[str]:
        """Structural problems, as human-readable strings (empty if sound)."""
        problems = []
        if len(self.i_a) != len(self.i_b):
            problems.append(
                f"i_a has {len(self.i_a)} entries but i_b has {len(self.i_b)}"
            )
        if self.n_a < 0 or self.n_b < 0:
            problems.append("operand widths must be non-negative")
        for name, idx, n in (("i_a", self.i_a, self.n_a), ("i_b", self.i_b, self.n_b)):
            for k, v in enumerate(idx):
                if not 0 <= v <= n:
                    problems.append(f"{name}[{k}] = {v} outside 0..{n}")
        for k, (a, b) in enumerate(zip(self.i_a, self.i_b)):
            if a == 0 and b == 0:
                problems.append(f"output channel {k} draws from neither operand")
        return problems

    def sources_increasing(self) -> bool:
        """True when the non-zero entries of each side strictly increase.

        Maps produced by the shrinker always satisfy this; the property is an
        invariant of valid graphs, not of the addition operator itself.
        """
        for idx in (self.i_a, self.i_b):
            last = 0
            for v in idx:
                if v == 0:
                    continue
                if v <= last:
                    return False
                last = v
        return True

    def is_identity(self) -> bool:
        n = self.n_c
        return (
            self.n_a == n
            and self.n_b == n
            and self.i_a == tuple(range(1, n + 1))
            and self.i_b == tuple(range(1, n + 1))
        )


def identity_index_map(n: int) -> IndexMap:
    rng = tuple(range(1, n + 1))
    return IndexMap(i_a=rng, i_b=rng, n_a=n, n_b=n)


@dataclass
class IndexAdd:
    """Addition of two operands under an explicit channel routing."""

    index_map: IndexMap

    kind = "index_add"


@dataclass
class Concat:
    """Channel-axis concatenation of two or more operands."""

    kind = "concat"


@dataclass
class Upsample:
    """Nearest-neighbour spatial upsampling by an integer factor."""

    factor: int
    mode: str = "nearest"

    kind = "upsample"

    def __post_init__(self) -> None:
        self.factor = int(self.factor)


@dataclass
class GlobalAvgPool:
    """Spatial mean, collapsing (c, h, w) to (c, 1, 1)."""

    kind = "global_avg_pool"


@dataclass
class OutputOp:
    kind = "output"


Op = Union[
    InputOp,
    Conv2d,
    BatchNorm2d,
    ReLU,
    Add,
    IndexAdd,
    Concat,
    Upsample,
    GlobalAvgPool,
    OutputOp,
]

OP_KINDS = {
    "input": InputOp,
    "conv2d": Conv2d,
    "batchnorm2d": BatchNorm2d,
    "relu": ReLU,
    "add": Add,
    "index_add": IndexAdd,
    "concat": Concat,
    "upsample": Upsample,
    "global_avg_pool": GlobalAvgPool,
    "output": OutputOp,
}

# required number of operands per kind; None means "two or more"
_ARITY: dict[str, int | None] = {
    "input": 0,
    "conv2d": 1,
    "batchnorm2d": 1,
    "relu": 1,
    "add": 2,
    "index_add": 2,
    "concat": None,
    "upsample": 1,
    "global_avg_pool": 1,
    "output": 1,
}


@dataclass
class Node:
    id: str
    op: Op
    inputs: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        self.id = str(self.id)
        self.inputs = tuple(str(i) for i in self.inputs)

    @property
    def kind(self) -> str:
        return self.op.kind


# ---------------------------------------------------------------------------
# graph


@dataclass
class Graph:
    """A computation DAG plus the shape of its single input tensor."""

    input_shape: tuple[int, int, int]
    nodes: tuple[Node, ...]
    output_ids: tuple[str, ...]

    def __post_init__(self) -> None:
        self.input_shape = tuple(int(v) for v in self.input_shape)
        self.nodes = tuple(self.nodes)
        self.output_ids = tuple(str(i) for i in self.output_ids)
        self._by_id = {n.id: n for n in self.nodes}

    @property
    def input_channels(self) -> int:
        return self.input_shape[0]

    @property
    def input_hw(self) -> tuple[int, int]:
        return (self.input_shape[1], self.input_shape[2])

    def node(self, node_id: str) -> Node:
        return self._by_id[node_id]

    def has_node(self, node_id: str) -> bool:
        return node_id in self._by_id

    def consumers(self) -> dict[str, list[str]]:
        out: dict[str, list[str]] = {n.id: [] for n in self.nodes}
        for n in self.nodes:
            for src in n.inputs:
                if src in out:
                    out[src].append(n.id)
        return out

    def conv_ids(self) -> list[str]:
        return [n.id for n in self.nodes if n.kind == "conv2d"]


@dataclass
class Violation:
    """One validation failure, attached to a node where that makes sense."""

    rule: str
    message: str
    node_id: str | None = None

    def __str__(self) -> str:
        where = f" [{self.node_id}]" if self.node_id else ""
        return f"{self.rule}{where}: {self.message}"


def topo_order(graph: Graph) -> list[str]:
    """Node ids in dependency order (Kahn).  Raises CycleError on a cycle.

    Ties are broken by declaration order so the result is deterministic.
    """
    position = {n.id: i for i, n in enumerate(graph.nodes)}
    indegree = {n.id: 0 for n in graph.nodes}
    consumers: dict[str, list[str]] = {n.id: [] for n in graph.nodes}
    for n in graph.nodes:
        for src in n.inputs:
            if src not in indegree:
                raise GraphError(f"node {n.id!r} reads undeclared node {src!r}")
            indegree[n.id] += 1
            consumers[src].append(n.id)

    ready = sorted((i for i, d in indegree.items() if d == 0), key=position.__getitem__)
    order: list[str] = []
    while ready:
        ready.sort(key=position.__getitem__)
        nid = ready.pop(0)
        order.append(nid)
        for c in consumers[nid]:
            indegree[c] -= 1
            if indegree[c] == 0:
                ready.append(c)
    if len(order) != len(graph.nodes):
        stuck = sorted(set(indegree) - set(order), key=position.__getitem__)
        raise CycleError(f"cycle involving nodes: {', '.join(stuck)}")
    return order


def _conv_out_hw(hw: tuple[int, int], op: Conv2d) -> tuple[int, int]:
    h, w = hw
    kh, kw = op.kernel
    s = op.stride
    if op.padding == "same":
        return (math.ceil(h / s), math.ceil(w / s))
    if (h - kh) % s != 0 or (w - kw) % s != 0:
        raise ShapeError(
            f"valid conv {kh}x{kw}/{s} does not tile input {h}x{w}"
        )
    return ((h - kh) // s + 1, (w - kw) // s + 1)


def conv_pad_amounts(hw: tuple[int, int], op: Conv2d) -> tuple[int, int, int, int]:
    """(top, bottom, left, right) zero padding for the given input size."""
    if op.padding != "same":
        return (0, 0, 0, 0)
    h, w = hw
    kh, kw = op.kernel
    s = op.stride
    oh, ow = _conv_out_hw(hw, op)
    pad_h = max((oh - 1) * s + kh - h, 0)
    pad_w = max((ow - 1) * s + kw - w, 0)
    return (pad_h // 2, pad_h - pad_h // 2, pad_w // 2, pad_w - pad_w // 2)


def _infer_channels(graph: Graph, order: list[str]) -> tuple[dict[str, int], list[Violation]]:
    channels: dict[str, int] = {}
    violations: list[Violation] = []

    def fail(node: Node, rule: str, msg: str) -> None:
        violations.append(Violation(rule=rule, message=msg, node_id=node.id))

    for nid in order:
        node = graph.node(nid)
        op = node.op
        ins = [channels.get(i) for i in node.inputs]
        if any(c is None for c in ins):
            continue  # upstream already failed; avoid cascading noise
        if node.kind == "input":
            channels[nid] = graph.input_channels
        elif node.kind == "conv2d":
            if ins[0] != op.in_channels:
                fail(node, "channel-mismatch",
                     f"declares {op.in_channels} input channels, receives {ins[0]}")
            else:
                channels[nid] = op.out_channels
        elif node.kind == "batchnorm2d":
            if ins[0] != op.channels:
                fail(node, "channel-mismatch",
                     f"normalises {op.channels} channels, receives {ins[0]}")
            else:
                channels[nid] = op.channels
        elif node.kind == "add":
            if ins[0] != ins[1]:
                fail(node, "channel-mismatch",
                     f"operands carry {ins[0]} and {ins[1]} channels")
            else:
                channels[nid] = ins[0]
        elif node.kind == "index_add":
            m = op.index_map
            if m.n_a != ins[0] or m.n_b != ins[1]:
                fail(node, "channel-mismatch",
                     f"map expects operands {m.n_a}/{m.n_b}, receives {ins[0]}/{ins[1]}")
            else:
                channels[nid] = m.n_c
        elif node.kind == "concat":
            channels[nid] = sum(ins)
        else:  # relu, upsample, global_avg_pool, output
            channels[nid] = ins[0]
    return channels, violations


def _infer_spatial(
    graph: Graph, order: list[str], input_hw: tuple[int, int]
) -> tuple[dict[str, tuple[int, int]], list[Violation]]:
    hw: dict[str, tuple[int, int]] = {}
    violations: list[Violation] = []

    for nid in order:
        node = graph.node(nid)
        op = node.op
        ins = [hw.get(i) for i in node.inputs]
        if any(v is None for v in ins):
            continue
        if node.kind == "input":
            hw[nid] = input_hw
        elif node.kind == "conv2d":
            try:
                hw[nid] = _conv_out_hw(ins[0], op)
            except ShapeError as e:
                violations.append(Violation("spatial", str(e), node.id))
        elif node.kind in ("add", "index_add"):
            if ins[0] != ins[1]:
                violations.append(Violation(
                    "spatial", f"operands are {ins[0]} and {ins[1]}", node.id))
            else:
                hw[nid] = ins[0]
        elif node.kind == "concat":
            if any(v != ins[0] for v in ins[1:]):
                violations.append(Violation(
                    "spatial", f"operands disagree: {ins}", node.id))
            else:
                hw[nid] = ins[0]
        elif node.kind == "upsample":
            hw[nid] = (ins[0][0] * op.factor, ins[0][1] * op.factor)
        elif node.kind == "global_avg_pool":
            hw[nid] = (1, 1)
        else:  # batchnorm2d, relu, output
            hw[nid] = ins[0]
    return hw, violations


def validate_graph(graph: Graph) -> list[Violation]:
    """All structural violations in the graph; an empty list means valid.

    Checks: unique ids, known operands, acyclicity, arity per kind,
    parameter shape consistency, channel and spatial consistency along every
    edge, finite parameters, and index-map soundness (including strictly
    increasing source channels, which rewritten graphs always satisfy).
    """
    violations: list[Violation] = []
    seen: set[str] = set()
    for n in graph.nodes:
        if n.id in seen:
            violations.append(Violation("duplicate-id", "id declared twice", n.id))
        seen.add(n.id)
    if violations:
        return violations  # later checks assume ids are unique

    ids = {n.id for n in graph.nodes}
    position = {n.id: i for i, n in enumerate(graph.nodes)}
    for n in graph.nodes:
        for src in n.inputs:
            if src not in ids:
                violations.append(Violation(
                    "unknown-input", f"reads undeclared node {src!r}", n.id))
            elif position[src] >= position[n.id]:
                violations.append(Violation(
                    "order", f"reads {src!r}, declared later", n.id))
    n_inputs = sum(1 for n in graph.nodes if n.kind == "input")
    if n_inputs != 1:
        violations.append(Violation(
            "input-count", f"graph declares {n_inputs} input nodes, wants exactly 1"))
    if not graph.output_ids:
        violations.append(Violation("output-ref", "graph declares no outputs"))
    for oid in graph.output_ids:
        if oid not in ids:
            violations.append(Violation("output-ref", f"unknown output id {oid!r}"))
        elif graph.node(oid).kind != "output":
            violations.append(Violation(
                "output-ref", f"output id {oid!r} is a {graph.node(oid).kind} node"))
    for n in graph.nodes:
        if n.kind == "output" and n.id not in graph.output_ids:
            violations.append(Violation(
                "output-ref", "output node not listed in graph outputs", n.id))

    for n in graph.nodes:
        want = _ARITY[n.kind]
        if want is None:
            if len(n.inputs) < 2:
                violations.append(Violation(
                    "arity", f"needs at least 2 operands, has {len(n.inputs)}", n.id))
        elif len(n.inputs) != want:
            violations.append(Violation(
                "arity", f"takes {want} operand(s), has {len(n.inputs)}", n.id))

    for n in graph.nodes:
        op = n.op
        if n.kind == "conv2d":
            kh, kw = op.kernel
            if kh < 1 or kw < 1 or op.stride < 1:
                violations.append(Violation(
                    "conv-shape", f"kernel {kh}x{kw} stride {op.stride}", n.id))
            if op.padding not in ("same", "valid"):
                violations.append(Violation(
                    "conv-shape", f"unknown padding {op.padding!r}", n.id))
            want = (op.out_channels, op.in_channels, kh, kw)
            if op.weights.shape != want:
                violations.append(Violation(
                    "conv-shape",
                    f"weights are {op.weights.shape}, declaration implies {want}", n.id))
            if op.bias is not None and op.bias.shape != (op.out_channels,):
                violations.append(Violation(
                    "conv-shape", f"bias is {op.bias.shape}, wants ({op.out_channels},)",
                    n.id))
            if not np.all(np.isfinite(op.weights)):
                violations.append(Violation("nonfinite-param", "weights", n.id))
            if op.bias is not None and not np.all(np.isfinite(op.bias)):
                violations.append(Violation("nonfinite-param", "bias", n.id))
        elif n.kind == "batchnorm2d":
            c = op.gamma.shape[0] if op.gamma.ndim == 1 else -1
            for name in ("gamma", "beta", "running_mean", "running_var"):
                arr = getattr(op, name)
                if arr.ndim != 1 or arr.shape[0] != c:
                    violations.append(Violation(
                        "bn-shape", f"{name} is {arr.shape}", n.id))
                elif not np.all(np.isfinite(arr)):
                    violations.append(Violation("nonfinite-param", name, n.id))
            if op.eps <= 0:
                violations.append(Violation("bn-eps", f"eps = {op.eps}", n.id))
            if np.any(op.running_var < 0):
                violations.append(Violation("bn-var", "negative running variance", n.id))
        elif n.kind == "index_add":
            for p in op.index_map.check():
                violations.append(Violation("index-map", p, n.id))
            if not op.index_map.sources_increasing():
                violations.append(Violation(
                    "index-map", "source channels not strictly increasing", n.id))
        elif n.kind == "upsample":
            if op.factor < 1:
                violations.append(Violation(
                    "upsample-factor", f"factor = {op.factor}", n.id))
            if op.mode != "nearest":
                violations.append(Violation(
                    "upsample-factor", f"unsupported mode {op.mode!r}", n.id))

    c, h, w = graph.input_shape
    if c < 1 or h < 1 or w < 1:
        violations.append(Violation("input-shape", f"input shape {graph.input_shape}"))

    if violations:
        return violations

    try:
        order = topo_order(graph)
    except CycleError as e:
        return [Violation("cycle", str(e))]

    reachable = set()
    for nid in order:
        node = graph.node(nid)
        if node.kind == "input" or any(i in reachable for i in node.inputs):
            reachable.add(nid)
    for n in graph.nodes:
        if n.id not in reachable:
            violations.append(Violation(
                "unreachable", "not reachable from the input", n.id))
    if violations:
        return violations

    channels, ch_viol = _infer_channels(graph, order)
    violations.extend(ch_viol)
    _, sp_viol = _infer_spatial(graph, order, graph.input_hw)
    violations.extend(sp_viol)
    return violations


def channel_counts(graph: Graph) -> dict[str, int]:
    """Channel width at every node.  Raises GraphError if inconsistent."""
    counts, violations = _infer_channels(graph, topo_order(graph))
    if violations:
        raise GraphError("; ".join(str(v) for v in violations))
    return counts


def spatial_shapes(
    graph: Graph, input_hw: tuple[int, int] | None = None
) -> dict[str, tuple[int, int]]:
    """(h, w) at every node.  Raises ShapeError if inconsistent."""
    hw, violations = _infer_spatial(
        graph, topo_order(graph), input_hw or graph.input_hw)
    if violations:
        raise ShapeError("; ".join(str(v) for v in violations))
    return hw


def count_params(graph: Graph) -> int:
    """Learnable parameter count: conv weights and biases, plus the four
    per-channel batch-norm vectors."""
    total = 0
    for n in graph.nodes:
        op = n.op
        if n.kind == "conv2d":
            total += op.weights.size
            if op.bias is not None:
                total += op.bias.size
        elif n.kind == "batchnorm2d":
            total += 4 * op.channels
    return total


def count_macs(graph: Graph, input_hw: tuple[int, int] | None = None) -> int:
    """Multiply-accumulate count of all convolutions at the given input size.

    Each output element of a conv costs in_channels * kh * kw MACs; nothing
    else in the model multiplies.
    """
    order = topo_order(graph)
    hw, violations = _infer_spatial(graph, order, input_hw or graph.input_hw)
    if violations:
        raise ShapeError("; ".join(str(v) for v in violations))
    total = 0
    for n in graph.nodes:
        if n.kind != "conv2d":
            continue
        op = n.op
        oh, ow = hw[n.id]
        total += op.out_channels * oh * ow * op.in_channels * op.kernel[0] * op.kernel[1]
    return total
