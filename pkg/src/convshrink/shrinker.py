"""Rewrites a masked graph into a strictly smaller equivalent one.

Dead filters, dead weight slices and dead whole nodes are removed; plain
additions whose operands no longer line up channel-for-channel become
explicit routed additions; additions with one operand fully dead are
bypassed or turned into channel selections.  The result computes the same
function as the hard-masked original, just without the zeros.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .abstraction import (
    StructuralMask,
    build_abstraction,
    connectivity_forward,
    derive_structural_mask,
)
from .graph import (
    Add,
    BatchNorm2d,
    Concat,
    Conv2d,
    Graph,
    GraphError,
    IndexAdd,
    IndexMap,
    Node,
    validate_graph,
)
from .interpreter import check_mask
from .report import ShrinkReport, compression_report


class ShrinkError(Exception):
    """Internal inconsistency while rewriting; indicates a bug, not bad input."""


@dataclass
class CollapseReport:
    """Outcome of the pre-rewrite connectivity check."""

    collapsed: bool
    dead_output_channels: dict[str, tuple[int, ...]]
    dead_nodes: tuple[str, ...]


class CollapseError(Exception):
    """The mask disconnects the network output entirely on some channel."""

    def __init__(self, report: CollapseReport):
        self.report = report
        parts = [
            f"{oid}: channels {list(chs)}"
            for oid, chs in report.dead_output_channels.items()
        ]
        super().__init__(
            "mask disconnects output channels (" + "; ".join(parts) + ")")


@dataclass
class AddResolution:
    """What one add-family node becomes after the rewrite.

    action is one of:
      add        both operands still line up channel-for-channel
      index_add  both operands contribute, but routed
      select     one operand is fully dead and the survivor needs a
                 channel selection; both inputs wire to the survivor
      bypass     one operand is fully dead and the survivor passes
                 through unchanged
      drop       nothing survives
    """

    action: str
    index_map: IndexMap | None = None
    source: int | None = None


@dataclass
class ShrunkGraph:
    graph: Graph
    structural: StructuralMask
    resolutions: dict[str, AddResolution]


def _ranks(keep: np.ndarray) -> np.ndarray:
    """1-based position of each kept channel among the kept; 0 if dropped."""
    out = np.cumsum(keep.astype(np.int64))
    out[~keep] = 0
    return out


def extract_index_maps(graph: Graph, sm: StructuralMask) -> dict[str, AddResolution]:
    """Decide the fate of every add-family node from the surviving guards.

    Channel indices are ranked against everything the operand still emits,
    not just what this addition consumes; another consumer may keep more
    of the operand alive than this one needs.
    """
    out: dict[str, AddResolution] = {}
    for node in graph.nodes:
        if node.kind == "add":
            m = None
        elif node.kind == "index_add":
            m = node.op.index_map
        else:
            continue
        nid = node.id
        ca, cb = sm.contrib_keep[nid]
        out_keep = ca | cb
        if not out_keep.any():
            # both operands dead; the node is removed and any kept consumer
            # that still references it trips the resolve assertion below
            out[nid] = AddResolution(action="drop")
            continue
        pa, pb = node.inputs
        ra = _ranks(sm.channel_keep[pa])
        rb = _ranks(sm.channel_keep[pb])
        n_c = out_keep.shape[0]
        if m is None:
            i_a_old = i_b_old = tuple(range(1, n_c + 1))
        else:
            i_a_old, i_b_old = m.i_a, m.i_b
        i_a, i_b = [], []
        for k in range(n_c):
            if not out_keep[k]:
                continue
            i_a.append(int(ra[i_a_old[k] - 1]) if ca[k] else 0)
            i_b.append(int(rb[i_b_old[k] - 1]) if cb[k] else 0)
        n_a = int(sm.channel_keep[pa].sum())
        n_b = int(sm.channel_keep[pb].sum())

        if not any(i_a) or not any(i_b):
            side = 1 if any(i_b) else 0
            keep_idx = i_b if side else i_a
            n_s = n_b if side else n_a
            if len(keep_idx) == n_s and keep_idx == list(range(1, n_s + 1)):
                out[nid] = AddResolution(action="bypass", source=side)
            else:
                zeros = [0] * len(keep_idx)
                new = IndexMap(
                    i_a=tuple(zeros if side else keep_idx),
                    i_b=tuple(keep_idx if side else zeros),
                    n_a=n_s, n_b=n_s)
                out[nid] = AddResolution(
                    action="select", index_map=new, source=side)
        else:
            new = IndexMap(i_a=tuple(i_a), i_b=tuple(i_b), n_a=n_a, n_b=n_b)
            if new.check() or not new.sources_increasing():
                raise ShrinkError(
                    f"extracted an inadmissible map at {nid!r}: {new}")
            if new.is_identity():
                out[nid] = AddResolution(action="add")
            else:
                out[nid] = AddResolution(action="index_add", index_map=new)
    return out


def detect_collapse(graph: Graph, sm: StructuralMask) -> CollapseReport:
    """Check whether every output channel is still forward-reachable.

    An output channel nothing can reach would have to be materialised as a
    constant zero to keep the interface; that is collapse, not shrinking.
    Output channels are always demanded, so forward liveness decides.
    """
    fwd = sm.live.forward
    dead: dict[str, tuple[int, ...]] = {}
    for oid in graph.output_ids:
        idx = np.flatnonzero(~fwd[oid])
        if idx.size:
            dead[oid] = tuple(int(i) for i in idx)
    dead_nodes = tuple(
        n.id for n in graph.nodes
        if n.kind != "input" and not fwd[n.id].any())
    return CollapseReport(
        collapsed=bool(dead),
        dead_output_channels=dead,
        dead_nodes=dead_nodes,
    )


def rewrite_graph(
    graph: Graph,
    sm: StructuralMask,
    resolutions: dict[str, AddResolution],
) -> Graph:
    """Emit the shrunk graph: slice weights, rewire, drop and bypass.

    Node ids are stable across the rewrite; declaration order is kept for
    the survivors.
    """
    removed = set(sm.removed)
    bypass: dict[str, str] = {}

    # bypasses first, so forward references resolve no matter the
    # declaration order
    for node in graph.nodes:
        if node.id in removed:
            continue
        if node.kind in ("add", "index_add"):
            res = resolutions[node.id]
            if res.action == "bypass":
                bypass[node.id] = node.inputs[res.source]
        elif node.kind == "concat":
            alive = [i for i in node.inputs if sm.channel_keep[i].any()]
            if len(alive) == 1:
                bypass[node.id] = alive[0]

    def resolve(nid: str) -> str:
        seen = set()
        while nid in bypass:
            if nid in seen:
                raise ShrinkError(f"bypass cycle through {nid!r}")
            seen.add(nid)
            nid = bypass[nid]
        if nid in removed:
            raise ShrinkError(f"a kept node still reads removed node {nid!r}")
        return nid

    nodes: list[Node] = []
    for node in graph.nodes:
        if node.id in removed or node.id in bypass:
            continue
        op = node.op
        if node.kind == "input":
            nodes.append(node)
        elif node.kind == "conv2d":
            rows = sm.filter_keep[node.id]
            cols = sm.channel_keep[node.inputs[0]]
            w = op.weights[rows][:, cols]
            nodes.append(Node(
                id=node.id,
                op=Conv2d(
                    out_channels=int(rows.sum()),
                    in_channels=int(cols.sum()),
                    kernel=op.kernel,
                    stride=op.stride,
                    padding=op.padding,
                    weights=w,
                    bias=None if op.bias is None else op.bias[rows],
                ),
                inputs=(resolve(node.inputs[0]),),
            ))
        elif node.kind == "batchnorm2d":
            ck = sm.channel_keep[node.inputs[0]]
            nodes.append(Node(
                id=node.id,
                op=BatchNorm2d(
                    gamma=op.gamma[ck],
                    beta=op.beta[ck],
                    running_mean=op.running_mean[ck],
                    running_var=op.running_var[ck],
                    eps=op.eps,
                ),
                inputs=(resolve(node.inputs[0]),),
            ))
        elif node.kind in ("add", "index_add"):
            res = resolutions[node.id]
            if res.action == "drop":
                raise ShrinkError(
                    f"dropped node {node.id!r} was not marked removed")
            if res.action == "add":
                nodes.append(Node(id=node.id, op=Add(),
                                  inputs=tuple(resolve(i) for i in node.inputs)))
            elif res.action == "index_add":
                nodes.append(Node(id=node.id, op=IndexAdd(res.index_map),
                                  inputs=tuple(resolve(i) for i in node.inputs)))
            else:  # select
                src = resolve(node.inputs[res.source])
                nodes.append(Node(id=node.id, op=IndexAdd(res.index_map),
                                  inputs=(src, src)))
        elif node.kind == "concat":
            alive = tuple(resolve(i) for i in node.inputs
                          if sm.channel_keep[i].any())
            nodes.append(Node(id=node.id, op=Concat(), inputs=alive))
        else:  # relu, upsample, global_avg_pool, output
            nodes.append(Node(id=node.id, op=op,
                              inputs=tuple(resolve(i) for i in node.inputs)))
    return Graph(input_shape=graph.input_shape, nodes=tuple(nodes),
                 output_ids=graph.output_ids)


def shrink_pipeline(
    graph: Graph, mask: dict[str, np.ndarray]
) -> tuple[ShrunkGraph, ShrinkReport]:
    """Validate, analyse, check for collapse, rewrite, account.

    Raises GraphError for an invalid source graph, MaskError for a mask
    that does not fit, CollapseError when an output channel would die.
    The emitted graph is re-validated; a violation there is a ShrinkError.
    """
    violations = validate_graph(graph)
    if violations:
        raise GraphError("; ".join(str(v) for v in violations))
    check_mask(graph, mask)
    sm = derive_structural_mask(graph, mask)
    collapse = detect_collapse(graph, sm)
    if collapse.collapsed:
        raise CollapseError(collapse)
    resolutions = extract_index_maps(graph, sm)
    shrunk = rewrite_graph(graph, sm, resolutions)
    bad = validate_graph(shrunk)
    if bad:
        raise ShrinkError(
            "rewritten graph fails validation: "
            + "; ".join(str(v) for v in bad))
    result = ShrunkGraph(graph=shrunk, structural=sm, resolutions=resolutions)
    return result, compression_report(graph, shrunk, mask)


def structural_mask_doc(sm: StructuralMask) -> dict:
    """JSON-ready audit view of a structural mask."""
    return {
        "filter_keep": {cid: [int(v) for v in k]
                        for cid, k in sm.filter_keep.items()},
        "slice_keep": {cid: [[int(v) for v in row] for row in k]
                       for cid, k in sm.slice_keep.items()},
        "bias_keep": {cid: [int(v) for v in k]
                      for cid, k in sm.bias_keep.items()},
        "channel_keep": {nid: [int(v) for v in k]
                         for nid, k in sm.channel_keep.items()},
        "removed": list(sm.removed),
    }
