"""Architectural liveness analysis for masked graphs.

The concrete network is mirrored into a skeleton that keeps only what
matters for connectivity: biases, activations and normalisation drop out,
conv weights collapse to their filter's mask bit, and a diagonal identity
conv (a guard) is spliced in front of each plain-addition operand.  On
that skeleton two boolean passes run per channel: a forward pass marking
channels that can still receive signal from the input, and a backward
pass marking channels some output still demands.  A weight is dead
exactly when one of the two fails, which is what a literal zero-gradient
probe of the skeleton would report; the boolean form gives the same
verdict without floats.

The surviving guard diagonals are what later turns a plain addition into
an explicit channel routing.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .graph import Graph, IndexMap, channel_counts, identity_index_map, topo_order

_PASS_KINDS = {"batchnorm2d", "relu", "upsample", "global_avg_pool"}


@dataclass
class ANode:
    """One skeleton node.  ``channels`` is the output width.

    ``row_keep`` is the mask bit per filter (conv only); ``index_map`` is
    the routing table (add family only, identity for a plain add).
    """

    id: str
    kind: str  # source | conv | pass | add | concat | sink | diag
    inputs: tuple[str, ...]
    channels: int
    row_keep: np.ndarray | None = None
    index_map: IndexMap | None = None


@dataclass
class IdentityConv:
    """Guard spliced before an addition operand; its surviving diagonal
    entries are read off by the index-map extraction."""

    node_id: str
    add_id: str
    side: int  # operand position, 0 or 1


@dataclass
class AbstractGraph:
    """Skeleton nodes in topological order, plus the spliced guards."""

    nodes: tuple[ANode, ...]
    outputs: tuple[str, ...]
    guards: tuple[IdentityConv, ...] = ()
    _by_id: dict[str, ANode] = field(init=False, repr=False)

    def __post_init__(self) -> None:
        self._by_id = {n.id: n for n in self.nodes}

    def node(self, nid: str) -> ANode:
        return self._by_id[nid]

    def guard_ids(self, add_id: str) -> tuple[str, str]:
        pair = [g.node_id for g in self.guards if g.add_id == add_id]
        if len(pair) != 2:
            raise KeyError(f"no guards recorded for {add_id!r}")
        return (pair[0], pair[1])


@dataclass
class ChannelLiveness:
    """Per-node boolean channel vectors from the two passes."""

    forward: dict[str, np.ndarray]
    backward: dict[str, np.ndarray]

    def survivors(self, nid: str) -> np.ndarray:
        return self.forward[nid] & self.backward[nid]


def build_abstraction(graph: Graph, mask: dict[str, np.ndarray]) -> AbstractGraph:
    """Mirror the graph into its skeleton and splice the guards.

    Convs absent from the mask count as fully kept.
    """
    widths = channel_counts(graph)
    nodes: list[ANode] = []
    for nid in topo_order(graph):
        node = graph.node(nid)
        ch = widths[nid]
        if node.kind == "input":
            nodes.append(ANode(nid, "source", node.inputs, ch))
        elif node.kind == "conv2d":
            keep = np.asarray(
                mask.get(nid, np.ones(node.op.out_channels)), dtype=bool)
            if keep.shape != (node.op.out_channels,):
                raise ValueError(
                    f"mask for {nid!r} has {keep.shape[0]} flags, conv has "
                    f"{node.op.out_channels} filters")
            nodes.append(ANode(nid, "conv", node.inputs, ch, row_keep=keep))
        elif node.kind in _PASS_KINDS:
            nodes.append(ANode(nid, "pass", node.inputs, ch))
        elif node.kind == "add":
            nodes.append(ANode(nid, "add", node.inputs, ch,
                               index_map=identity_index_map(ch)))
        elif node.kind == "index_add":
            nodes.append(ANode(nid, "add", node.inputs, ch,
                               index_map=node.op.index_map))
        elif node.kind == "concat":
            nodes.append(ANode(nid, "concat", node.inputs, ch))
        elif node.kind == "output":
            nodes.append(ANode(nid, "sink", node.inputs, ch))
        else:
            raise ValueError(f"cannot abstract node kind {node.kind!r}")
    return insert_identity_convs(
        AbstractGraph(nodes=tuple(nodes), outputs=graph.output_ids))


def insert_identity_convs(ag: AbstractGraph) -> AbstractGraph:
    """Splice a diagonal guard before each operand of each add-family node.

    The guards are where partial liveness becomes visible: a dead diagonal
    entry means that operand no longer feeds that output channel.
    """
    taken = {n.id for n in ag.nodes}

    def fresh(base: str) -> str:
        nid = base
        while nid in taken:
            nid += "+"
        taken.add(nid)
        return nid

    nodes: list[ANode] = []
    guards: list[IdentityConv] = []
    for n in ag.nodes:
        if n.kind != "add":
            nodes.append(n)
            continue
        new_inputs = []
        for side, src in enumerate(n.inputs):
            gid = fresh(f"{n.id}.guard{'ab'[side]}")
            width = ag.node(src).channels
            nodes.append(ANode(gid, "diag", (src,), width))
            guards.append(IdentityConv(node_id=gid, add_id=n.id, side=side))
            new_inputs.append(gid)
        nodes.append(ANode(n.id, n.kind, tuple(new_inputs), n.channels,
                           index_map=n.index_map))
    return AbstractGraph(nodes=tuple(nodes), outputs=ag.outputs,
                         guards=tuple(guards))


def connectivity_forward(ag: AbstractGraph) -> dict[str, np.ndarray]:
    """Channels that can still receive signal from the input.

    A kept conv filter reads every input channel, so it is live as soon as
    any input channel is; a pruned filter is never live.
    """
    fwd: dict[str, np.ndarray] = {}
    for n in ag.nodes:
        ins = [fwd[i] for i in n.inputs]
        if n.kind == "source":
            fwd[n.id] = np.ones(n.channels, dtype=bool)
        elif n.kind == "conv":
            fwd[n.id] = n.row_keep & bool(ins[0].any())
        elif n.kind in ("pass", "diag", "sink"):
            fwd[n.id] = ins[0].copy()
        elif n.kind == "add":
            m = n.index_map
            out = np.zeros(n.channels, dtype=bool)
            for k in range(m.n_c):
                a, b = m.i_a[k], m.i_b[k]
                out[k] = (a > 0 and ins[0][a - 1]) or (b > 0 and ins[1][b - 1])
            fwd[n.id] = out
        elif n.kind == "concat":
            fwd[n.id] = np.concatenate(ins) if ins else np.zeros(0, dtype=bool)
        else:
            raise ValueError(f"unknown skeleton kind {n.kind!r}")
    return fwd


def connectivity_backward(ag: AbstractGraph) -> dict[str, np.ndarray]:
    """Channels some output still demands, swept against the edges.

    Every output channel is demanded by definition.  A demanded kept conv
    filter demands all of its input channels; routing tables and concats
    demand selectively.
    """
    bwd: dict[str, np.ndarray] = {
        n.id: np.zeros(n.channels, dtype=bool) for n in ag.nodes
    }
    for oid in ag.outputs:
        bwd[oid][:] = True
    for n in reversed(ag.nodes):
        need = bwd[n.id]
        if n.kind in ("source",) or not n.inputs:
            continue
        if n.kind == "conv":
            if bool((n.row_keep & need).any()):
                bwd[n.inputs[0]][:] = True
        elif n.kind in ("pass", "diag", "sink"):
            bwd[n.inputs[0]] |= need
        elif n.kind == "add":
            m = n.index_map
            for k in range(m.n_c):
                if not need[k]:
                    continue
                if m.i_a[k] > 0:
                    bwd[n.inputs[0]][m.i_a[k] - 1] = True
                if m.i_b[k] > 0:
                    bwd[n.inputs[1]][m.i_b[k] - 1] = True
        elif n.kind == "concat":
            off = 0
            for src in n.inputs:
                w = ag.node(src).channels
                bwd[src] |= need[off:off + w]
                off += w
        else:
            raise ValueError(f"unknown skeleton kind {n.kind!r}")
    return bwd


def liveness(ag: AbstractGraph) -> ChannelLiveness:
    return ChannelLiveness(forward=connectivity_forward(ag),
                           backward=connectivity_backward(ag))


@dataclass
class StructuralMask:
    """Everything the rewrite needs, per node of the original graph.

    ``channel_keep`` maps each node to the channels it will still emit;
    for pass-through nodes that is the producer's vector, since a
    channel-wise op cannot narrow mid-stream.  ``contrib_keep`` holds, per
    add-family node, which output channels each operand still feeds.
    ``removed`` lists nodes with nothing left to compute.
    """

    filter_keep: dict[str, np.ndarray]
    slice_keep: dict[str, np.ndarray]
    bias_keep: dict[str, np.ndarray]
    channel_keep: dict[str, np.ndarray]
    contrib_keep: dict[str, tuple[np.ndarray, np.ndarray]]
    removed: tuple[str, ...]
    live: ChannelLiveness


def derive_structural_mask(graph: Graph, mask: dict[str, np.ndarray]) -> StructuralMask:
    """Turn a filter mask into the full structural consequence.

    A conv weight slice survives only when its filter is kept, its output
    channel is still demanded and its input channel still carries signal;
    each of the three alone is not enough.
    """
    ag = build_abstraction(graph, mask)
    live = liveness(ag)
    fwd, bwd = live.forward, live.backward

    filter_keep: dict[str, np.ndarray] = {}
    slice_keep: dict[str, np.ndarray] = {}
    bias_keep: dict[str, np.ndarray] = {}
    channel_keep: dict[str, np.ndarray] = {}
    contrib_keep: dict[str, tuple[np.ndarray, np.ndarray]] = {}
    removed: list[str] = []

    order = topo_order(graph)
    for nid in order:
        node = graph.node(nid)
        if node.kind == "input":
            channel_keep[nid] = np.ones(graph.input_channels, dtype=bool)
            continue
        if node.kind == "conv2d":
            src = node.inputs[0]
            fin = fwd[src]
            rows = ag.node(nid).row_keep & bwd[nid] & bool(fin.any())
            filter_keep[nid] = rows
            slice_keep[nid] = rows[:, None] & fin[None, :]
            if node.op.bias is not None:
                bias_keep[nid] = rows.copy()
            channel_keep[nid] = rows
        elif node.kind in _PASS_KINDS:
            channel_keep[nid] = channel_keep[node.inputs[0]].copy()
        elif node.kind in ("add", "index_add"):
            ga, gb = ag.guard_ids(nid)
            m = ag.node(nid).index_map
            ca = np.zeros(m.n_c, dtype=bool)
            cb = np.zeros(m.n_c, dtype=bool)
            for k in range(m.n_c):
                if not bwd[nid][k]:
                    continue
                if m.i_a[k] > 0 and fwd[ga][m.i_a[k] - 1]:
                    ca[k] = True
                if m.i_b[k] > 0 and fwd[gb][m.i_b[k] - 1]:
                    cb[k] = True
            contrib_keep[nid] = (ca, cb)
            channel_keep[nid] = ca | cb
        elif node.kind == "concat":
            channel_keep[nid] = np.concatenate(
                [channel_keep[i] for i in node.inputs])
        else:  # output
            channel_keep[nid] = channel_keep[node.inputs[0]].copy()

        if node.kind != "output":
            demandless = not bwd[nid].any()
            if demandless or not channel_keep[nid].any():
                removed.append(nid)
                channel_keep[nid] = np.zeros_like(channel_keep[nid])
                if node.kind == "conv2d":
                    filter_keep[nid] = np.zeros_like(filter_keep[nid])
                    slice_keep[nid] = np.zeros_like(slice_keep[nid])
                    if nid in bias_keep:
                        bias_keep[nid] = np.zeros_like(bias_keep[nid])

    return StructuralMask(
        filter_keep=filter_keep,
        slice_keep=slice_keep,
        bias_keep=bias_keep,
        channel_keep=channel_keep,
        contrib_keep=contrib_keep,
        removed=tuple(removed),
        live=live,
    )
