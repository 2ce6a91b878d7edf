"""Executes graphs on (c, h, w) float32 tensors, one sample at a time.

Also provides mask materialisation: a filter mask can be applied to a graph
without touching any existing parameter, by splicing diagonal 1x1
convolutions that zero the pruned channels.  Running the masked graph is
the semantic reference the structural rewrite must reproduce.
"""

from __future__ import annotations

import numpy as np

from . import kernels
from .graph import (
    BatchNorm2d,
    Conv2d,
    Graph,
    IndexMap,
    Node,
    _conv_out_hw,
    conv_pad_amounts,
    spatial_shapes,
    topo_order,
)


class MaskError(Exception):
    """A filter mask does not fit the graph it is applied to."""


def op_conv2d(x: np.ndarray, op: Conv2d) -> np.ndarray:
    """Run one convolution on a (c, h, w) float32 tensor."""
    if x.shape[0] != op.in_channels:
        raise ValueError(
            f"conv wants {op.in_channels} input channels, got {x.shape[0]}")
    hw = (x.shape[1], x.shape[2])
    top, bottom, left, right = conv_pad_amounts(hw, op)
    if top or bottom or left or right:
        x = np.pad(x, ((0, 0), (top, bottom), (left, right)))
    out_hw = _conv_out_hw(hw, op)
    return kernels.conv2d_padded(x, op.weights, op.bias, op.stride, out_hw)


def op_index_add(a: np.ndarray, b: np.ndarray, index_map: IndexMap) -> np.ndarray:
    """Route-and-add two tensors under an index map.

    Only structural soundness is enforced here; the operator itself is
    defined for any admissible map, ordered or not.
    """
    problems = index_map.check()
    if problems:
        raise ValueError("; ".join(problems))
    if a.shape[0] != index_map.n_a or b.shape[0] != index_map.n_b:
        raise ValueError(
            f"map expects operands {index_map.n_a}/{index_map.n_b}, "
            f"got {a.shape[0]}/{b.shape[0]}")
    if a.shape[0] and b.shape[0] and a.shape[1:] != b.shape[1:]:
        raise ValueError(f"spatial mismatch: {a.shape[1:]} vs {b.shape[1:]}")
    return kernels.index_add_channels(
        a, b,
        np.array(index_map.i_a, dtype=np.int64),
        np.array(index_map.i_b, dtype=np.int64),
    )


def _op_batchnorm(x: np.ndarray, op: BatchNorm2d) -> np.ndarray:
    scale = op.gamma / np.sqrt(op.running_var + np.float32(op.eps))
    return (x - op.running_mean[:, None, None]) * scale[:, None, None] \
        + op.beta[:, None, None]


def run_graph(graph: Graph, x: np.ndarray) -> dict[str, np.ndarray]:
    """Evaluate the graph on one sample; returns {output node id: tensor}.

    The input must carry the graph's declared channel count; spatial size
    may differ from the declared one as long as every valid-padding conv
    still tiles.
    """
    x = np.ascontiguousarray(x, dtype=np.float32)
    if x.ndim != 3 or x.shape[0] != graph.input_channels:
        raise ValueError(
            f"input shape {x.shape} does not carry {graph.input_channels} channels")
    spatial_shapes(graph, (x.shape[1], x.shape[2]))  # fail early, not mid-run

    values: dict[str, np.ndarray] = {}
    for nid in topo_order(graph):
        node = graph.node(nid)
        op = node.op
        ins = [values[i] for i in node.inputs]
        if node.kind == "input":
            values[nid] = x
        elif node.kind == "conv2d":
            values[nid] = op_conv2d(ins[0], op)
        elif node.kind == "batchnorm2d":
            values[nid] = _op_batchnorm(ins[0], op)
        elif node.kind == "relu":
            values[nid] = np.maximum(ins[0], np.float32(0))
        elif node.kind == "add":
            values[nid] = ins[0] + ins[1]
        elif node.kind == "index_add":
            values[nid] = op_index_add(ins[0], ins[1], op.index_map)
        elif node.kind == "concat":
            values[nid] = np.concatenate(ins, axis=0)
        elif node.kind == "upsample":
            values[nid] = np.repeat(np.repeat(ins[0], op.factor, axis=1),
                                    op.factor, axis=2)
        elif node.kind == "global_avg_pool":
            values[nid] = np.mean(ins[0], axis=(1, 2), keepdims=True,
                                  dtype=np.float32)
        elif node.kind == "output":
            values[nid] = ins[0]
        else:  # unreachable with a validated graph
            raise ValueError(f"cannot execute node kind {node.kind!r}")
    return {oid: values[oid] for oid in graph.output_ids}


def run_single(graph: Graph, x: np.ndarray) -> np.ndarray:
    outs = run_graph(graph, x)
    if len(outs) != 1:
        raise ValueError(f"graph has {len(outs)} outputs, expected exactly 1")
    return next(iter(outs.values()))


def check_mask(graph: Graph, mask: dict[str, np.ndarray]) -> None:
    """Raise MaskError unless the mask covers every conv, and only convs,
    with one flag per filter."""
    for nid, keep in mask.items():
        if not graph.has_node(nid):
            raise MaskError(f"mask names unknown node {nid!r}")
        node = graph.node(nid)
        if node.kind != "conv2d":
            raise MaskError(f"mask names {nid!r}, which is a {node.kind} node")
        keep = np.asarray(keep)
        if keep.shape != (node.op.out_channels,):
            raise MaskError(
                f"mask for {nid!r} has {keep.shape[0]} flags, "
                f"conv has {node.op.out_channels} filters")
    missing = [nid for nid in graph.conv_ids() if nid not in mask]
    if missing:
        raise MaskError(f"mask misses convs: {', '.join(missing)}")


def _diag_conv(keep: np.ndarray) -> Conv2d:
    n = keep.shape[0]
    w = np.zeros((n, n, 1, 1), dtype=np.float32)
    w[np.arange(n), np.arange(n), 0, 0] = keep.astype(np.float32)
    return Conv2d(out_channels=n, in_channels=n, kernel=(1, 1), stride=1,
                  padding="same", weights=w, bias=None)


def apply_hard_mask(graph: Graph, mask: dict[str, np.ndarray]) -> Graph:
    """Materialise a filter mask by splicing diagonal 1x1 zeroing convs.

    Pruned channels must read as exact zero downstream, including past the
    conv's batch norm (whose beta would otherwise leak a constant), so the
    zeroing conv lands after a consuming batch norm when there is one and
    directly after the conv for any other consumer.  All-true entries
    insert nothing; parameters of existing nodes are never modified.
    """
    check_mask(graph, mask)
    consumers = graph.consumers()
    redirect: dict[tuple[str, str], str] = {}  # (consumer, producer) -> new producer
    inserted: dict[str, list[Node]] = {}  # anchor id -> nodes spliced after it

    for nid, keep in mask.items():
        keep = np.asarray(keep, dtype=bool)
        if keep.all():
            continue
        bn_ids = [c for c in consumers[nid]
                  if graph.node(c).kind == "batchnorm2d"]
        other_ids = [c for c in consumers[nid] if c not in bn_ids]
        if other_ids:
            zid = f"{nid}__mask"
            if graph.has_node(zid):
                raise MaskError(f"cannot splice {zid!r}: id already taken")
            inserted.setdefault(nid, []).append(
                Node(id=zid, op=_diag_conv(keep), inputs=(nid,)))
            for c in other_ids:
                redirect[(c, nid)] = zid
        for bn in bn_ids:
            zid = f"{bn}__mask"
            if graph.has_node(zid):
                raise MaskError(f"cannot splice {zid!r}: id already taken")
            inserted.setdefault(bn, []).append(
                Node(id=zid, op=_diag_conv(keep), inputs=(bn,)))
            for c in consumers[bn]:
                redirect[(c, bn)] = zid

    if not inserted:
        return graph

    nodes: list[Node] = []
    for n in graph.nodes:
        new_inputs = tuple(redirect.get((n.id, src), src) for src in n.inputs)
        if new_inputs != n.inputs:
            n = Node(id=n.id, op=n.op, inputs=new_inputs)
        nodes.append(n)
        nodes.extend(inserted.get(n.id, ()))
    return Graph(input_shape=graph.input_shape, nodes=tuple(nodes),
                 output_ids=graph.output_ids)
