"""Before/after accounting for a shrink run.

Compression ratios are before over after, so larger means smaller; the
filter ratio counts the mask's own decisions, the parameter ratio counts
what the rewrite actually removed (cascaded slices included).
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .graph import Graph, count_macs, count_params


@dataclass
class ShrinkReport:
    filters_total: int
    filters_pruned: int
    params_before: int
    params_after: int
    macs_before: int
    macs_after: int
    filter_compression: float
    param_compression: float
    mac_compression: float
    param_pruning_rate: float
    nodes_before: int
    nodes_after: int
    removed_nodes: tuple[str, ...]
    converted_adds: tuple[str, ...]
    per_conv: dict[str, tuple[int, int]]

    def to_doc(self) -> dict:
        return {
            "filters": {
                "total": self.filters_total,
                "pruned": self.filters_pruned,
                "compression": self.filter_compression,
            },
            "params": {
                "before": self.params_before,
                "after": self.params_after,
                "compression": self.param_compression,
                "pruning_rate": self.param_pruning_rate,
            },
            "macs": {
                "before": self.macs_before,
                "after": self.macs_after,
                "compression": self.mac_compression,
            },
            "nodes": {
                "before": self.nodes_before,
                "after": self.nodes_after,
            },
            "removed_nodes": list(self.removed_nodes),
            "converted_adds": list(self.converted_adds),
            "per_conv": {
                cid: {"before": b, "after": a}
                for cid, (b, a) in self.per_conv.items()
            },
        }

    def to_json(self) -> str:
        return json.dumps(self.to_doc(), indent=2) + "\n"


def compression_report(
    g_before: Graph,
    g_after: Graph,
    mask: dict[str, np.ndarray],
    input_hw: tuple[int, int] | None = None,
) -> ShrinkReport:
    """Compare the two graphs and the mask that connected them.

    Raises ValueError when the rewritten graph carries no parameters at
    all; a collapse should have been surfaced long before this point.
    """
    filters_total = sum(int(np.asarray(k).shape[0]) for k in mask.values())
    filters_pruned = sum(int((~np.asarray(k, dtype=bool)).sum())
                         for k in mask.values())
    pb, pa = count_params(g_before), count_params(g_after)
    if pa == 0:
        raise ValueError("rewritten graph has no parameters left")
    mb = count_macs(g_before, input_hw)
    ma = count_macs(g_after, input_hw)
    per_conv: dict[str, tuple[int, int]] = {}
    for nid in g_before.conv_ids():
        before = g_before.node(nid).op.out_channels
        after = (g_after.node(nid).op.out_channels
                 if g_after.has_node(nid) and g_after.node(nid).kind == "conv2d"
                 else 0)
        per_conv[nid] = (before, after)
    removed = tuple(n.id for n in g_before.nodes if not g_after.has_node(n.id))
    converted = tuple(
        n.id for n in g_before.nodes
        if n.kind == "add" and g_after.has_node(n.id)
        and g_after.node(n.id).kind == "index_add")
    return ShrinkReport(
        filters_total=filters_total,
        filters_pruned=filters_pruned,
        params_before=pb,
        params_after=pa,
        macs_before=mb,
        macs_after=ma,
        filter_compression=(filters_total / (filters_total - filters_pruned)
                            if filters_pruned < filters_total else float("inf")),
        param_compression=pb / pa,
        mac_compression=mb / ma if ma else float("inf"),
        param_pruning_rate=1.0 - pa / pb,
        nodes_before=len(g_before.nodes),
        nodes_after=len(g_after.nodes),
        removed_nodes=removed,
        converted_adds=converted,
        per_conv=per_conv,
    )


def format_sweep(rows: list[dict]) -> str:
    """Fixed-width table for a prune-rate sweep, one row per rate."""
    header = (
        f"{'rate':>6} {'filters_kept':>13} {'params_after':>13} "
        f"{'filter_x':>9} {'param_x':>9} {'mac_x':>9}"
    )
    lines = [header, "-" * len(header)]
    for r in rows:
        lines.append(
            f"{r['rate']:>6.2f} "
            f"{r['filters_total'] - r['filters_pruned']:>13d} "
            f"{r['params_after']:>13d} "
            f"{r['filter_compression']:>9.4f} {r['param_compression']:>9.4f} "
            f"{r['mac_compression']:>9.4f}"
        )
    return "\n".join(lines)
