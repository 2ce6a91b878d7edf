"""Filter saliency and mask selection.

Filters are scored by the magnitude of the batch-norm scale that follows
their convolution; small scales mark filters whose contribution training
has already suppressed.  Selection drops the lowest-scoring floor(rate *
count) filters, ranked across the whole network or within each layer.
The smooth L1 penalty that drives scales toward zero during training is
provided so the training-time objective stays representable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .graph import Graph

FilterMask = dict[str, np.ndarray]


class MaskCriterionError(Exception):
    """The scoring criterion cannot be evaluated on this graph."""


@dataclass
class PruningConfig:
    target_rate: float
    scope: str = "global"
    iterations: int = 1
    penalty_weight: float = 0.0
    delta: float = 1.0

    def __post_init__(self) -> None:
        if not 0.0 <= self.target_rate < 1.0:
            raise ValueError(f"target rate {self.target_rate} outside [0, 1)")
        if self.scope not in ("global", "local"):
            raise ValueError(f"unknown scope {self.scope!r}")
        if self.iterations < 1:
            raise ValueError(f"iterations must be positive, got {self.iterations}")
        if self.penalty_weight < 0:
            raise ValueError("penalty weight must be non-negative")
        if self.delta <= 0:
            raise ValueError(f"delta must be positive, got {self.delta}")


@dataclass
class FilterScores:
    """Saliency per eligible filter, in declaration order; lower prunes first."""

    by_conv: dict[str, np.ndarray]

    @property
    def total(self) -> int:
        return sum(int(s.shape[0]) for s in self.by_conv.values())

    def entries(self) -> Iterator[tuple[str, int, float]]:
        for nid, vals in self.by_conv.items():
            for f, s in enumerate(vals):
                yield (nid, f, float(s))


def score_bn_gamma(graph: Graph) -> FilterScores:
    """Score each eligible conv filter by |gamma| of its batch norm.

    Convs feeding an Output node directly are the task head; they are
    never eligible, which also rules out the most obvious collapse.  Every
    other conv must be followed by exactly one batch norm, or the
    criterion has no scale to read.
    """
    consumers = graph.consumers()
    by_conv: dict[str, np.ndarray] = {}
    for n in graph.nodes:
        if n.kind != "conv2d":
            continue
        kinds = [graph.node(c).kind for c in consumers[n.id]]
        if "output" in kinds:
            continue
        bns = [c for c in consumers[n.id]
               if graph.node(c).kind == "batchnorm2d"]
        if not bns:
            raise MaskCriterionError(
                f"conv {n.id!r} is eligible but has no following batch norm")
        if len(bns) > 1:
            raise MaskCriterionError(
                f"conv {n.id!r} feeds {len(bns)} batch norms; scores are ambiguous")
        gamma = graph.node(bns[0]).op.gamma
        by_conv[n.id] = np.abs(gamma.astype(np.float64))
    return FilterScores(by_conv=by_conv)


def _prune_count(rate: float, total: int) -> int:
    # floor, nudged so rates like 1/3 of 3 are not undercut by float dust
    return int(math.floor(rate * total + 1e-9))


def select_global(scores: FilterScores, rate: float) -> FilterMask:
    """Masks for the scored convs, pruning the floor(rate * N) globally
    lowest-scoring filters; ties fall to the earlier layer, then the lower
    filter index."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"prune rate {rate} outside [0, 1)")
    pool = []
    for pos, (nid, vals) in enumerate(scores.by_conv.items()):
        for f, s in enumerate(vals):
            pool.append((float(s), pos, f, nid))
    pool.sort(key=lambda t: (t[0], t[1], t[2]))
    mask = {nid: np.ones(vals.shape[0], dtype=bool)
            for nid, vals in scores.by_conv.items()}
    for s, pos, f, nid in pool[:_prune_count(rate, len(pool))]:
        mask[nid][f] = False
    return mask


def select_local(scores: FilterScores, rate: float) -> FilterMask:
    """Masks for the scored convs, pruning floor(rate * f_out) per conv."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"prune rate {rate} outside [0, 1)")
    mask: FilterMask = {}
    for nid, vals in scores.by_conv.items():
        order = sorted(range(vals.shape[0]), key=lambda f: (float(vals[f]), f))
        keep = np.ones(vals.shape[0], dtype=bool)
        for f in order[:_prune_count(rate, vals.shape[0])]:
            keep[f] = False
        mask[nid] = keep
    return mask


def iteration_schedule(target_rate: float, iterations: int) -> list[float]:
    """Linearly growing prune rates, hitting the target at the last step."""
    if not 0.0 <= target_rate < 1.0:
        raise ValueError(f"target rate {target_rate} outside [0, 1)")
    if iterations < 1:
        raise ValueError(f"iterations must be positive, got {iterations}")
    return [target_rate * t / iterations for t in range(1, iterations + 1)]


def smooth_l1_penalty(gammas, weight: float, delta: float = 1.0) -> float:
    """weight * sum of the smooth L1 of |gammas|.

    Quadratic below delta (z^2 / 2 delta), linear above (z - delta / 2);
    value and slope agree where the branches meet.
    """
    if delta <= 0:
        raise ValueError(f"delta must be positive, got {delta}")
    z = np.abs(np.asarray(gammas, dtype=np.float64))
    per = np.where(z < delta, z * z / (2.0 * delta), z - delta / 2.0)
    return float(weight * per.sum())


def build_mask(graph: Graph, config: PruningConfig) -> FilterMask:
    """Score, select at the target rate, and pad to full conv coverage.

    The returned mask holds a vector for every conv of the graph;
    ineligible convs get all-true vectors.
    """
    scores = score_bn_gamma(graph)
    if config.scope == "global":
        mask = select_global(scores, config.target_rate)
    else:
        mask = select_local(scores, config.target_rate)
    full = all_ones_mask(graph)
    full.update(mask)
    return full


def all_ones_mask(graph: Graph) -> FilterMask:
    return {nid: np.ones(graph.node(nid).op.out_channels, dtype=bool)
            for nid in graph.conv_ids()}
