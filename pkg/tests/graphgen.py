"""Seeded random graph and mask corpus for the property suites.

Generated graphs follow the shapes the rewriter is meant for: a stem
conv, one to four residual blocks (identity or projected skips, one or
two strided transitions, an occasional concat fusion), an optional
upsampled tail, and a head conv feeding the output, sometimes after
global pooling, sometimes with an auxiliary output.  Every batch norm
directly follows its conv and is that conv's only consumer, matching how
these nets are actually built.

Masks prune each eligible filter independently, sometimes wipe out a
whole branch on purpose, and never touch head convs (those feed outputs).
Collapse is allowed to happen; callers split the corpus by outcome.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from convshrink import (
    Add,
    BatchNorm2d,
    Concat,
    Conv2d,
    GlobalAvgPool,
    Graph,
    InputOp,
    Node,
    OutputOp,
    ReLU,
    Upsample,
)


def make_conv(rng, f_out, f_in, k=3, stride=1, padding="same", bias=True) -> Conv2d:
    w = rng.standard_normal((f_out, f_in, k, k)).astype(np.float32)
    w *= np.float32(1.0 / np.sqrt(f_in * k * k))
    b = rng.standard_normal(f_out).astype(np.float32) * np.float32(0.1) if bias else None
    return Conv2d(f_out, f_in, (k, k), stride, padding, w, b)


def make_bn(rng, ch) -> BatchNorm2d:
    return BatchNorm2d(
        gamma=rng.standard_normal(ch).astype(np.float32),
        beta=rng.standard_normal(ch).astype(np.float32) * np.float32(0.1),
        running_mean=rng.standard_normal(ch).astype(np.float32) * np.float32(0.2),
        running_var=rng.uniform(0.2, 1.5, ch).astype(np.float32),
        eps=1e-5,
    )


class _Builder:
    def __init__(self):
        self.nodes: list[Node] = []
        self._n = 0

    def add(self, prefix: str, op, *inputs: str) -> str:
        self._n += 1
        nid = f"{prefix}{self._n}"
        self.nodes.append(Node(id=nid, op=op, inputs=tuple(inputs)))
        return nid

    def conv_bn_relu(self, rng, src, f_out, f_in, *, k=3, stride=1, relu=True) -> str:
        c = self.add("conv", make_conv(rng, f_out, f_in, k=k, stride=stride,
                                       bias=bool(rng.random() < 0.7)), src)
        b = self.add("bn", make_bn(rng, f_out), c)
        return self.add("relu", ReLU(), b) if relu else b


def random_graph(seed: int) -> Graph:
    rng = np.random.default_rng(seed)
    b = _Builder()
    in_ch = int(rng.integers(2, 5))
    width = int(rng.integers(2, 9))
    x = b.add("in", InputOp())
    x = b.conv_bn_relu(rng, x, width, in_ch, k=int(rng.choice([1, 3])))

    n_blocks = int(rng.integers(1, 5))
    strided_left = 1  # input is 6x6; one stride-2 transition fits
    for _ in range(n_blocks):
        roll = rng.random()
        if roll < 0.15 and strided_left:
            new_w = int(rng.integers(2, 9))
            x = b.conv_bn_relu(rng, x, new_w, width, k=3, stride=2)
            width = new_w
            strided_left -= 1
        elif roll < 0.30:
            # concat fusion of two parallel branches
            w1 = int(rng.integers(2, 6))
            w2 = int(rng.integers(2, 6))
            p = b.conv_bn_relu(rng, x, w1, width, k=int(rng.choice([1, 3])))
            q = b.conv_bn_relu(rng, x, w2, width, k=int(rng.choice([1, 3])))
            cat = b.add("cat", Concat(), p, q)
            new_w = int(rng.integers(2, 9))
            x = b.conv_bn_relu(rng, cat, new_w, w1 + w2, k=1)
            width = new_w
        else:
            # residual block, identity or projected skip
            depth = 2 if rng.random() < 0.7 else 3
            branch = x
            for d in range(depth - 1):
                branch = b.conv_bn_relu(
                    rng, branch, width, width, k=int(rng.choice([1, 3])))
            branch = b.conv_bn_relu(
                rng, branch, width, width, k=int(rng.choice([1, 3])), relu=False)
            if rng.random() < 0.25:
                skip = b.conv_bn_relu(rng, x, width, width, k=1, relu=False)
            else:
                skip = x
            s = b.add("add", Add(), branch, skip)
            x = b.add("relu", ReLU(), s) if rng.random() < 0.7 else s

    if rng.random() < 0.15:
        up = b.add("up", Upsample(factor=2), x)
        new_w = int(rng.integers(2, 9))
        x = b.conv_bn_relu(rng, up, new_w, width, k=3)
        width = new_w

    aux_out = None
    if rng.random() < 0.15:
        aux_head = b.add("auxhead", make_conv(rng, int(rng.integers(1, 4)),
                                              width, k=1), x)
        aux_out = b.add("auxout", OutputOp(), aux_head)

    if rng.random() < 0.4:
        x = b.add("gap", GlobalAvgPool(), x)
    head = b.add("head", make_conv(rng, int(rng.integers(1, 5)), width, k=1,
                                   padding="valid" if rng.random() < 0.3 else "same"),
                 x)
    out = b.add("out", OutputOp(), head)
    outputs = (out,) if aux_out is None else (out, aux_out)
    return Graph(input_shape=(in_ch, 6, 6), nodes=tuple(b.nodes),
                 output_ids=outputs)


def random_mask(seed: int, graph: Graph) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed + 1_000_003)
    consumers = graph.consumers()
    mask: dict[str, np.ndarray] = {}
    eligible: list[str] = []
    for nid in graph.conv_ids():
        feeds_output = any(graph.node(c).kind == "output" for c in consumers[nid])
        n = graph.node(nid).op.out_channels
        mask[nid] = np.ones(n, dtype=bool)
        if not feeds_output:
            eligible.append(nid)
    if not eligible or rng.random() < 0.08:
        return mask  # nothing pruned
    p = rng.uniform(0.2, 0.6)
    for nid in eligible:
        mask[nid] = rng.random(mask[nid].shape[0]) >= p
    if rng.random() < 0.3:
        # wipe a whole branch
        victim = eligible[int(rng.integers(len(eligible)))]
        mask[victim][:] = False
    return mask


@dataclass
class CorpusEntry:
    seed: int
    graph: Graph
    mask: dict[str, np.ndarray]


def corpus(size: int, base_seed: int = 0) -> list[CorpusEntry]:
    out = []
    for i in range(size):
        g = random_graph(base_seed + i)
        out.append(CorpusEntry(seed=base_seed + i, graph=g,
                               mask=random_mask(base_seed + i, g)))
    return out
