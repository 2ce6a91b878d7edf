"""On-disk formats: graph documents, filter masks and tensors.

The graph document is JSON with a fixed key order, so serialising a graph,
parsing it back and serialising again reproduces the file byte for byte.
Floats are written through Python's shortest repr, which round-trips
float32 values exactly.  Conv weights can optionally live in a raw
little-endian float32 sidecar next to the document.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Any

import numpy as np

from .graph import (
    Add,
    BatchNorm2d,
    Concat,
    Conv2d,
    GlobalAvgPool,
    Graph,
    IndexAdd,
    IndexMap,
    InputOp,
    Node,
    OP_KINDS,
    OutputOp,
    ReLU,
    Upsample,
)

FORMAT_VERSION = 1
SIDECAR_SUFFIX = ".weights"


class ParseError(Exception):
    """A document is malformed.  ``where`` points at the offending field."""

    def __init__(self, message: str, where: str = ""):
        self.where = where
        super().__init__(f"{where}: {message}" if where else message)


def _floats(arr: np.ndarray) -> Any:
    return np.asarray(arr, dtype=np.float64).tolist()


def _expect(doc: Any, key: str, where: str) -> Any:
    if not isinstance(doc, dict):
        raise ParseError(f"expected an object, got {type(doc).__name__}", where)
    if key not in doc:
        raise ParseError(f"missing field {key!r}", where)
    return doc[key]


def _int(value: Any, where: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ParseError(f"expected an integer, got {value!r}", where)
    return value


def _float_array(value: Any, where: str) -> np.ndarray:
    try:
        arr = np.array(value, dtype=np.float32)
    except (TypeError, ValueError) as e:
        raise ParseError(f"not a numeric array: {e}", where) from None
    return arr


# ---------------------------------------------------------------------------
# graph documents


def graph_to_doc(graph: Graph, sidecar: bytearray | None = None) -> dict:
    """Graph as a JSON-ready dict with canonical key order.

    When ``sidecar`` is given, conv weights are appended to it as raw
    float32 and replaced in the document by {offset, count} references.
    """
    c, h, w = graph.input_shape
    nodes = []
    for n in graph.nodes:
        d: dict[str, Any] = {"id": n.id, "kind": n.kind}
        op = n.op
        if n.kind == "conv2d":
            d["out_channels"] = op.out_channels
            d["in_channels"] = op.in_channels
            d["kernel"] = list(op.kernel)
            d["stride"] = op.stride
            d["padding"] = op.padding
            if sidecar is None:
                d["weights"] = _floats(op.weights)
            else:
                flat = np.ascontiguousarray(op.weights, dtype="<f4")
                d["weights"] = {
                    "offset": len(sidecar),
                    "count": int(flat.size),
                }
                sidecar.extend(flat.tobytes())
            d["bias"] = None if op.bias is None else _floats(op.bias)
        elif n.kind == "batchnorm2d":
            d["gamma"] = _floats(op.gamma)
            d["beta"] = _floats(op.beta)
            d["running_mean"] = _floats(op.running_mean)
            d["running_var"] = _floats(op.running_var)
            d["eps"] = float(op.eps)
        elif n.kind == "index_add":
            m = op.index_map
            d["index_map"] = {
                "i_a": list(m.i_a),
                "i_b": list(m.i_b),
                "n_a": m.n_a,
                "n_b": m.n_b,
            }
        elif n.kind == "upsample":
            d["factor"] = op.factor
            d["mode"] = op.mode
        d["inputs"] = list(n.inputs)
        nodes.append(d)
    return {
        "version": FORMAT_VERSION,
        "input": {"channels": c, "height": h, "width": w},
        "nodes": nodes,
        "outputs": list(graph.output_ids),
    }


def graph_to_json(graph: Graph) -> str:
    return json.dumps(graph_to_doc(graph), indent=2) + "\n"


def doc_to_graph(doc: Any, sidecar: bytes | None = None) -> Graph:
    version = _expect(doc, "version", "document")
    if version != FORMAT_VERSION:
        raise ParseError(f"unsupported version {version!r}", "document")
    inp = _expect(doc, "input", "document")
    shape = (
        _int(_expect(inp, "channels", "input"), "input.channels"),
        _int(_expect(inp, "height", "input"), "input.height"),
        _int(_expect(inp, "width", "input"), "input.width"),
    )
    raw_nodes = _expect(doc, "nodes", "document")
    if not isinstance(raw_nodes, list):
        raise ParseError("nodes must be a list", "document")
    nodes = []
    for i, nd in enumerate(raw_nodes):
        where = f"nodes[{i}]"
        nid = _expect(nd, "id", where)
        if not isinstance(nid, str) or not nid:
            raise ParseError("id must be a non-empty string", where)
        where = f"nodes[{i}] ({nid})"
        kind = _expect(nd, "kind", where)
        if kind not in OP_KINDS:
            raise ParseError(f"unknown node kind {kind!r}", where)
        inputs = _expect(nd, "inputs", where)
        if not isinstance(inputs, list) or not all(isinstance(s, str) for s in inputs):
            raise ParseError("inputs must be a list of node ids", where)
        nodes.append(Node(id=nid, op=_parse_op(kind, nd, where, sidecar), inputs=tuple(inputs)))
    outputs = _expect(doc, "outputs", "document")
    if not isinstance(outputs, list) or not all(isinstance(s, str) for s in outputs):
        raise ParseError("outputs must be a list of node ids", "document")
    return Graph(input_shape=shape, nodes=tuple(nodes), output_ids=tuple(outputs))


def _parse_op(kind: str, nd: dict, where: str, sidecar: bytes | None):
    if kind == "input":
        return InputOp()
    if kind == "conv2d":
        kernel = _expect(nd, "kernel", where)
        if (not isinstance(kernel, list) or len(kernel) != 2
                or not all(isinstance(k, int) for k in kernel)):
            raise ParseError("kernel must be [kh, kw]", f"{where}.kernel")
        weights = _expect(nd, "weights", where)
        if isinstance(weights, dict):
            if sidecar is None:
                raise ParseError(
                    "weights reference a sidecar but none was provided",
                    f"{where}.weights")
            off = _int(_expect(weights, "offset", f"{where}.weights"),
                       f"{where}.weights.offset")
            cnt = _int(_expect(weights, "count", f"{where}.weights"),
                       f"{where}.weights.count")
            end = off + 4 * cnt
            if off < 0 or end > len(sidecar):
                raise ParseError(
                    f"sidecar range {off}..{end} outside blob of {len(sidecar)} bytes",
                    f"{where}.weights")
            w = np.frombuffer(sidecar[off:end], dtype="<f4").copy()
        else:
            w = _float_array(weights, f"{where}.weights")
        out_ch = _int(_expect(nd, "out_channels", where), f"{where}.out_channels")
        in_ch = _int(_expect(nd, "in_channels", where), f"{where}.in_channels")
        try:
            w = w.reshape(out_ch, in_ch, kernel[0], kernel[1])
        except ValueError:
            raise ParseError(
                f"weights hold {w.size} values, declaration implies "
                f"{out_ch}x{in_ch}x{kernel[0]}x{kernel[1]}",
                f"{where}.weights") from None
        bias = _expect(nd, "bias", where)
        return Conv2d(
            out_channels=out_ch,
            in_channels=in_ch,
            kernel=(kernel[0], kernel[1]),
            stride=_int(_expect(nd, "stride", where), f"{where}.stride"),
            padding=str(_expect(nd, "padding", where)),
            weights=w,
            bias=None if bias is None else _float_array(bias, f"{where}.bias"),
        )
    if kind == "batchnorm2d":
        eps = _expect(nd, "eps", where)
        if not isinstance(eps, (int, float)) or isinstance(eps, bool):
            raise ParseError("eps must be a number", f"{where}.eps")
        return BatchNorm2d(
            gamma=_float_array(_expect(nd, "gamma", where), f"{where}.gamma"),
            beta=_float_array(_expect(nd, "beta", where), f"{where}.beta"),
            running_mean=_float_array(
                _expect(nd, "running_mean", where), f"{where}.running_mean"),
            running_var=_float_array(
                _expect(nd, "running_var", where), f"{where}.running_var"),
            eps=float(eps),
        )
    if kind == "index_add":
        md = _expect(nd, "index_map", where)
        for key in ("i_a", "i_b"):
            v = _expect(md, key, f"{where}.index_map")
            if not isinstance(v, list) or not all(
                    isinstance(x, int) and not isinstance(x, bool) for x in v):
                raise ParseError(f"{key} must be a list of integers",
                                 f"{where}.index_map")
        return IndexAdd(index_map=IndexMap(
            i_a=tuple(md["i_a"]),
            i_b=tuple(md["i_b"]),
            n_a=_int(_expect(md, "n_a", f"{where}.index_map"), f"{where}.index_map.n_a"),
            n_b=_int(_expect(md, "n_b", f"{where}.index_map"), f"{where}.index_map.n_b"),
        ))
    if kind == "upsample":
        return Upsample(
            factor=_int(_expect(nd, "factor", where), f"{where}.factor"),
            mode=str(_expect(nd, "mode", where)),
        )
    return {"relu": ReLU, "add": Add, "concat": Concat,
            "global_avg_pool": GlobalAvgPool, "output": OutputOp}[kind]()


def parse_graph(text: str, sidecar: bytes | None = None) -> Graph:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ParseError(f"invalid JSON: {e}", "document") from None
    return doc_to_graph(doc, sidecar)


def save_graph(path: str | Path, graph: Graph, sidecar: bool = False) -> None:
    path = Path(path)
    if sidecar:
        blob = bytearray()
        doc = graph_to_doc(graph, sidecar=blob)
        path.with_name(path.name + SIDECAR_SUFFIX).write_bytes(bytes(blob))
        path.write_text(json.dumps(doc, indent=2) + "\n")
    else:
        path.write_text(graph_to_json(graph))


def load_graph(path: str | Path) -> Graph:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ParseError(str(e), str(path)) from None
    sidecar_path = path.with_name(path.name + SIDECAR_SUFFIX)
    sidecar = sidecar_path.read_bytes() if sidecar_path.exists() else None
    return parse_graph(text, sidecar)


# ---------------------------------------------------------------------------
# filter masks


def mask_to_json(mask: dict[str, np.ndarray]) -> str:
    doc = {nid: [int(v) for v in np.asarray(keep)] for nid, keep in mask.items()}
    return json.dumps(doc, indent=2) + "\n"


def parse_mask(text: str) -> dict[str, np.ndarray]:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ParseError(f"invalid JSON: {e}", "mask") from None
    if not isinstance(doc, dict):
        raise ParseError("mask document must be an object", "mask")
    mask: dict[str, np.ndarray] = {}
    for nid, flags in doc.items():
        if not isinstance(flags, list) or not flags:
            raise ParseError("filter flags must be a non-empty list", f"mask.{nid}")
        for v in flags:
            if isinstance(v, bool) or v not in (0, 1):
                raise ParseError(f"filter flag {v!r} is not 0 or 1", f"mask.{nid}")
        mask[nid] = np.array(flags, dtype=bool)
    return mask


def save_mask(path: str | Path, mask: dict[str, np.ndarray]) -> None:
    Path(path).write_text(mask_to_json(mask))


def load_mask(path: str | Path) -> dict[str, np.ndarray]:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ParseError(str(e), str(path)) from None
    return parse_mask(text)


# ---------------------------------------------------------------------------
# tensors

_RAW_MAGIC = b"CSTN"


def save_tensor(path: str | Path, arr: np.ndarray) -> None:
    """Write a (c, h, w) float32 tensor.

    ``.raw``/``.bin`` files get a 16-byte header (magic + little-endian
    uint32 dims) followed by raw little-endian float32 data; anything else
    is text: a "c h w" header line, then one whitespace-separated row of w
    values per line.
    """
    path = Path(path)
    arr = np.ascontiguousarray(arr, dtype=np.float32)
    if arr.ndim != 3:
        raise ValueError(f"tensor must be rank 3, got shape {arr.shape}")
    c, h, w = arr.shape
    if path.suffix in (".raw", ".bin"):
        with open(path, "wb") as f:
            f.write(_RAW_MAGIC)
            f.write(struct.pack("<III", c, h, w))
            f.write(arr.astype("<f4").tobytes())
        return
    lines = [f"{c} {h} {w}"]
    for ci in range(c):
        for hi in range(h):
            lines.append(" ".join(repr(float(v)) for v in arr[ci, hi]))
    path.write_text("\n".join(lines) + "\n")


def load_tensor(path: str | Path) -> np.ndarray:
    path = Path(path)
    if path.suffix in (".raw", ".bin"):
        blob = path.read_bytes()
        if len(blob) < 16 or blob[:4] != _RAW_MAGIC:
            raise ParseError("missing tensor header", str(path))
        c, h, w = struct.unpack("<III", blob[4:16])
        want = 16 + 4 * c * h * w
        if len(blob) != want:
            raise ParseError(
                f"file holds {len(blob)} bytes, header implies {want}", str(path))
        data = np.frombuffer(blob[16:], dtype="<f4")
        return data.reshape(c, h, w).copy()
    try:
        text = path.read_text()
    except OSError as e:
        raise ParseError(str(e), str(path)) from None
    tokens = text.split()
    if len(tokens) < 3:
        raise ParseError("missing dims header", str(path))
    try:
        c, h, w = (int(t) for t in tokens[:3])
        values = np.array([float(t) for t in tokens[3:]], dtype=np.float32)
    except ValueError as e:
        raise ParseError(f"bad value: {e}", str(path)) from None
    if values.size != c * h * w:
        raise ParseError(
            f"file holds {values.size} values, header implies {c * h * w}", str(path))
    return values.reshape(c, h, w)
