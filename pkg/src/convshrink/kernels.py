"""Hot numeric kernels with two interchangeable lanes.

The compiled lane uses numba's @njit; the fallback lane is pure numpy.
Both accumulate in the same order (bias first, then input channel, then
kernel row, then kernel column), so their float32 results are bit
identical.  Lane selection: set CONVSHRINK_NUMBA=0 to force the numpy
lane; by default the compiled lane is used whenever numba imports.
"""

from __future__ import annotations

import os

import numpy as np

_flag = os.environ.get("CONVSHRINK_NUMBA", "").strip().lower()
_want_numba = _flag not in ("0", "off", "false", "no")

_NUMBA = False
if _want_numba:
    try:
        from numba import njit

        _NUMBA = True
    except ImportError:
        _NUMBA = False


def active_lane() -> str:
    return "numba" if _NUMBA else "numpy"


def _conv2d_np(xpad, w, bias, stride, oh, ow):
    out_ch, in_ch, kh, kw = w.shape
    out = np.empty((out_ch, oh, ow), dtype=np.float32)
    out[:] = bias[:, None, None]
    for i in range(in_ch):
        for u in range(kh):
            for v in range(kw):
                win = xpad[i, u:u + oh * stride:stride, v:v + ow * stride:stride]
                out += w[:, i, u, v][:, None, None] * win
    return out


def _index_add_np(a, b, i_a, i_b):
    n_c = i_a.shape[0]
    if a.shape[0]:
        h, w = a.shape[1], a.shape[2]
    else:
        h, w = b.shape[1], b.shape[2]
    out = np.empty((n_c, h, w), dtype=np.float32)
    both = (i_a > 0) & (i_b > 0)
    only_a = (i_a > 0) & ~both
    only_b = (i_b > 0) & ~both
    out[both] = a[i_a[both] - 1] + b[i_b[both] - 1]
    out[only_a] = a[i_a[only_a] - 1]
    out[only_b] = b[i_b[only_b] - 1]
    return out


if _NUMBA:

    @njit(cache=True)
    def _conv2d_jit(xpad, w, bias, stride, oh, ow):  # pragma: no cover
        out_ch, in_ch, kh, kw = w.shape
        out = np.empty((out_ch, oh, ow), dtype=np.float32)
        for o in range(out_ch):
            for oy in range(oh):
                for ox in range(ow):
                    acc = bias[o]
                    for i in range(in_ch):
                        for u in range(kh):
                            for v in range(kw):
                                acc += w[o, i, u, v] * xpad[i, oy * stride + u,
                                                            ox * stride + v]
                    out[o, oy, ox] = acc
        return out

    @njit(cache=True)
    def _index_add_jit(a, b, i_a, i_b):  # pragma: no cover
        n_c = i_a.shape[0]
        if a.shape[0]:
            h, w = a.shape[1], a.shape[2]
        else:
            h, w = b.shape[1], b.shape[2]
        out = np.empty((n_c, h, w), dtype=np.float32)
        for k in range(n_c):
            ka, kb = i_a[k], i_b[k]
            for y in range(h):
                for x in range(w):
                    if ka and kb:
                        out[k, y, x] = a[ka - 1, y, x] + b[kb - 1, y, x]
                    elif ka:
                        out[k, y, x] = a[ka - 1, y, x]
                    else:
                        out[k, y, x] = b[kb - 1, y, x]
        return out


def conv2d_padded(
    xpad: np.ndarray,
    weights: np.ndarray,
    bias: np.ndarray | None,
    stride: int,
    out_hw: tuple[int, int],
) -> np.ndarray:
    """Cross-correlate an already zero-padded (c, hp, wp) float32 input.

    A missing bias behaves as a zero vector; the accumulator starts there
    either way, keeping the two lanes order-identical.
    """
    oh, ow = out_hw
    if bias is None:
        bias = np.zeros(weights.shape[0], dtype=np.float32)
    xpad = np.ascontiguousarray(xpad, dtype=np.float32)
    weights = np.ascontiguousarray(weights, dtype=np.float32)
    bias = np.ascontiguousarray(bias, dtype=np.float32)
    if _NUMBA:
        return _conv2d_jit(xpad, weights, bias, stride, oh, ow)
    return _conv2d_np(xpad, weights, bias, stride, oh, ow)


def index_add_channels(
    a: np.ndarray, b: np.ndarray, i_a: np.ndarray, i_b: np.ndarray
) -> np.ndarray:
    """Route-and-add channels: out[k] = a[i_a[k]-1] + b[i_b[k]-1].

    A zero index skips that operand; the surviving channel is copied, not
    added to anything.  Either operand may have zero channels.
    """
    i_a = np.ascontiguousarray(i_a, dtype=np.int64)
    i_b = np.ascontiguousarray(i_b, dtype=np.int64)
    a = np.ascontiguousarray(a, dtype=np.float32)
    b = np.ascontiguousarray(b, dtype=np.float32)
    if _NUMBA:
        return _index_add_jit(a, b, i_a, i_b)
    return _index_add_np(a, b, i_a, i_b)
