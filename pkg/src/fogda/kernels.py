"""Hot numeric kernels with interchangeable numba and pure-numpy backends.

Everything here is dense float64 inner-loop work that dominates training
runtime: 2-d cross-correlation (forward plus both backward directions) and
the sliding window minimum used by the dark channel. The rest of the package
calls the dispatch functions at the bottom; which backend they bind to is
decided once at import time:

    FOGDA_KERNELS=auto    numba if importable, else numpy (default)
    FOGDA_KERNELS=numba   require numba, fail loudly if missing
    FOGDA_KERNELS=numpy   force the pure-numpy fallback

Both backends implement identical math on identical shapes; they may differ
in the last float ulps because summation order differs. Within one backend
results are bitwise deterministic (no cross-thread reductions: parallel
loops only ever write disjoint output elements).

`benchmarks/bench_kernels.py` times the two implementations side by side via
the NUMPY_IMPL / NUMBA_IMPL tables exported here.
"""

from __future__ import annotations

import os

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import ndimage


# ---------------------------------------------------------------------------
# pure-numpy backend
# ---------------------------------------------------------------------------

def _conv2d_forward_np(x_pad, weight, bias, stride):
    """Cross-correlate pre-padded NCHW input with KCkhkw weights."""
    kh, kw = weight.shape[2], weight.shape[3]
    win = sliding_window_view(x_pad, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    y = np.einsum("nchwij,kcij->nkhw", win, weight, optimize=True)
    y += bias[None, :, None, None]
    return np.ascontiguousarray(y)


def _conv2d_bwd_weight_np(x_pad, grad_y, stride, kh, kw):
    win = sliding_window_view(x_pad, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    return np.ascontiguousarray(np.einsum("nchwij,nkhw->kcij", win, grad_y, optimize=True))


def _conv2d_bwd_input_np(grad_y, weight, stride, h_pad, w_pad):
    n, _, h_out, w_out = grad_y.shape
    _, c, kh, kw = weight.shape
    gx = np.zeros((n, c, h_pad, w_pad), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            contrib = np.einsum("nkhw,kc->nchw", grad_y, weight[:, :, i, j], optimize=True)
            gx[:, :, i : i + stride * h_out : stride, j : j + stride * w_out : stride] += contrib
    return gx


def _min_filter_np(values, patch):
    # mode="nearest" replicates edge values, which are already inside the
    # clamped window, so this equals the min over the window clipped to the
    # image -- the border rule dark_channel specifies.
    return ndimage.minimum_filter(values, size=patch, mode="nearest")


NUMPY_IMPL = {
    "conv2d_forward": _conv2d_forward_np,
    "conv2d_bwd_weight": _conv2d_bwd_weight_np,
    "conv2d_bwd_input": _conv2d_bwd_input_np,
    "min_filter": _min_filter_np,
}


# ---------------------------------------------------------------------------
# numba backend
# ---------------------------------------------------------------------------

NUMBA_IMPL = None

try:
    import numba
    from numba import njit, prange
except ImportError:  # pragma: no cover - exercised only without numba installed
    numba = None

if numba is not None:

    @njit(cache=True, parallel=True)
    def _conv2d_forward_nb(x_pad, weight, bias, stride):
        n, c, h_pad, w_pad = x_pad.shape
        k, _, kh, kw = weight.shape
        h_out = (h_pad - kh) // stride + 1
        w_out = (w_pad - kw) // stride + 1
        y = np.empty((n, k, h_out, w_out), dtype=np.float64)
        for kk in prange(k):
            for nn in range(n):
                for oy in range(h_out):
                    for ox in range(w_out):
                        acc = bias[kk]
                        for cc in range(c):
                            for i in range(kh):
                                for j in range(kw):
                                    acc += (
                                        x_pad[nn, cc, oy * stride + i, ox * stride + j]
                                        * weight[kk, cc, i, j]
                                    )
                        y[nn, kk, oy, ox] = acc
        return y

    @njit(cache=True, parallel=True)
    def _conv2d_bwd_weight_nb(x_pad, grad_y, stride, kh, kw):
        n, c, _, _ = x_pad.shape
        _, k, h_out, w_out = grad_y.shape
        gw = np.empty((k, c, kh, kw), dtype=np.float64)
        for kk in prange(k):
            for cc in range(c):
                for i in range(kh):
                    for j in range(kw):
                        acc = 0.0
                        for nn in range(n):
                            for oy in range(h_out):
                                for ox in range(w_out):
                                    acc += (
                                        x_pad[nn, cc, oy * stride + i, ox * stride + j]
                                        * grad_y[nn, kk, oy, ox]
                                    )
                        gw[kk, cc, i, j] = acc
        return gw

    @njit(cache=True, parallel=True)
    def _conv2d_bwd_input_nb(grad_y, weight, stride, h_pad, w_pad):
        n, k, h_out, w_out = grad_y.shape
        _, c, kh, kw = weight.shape
        gx = np.zeros((n, c, h_pad, w_pad), dtype=np.float64)
        for cc in prange(c):
            for nn in range(n):
                for iy in range(h_pad):
                    for ix in range(w_pad):
                        acc = 0.0
                        for i in range(kh):
                            ty = iy - i
                            if ty < 0 or ty % stride != 0:
                                continue
                            oy = ty // stride
                            if oy >= h_out:
                                continue
                            for j in range(kw):
                                tx = ix - j
                                if tx < 0 or tx % stride != 0:
                                    continue
                                ox = tx // stride
                                if ox >= w_out:
                                    continue
                                for kk in range(k):
                                    acc += grad_y[nn, kk, oy, ox] * weight[kk, cc, i, j]
                        gx[nn, cc, iy, ix] = acc
        return gx

    @njit(cache=True)
    def _min_filter_nb(values, patch):
        h, w = values.shape
        r = patch // 2
        out = np.empty((h, w), dtype=np.float64)
        for y in range(h):
            y0 = max(0, y - r)
            y1 = min(h, y + r + 1)
            for x in range(w):
                x0 = max(0, x - r)
                x1 = min(w, x + r + 1)
                mn = values[y0, x0]
                for yy in range(y0, y1):
                    for xx in range(x0, x1):
                        v = values[yy, xx]
                        if v < mn:
                            mn = v
                out[y, x] = mn
        return out

    NUMBA_IMPL = {
        "conv2d_forward": _conv2d_forward_nb,
        "conv2d_bwd_weight": _conv2d_bwd_weight_nb,
        "conv2d_bwd_input": _conv2d_bwd_input_nb,
        "min_filter": _min_filter_nb,
    }


# ---------------------------------------------------------------------------
# backend selection
# ---------------------------------------------------------------------------

def _select_backend() -> str:
    choice = os.environ.get("FOGDA_KERNELS", "auto").lower()
    if choice not in ("auto", "numba", "numpy"):
        raise ValueError(
            f"FOGDA_KERNELS must be one of auto|numba|numpy, got {choice!r}"
        )
    if choice == "numpy":
        return "numpy"
    if NUMBA_IMPL is None:
        if choice == "numba":
            raise ImportError("FOGDA_KERNELS=numba but numba is not importable")
        return "numpy"
    return "numba"


KERNEL_BACKEND = _select_backend()
_ACTIVE = NUMPY_IMPL if KERNEL_BACKEND == "numpy" else NUMBA_IMPL

conv2d_forward = _ACTIVE["conv2d_forward"]
conv2d_bwd_weight = _ACTIVE["conv2d_bwd_weight"]
conv2d_bwd_input = _ACTIVE["conv2d_bwd_input"]
min_filter = _ACTIVE["min_filter"]
