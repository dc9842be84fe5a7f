"""Convolution and pooling kernels, the hot inner loops of training.

Two interchangeable implementations are kept side by side:

* ``numba``: ``@njit`` loop nests, the default whenever numba imports.
* ``numpy``: a loop-over-kernel-positions formulation that stays inside
  BLAS-backed einsum calls and never materialises an im2col buffer.

The active backend is picked at import time from the ``DUALTSST_NUMBA``
environment variable (``0``/``off``/``false`` forces pure numpy, ``1`` makes a
missing numba an error, anything else is auto-detect) and can be switched at
runtime with :func:`set_backend`.  ``benchmarks/bench_kernels.py`` times the
two paths against each other.

All convolutions are valid (no padding) cross-correlations.  Both backends
are deterministic; they may differ from each other in the last few ulps
because the summation orders differ.
"""

from __future__ import annotations

import os

import numpy as np

try:
    from numba import njit

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    _HAVE_NUMBA = False


def _default_backend() -> str:
    env = os.environ.get("DUALTSST_NUMBA", "auto").strip().lower()
    if env in ("0", "off", "false", "no"):
        return "numpy"
    if env in ("1", "on", "true", "yes") and not _HAVE_NUMBA:
        raise ImportError("DUALTSST_NUMBA=1 but numba is not importable")
    return "numba" if _HAVE_NUMBA else "numpy"


_backend = _default_backend()


def set_backend(name: str) -> None:
    """Select the kernel backend, ``"numba"`` or ``"numpy"``."""
    if name == "auto":
        name = "numba" if _HAVE_NUMBA else "numpy"
    if name not in ("numpy", "numba"):
        raise ValueError(f"unknown backend {name!r}")
    if name == "numba" and not _HAVE_NUMBA:
        raise ValueError("numba backend requested but numba is not importable")
    global _backend
    _backend = name


def get_backend() -> str:
    return _backend


def numba_available() -> bool:
    return _HAVE_NUMBA


# ---------------------------------------------------------------------------
# numpy implementations
# ---------------------------------------------------------------------------


def conv2d_forward_np(x, w, stride, groups):
    n, cin, h, wd = x.shape
    cout, cin_g, kh, kw = w.shape
    sh, sw = stride
    ho = (h - kh) // sh + 1
    wo = (wd - kw) // sw + 1
    cout_g = cout // groups
    xg = x.reshape(n, groups, cin_g, h, wd)
    wg = w.reshape(groups, cout_g, cin_g, kh, kw)
    out = np.zeros((n, groups, cout_g, ho, wo), dtype=x.dtype)
    for p in range(kh):
        for q in range(kw):
            xs = xg[:, :, :, p : p + sh * ho : sh, q : q + sw * wo : sw]
            out += np.einsum("ngihw,goi->ngohw", xs, wg[:, :, :, p, q], optimize=True)
    return out.reshape(n, cout, ho, wo)


def conv2d_backward_input_np(gout, w, x_shape, stride, groups):
    n, cin, h, wd = x_shape
    cout, cin_g, kh, kw = w.shape
    sh, sw = stride
    ho, wo = gout.shape[2], gout.shape[3]
    cout_g = cout // groups
    go = gout.reshape(n, groups, cout_g, ho, wo)
    wg = w.reshape(groups, cout_g, cin_g, kh, kw)
    gx = np.zeros(x_shape, dtype=gout.dtype).reshape(n, groups, cin_g, h, wd)
    for p in range(kh):
        for q in range(kw):
            contrib = np.einsum("ngohw,goi->ngihw", go, wg[:, :, :, p, q], optimize=True)
            gx[:, :, :, p : p + sh * ho : sh, q : q + sw * wo : sw] += contrib
    return gx.reshape(x_shape)


def conv2d_backward_kernel_np(gout, x, w_shape, stride, groups):
    cout, cin_g, kh, kw = w_shape
    n, cin, h, wd = x.shape
    sh, sw = stride
    ho, wo = gout.shape[2], gout.shape[3]
    cout_g = cout // groups
    xg = x.reshape(n, groups, cin_g, h, wd)
    go = gout.reshape(n, groups, cout_g, ho, wo)
    gw = np.zeros((groups, cout_g, cin_g, kh, kw), dtype=gout.dtype)
    for p in range(kh):
        for q in range(kw):
            xs = xg[:, :, :, p : p + sh * ho : sh, q : q + sw * wo : sw]
            gw[:, :, :, p, q] = np.einsum("ngihw,ngohw->goi", xs, go, optimize=True)
    return gw.reshape(w_shape)


def avgpool_forward_np(x, k, s):
    win = np.lib.stride_tricks.sliding_window_view(x, k, axis=3)[:, :, :, ::s]
    return win.mean(axis=-1)


def avgpool_backward_np(gout, k, s, w_in):
    n, c, h, wo = gout.shape
    gx = np.zeros((n, c, h, w_in), dtype=gout.dtype)
    g = gout / k
    for q in range(k):
        gx[:, :, :, q : q + s * wo : s] += g
    return gx


# ---------------------------------------------------------------------------
# numba implementations
# ---------------------------------------------------------------------------

if _HAVE_NUMBA:

    @njit(cache=True)
    def _conv2d_forward_nb(x, w, sh, sw, groups, out):
        n, cout, ho, wo = out.shape
        cin_g, kh, kw = w.shape[1], w.shape[2], w.shape[3]
        cout_g = cout // groups
        for b in range(n):
            for co in range(cout):
                ci0 = (co // cout_g) * cin_g
                for oh in range(ho):
                    ih0 = oh * sh
                    for ow in range(wo):
                        iw0 = ow * sw
                        acc = 0.0
                        for ci in range(cin_g):
                            for p in range(kh):
                                for q in range(kw):
                                    acc += x[b, ci0 + ci, ih0 + p, iw0 + q] * w[co, ci, p, q]
                        out[b, co, oh, ow] = acc

    @njit(cache=True)
    def _conv2d_backward_input_nb(gout, w, sh, sw, groups, gx):
        n, cout, ho, wo = gout.shape
        cin_g, kh, kw = w.shape[1], w.shape[2], w.shape[3]
        cout_g = cout // groups
        for b in range(n):
            for co in range(cout):
                ci0 = (co // cout_g) * cin_g
                for oh in range(ho):
                    ih0 = oh * sh
                    for ow in range(wo):
                        iw0 = ow * sw
                        g = gout[b, co, oh, ow]
                        for ci in range(cin_g):
                            for p in range(kh):
                                for q in range(kw):
                                    gx[b, ci0 + ci, ih0 + p, iw0 + q] += g * w[co, ci, p, q]

    @njit(cache=True)
    def _conv2d_backward_kernel_nb(gout, x, sh, sw, groups, gw):
        n, cout, ho, wo = gout.shape
        cin_g, kh, kw = gw.shape[1], gw.shape[2], gw.shape[3]
        cout_g = cout // groups
        for b in range(n):
            for co in range(cout):
                ci0 = (co // cout_g) * cin_g
                for oh in range(ho):
                    ih0 = oh * sh
                    for ow in range(wo):
                        iw0 = ow * sw
                        g = gout[b, co, oh, ow]
                        for ci in range(cin_g):
                            for p in range(kh):
                                for q in range(kw):
                                    gw[co, ci, p, q] += g * x[b, ci0 + ci, ih0 + p, iw0 + q]

    @njit(cache=True)
    def _avgpool_forward_nb(x, k, s, out):
        n, c, h, wo = out.shape
        inv = 1.0 / k
        for b in range(n):
            for ci in range(c):
                for row in range(h):
                    for ow in range(wo):
                        iw0 = ow * s
                        acc = 0.0
                        for q in range(k):
                            acc += x[b, ci, row, iw0 + q]
                        out[b, ci, row, ow] = acc * inv

    @njit(cache=True)
    def _avgpool_backward_nb(gout, k, s, gx):
        n, c, h, wo = gout.shape
        inv = 1.0 / k
        for b in range(n):
            for ci in range(c):
                for row in range(h):
                    for ow in range(wo):
                        g = gout[b, ci, row, ow] * inv
                        iw0 = ow * s
                        for q in range(k):
                            gx[b, ci, row, iw0 + q] += g


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------


def conv2d_forward(x, w, stride, groups):
    if _backend == "numba":
        x = np.ascontiguousarray(x)
        w = np.ascontiguousarray(w)
        n, _, h, wd = x.shape
        cout, _, kh, kw = w.shape
        sh, sw = stride
        ho = (h - kh) // sh + 1
        wo = (wd - kw) // sw + 1
        out = np.empty((n, cout, ho, wo), dtype=x.dtype)
        _conv2d_forward_nb(x, w, sh, sw, groups, out)
        return out
    return conv2d_forward_np(x, w, stride, groups)


def conv2d_backward_input(gout, w, x_shape, stride, groups):
    if _backend == "numba":
        gout = np.ascontiguousarray(gout)
        w = np.ascontiguousarray(w)
        gx = np.zeros(x_shape, dtype=gout.dtype)
        _conv2d_backward_input_nb(gout, w, stride[0], stride[1], groups, gx)
        return gx
    return conv2d_backward_input_np(gout, w, x_shape, stride, groups)


def conv2d_backward_kernel(gout, x, w_shape, stride, groups):
    if _backend == "numba":
        gout = np.ascontiguousarray(gout)
        x = np.ascontiguousarray(x)
        gw = np.zeros(w_shape, dtype=gout.dtype)
        _conv2d_backward_kernel_nb(gout, x, stride[0], stride[1], groups, gw)
        return gw
    return conv2d_backward_kernel_np(gout, x, w_shape, stride, groups)


def avgpool_forward(x, k, s):
    if _backend == "numba":
        x = np.ascontiguousarray(x)
        n, c, h, wd = x.shape
        wo = (wd - k) // s + 1
        out = np.empty((n, c, h, wo), dtype=x.dtype)
        _avgpool_forward_nb(x, k, s, out)
        return out
    return avgpool_forward_np(x, k, s)


def avgpool_backward(gout, k, s, w_in):
    if _backend == "numba":
        gout = np.ascontiguousarray(gout)
        n, c, h, _ = gout.shape
        gx = np.zeros((n, c, h, w_in), dtype=gout.dtype)
        _avgpool_backward_nb(gout, k, s, gx)
        return gx
    return avgpool_backward_np(gout, k, s, w_in)
