"""2-D cross-correlation via im2col + a single BLAS matmul.

The kernel works channels-last (N,H,W,C) because the im2col copy and the
scatter in the input gradient are then contiguous along C. ``conv2d`` keeps
the channels-first (Cin,H,W) / (N,Cin,H,W) interface on top of it.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import DimensionError, Tensor, _make, as_tensor, transpose


class ConvConfigError(ValueError):
    pass


def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    # floor semantics: a trailing partial window is dropped
    span = size + 2 * padding - k
    if span < 0 or stride < 1:
        raise ConvConfigError(
            f"extent {size} with kernel {k}, stride {stride}, padding {padding} "
            "leaves no valid output position")
    return span // stride + 1


def conv2d_nhwc(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlate channels-last ``x`` (N,H,W,Cin) with ``w`` (Cout,Cin,kh,kw)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D input and kernels, got {x.shape}, {w.shape}")
    n, h, wd, cin = x.shape
    cout, cin_w, kh, kw = w.shape
    if cin != cin_w:
        raise DimensionError(f"conv2d: input channels {cin} != kernel channels {cin_w}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ConvConfigError(f"kernel extents must be odd, got {kh}x{kw}")
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(wd, kw, stride, padding)

    xd = x.data
    xp = np.pad(xd, ((0, 0), (padding, padding), (padding, padding), (0, 0))) if padding else xd
    # (kh, kw, cin, cout) so that im2col columns are ordered (i, j, c)
    wk = np.ascontiguousarray(w.data.transpose(2, 3, 1, 0))
    wmat = wk.reshape(kh * kw * cin, cout)
    if kh == 1 and kw == 1:
        cols = np.ascontiguousarray(xp[:, ::stride, ::stride][:, :ho, :wo]).reshape(-1, cin)
    else:
        win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride][:, :ho, :wo]
        cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(-1, kh * kw * cin)
    out = (cols @ wmat).reshape(n, ho, wo, cout)

    def fn(g):
        gmat = g.reshape(-1, cout)
        gw = None
        if w.requires_grad:
            gw = (cols.T @ gmat).reshape(kh, kw, cin, cout).transpose(3, 2, 0, 1)
        gx = None
        if x.requires_grad and stride == 1 and kh > 1 and padding <= min(kh, kw) - 1:
            # stride-1 input grad is a correlation of the padded grad with the flipped kernel
            ph, pw = kh - 1 - padding, kw - 1 - padding
            gp = np.pad(g, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
            gwin = sliding_window_view(gp, (kh, kw), axis=(1, 2))
            gcols = np.ascontiguousarray(gwin.transpose(0, 1, 2, 4, 5, 3)).reshape(-1, kh * kw * cout)
            wflip = wk[::-1, ::-1].transpose(0, 1, 3, 2).reshape(-1, cin)
            gx = (gcols @ wflip).reshape(n, h, wd, cin)
        elif x.requires_grad:
            dxp = np.zeros(xp.shape, dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride] += g @ wk[i, j].T
            if padding:
                dxp = dxp[:, padding:padding + h, padding:padding + wd]
            gx = dxp
        return gx, gw

    return _make(out, (x, w), fn, "conv2d")


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlate ``x`` (Cin,H,W) or (N,Cin,H,W) with ``w`` (Cout,Cin,kh,kw)."""
    x = as_tensor(x)
    if x.ndim == 3:
        return conv2d(x.reshape((1,) + x.shape), w, stride, padding).reshape(
            (w.shape[0],) + tuple(conv_output_size(s, k, stride, padding)
                                  for s, k in zip(x.shape[1:], w.shape[2:])))
    if x.ndim != 4:
        raise DimensionError(f"conv2d expects (N,)Cin,H,W input, got {x.shape}")
    out = conv2d_nhwc(transpose(x, (0, 2, 3, 1)), w, stride, padding)
    return transpose(out, (0, 3, 1, 2))
