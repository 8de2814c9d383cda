"""Fused neural primitives with hand-written adjoints.

These are single tape nodes: an LSTM cell, a whole masked LSTM layer unrolled
over time, a 2-D convolution (NHWC, cross-correlation) and layer
normalisation. Each one is gradient-checked against finite differences in
the test-suite.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import DimensionError, Tensor, _make, _record, _sigmoid, accumulate, as_tensor

__all__ = ["lstm_cell", "lstm_sequence", "conv2d", "conv_output_size", "layer_norm"]


def _check_lstm(d_in, d_h, W, b):
    if W.shape != (d_in + d_h, 4 * d_h):
        raise DimensionError(
            f"lstm weights {W.shape} do not match input dim {d_in} and hidden dim {d_h}; "
            f"expected {(d_in + d_h, 4 * d_h)}"
        )
    if b.shape != (4 * d_h,):
        raise DimensionError(f"lstm bias {b.shape}, expected {(4 * d_h,)}")


def _gates(z, H):
    i = _sigmoid(z[:, :H])
    f = _sigmoid(z[:, H:2 * H])
    g = np.tanh(z[:, 2 * H:3 * H])
    o = _sigmoid(z[:, 3 * H:])
    return i, f, g, o


def _cell_backward(dh_new, dc_new, i, f, g, o, tc, c_prev):
    # dc_new already holds the direct cell-state adjoint
    dc = dc_new + dh_new * o * (1.0 - tc * tc)
    di = dc * g
    df = dc * c_prev
    dg = dc * i
    do = dh_new * tc
    dz = np.concatenate(
        [di * i * (1 - i), df * f * (1 - f), dg * (1 - g * g), do * o * (1 - o)], axis=1
    )
    return dz, dc * f


def lstm_cell(x, h_prev, c_prev, W, b, mask=None):
    """One LSTM step with gate order ``[i, f, g, o]``.

    ``x`` is ``(B, d_in)`` (or ``(d_in,)``), states ``(B, d_h)``, ``W`` is
    ``(d_in + d_h, 4 d_h)`` acting on ``[x; h_prev]``. With a 0/1 ``mask`` of
    shape ``(B,)`` masked rows carry their previous state through unchanged.
    Returns ``(h, c)``.
    """
    x, h_prev, c_prev = as_tensor(x), as_tensor(h_prev), as_tensor(c_prev)
    squeeze = x.ndim == 1
    xd = x.data[None] if squeeze else x.data
    hd = h_prev.data.reshape(xd.shape[0], -1)
    cd = c_prev.data.reshape(xd.shape[0], -1)
    H = hd.shape[1]
    _check_lstm(xd.shape[1], H, W.data, b.data)
    if cd.shape != hd.shape:
        raise DimensionError(f"h_prev {hd.shape} and c_prev {cd.shape} differ")
    xh = np.concatenate([xd, hd], axis=1)
    z = xh @ W.data + b.data
    i, f, g, o = _gates(z, H)
    c_new = f * cd + i * g
    tc = np.tanh(c_new)
    h_new = o * tc
    if mask is not None:
        m = np.asarray(mask, dtype=xd.dtype).reshape(-1, 1)
        h_out = m * h_new + (1 - m) * hd
        c_out = m * c_new + (1 - m) * cd
    else:
        m = None
        h_out, c_out = h_new, c_new
    shape = h_prev.data.shape
    h = _make(h_out.reshape(shape), x, h_prev, c_prev, W, b)
    c = _make(c_out.reshape(shape), x, h_prev, c_prev, W, b)
    if h.requires_grad:
        def back(gh, gc):
            gh = np.zeros_like(hd) if gh is None else gh.reshape(hd.shape)
            gc = np.zeros_like(cd) if gc is None else gc.reshape(cd.shape)
            if m is not None:
                dz, dc_prev = _cell_backward(m * gh, m * gc, i, f, g, o, tc, cd)
                dc_prev = dc_prev + (1 - m) * gc
                dh_carry = (1 - m) * gh
            else:
                dz, dc_prev = _cell_backward(gh, gc, i, f, g, o, tc, cd)
                dh_carry = 0.0
            accumulate(W, xh.T @ dz)
            accumulate(b, dz.sum(axis=0))
            dxh = dz @ W.data.T
            dx = dxh[:, : xd.shape[1]]
            accumulate(x, dx[0] if squeeze else dx)
            accumulate(h_prev, (dxh[:, xd.shape[1]:] + dh_carry).reshape(shape))
            accumulate(c_prev, dc_prev.reshape(shape))
        _record((h, c), back)
    return h, c


def lstm_sequence(x, W, b, mask=None, h0=None, c0=None):
    """Run one LSTM layer over ``x`` of shape ``(B, T, d_in)``.

    Steps where ``mask[b, t] == 0`` leave the state untouched and emit zeros,
    so the final state of each item is its state at its true length.
    Returns ``(outputs (B, T, d_h), h_T, c_T)``.
    """
    x = as_tensor(x)
    B, T, D = x.shape
    H = b.shape[0] // 4
    _check_lstm(D, H, W.data, b.data)
    dt = x.data.dtype
    m = np.ones((B, T), dt) if mask is None else np.asarray(mask, dtype=dt)
    h0 = Tensor(np.zeros((B, H), dt), dtype=dt) if h0 is None else as_tensor(h0)
    c0 = Tensor(np.zeros((B, H), dt), dtype=dt) if c0 is None else as_tensor(c0)
    Wd, bd = W.data, b.data
    Wx, Wh = Wd[:D], Wd[D:]
    # input projection for every step at once
    zx = x.data @ Wx + bd
    hs = np.empty((T + 1, B, H), dt)
    cs = np.empty((T + 1, B, H), dt)
    hs[0], cs[0] = h0.data, c0.data
    cache = []
    Y = np.empty((B, T, H), dt)
    for t in range(T):
        z = zx[:, t] + hs[t] @ Wh
        i, f, g, o = _gates(z, H)
        c_new = f * cs[t] + i * g
        tc = np.tanh(c_new)
        h_new = o * tc
        mt = m[:, t:t + 1]
        hs[t + 1] = mt * h_new + (1 - mt) * hs[t]
        cs[t + 1] = mt * c_new + (1 - mt) * cs[t]
        Y[:, t] = mt * h_new
        cache.append((i, f, g, o, tc))
    y = _make(Y, x, W, b, h0, c0)
    hT = _make(hs[T].copy(), x, W, b, h0, c0)
    cT = _make(cs[T].copy(), x, W, b, h0, c0)
    if y.requires_grad:
        def back(gy, gh, gc):
            gy = np.zeros_like(Y) if gy is None else gy
            dh = np.zeros((B, H), dt) if gh is None else gh.copy()
            dc = np.zeros((B, H), dt) if gc is None else gc.copy()
            dzs = np.empty((B, T, 4 * H), dt)
            for t in range(T - 1, -1, -1):
                i, f, g, o, tc = cache[t]
                mt = m[:, t:t + 1]
                dh_new = mt * (dh + gy[:, t])
                dz, dc_prev = _cell_backward(dh_new, mt * dc, i, f, g, o, tc, cs[t])
                dzs[:, t] = dz
                dh = (1 - mt) * dh + dz @ Wh.T
                dc = (1 - mt) * dc + dc_prev
            if W.requires_grad:
                dW = np.empty_like(Wd)
                dW[:D] = np.tensordot(x.data, dzs, axes=([0, 1], [0, 1]))
                dW[D:] = np.tensordot(hs[:T], dzs.transpose(1, 0, 2), axes=([0, 1], [0, 1]))
                accumulate(W, dW)
            accumulate(b, dzs.sum(axis=(0, 1)))
            if x.requires_grad:
                accumulate(x, dzs @ Wx.T)
            accumulate(h0, dh)
            accumulate(c0, dc)
        _record((y, hT, cT), back)
    return y, hT, cT


def conv_output_size(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def conv2d(x, kernel, stride: int = 1, padding: int = 0):
    """Cross-correlation of ``x (N, H, W, C_in)`` with ``kernel (kh, kw, C_in, C_out)``.

    A 3-D ``x`` is treated as a single image.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    single = x.ndim == 3
    xd = x.data[None] if single else x.data
    N, H, Wd_, C = xd.shape
    kh, kw, kc, O = kernel.shape
    if kc != C:
        raise DimensionError(f"conv2d: input has {C} channels, kernel expects {kc}")
    if kh > H + 2 * padding or kw > Wd_ + 2 * padding:
        raise DimensionError(
            f"conv2d: kernel {kh}x{kw} larger than padded input {H + 2 * padding}x{Wd_ + 2 * padding}"
        )
    Ho = conv_output_size(H, kh, stride, padding)
    Wo = conv_output_size(Wd_, kw, stride, padding)
    xp = np.pad(xd, ((0, 0), (padding, padding), (padding, padding), (0, 0))) if padding else xd
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride][:, :Ho, :Wo]
    # win: (N, Ho, Wo, C, kh, kw) -> cols (N*Ho*Wo, kh*kw*C)
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(N * Ho * Wo, kh * kw * C)
    K = kernel.data.reshape(kh * kw * C, O)
    out_d = (cols @ K).reshape(N, Ho, Wo, O)
    out = _make(out_d[0] if single else out_d, x, kernel)
    if out.requires_grad:
        def back(g):
            g2 = (g[None] if single else g).reshape(N * Ho * Wo, O)
            if kernel.requires_grad:
                accumulate(kernel, (cols.T @ g2).reshape(kernel.data.shape))
            if x.requires_grad:
                dcols = (g2 @ K.T).reshape(N, Ho, Wo, kh, kw, C)
                dxp = np.zeros_like(xp)
                for a in range(kh):
                    for c in range(kw):
                        dxp[:, a:a + stride * Ho:stride, c:c + stride * Wo:stride] += dcols[:, :, :, a, c]
                dx = dxp[:, padding:padding + H, padding:padding + Wd_] if padding else dxp
                accumulate(x, dx[0] if single else dx)
        _record((out,), back)
    return out


def layer_norm(x, gamma, beta, axes=(-3, -2, -1), eps: float = 1e-5):
    """Per-sample normalisation over ``axes`` with per-channel scale/shift."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    xd = x.data
    mu = xd.mean(axis=axes, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = _make(gamma.data * xhat + beta.data, x, gamma, beta)
    if out.requires_grad:
        n = np.prod([xd.shape[a] for a in axes])
        def back(g):
            accumulate(gamma, g * xhat)
            accumulate(beta, g)
            if x.requires_grad:
                dxh = g * gamma.data
                s1 = dxh.sum(axis=axes, keepdims=True)
                s2 = (dxh * xhat).sum(axis=axes, keepdims=True)
                accumulate(x, inv / n * (n * dxh - s1 - xhat * s2))
        _record((out,), back)
    return out
