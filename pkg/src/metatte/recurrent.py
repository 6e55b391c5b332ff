"""Masked GRU/LSTM recurrences as single tape primitives.

Each op runs the whole recurrence over a padded batch and returns only the
state at each sequence's last valid step.  Steps where ``mask[b, t]`` is false
leave the state untouched (selected with ``np.where``, so padding cannot
perturb the result even in the last bit).  The backward pass is hand-written
BPTT.

Inputs may carry a leading channel axis, ``x[C, B, L, E]`` with weights
``w_x[C, E, G*H]``, ``w_h[C, H, G*H]``, ``b[C, G*H]``; independent channels
then run in lockstep through batched matmuls.  Without the channel axis the
shapes are ``x[B, L, E]``, ``w_x[E, G*H]`` and so on.

Gate blocks are laid out along the last weight axis:
GRU ``[update | reset | candidate]``, LSTM ``[input | forget | cell | output]``.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor, _emit, _sigmoid
from .errors import DegenerateInputError, DimensionError


def _prepare(x: Tensor, mask, w_x: Tensor, w_h: Tensor, bias: Tensor, gates: int):
    mask = np.asarray(mask, dtype=bool)
    squeeze = x.data.ndim == 3
    X, Wx, Wh, b = x.data, w_x.data, w_h.data, bias.data
    if squeeze:
        X, Wx, Wh, b = X[None], Wx[None], Wh[None], b[None]
    if X.ndim != 4:
        raise DimensionError(f"recurrent input must be [B, L, E] or [C, B, L, E], got {x.shape}")
    C, B, L, E = X.shape
    H = Wh.shape[-2] if Wh.ndim == 3 else -1
    if Wx.shape != (C, E, gates * H) or Wh.shape != (C, H, gates * H) or b.shape != (C, gates * H):
        raise DimensionError(
            f"recurrent weights {w_x.shape}, {w_h.shape}, {bias.shape} do not fit input {x.shape}"
        )
    if mask.shape != (B, L):
        raise DimensionError(f"mask {mask.shape} does not match input {x.shape}")
    if (mask.sum(axis=1) == 0).any():
        raise DegenerateInputError("zero-length sequence in batch")
    return squeeze, mask, X, Wx, Wh, b[:, None, :], H


def _finish(squeeze: bool, grads: tuple[np.ndarray, ...]) -> tuple[np.ndarray, ...]:
    dx, dWx, dWh, db = grads
    if squeeze:
        return dx[0], dWx[0], dWh[0], db[0]
    return dx, dWx, dWh, db


def _order(length: int, reverse: bool) -> range:
    return range(length - 1, -1, -1) if reverse else range(length)


def gru_sequence(
    x: Tensor, mask, w_x: Tensor, w_h: Tensor, bias: Tensor, reverse: bool = False
) -> Tensor:
    """Final hidden state of a GRU run from a zero state.

    z = s(x Wz + h Uz + bz), r = s(x Wr + h Ur + br),
    n = tanh(x Wn + bn + r * (h Un)), h' = (1 - z) * n + z * h.
    """
    squeeze, mask, X, Wx, Wh, b, H = _prepare(x, mask, w_x, w_h, bias, 3)
    C, B, L, _ = X.shape
    h = np.zeros((C, B, H))
    cache = []
    for t in _order(L, reverse):
        m = mask[None, :, t, None]
        xt = X[:, :, t, :]
        xp = xt @ Wx + b
        hp = h @ Wh
        zr = _sigmoid(xp[..., : 2 * H] + hp[..., : 2 * H])
        z, r = zr[..., :H], zr[..., H:]
        hpn = hp[..., 2 * H :]
        n = np.tanh(xp[..., 2 * H :] + r * hpn)
        cache.append((t, m, xt, h, z, r, n, hpn))
        h = np.where(m, n + z * (h - n), h)

    WxT, WhT = Wx.transpose(0, 2, 1), Wh.transpose(0, 2, 1)

    def backward(dh):
        dh = dh[None] if squeeze else dh
        dx = np.zeros_like(X)
        dWx, dWh, db = np.zeros_like(Wx), np.zeros_like(Wh), np.zeros((C, 3 * H))
        dxp = np.empty((C, B, 3 * H))
        dhp = np.empty((C, B, 3 * H))
        for t, m, xt, h_prev, z, r, n, hpn in reversed(cache):
            d_new = np.where(m, dh, 0.0)
            dn_pre = d_new * (1.0 - z) * (1.0 - n * n)
            dxp[..., :H] = d_new * (h_prev - n) * z * (1.0 - z)
            dxp[..., H : 2 * H] = dn_pre * hpn * r * (1.0 - r)
            dxp[..., 2 * H :] = dn_pre
            dhp[..., : 2 * H] = dxp[..., : 2 * H]
            dhp[..., 2 * H :] = dn_pre * r
            dWx += xt.transpose(0, 2, 1) @ dxp
            db += dxp.sum(axis=1)
            dx[:, :, t, :] = dxp @ WxT
            dWh += h_prev.transpose(0, 2, 1) @ dhp
            dh = d_new * z + dhp @ WhT + np.where(m, 0.0, dh)
        return _finish(squeeze, (dx, dWx, dWh, db))

    return _emit(h[0] if squeeze else h, (x, w_x, w_h, bias), backward, "gru_sequence")


def lstm_sequence(
    x: Tensor,
    mask,
    w_x: Tensor,
    w_h: Tensor,
    bias: Tensor,
    reverse: bool = False,
    output: str = "cell",
) -> Tensor:
    """Final cell state (``output="cell"``) or hidden output of an LSTM."""
    if output not in ("cell", "hidden"):
        raise ValueError(f"output must be 'cell' or 'hidden', got {output!r}")
    squeeze, mask, X, Wx, Wh, b, H = _prepare(x, mask, w_x, w_h, bias, 4)
    C, B, L, _ = X.shape
    h = np.zeros((C, B, H))
    c = np.zeros((C, B, H))
    cache = []
    for t in _order(L, reverse):
        m = mask[None, :, t, None]
        xt = X[:, :, t, :]
        pre = xt @ Wx + h @ Wh + b
        gates = _sigmoid(pre)
        i, f, o = gates[..., :H], gates[..., H : 2 * H], gates[..., 3 * H :]
        g = np.tanh(pre[..., 2 * H : 3 * H])
        c_new = f * c + i * g
        tc = np.tanh(c_new)
        cache.append((t, m, xt, h, c, i, f, g, o, tc))
        h = np.where(m, o * tc, h)
        c = np.where(m, c_new, c)

    WxT, WhT = Wx.transpose(0, 2, 1), Wh.transpose(0, 2, 1)

    def backward(d_out):
        d_out = d_out[None] if squeeze else d_out
        dx = np.zeros_like(X)
        dWx, dWh, db = np.zeros_like(Wx), np.zeros_like(Wh), np.zeros((C, 4 * H))
        if output == "cell":
            dh, dc = np.zeros_like(d_out), d_out
        else:
            dh, dc = d_out, np.zeros_like(d_out)
        dpre = np.empty((C, B, 4 * H))
        for t, m, xt, h_prev, c_prev, i, f, g, o, tc in reversed(cache):
            dh_new = np.where(m, dh, 0.0)
            dc_tot = np.where(m, dc, 0.0) + dh_new * o * (1.0 - tc * tc)
            dpre[..., :H] = dc_tot * g * i * (1.0 - i)
            dpre[..., H : 2 * H] = dc_tot * c_prev * f * (1.0 - f)
            dpre[..., 2 * H : 3 * H] = dc_tot * i * (1.0 - g * g)
            dpre[..., 3 * H :] = dh_new * tc * o * (1.0 - o)
            dWx += xt.transpose(0, 2, 1) @ dpre
            dWh += h_prev.transpose(0, 2, 1) @ dpre
            db += dpre.sum(axis=1)
            dx[:, :, t, :] = dpre @ WxT
            dh = dpre @ WhT + np.where(m, 0.0, dh)
            dc = dc_tot * f + np.where(m, 0.0, dc)
        return _finish(squeeze, (dx, dWx, dWh, db))

    out = c if output == "cell" else h
    return _emit(out[0] if squeeze else out, (x, w_x, w_h, bias), backward, "lstm_sequence")
