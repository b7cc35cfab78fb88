"""Numpy forward/backward primitives for the student network.

Each ``*_fwd`` returns (output, cache); the matching ``*_bwd`` consumes the
cache and the output gradient. Attention supports three scopes: full global
attention, disjoint square windows, and windows augmented with one summary
token that attends (and is attended to) globally.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

LN_EPS = 1e-6
_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def linear_fwd(x, w, b):
    return x @ w + b, (x, w)


def linear_bwd(cache, g):
    x, w = cache
    dx = g @ w.T
    dw = x.reshape(-1, x.shape[-1]).T @ g.reshape(-1, g.shape[-1])
    db = g.reshape(-1, g.shape[-1]).sum(axis=0)
    return dx, dw, db


def layernorm_fwd(x, gamma, beta):
    mean = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = (x - mean) * inv
    return xhat * gamma + beta, (xhat, inv, gamma)


def layernorm_bwd(cache, g):
    xhat, inv, gamma = cache
    dgamma = (g * xhat).reshape(-1, g.shape[-1]).sum(axis=0)
    dbeta = g.reshape(-1, g.shape[-1]).sum(axis=0)
    gx = g * gamma
    dx = inv * (
        gx
        - gx.mean(axis=-1, keepdims=True)
        - xhat * (gx * xhat).mean(axis=-1, keepdims=True)
    )
    return dx, dgamma, dbeta


def gelu_fwd(x):
    y = 0.5 * x * (1.0 + erf(x * _INV_SQRT2))
    return y, x


def gelu_bwd(cache, g):
    x = cache
    d = 0.5 * (1.0 + erf(x * _INV_SQRT2)) + x * _INV_SQRT2PI * np.exp(-0.5 * x * x)
    return g * d


def softmax(s):
    e = np.exp(s - s.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def softmax_bwd(p, g):
    return p * (g - (g * p).sum(axis=-1, keepdims=True))


def _window_partition(a, rows, cols, w):
    """(H, rows*cols, hd) -> (n_windows, H, w*w, hd), row-major windows."""
    heads, _, hd = a.shape
    g = a.reshape(heads, rows // w, w, cols // w, w, hd)
    g = g.transpose(1, 3, 0, 2, 4, 5)  # (R/w, C/w, H, w, w, hd)
    return np.ascontiguousarray(g.reshape(-1, heads, w * w, hd))


def _window_merge(a, rows, cols, w):
    """Inverse of :func:`_window_partition`."""
    nw, heads, _, hd = a.shape
    g = a.reshape(rows // w, cols // w, heads, w, w, hd)
    g = g.transpose(2, 0, 3, 1, 4, 5)  # (H, R/w, w, C/w, w, hd)
    return np.ascontiguousarray(g.reshape(heads, rows * cols, hd))


def attention_fwd(tokens, p, heads, grid_shape, window, with_summary, want_grad=True):
    """Multi-head self-attention over a token grid.

    tokens: (N, dim); if ``with_summary``, row 0 is the summary token and the
    remaining rows are the grid in row-major order. ``window`` is None for
    global attention or the window side in patches; windows never mix, but
    the summary token (when present) is appended to every window's key/value
    set and itself attends to every token.
    """
    rows, cols = grid_shape
    n, dim = tokens.shape
    hd = dim // heads
    scale = 1.0 / np.sqrt(hd)

    q = tokens @ p["wq"] + p["bq"]
    k = tokens @ p["wk"] + p["bk"]
    v = tokens @ p["wv"] + p["bv"]
    # head-major layout: (H, N, hd)
    qh = np.ascontiguousarray(q.reshape(n, heads, hd).transpose(1, 0, 2))
    kh = np.ascontiguousarray(k.reshape(n, heads, hd).transpose(1, 0, 2))
    vh = np.ascontiguousarray(v.reshape(n, heads, hd).transpose(1, 0, 2))

    cache = {"tokens": tokens, "qh": qh, "kh": kh, "vh": vh} if want_grad else None

    if window is None:
        if want_grad or n <= 1024:
            att = softmax(qh @ kh.transpose(0, 2, 1) * scale)
            oh = att @ vh
            if want_grad:
                cache["att"] = att
        else:
            # memory-lean path for large grids: one head at a time
            oh = np.empty_like(qh)
            for h in range(heads):
                s = qh[h] @ kh[h].T
                s *= scale
                s -= s.max(axis=-1, keepdims=True)
                np.exp(s, out=s)
                s /= s.sum(axis=-1, keepdims=True)
                oh[h] = s @ vh[h]
        mode = "global"
    else:
        w = window
        if rows % w or cols % w:
            raise ValueError(f"window {w} does not divide grid {rows}x{cols}")
        if with_summary:
            grid_q, grid_k, grid_v = qh[:, 1:], kh[:, 1:], vh[:, 1:]
        else:
            grid_q, grid_k, grid_v = qh, kh, vh
        qw = _window_partition(grid_q, rows, cols, w)  # (nw, H, ww, hd)
        kw = _window_partition(grid_k, rows, cols, w)
        vw = _window_partition(grid_v, rows, cols, w)
        nw = qw.shape[0]
        if with_summary:
            ks = np.broadcast_to(kh[:, 0][None, :, None, :], (nw, heads, 1, hd))
            vs = np.broadcast_to(vh[:, 0][None, :, None, :], (nw, heads, 1, hd))
            ka = np.concatenate([kw, ks], axis=2)  # (nw, H, ww+1, hd)
            va = np.concatenate([vw, vs], axis=2)
        else:
            ka, va = kw, vw
        att = softmax(qw @ ka.transpose(0, 1, 3, 2) * scale)
        ow = att @ va  # (nw, H, ww, hd)
        grid_o = _window_merge(ow, rows, cols, w)
        if with_summary:
            ss = qh[:, :1] @ kh.transpose(0, 2, 1) * scale  # (H, 1, N)
            att_s = softmax(ss)
            os_ = att_s @ vh  # (H, 1, hd)
            oh = np.concatenate([os_, grid_o], axis=1)
        else:
            oh = grid_o
        if want_grad:
            cache.update({"att": att, "ka": ka, "va": va, "qw": qw})
            if with_summary:
                cache["att_s"] = att_s
        mode = "window"

    o = np.ascontiguousarray(oh.transpose(1, 0, 2)).reshape(n, dim)
    out = o @ p["wo"] + p["bo"]
    if want_grad:
        cache.update(
            {"o": o, "p": p, "heads": heads, "grid_shape": grid_shape,
             "window": window, "with_summary": with_summary, "mode": mode}
        )
    return out, cache


def attention_bwd(cache, g):
    p = cache["p"]
    heads = cache["heads"]
    rows, cols = cache["grid_shape"]
    tokens = cache["tokens"]
    qh, kh, vh = cache["qh"], cache["kh"], cache["vh"]
    n, dim = tokens.shape
    hd = dim // heads
    scale = 1.0 / np.sqrt(hd)

    do = g @ p["wo"].T
    dwo = cache["o"].T @ g
    dbo = g.sum(axis=0)
    doh = np.ascontiguousarray(do.reshape(n, heads, hd).transpose(1, 0, 2))

    if cache["mode"] == "global":
        att = cache["att"]
        datt = doh @ vh.transpose(0, 2, 1)
        dvh = att.transpose(0, 2, 1) @ doh
        ds = softmax_bwd(att, datt) * scale
        dqh = ds @ kh
        dkh = ds.transpose(0, 2, 1) @ qh
    else:
        w = cache["window"]
        with_summary = cache["with_summary"]
        att, ka, va, qw = cache["att"], cache["ka"], cache["va"], cache["qw"]
        ww = w * w
        if with_summary:
            dog = _window_partition(doh[:, 1:], rows, cols, w)
        else:
            dog = _window_partition(doh, rows, cols, w)
        datt = dog @ va.transpose(0, 1, 3, 2)
        dva = att.transpose(0, 1, 3, 2) @ dog
        ds = softmax_bwd(att, datt) * scale
        dqw = ds @ ka
        dka = ds.transpose(0, 1, 3, 2) @ qw
        dqh = np.zeros_like(qh)
        dkh = np.zeros_like(kh)
        dvh = np.zeros_like(vh)
        if with_summary:
            dqh[:, 1:] = _window_merge(dqw, rows, cols, w)
            dkh[:, 1:] = _window_merge(dka[:, :, :ww], rows, cols, w)
            dvh[:, 1:] = _window_merge(dva[:, :, :ww], rows, cols, w)
            dkh[:, 0] += dka[:, :, ww].sum(axis=0).reshape(heads, hd)
            dvh[:, 0] += dva[:, :, ww].sum(axis=0).reshape(heads, hd)
            # summary row
            att_s = cache["att_s"]
            dos = doh[:, :1]
            datt_s = dos @ vh.transpose(0, 2, 1)
            dvh += att_s.transpose(0, 2, 1) @ dos
            dss = softmax_bwd(att_s, datt_s) * scale
            dqh[:, :1] += dss @ kh
            dkh += dss.transpose(0, 2, 1) @ qh[:, :1]
        else:
            dqh = _window_merge(dqw, rows, cols, w)
            dkh = _window_merge(dka, rows, cols, w)
            dvh = _window_merge(dva, rows, cols, w)

    dq = np.ascontiguousarray(dqh.transpose(1, 0, 2)).reshape(n, dim)
    dk = np.ascontiguousarray(dkh.transpose(1, 0, 2)).reshape(n, dim)
    dv = np.ascontiguousarray(dvh.transpose(1, 0, 2)).reshape(n, dim)

    grads = {
        "wq": tokens.T @ dq, "bq": dq.sum(axis=0),
        "wk": tokens.T @ dk, "bk": dk.sum(axis=0),
        "wv": tokens.T @ dv, "bv": dv.sum(axis=0),
        "wo": dwo, "bo": dbo,
    }
    dtokens = dq @ p["wq"].T + dk @ p["wk"].T + dv @ p["wv"].T
    return dtokens, grads


def bilinear_weights(n_src: int, n_dst: int) -> np.ndarray:
    """Dense (n_dst, n_src) interpolation matrix, corners aligned."""
    m = np.zeros((n_dst, n_src))
    if n_dst == 1:
        positions = np.zeros(1)
    else:
        positions = np.arange(n_dst) * (n_src - 1) / (n_dst - 1)
    lo = np.minimum(positions.astype(int), n_src - 1)
    hi = np.minimum(lo + 1, n_src - 1)
    frac = positions - lo
    for i in range(n_dst):
        m[i, lo[i]] += 1.0 - frac[i]
        m[i, hi[i]] += frac[i]
    return m
