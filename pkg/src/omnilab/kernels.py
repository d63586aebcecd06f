"""
Hot numeric kernels.

Every kernel has two implementations: a vectorised numpy one (``*_np``) and an
explicit-loop one (``*_nb``) compiled with numba. The public names dispatch to
the numba version when it is enabled (see ``omnilab._accel`` for the switch),
except for exp-bound kernels, which need SVML to beat numpy. Both versions
compute the same math in the same dtype; results agree to floating-point
rounding, not bit-for-bit.
"""
import math

import numpy as np

from ._accel import NUMBA_ENABLED, njit

# ---------------------------------------------------------------------------
# softmax over the last axis
# ---------------------------------------------------------------------------


def softmax_np(x):
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    e /= e.sum(axis=-1, keepdims=True)
    return e


def softmax_bwd_np(y, g):
    s = (g * y).sum(axis=-1, keepdims=True)
    return y * (g - s)


@njit(cache=True)
def _softmax_rows(x, out):
    m_rows, n = x.shape
    for r in range(m_rows):
        mx = x[r, 0]
        for j in range(1, n):
            if x[r, j] > mx:
                mx = x[r, j]
        s = 0.0
        for j in range(n):
            e = math.exp(x[r, j] - mx)
            out[r, j] = e
            s += e
        inv = 1.0 / s
        for j in range(n):
            out[r, j] *= inv


@njit(cache=True)
def _softmax_bwd_rows(y, g, out):
    m_rows, n = y.shape
    for r in range(m_rows):
        s = 0.0
        for j in range(n):
            s += g[r, j] * y[r, j]
        for j in range(n):
            out[r, j] = y[r, j] * (g[r, j] - s)


def softmax_nb(x):
    x2 = np.ascontiguousarray(x).reshape(-1, x.shape[-1])
    out = np.empty_like(x2)
    _softmax_rows(x2, out)
    return out.reshape(x.shape)


def softmax_bwd_nb(y, g):
    y2 = np.ascontiguousarray(y).reshape(-1, y.shape[-1])
    g2 = np.ascontiguousarray(g, dtype=y.dtype).reshape(-1, y.shape[-1])
    out = np.empty_like(y2)
    _softmax_bwd_rows(y2, g2, out)
    return out.reshape(y.shape)


# ---------------------------------------------------------------------------
# RMS normalisation over the last axis (no affine part)
# ---------------------------------------------------------------------------


def rms_norm_np(x, eps):
    """Returns ``(y, r)`` with ``y = x * r`` and ``r = 1/sqrt(mean(x^2) + eps)``."""
    r = 1.0 / np.sqrt((x * x).mean(axis=-1, keepdims=True) + eps)
    r = r.astype(x.dtype, copy=False)
    return x * r, r


def rms_norm_bwd_np(x, r, g):
    n = x.shape[-1]
    gx = (g * x).sum(axis=-1, keepdims=True) / n
    return r * (g - (r * r) * x * gx)


@njit(cache=True)
def _rms_rows(x, eps, y, r):
    m_rows, n = x.shape
    for i in range(m_rows):
        s = 0.0
        for j in range(n):
            s += x[i, j] * x[i, j]
        ri = 1.0 / math.sqrt(s / n + eps)
        r[i, 0] = ri
        for j in range(n):
            y[i, j] = x[i, j] * ri


@njit(cache=True)
def _rms_bwd_rows(x, r, g, out):
    m_rows, n = x.shape
    for i in range(m_rows):
        s = 0.0
        for j in range(n):
            s += g[i, j] * x[i, j]
        s /= n
        ri = r[i, 0]
        c = ri * ri * s
        for j in range(n):
            out[i, j] = ri * (g[i, j] - c * x[i, j])


def rms_norm_nb(x, eps):
    x2 = np.ascontiguousarray(x).reshape(-1, x.shape[-1])
    y = np.empty_like(x2)
    r = np.empty((x2.shape[0], 1), dtype=x.dtype)
    _rms_rows(x2, eps, y, r)
    return y.reshape(x.shape), r.reshape(x.shape[:-1] + (1,))


def rms_norm_bwd_nb(x, r, g):
    d = x.shape[-1]
    out = np.empty(x.shape, dtype=x.dtype).reshape(-1, d)
    _rms_bwd_rows(
        np.ascontiguousarray(x).reshape(-1, d),
        np.ascontiguousarray(r).reshape(-1, 1),
        np.ascontiguousarray(g, dtype=x.dtype).reshape(-1, d),
        out,
    )
    return out.reshape(x.shape)


# ---------------------------------------------------------------------------
# SiLU
# ---------------------------------------------------------------------------


def silu_np(x):
    return x / (1.0 + np.exp(-x))


def silu_bwd_np(x, g):
    s = 1.0 / (1.0 + np.exp(-x))
    return g * s * (1.0 + x * (1.0 - s))


@njit(cache=True)
def _silu_flat(x, out):
    for i in range(x.size):
        out[i] = x[i] / (1.0 + math.exp(-x[i]))


@njit(cache=True)
def _silu_bwd_flat(x, g, out):
    for i in range(x.size):
        s = 1.0 / (1.0 + math.exp(-x[i]))
        out[i] = g[i] * s * (1.0 + x[i] * (1.0 - s))


def silu_nb(x):
    xf = np.ascontiguousarray(x).reshape(-1)
    out = np.empty_like(xf)
    _silu_flat(xf, out)
    return out.reshape(x.shape)


def silu_bwd_nb(x, g):
    xf = np.ascontiguousarray(x).reshape(-1)
    out = np.empty_like(xf)
    _silu_bwd_flat(xf, np.ascontiguousarray(g, dtype=x.dtype).reshape(-1), out)
    return out.reshape(x.shape)


# ---------------------------------------------------------------------------
# rotary pair rotation: x (B, N, H, D), cos/sin (N, D/2); pairs (2j, 2j+1)
# ---------------------------------------------------------------------------


def rotate_pairs_np(x, cos, sin):
    b, n, h, d = x.shape
    xp = x.reshape(b, n, h, d // 2, 2)
    c = cos[None, :, None, :]
    s = sin[None, :, None, :]
    x0 = xp[..., 0]
    x1 = xp[..., 1]
    out = np.empty_like(xp)
    out[..., 0] = x0 * c - x1 * s
    out[..., 1] = x0 * s + x1 * c
    return out.reshape(x.shape)


@njit(cache=True)
def _rotate_pairs(x, cos, sin, out):
    b, n, h, d = x.shape
    p = d // 2
    for bi in range(b):
        for t in range(n):
            for hi in range(h):
                for j in range(p):
                    x0 = x[bi, t, hi, 2 * j]
                    x1 = x[bi, t, hi, 2 * j + 1]
                    c = cos[t, j]
                    s = sin[t, j]
                    out[bi, t, hi, 2 * j] = x0 * c - x1 * s
                    out[bi, t, hi, 2 * j + 1] = x0 * s + x1 * c


def rotate_pairs_nb(x, cos, sin):
    x = np.ascontiguousarray(x)
    out = np.empty_like(x)
    _rotate_pairs(x, np.ascontiguousarray(cos, dtype=x.dtype), np.ascontiguousarray(sin, dtype=x.dtype), out)
    return out


# ---------------------------------------------------------------------------
# colour statistics for the pair miner
# ---------------------------------------------------------------------------


def rgb_to_hsv_np(img):
    """uint8 (..., 3) -> float64 (..., 3) with H in [0, 360), S and V in [0, 1]."""
    rgb = img.astype(np.float64) / 255.0
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    mx = rgb.max(axis=-1)
    mn = rgb.min(axis=-1)
    c = mx - mn
    safe_c = np.where(c > 0, c, 1.0)
    h = np.where(
        mx == r,
        np.mod((g - b) / safe_c, 6.0),
        np.where(mx == g, (b - r) / safe_c + 2.0, (r - g) / safe_c + 4.0),
    )
    h = np.where(c > 0, 60.0 * h, 0.0)
    h = np.where(h >= 360.0, h - 360.0, h)
    s = np.where(mx > 0, c / np.where(mx > 0, mx, 1.0), 0.0)
    return np.stack([h, s, mx], axis=-1)


@njit(cache=True)
def _hsv_pixel(r8, g8, b8):
    r = r8 / 255.0
    g = g8 / 255.0
    b = b8 / 255.0
    mx = max(r, g, b)
    mn = min(r, g, b)
    c = mx - mn
    if c > 0:
        if mx == r:
            h = (g - b) / c
            h = h - 6.0 * math.floor(h / 6.0)
        elif mx == g:
            h = (b - r) / c + 2.0
        else:
            h = (r - g) / c + 4.0
        h *= 60.0
        if h >= 360.0:
            h -= 360.0
    else:
        h = 0.0
    s = c / mx if mx > 0 else 0.0
    return h, s, mx


def hsv_delta_np(a, b):
    """Mean per-pixel |dH| (circular, degrees), |dS| and |dV| between two uint8 frames."""
    ha = rgb_to_hsv_np(a)
    hb = rgb_to_hsv_np(b)
    dh = np.abs(ha[..., 0] - hb[..., 0])
    dh = np.minimum(dh, 360.0 - dh)
    ds = np.abs(ha[..., 1] - hb[..., 1])
    dv = np.abs(ha[..., 2] - hb[..., 2])
    return np.array([dh.mean(), ds.mean(), dv.mean()])


@njit(cache=True)
def _hsv_delta(a, b, out):
    h, w, _ = a.shape
    th = 0.0
    ts = 0.0
    tv = 0.0
    for i in range(h):
        for j in range(w):
            h1, s1, v1 = _hsv_pixel(a[i, j, 0], a[i, j, 1], a[i, j, 2])
            h2, s2, v2 = _hsv_pixel(b[i, j, 0], b[i, j, 1], b[i, j, 2])
            dh = abs(h1 - h2)
            if 360.0 - dh < dh:
                dh = 360.0 - dh
            th += dh
            ts += abs(s1 - s2)
            tv += abs(v1 - v2)
    n = h * w
    out[0] = th / n
    out[1] = ts / n
    out[2] = tv / n


def hsv_delta_nb(a, b):
    out = np.empty(3)
    _hsv_delta(np.ascontiguousarray(a), np.ascontiguousarray(b), out)
    return out


def _block_edges(size, grid):
    step = size // grid
    edges = [i * step for i in range(grid)] + [size]
    return np.asarray(edges, dtype=np.int64)


def block_histograms_np(img, grid, bins):
    """uint8 (H, W, C) -> float64 (grid, grid, C, bins), each histogram summing to 1.

    Trailing pixels that do not fill a whole block go to the last block row/column.
    """
    h, w, ch = img.shape
    re = _block_edges(h, grid)
    ce = _block_edges(w, grid)
    row_block = np.searchsorted(re, np.arange(h), side="right") - 1
    col_block = np.searchsorted(ce, np.arange(w), side="right") - 1
    block = row_block[:, None] * grid + col_block[None, :]
    binned = (img.astype(np.int64) * bins) // 256
    idx = (block[:, :, None] * ch + np.arange(ch)[None, None, :]) * bins + binned
    counts = np.bincount(idx.ravel(), minlength=grid * grid * ch * bins).astype(np.float64)
    counts = counts.reshape(grid, grid, ch, bins)
    return counts / counts.sum(axis=-1, keepdims=True)


@njit(cache=True)
def _block_hist(img, re, ce, bins, out):
    grid = re.shape[0] - 1
    ch = img.shape[2]
    for bi in range(grid):
        for bj in range(grid):
            for i in range(re[bi], re[bi + 1]):
                for j in range(ce[bj], ce[bj + 1]):
                    for c in range(ch):
                        out[bi, bj, c, (img[i, j, c] * bins) // 256] += 1.0
            n = (re[bi + 1] - re[bi]) * (ce[bj + 1] - ce[bj])
            for c in range(ch):
                for k in range(bins):
                    out[bi, bj, c, k] /= n


def block_histograms_nb(img, grid, bins):
    h, w, ch = img.shape
    out = np.zeros((grid, grid, ch, bins), dtype=np.float64)
    _block_hist(np.ascontiguousarray(img).astype(np.int64), _block_edges(h, grid), _block_edges(w, grid), bins, out)
    return out


def _svml_operational() -> bool:
    if not NUMBA_ENABLED:
        return False
    try:
        from numba import config

        return bool(config.USING_SVML)
    except Exception:  # pragma: no cover
        return False


# Loops built around exp() only beat numpy's SIMD exp when numba can vectorise
# it, which needs SVML; without it those kernels stay on numpy.
SVML = _svml_operational()
USE_NUMBA_EXP = NUMBA_ENABLED and SVML

softmax = softmax_nb if USE_NUMBA_EXP else softmax_np
silu, silu_bwd = (silu_nb, silu_bwd_nb) if USE_NUMBA_EXP else (silu_np, silu_bwd_np)

if NUMBA_ENABLED:
    softmax_bwd = softmax_bwd_nb
    rms_norm, rms_norm_bwd = rms_norm_nb, rms_norm_bwd_nb
    rotate_pairs = rotate_pairs_nb
    hsv_delta = hsv_delta_nb
    block_histograms = block_histograms_nb
else:
    softmax_bwd = softmax_bwd_np
    rms_norm, rms_norm_bwd = rms_norm_np, rms_norm_bwd_np
    rotate_pairs = rotate_pairs_np
    hsv_delta = hsv_delta_np
    block_histograms = block_histograms_np


def active_backends() -> dict:
    """Which implementation each public kernel resolves to."""
    names = ["softmax", "softmax_bwd", "rms_norm", "rms_norm_bwd", "silu", "silu_bwd",
             "rotate_pairs", "hsv_delta", "block_histograms"]
    g = globals()
    return {n: ("numba" if g[n].__name__.endswith("_nb") else "numpy") for n in names}
