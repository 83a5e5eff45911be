"""Loop-heavy numeric kernels with a numba path and a pure-numpy path.

The numba path is used when numba imports and ``M2REPA_NUMBA`` is not set to
``0``/``false``/``off``. Both paths are always importable under explicit names
(``*_numpy`` / ``*_numba``) so tests and the benchmark can compare them.
"""

from __future__ import annotations

import os

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAVE_NUMBA = False


def _env_wants_numba() -> bool:
    flag = os.environ.get("M2REPA_NUMBA", "1").strip().lower()
    return flag not in ("0", "false", "off", "no")


USE_NUMBA = HAVE_NUMBA and _env_wants_numba()


def backend() -> str:
    return "numba" if USE_NUMBA else "numpy"


def _njit(fn):
    if not HAVE_NUMBA:
        return fn
    return numba.njit(cache=True, fastmath=False)(fn)


# ---------------------------------------------------------------------------
# 3x3x3 convolution, zero padding 1, stride 1. x: [B, Ci, T, H, W], w: [Co, Ci, 3, 3, 3]


def conv3d_numpy(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1), (1, 1)))
    cols = sliding_window_view(xp, (3, 3, 3), axis=(2, 3, 4))
    out = np.tensordot(cols, w, axes=([1, 5, 6, 7], [1, 2, 3, 4]))
    return np.ascontiguousarray(out.transpose(0, 4, 1, 2, 3)).astype(x.dtype, copy=False)


def conv3d_grad_weight_numpy(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1), (1, 1)))
    cols = sliding_window_view(xp, (3, 3, 3), axis=(2, 3, 4))
    gw = np.tensordot(g, cols, axes=([0, 2, 3, 4], [0, 2, 3, 4]))
    return gw.astype(x.dtype, copy=False)


def _conv3d_loops(x, w):
    B, Ci, T, H, W = x.shape
    Co = w.shape[0]
    out = np.zeros((B, Co, T, H, W), dtype=x.dtype)
    for b in range(B):
        for o in range(Co):
            for t in range(T):
                for y in range(H):
                    for xx in range(W):
                        acc = 0.0
                        for c in range(Ci):
                            for i in range(3):
                                ti = t + i - 1
                                if ti < 0 or ti >= T:
                                    continue
                                for j in range(3):
                                    yj = y + j - 1
                                    if yj < 0 or yj >= H:
                                        continue
                                    for k in range(3):
                                        xk = xx + k - 1
                                        if xk < 0 or xk >= W:
                                            continue
                                        acc += w[o, c, i, j, k] * x[b, c, ti, yj, xk]
                        out[b, o, t, y, xx] = acc
    return out


def _conv3d_grad_weight_loops(x, g):
    B, Ci, T, H, W = x.shape
    Co = g.shape[1]
    gw = np.zeros((Co, Ci, 3, 3, 3), dtype=x.dtype)
    for o in range(Co):
        for c in range(Ci):
            for i in range(3):
                for j in range(3):
                    for k in range(3):
                        acc = 0.0
                        for b in range(B):
                            for t in range(T):
                                ti = t + i - 1
                                if ti < 0 or ti >= T:
                                    continue
                                for y in range(H):
                                    yj = y + j - 1
                                    if yj < 0 or yj >= H:
                                        continue
                                    for xx in range(W):
                                        xk = xx + k - 1
                                        if xk < 0 or xk >= W:
                                            continue
                                        acc += g[b, o, t, y, xx] * x[b, c, ti, yj, xk]
                        gw[o, c, i, j, k] = acc
    return gw


conv3d_numba = _njit(_conv3d_loops)
conv3d_grad_weight_numba = _njit(_conv3d_grad_weight_loops)


def flip_kernel(w: np.ndarray) -> np.ndarray:
    """Kernel for the input gradient: swap in/out channels and reverse all taps."""
    return np.ascontiguousarray(w.transpose(1, 0, 2, 3, 4)[:, :, ::-1, ::-1, ::-1])


# The windowed tensordot hands the contraction to BLAS and beats the numba
# loops (about 2.3x on the training shapes, see benchmarks/), so convolution
# always takes the numpy path. The loop versions stay for parity tests.
def conv3d(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    return conv3d_numpy(x, w)


def conv3d_grad_input(g: np.ndarray, w: np.ndarray) -> np.ndarray:
    return conv3d(g, flip_kernel(w))


def conv3d_grad_weight(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    return conv3d_grad_weight_numpy(x, g)


# ---------------------------------------------------------------------------
# Valid-mode k x k box mean over the last two axes of a 2-D image.


def box_mean_numpy(img: np.ndarray, k: int) -> np.ndarray:
    return sliding_window_view(img, (k, k)).mean(axis=(-1, -2))


def _box_mean_loops(img, k):
    H, W = img.shape
    oh, ow = H - k + 1, W - k + 1
    out = np.empty((oh, ow), dtype=np.float64)
    inv = 1.0 / (k * k)
    for y in range(oh):
        for x in range(ow):
            acc = 0.0
            for i in range(k):
                for j in range(k):
                    acc += img[y + i, x + j]
            out[y, x] = acc * inv
    return out


box_mean_numba = _njit(_box_mean_loops)


def box_mean(img: np.ndarray, k: int) -> np.ndarray:
    img = np.ascontiguousarray(img, dtype=np.float64)
    if USE_NUMBA:
        return box_mean_numba(img, k)
    return box_mean_numpy(img, k)


# ---------------------------------------------------------------------------
# Pairwise IoU between binary masks. pred: [N, P] bool, gt: [M, P] bool -> [M, N].


def iou_table_numpy(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    p = pred.astype(np.float64)
    g = gt.astype(np.float64)
    inter = g @ p.T
    union = g.sum(1)[:, None] + p.sum(1)[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0)
    return out


def _iou_table_loops(pred, gt):
    N, P = pred.shape
    M = gt.shape[0]
    out = np.zeros((M, N), dtype=np.float64)
    for m in range(M):
        for n in range(N):
            inter = 0
            union = 0
            for q in range(P):
                a = gt[m, q]
                b = pred[n, q]
                if a and b:
                    inter += 1
                if a or b:
                    union += 1
            if union > 0:
                out[m, n] = inter / union
    return out


iou_table_numba = _njit(_iou_table_loops)


def iou_table(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    pred = np.ascontiguousarray(pred, dtype=np.bool_)
    gt = np.ascontiguousarray(gt, dtype=np.bool_)
    if USE_NUMBA:
        return iou_table_numba(pred, gt)
    return iou_table_numpy(pred, gt)


# ---------------------------------------------------------------------------
# Painter's-rule rasterizer on a torus. Objects are rows of
# (kind, cx, cy, half_a, half_b, depth); kind 0 = rectangle, 1 = disc.
# Returns the per-pixel owner index (-1 = background) and depth.


def rasterize_numpy(objs: np.ndarray, H: int, W: int, background: float):
    ys = np.arange(H, dtype=np.float64)[:, None] + 0.5
    xs = np.arange(W, dtype=np.float64)[None, :] + 0.5
    owner = np.full((H, W), -1, dtype=np.int64)
    depth = np.full((H, W), background, dtype=np.float64)
    for idx in range(objs.shape[0]):
        kind, cx, cy, ha, hb, d = objs[idx]
        dx = np.mod(xs - cx + W / 2.0, W) - W / 2.0
        dy = np.mod(ys - cy + H / 2.0, H) - H / 2.0
        if kind == 0:
            cover = (np.abs(dx) < ha) & (np.abs(dy) < hb)
        else:
            cover = dx * dx + dy * dy < ha * ha
        win = cover & (d < depth)
        owner[win] = idx
        depth[win] = d
    return owner, depth


def _rasterize_loops(objs, H, W, background):
    owner = np.full((H, W), -1, dtype=np.int64)
    depth = np.full((H, W), background, dtype=np.float64)
    for y in range(H):
        py = y + 0.5
        for x in range(W):
            px = x + 0.5
            for idx in range(objs.shape[0]):
                kind = objs[idx, 0]
                dx = (px - objs[idx, 1] + W / 2.0) % W - W / 2.0
                dy = (py - objs[idx, 2] + H / 2.0) % H - H / 2.0
                ha = objs[idx, 3]
                hb = objs[idx, 4]
                if kind == 0:
                    cover = abs(dx) < ha and abs(dy) < hb
                else:
                    cover = dx * dx + dy * dy < ha * ha
                d = objs[idx, 5]
                if cover and d < depth[y, x]:
                    owner[y, x] = idx
                    depth[y, x] = d
    return owner, depth


rasterize_numba = _njit(_rasterize_loops)


def rasterize(objs: np.ndarray, H: int, W: int, background: float):
    objs = np.ascontiguousarray(objs, dtype=np.float64)
    if USE_NUMBA:
        return rasterize_numba(objs, H, W, float(background))
    return rasterize_numpy(objs, H, W, float(background))
