"""Hot inner loops: 3x3 patch extraction/scatter for convolutions and the
box filter used by SSIM.

Every kernel has a numba ``@njit`` implementation and a pure-numpy fallback
with identical semantics. The numba path is used when numba imports cleanly
and ``FLOWSR_DISABLE_NUMBA`` is unset (or ``0``); set the variable to ``1`` to
force the numpy path. Results of the two paths agree to floating-point
rounding (tests/test_kernels.py).
"""

from __future__ import annotations

import os

import numpy as np

_DISABLED = os.environ.get("FLOWSR_DISABLE_NUMBA", "0").lower() not in ("", "0", "false", "no")

try:
    if _DISABLED:
        raise ImportError("disabled by FLOWSR_DISABLE_NUMBA")
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised via env flag in subprocess
    HAVE_NUMBA = False


def backend() -> str:
    return "numba" if HAVE_NUMBA else "numpy"


# ---------------------------------------------------------------------------
# numpy reference implementations
# ---------------------------------------------------------------------------

def im2col3x3_numpy(x: np.ndarray) -> np.ndarray:
    """(N, H, W, C) -> (N, H, W, 9*C), zero padding 1, tap order (dy, dx, c)."""
    n, h, w, c = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    cols = np.empty((n, h, w, 9, c), dtype=x.dtype)
    k = 0
    for dy in range(3):
        for dx in range(3):
            cols[:, :, :, k, :] = xp[:, dy:dy + h, dx:dx + w, :]
            k += 1
    return cols.reshape(n, h, w, 9 * c)


def col2im3x3_numpy(cols: np.ndarray, c: int) -> np.ndarray:
    """Adjoint of :func:`im2col3x3_numpy`."""
    n, h, w, _ = cols.shape
    cols = cols.reshape(n, h, w, 9, c)
    xp = np.zeros((n, h + 2, w + 2, c), dtype=cols.dtype)
    k = 0
    for dy in range(3):
        for dx in range(3):
            xp[:, dy:dy + h, dx:dx + w, :] += cols[:, :, :, k, :]
            k += 1
    return xp[:, 1:-1, 1:-1, :]


def box_mean_valid_numpy(x: np.ndarray, win: int) -> np.ndarray:
    """Mean over every full win x win window of a 2-D array (valid region)."""
    h, w = x.shape
    s = np.zeros((h + 1, w + 1), dtype=np.float64)
    s[1:, 1:] = np.cumsum(np.cumsum(x, axis=0, dtype=np.float64), axis=1)
    tot = s[win:, win:] - s[:-win, win:] - s[win:, :-win] + s[:-win, :-win]
    return tot / (win * win)


# ---------------------------------------------------------------------------
# numba implementations
# ---------------------------------------------------------------------------

if HAVE_NUMBA:

    @njit(cache=True)
    def _im2col3x3_nb(x, out):
        n, h, w, c = x.shape
        for b in range(n):
            for i in range(h):
                for j in range(w):
                    k = 0
                    for dy in range(-1, 2):
                        yy = i + dy
                        for dx in range(-1, 2):
                            xx = j + dx
                            base = k * c
                            if 0 <= yy < h and 0 <= xx < w:
                                for ch in range(c):
                                    out[b, i, j, base + ch] = x[b, yy, xx, ch]
                            else:
                                for ch in range(c):
                                    out[b, i, j, base + ch] = 0.0
                            k += 1

    @njit(cache=True)
    def _col2im3x3_nb(cols, out):
        n, h, w, c = out.shape
        for b in range(n):
            for i in range(h):
                for j in range(w):
                    k = 0
                    for dy in range(-1, 2):
                        yy = i + dy
                        for dx in range(-1, 2):
                            xx = j + dx
                            if 0 <= yy < h and 0 <= xx < w:
                                base = k * c
                                for ch in range(c):
                                    out[b, yy, xx, ch] += cols[b, i, j, base + ch]
                            k += 1

    @njit(cache=True)
    def _box_mean_valid_nb(x, win, out):
        h, w = x.shape
        oh = h - win + 1
        ow = w - win + 1
        # row pass then column pass, both running sums in float64
        rows = np.empty((h, ow))
        for i in range(h):
            acc = 0.0
            for j in range(win):
                acc += x[i, j]
            rows[i, 0] = acc
            for j in range(1, ow):
                acc += x[i, j + win - 1] - x[i, j - 1]
                rows[i, j] = acc
        inv = 1.0 / (win * win)
        for j in range(ow):
            acc = 0.0
            for i in range(win):
                acc += rows[i, j]
            out[0, j] = acc * inv
            for i in range(1, oh):
                acc += rows[i + win - 1, j] - rows[i - 1, j]
                out[i, j] = acc * inv

    def im2col3x3_numba(x: np.ndarray) -> np.ndarray:
        x = np.ascontiguousarray(x)
        n, h, w, c = x.shape
        out = np.empty((n, h, w, 9 * c), dtype=x.dtype)
        _im2col3x3_nb(x, out)
        return out

    def col2im3x3_numba(cols: np.ndarray, c: int) -> np.ndarray:
        cols = np.ascontiguousarray(cols)
        n, h, w, _ = cols.shape
        out = np.zeros((n, h, w, c), dtype=cols.dtype)
        _col2im3x3_nb(cols, out)
        return out

    def box_mean_valid_numba(x: np.ndarray, win: int) -> np.ndarray:
        x = np.ascontiguousarray(x, dtype=np.float64)
        h, w = x.shape
        out = np.empty((h - win + 1, w - win + 1))
        _box_mean_valid_nb(x, win, out)
        return out

    im2col3x3 = im2col3x3_numba
    col2im3x3 = col2im3x3_numba
    box_mean_valid = box_mean_valid_numba
else:
    im2col3x3 = im2col3x3_numpy
    col2im3x3 = col2im3x3_numpy
    box_mean_valid = box_mean_valid_numpy
