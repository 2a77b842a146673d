"""Per-pixel kernels with a numba path and a pure-numpy fallback.

The numba path is used when numba imports cleanly and the environment variable
``GEOSSL_NO_NUMBA`` is unset or ``0``. Both paths produce bit-identical results;
``tests/test_accel.py`` checks this and ``benchmarks/bench_kernels.py`` times
them against each other.
"""

from __future__ import annotations

import os

import numpy as np

_DISABLED = os.environ.get("GEOSSL_NO_NUMBA", "0") not in ("", "0", "false", "False")

try:
    if _DISABLED:
        raise ImportError
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised via the env flag in CI
    HAVE_NUMBA = False


def backend() -> str:
    return "numba" if HAVE_NUMBA else "numpy"


# ---------------------------------------------------------------------------
# 1-D bidirectional interpolation along rows


def _line_fill_numpy(values, anchor, radius):
    h, w = values.shape
    cols = np.arange(w)
    left = np.maximum.accumulate(np.where(anchor, cols, -1), axis=1)
    right = np.minimum.accumulate(np.where(anchor, cols, w)[:, ::-1], axis=1)[:, ::-1]
    dl = cols - left
    dr = right - cols
    has_l = (left >= 0) & (dl <= radius)
    has_r = (right < w) & (dr <= radius)
    rows = np.arange(h)[:, None]
    vl = values[rows, np.clip(left, 0, w - 1)]
    vr = values[rows, np.clip(right, 0, w - 1)]
    both = has_l & has_r
    out = np.zeros_like(values)
    with np.errstate(invalid="ignore", divide="ignore"):
        interp = (vl * dr + vr * dl) / (dl + dr)
    out = np.where(both, interp, np.where(has_l, vl, np.where(has_r, vr, 0.0)))
    ok = (has_l | has_r) & ~anchor
    out = np.where(ok, out, 0.0)
    return out, ok


def _line_fill_py(values, anchor, radius):
    h, w = values.shape
    out = np.zeros((h, w), dtype=np.float64)
    ok = np.zeros((h, w), dtype=np.bool_)
    for i in range(h):
        last = -1
        left = np.empty(w, dtype=np.int64)
        for j in range(w):
            if anchor[i, j]:
                last = j
            left[j] = last
        nxt = w
        right = np.empty(w, dtype=np.int64)
        for j in range(w - 1, -1, -1):
            if anchor[i, j]:
                nxt = j
            right[j] = nxt
        for j in range(w):
            if anchor[i, j]:
                continue
            lj = left[j]
            rj = right[j]
            dl = j - lj
            dr = rj - j
            has_l = lj >= 0 and dl <= radius
            has_r = rj < w and dr <= radius
            if has_l and has_r:
                out[i, j] = (values[i, lj] * dr + values[i, rj] * dl) / (dl + dr)
                ok[i, j] = True
            elif has_l:
                out[i, j] = values[i, lj]
                ok[i, j] = True
            elif has_r:
                out[i, j] = values[i, rj]
                ok[i, j] = True
    return out, ok


# ---------------------------------------------------------------------------
# Block sums of observed pixels


def _block_sums_numpy(values, observed, bh, bw):
    h, w = values.shape
    v = np.where(observed, values, 0.0).reshape(h // bh, bh, w // bw, bw)
    c = observed.reshape(h // bh, bh, w // bw, bw)
    return v.sum(axis=(1, 3)), c.sum(axis=(1, 3)).astype(np.int64)


def _block_sums_py(values, observed, bh, bw):
    h, w = values.shape
    gh, gw = h // bh, w // bw
    sums = np.zeros((gh, gw), dtype=np.float64)
    counts = np.zeros((gh, gw), dtype=np.int64)
    for i in range(h):
        bi = i // bh
        for j in range(w):
            if observed[i, j]:
                sums[bi, j // bw] += values[i, j]
                counts[bi, j // bw] += 1
    return sums, counts


# ---------------------------------------------------------------------------
# Confusion-matrix counts


def _confusion_numpy(pred_pos, true_pos, valid):
    tp = int(np.count_nonzero(pred_pos & true_pos & valid))
    fp = int(np.count_nonzero(pred_pos & ~true_pos & valid))
    fn = int(np.count_nonzero(~pred_pos & true_pos & valid))
    tn = int(np.count_nonzero(~pred_pos & ~true_pos & valid))
    return tp, fp, tn, fn


def _confusion_py(pred_pos, true_pos, valid):
    tp = fp = tn = fn = 0
    for k in range(pred_pos.size):
        if not valid[k]:
            continue
        p = pred_pos[k]
        t = true_pos[k]
        if p and t:
            tp += 1
        elif p:
            fp += 1
        elif t:
            fn += 1
        else:
            tn += 1
    return tp, fp, tn, fn


if HAVE_NUMBA:
    _line_fill_jit = njit(cache=True)(_line_fill_py)
    _block_sums_jit = njit(cache=True)(_block_sums_py)
    _confusion_jit = njit(cache=True)(_confusion_py)


def line_fill(values: np.ndarray, anchor: np.ndarray, radius: int, *, use_numba: bool | None = None):
    """Interpolate non-anchor pixels of each row from anchors within ``radius``.

    Returns ``(filled_values, has_candidate)``; entries where ``has_candidate``
    is False are zero.
    """
    values = np.ascontiguousarray(values, dtype=np.float64)
    anchor = np.ascontiguousarray(anchor, dtype=np.bool_)
    if _pick(use_numba):
        return _line_fill_jit(values, anchor, int(radius))
    return _line_fill_numpy(values, anchor, int(radius))


def block_sums(values: np.ndarray, observed: np.ndarray, bh: int, bw: int, *, use_numba: bool | None = None):
    values = np.ascontiguousarray(values, dtype=np.float64)
    observed = np.ascontiguousarray(observed, dtype=np.bool_)
    if _pick(use_numba):
        return _block_sums_jit(values, observed, int(bh), int(bw))
    return _block_sums_numpy(values, observed, int(bh), int(bw))


def confusion_counts(pred_pos: np.ndarray, true_pos: np.ndarray, valid: np.ndarray, *, use_numba: bool | None = None):
    pred_pos = np.ascontiguousarray(pred_pos, dtype=np.bool_).ravel()
    true_pos = np.ascontiguousarray(true_pos, dtype=np.bool_).ravel()
    valid = np.ascontiguousarray(valid, dtype=np.bool_).ravel()
    if _pick(use_numba):
        return tuple(int(x) for x in _confusion_jit(pred_pos, true_pos, valid))
    return _confusion_numpy(pred_pos, true_pos, valid)


def _pick(use_numba):
    if use_numba is None:
        return HAVE_NUMBA
    if use_numba and not HAVE_NUMBA:
        raise RuntimeError("numba path requested but numba is disabled or unavailable")
    return bool(use_numba)
