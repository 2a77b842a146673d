"""Binary classification metrics, patch aggregation, box IoU and track-level
detection scores."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import _accel
from .data import Field, TrackRecord
from .patches import PatchGrid, patchify


def _ratio(num, den):
    return None if den == 0 else num / den


@dataclass
class BinaryReport:
    tp: int
    fp: int
    tn: int
    fn: int
    accuracy: float | None
    far: float | None
    precision: float | None
    recall: float | None
    f1: float | None

    @classmethod
    def from_counts(cls, tp, fp, tn, fn) -> "BinaryReport":
        precision = _ratio(tp, tp + fp)
        recall = _ratio(tp, tp + fn)
        far = None if precision is None else fp / (tp + fp)
        if precision is None or recall is None or precision + recall == 0:
            f1 = None
        else:
            f1 = 2 * precision * recall / (precision + recall)
        return cls(tp, fp, tn, fn, _ratio(tp + tn, tp + fp + tn + fn), far, precision, recall, f1)

    def to_json(self) -> dict:
        return asdict(self)


def _arr(x):
    return np.asarray(getattr(x, "values", x), dtype=np.float64)


def binary_metrics(pred, truth, threshold: float = 0.5, *, truth_threshold: float = 0.5,
                   valid: np.ndarray | None = None, use_numba: bool | None = None) -> BinaryReport:
    """Threshold ``pred`` (and ``truth``) at ``>=`` and count the confusion matrix.

    Pixels missing in either Field, NaN entries, and entries outside ``valid``
    are excluded. FAR is ``1 - TP / predicted positives`` and is None when
    nothing is predicted positive.
    """
    p, t = _arr(pred), _arr(truth)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {t.shape}")
    ok = np.isfinite(p) & np.isfinite(t)
    for f in (pred, truth):
        if isinstance(f, Field):
            ok &= f.observed
    if valid is not None:
        ok &= np.asarray(valid, bool)
    with np.errstate(invalid="ignore"):
        counts = _accel.confusion_counts(p >= threshold, t >= truth_threshold, ok, use_numba=use_numba)
    return BinaryReport.from_counts(*counts)


def patch_aggregate(field: Field, patch: int | tuple[int, int]) -> PatchGrid:
    """Per-patch mean of observed pixels as an ``(n_patches, 1)`` grid; NaN marks a fully missing patch."""
    grid, miss = patchify(field, patch)
    obs = ~miss
    counts = obs.sum(axis=1)
    sums = np.where(obs, grid.data, 0.0).sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        means = np.where(counts > 0, sums / np.maximum(counts, 1), np.nan)
    return PatchGrid(means[:, None], grid.grid_h, grid.grid_w, grid.patch_h, grid.patch_w)


def threshold_sweep(pred, truth, thresholds, *, truth_threshold: float = 0.5) -> tuple[list[dict], float]:
    """Metrics at each threshold; also returns the F1-maximizing threshold (lowest on ties)."""
    rows, best, best_f1 = [], None, -1.0
    for thr in sorted(thresholds):
        r = binary_metrics(pred, truth, thr, truth_threshold=truth_threshold)
        rows.append({"threshold": thr, **r.to_json()})
        if r.f1 is not None and r.f1 > best_f1:
            best, best_f1 = thr, r.f1
    return rows, best


def write_rows(rows: list[dict], out_dir: str | Path, stem: str) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    jp = out_dir / f"{stem}.json"
    jp.write_text(json.dumps(rows, indent=2))
    cp = out_dir / f"{stem}.csv"
    if rows:
        with open(cp, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(rows)
    return [cp, jp]


# ---------------------------------------------------------------------------
# boxes and tracks


def _check_box(b):
    y0, x0, y1, x1 = b
    if not (y0 < y1 and x0 < x1):
        raise ValueError(f"malformed box {b}")


def iou(box_a, box_b) -> float:
    """Boxes are ``(y0, x0, y1, x1)`` with ``y0 < y1`` and ``x0 < x1``."""
    _check_box(box_a)
    _check_box(box_b)
    ih = min(box_a[2], box_b[2]) - max(box_a[0], box_b[0])
    iw = min(box_a[3], box_b[3]) - max(box_a[1], box_b[1])
    if ih <= 0 or iw <= 0:
        return 0.0
    inter = ih * iw
    area_a = (box_a[2] - box_a[0]) * (box_a[3] - box_a[1])
    area_b = (box_b[2] - box_b[0]) * (box_b[3] - box_b[1])
    return inter / (area_a + area_b - inter)


@dataclass(frozen=True)
class Detection:
    t: int
    score: float
    box: tuple[float, float, float, float]


def _as_detections(detections) -> list[Detection]:
    out = []
    for d in detections:
        if isinstance(d, Detection):
            out.append(d)
        elif isinstance(d, dict):
            out.append(Detection(int(d["t"]), float(d["score"]), tuple(d["box"])))
        else:
            t, score, *box = d
            out.append(Detection(int(t), float(score), tuple(box[0] if len(box) == 1 else box)))
    return out


def _sorted_dets(dets: list[Detection]) -> list[Detection]:
    # score descending; ties broken by lower frame index, then lexicographic box order
    return sorted(dets, key=lambda d: (-d.score, d.t, tuple(d.box)))


def track_metrics(detections, tracks: list[TrackRecord], iou_thr: float = 0.30, score_thr: float = 0.0) -> dict:
    """Frame-level P/R/F1 by greedy one-to-one matching, storm-level recall and early-detection frequency.

    Detections in frames before a track's first label have nothing to match and
    count as frame-level false positives; they still count toward early
    detection when they overlap the track's earliest labeled box.
    """
    dets = [d for d in _as_detections(detections) if d.score >= score_thr]
    for d in dets:
        _check_box(d.box)
    gt: dict[int, list[tuple[int, tuple]]] = {}
    for tr in tracks:
        for t, *box in tr.boxes:
            gt.setdefault(int(t), []).append((tr.storm_id, tuple(box)))
    by_frame: dict[int, list[Detection]] = {}
    for d in dets:
        by_frame.setdefault(d.t, []).append(d)

    tp = fp = 0
    matched_storms: set[int] = set()
    for t in sorted(set(by_frame) | set(gt)):
        truths = gt.get(t, [])
        used = [False] * len(truths)
        for d in _sorted_dets(by_frame.get(t, [])):
            best, best_iou = -1, iou_thr
            for j, (_, box) in enumerate(truths):
                if used[j]:
                    continue
                v = iou(d.box, box)
                if v >= best_iou and (best < 0 or v > best_iou):
                    best, best_iou = j, v
            if best >= 0:
                used[best] = True
                tp += 1
                matched_storms.add(truths[best][0])
            else:
                fp += 1
    n_gt = sum(len(v) for v in gt.values())
    fn = n_gt - tp
    precision = _ratio(tp, tp + fp)
    recall = _ratio(tp, tp + fn)
    f1 = None if not precision or not recall else 2 * precision * recall / (precision + recall)

    labeled = [tr for tr in tracks if tr.boxes]
    early = 0
    for tr in labeled:
        first_box = tuple(tr.boxes[0][1:])
        if any(d.t <= tr.first_label_time and iou(d.box, first_box) >= iou_thr for d in dets):
            early += 1
    n_tr = len(labeled)
    storm_recall = sum(1 for tr in labeled if tr.storm_id in matched_storms)
    return {
        "tp": tp, "fp": fp, "fn": fn, "precision": precision, "recall": recall, "f1": f1,
        "storm_recall": _ratio(storm_recall, n_tr) if n_tr else None,
        "early_detection": _ratio(early, n_tr) if n_tr else None,
        "n_tracks": n_tr, "iou_thr": iou_thr, "score_thr": score_thr,
    }
