"""Gap-fill inference with observed-pixel compositing, image metrics and
mask-family / mask-ratio evaluation sweeps."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from scipy.ndimage import correlate1d

from .data import Field, load_frames, read_manifest
from .patches import (MaskSpec, mask_pixels, missing_patches, missing_style_mask, patchify, sample_mask,
                      stripes_for_ratio, unpatchify)
from .rng import make_rng
from .vit import MaskedViT, load_model

DEFAULT_RATIOS = (0.30, 0.50, 0.70, 0.90, 0.95)
DEFAULT_FAMILIES = ("random", "stripes_v", "stripes_h", "missing")


@dataclass
class GapfillResult:
    composite: Field
    predicted_full: Field
    mask: MaskSpec
    region: np.ndarray  # pixels that were hidden or missing


def _as_model(model_or_path) -> MaskedViT:
    if isinstance(model_or_path, MaskedViT):
        return model_or_path
    model, _ = load_model(model_or_path)
    return model


def gapfill(field: Field, mask: MaskSpec, model) -> GapfillResult:
    """Reconstruct hidden patches and missing pixels; keep every other pixel as observed."""
    model = _as_model(model)
    cfg = model.cfg
    grid, miss = patchify(field, (cfg.patch_h, cfg.patch_w))
    if mask.hidden.size != grid.n_patches:
        raise ValueError(f"mask has {mask.hidden.size} patches, field has {grid.n_patches}")
    if mask.hidden.all():
        raise ValueError("mask hides every patch; at least one must stay visible")
    dtype = next(model.parameters()).dtype
    with torch.no_grad():
        x = torch.as_tensor(grid.data, dtype=dtype)[None]
        h = torch.as_tensor(mask.hidden)[None]
        pred = model.decoder(model.encoder(x, h))[0].double().numpy()
    predicted = unpatchify(type(grid)(pred, grid.grid_h, grid.grid_w, grid.patch_h, grid.patch_w),
                           timestamp=field.timestamp, grid_id=field.grid_id)
    hidden_px = mask_pixels(mask, grid.grid_h, grid.grid_w, grid.patch_h, grid.patch_w)
    region = hidden_px | field.missing
    values = np.where(region, predicted.values, field.values)
    composite = Field(values, np.zeros(field.shape, bool), field.timestamp, field.grid_id,
                      normalization=field.normalization)
    return GapfillResult(composite, predicted, mask, region)


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def ssim_map(a: np.ndarray, b: np.ndarray, data_range: float = 1.0, size: int = 11, sigma: float = 1.5):
    """Local SSIM over every fully-inside window position (``(H-10) x (W-10)`` for 11x11)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if min(a.shape) < size:
        raise ValueError(f"images must be at least {size} pixels on each side")
    g = _gaussian_window(size, sigma)

    def blur(img):
        return correlate1d(correlate1d(img, g, axis=0, mode="reflect"), g, axis=1, mode="reflect")

    mu_a, mu_b = blur(a), blur(b)
    saa = blur(a * a) - mu_a ** 2
    sbb = blur(b * b) - mu_b ** 2
    sab = blur(a * b) - mu_a * mu_b
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    s = ((2 * mu_a * mu_b + c1) * (2 * sab + c2)) / ((mu_a ** 2 + mu_b ** 2 + c1) * (saa + sbb + c2))
    pad = (size - 1) // 2
    return s[pad:-pad, pad:-pad]


def ssim(a, b, valid: np.ndarray | None = None, data_range: float = 1.0) -> float:
    """Mean local SSIM (11x11 Gaussian window, sigma 1.5, K1=0.01, K2=0.03).

    ``a``/``b`` may be Fields or arrays. ``valid`` restricts the average to
    window centers where it is True; by default, centers missing in either
    Field are skipped.
    """
    av = getattr(a, "values", a)
    bv = getattr(b, "values", b)
    m = ssim_map(av, bv, data_range)
    if valid is None:
        miss = np.zeros(np.shape(av), bool)
        for f in (a, b):
            if isinstance(f, Field):
                miss |= f.missing
        valid = ~miss
    pad = (np.shape(av)[0] - m.shape[0]) // 2
    v = np.asarray(valid, bool)[pad:pad + m.shape[0], pad:pad + m.shape[1]]
    if not v.any():
        raise ValueError("no valid SSIM window centers")
    return float(m[v].mean())


def rmse_masked(truth: Field, pred, region: np.ndarray) -> float:
    """RMSE over ``region`` pixels that are observed in ``truth``."""
    pv = getattr(pred, "values", pred)
    region = np.asarray(region, bool)
    if region.shape != truth.shape or np.shape(pv) != truth.shape:
        raise ValueError("shape mismatch")
    scored = region & truth.observed
    if not scored.any():
        raise ValueError("empty scored region")
    d = np.asarray(pv, np.float64)[scored] - truth.values[scored]
    return float(np.sqrt(np.mean(d * d)))


def make_eval_mask(family: str, ratio: float, grid_h: int, grid_w: int, rng: np.random.Generator,
                   forced: np.ndarray | None = None) -> MaskSpec:
    n = grid_h * grid_w
    if family == "random":
        return sample_mask(n, ratio, rng, forced, grid=(grid_h, grid_w))
    if family in ("stripes_v", "stripes_h"):
        m = stripes_for_ratio(grid_h, grid_w, family, ratio)
    elif family == "missing":
        m = missing_style_mask(grid_h, grid_w, ratio, rng)
    else:
        raise ValueError(f"unknown mask family {family!r}")
    if forced is not None:
        hidden = m.hidden | forced
        if hidden.all():
            hidden = m.hidden
        m = MaskSpec(hidden, m.ratio, m.family, grid_h, grid_w)
    return m


@dataclass
class SweepReport:
    rows: list[dict]
    frames: list[dict]

    def write(self, out_dir: str | Path, stem: str = "gapfill_sweep") -> list[Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        csv_path = out_dir / f"{stem}.csv"
        cols = ["family", "ratio", "ssim_mean", "ssim_std", "rmse_mean", "rmse_std", "n"]
        with open(csv_path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=cols)
            w.writeheader()
            for r in self.rows:
                w.writerow({k: r[k] for k in cols})
        json_path = out_dir / f"{stem}.json"
        json_path.write_text(json.dumps({"rows": self.rows, "frames": self.frames}, indent=2))
        return [csv_path, json_path]


def mask_ratio_sweep(model, manifest=None, ratios=DEFAULT_RATIOS, families=DEFAULT_FAMILIES, *,
                     frames: list[Field] | None = None, seed: int = 0) -> SweepReport:
    """Evaluate SSIM (full image) and masked RMSE for every (family, ratio) cell.

    Masks are seeded from ``(seed, family, ratio, frame timestamp)`` so every
    frame's masks are reproducible regardless of iteration order.
    """
    model = _as_model(model)
    cfg = model.cfg
    if frames is None:
        frames = load_frames(read_manifest(manifest))
    if not frames:
        raise ValueError("no frames to evaluate")
    rows, per_frame = [], []
    for family in families:
        for ratio in sorted(ratios):
            s_vals, r_vals = [], []
            for f in frames:
                _, miss = patchify(f, (cfg.patch_h, cfg.patch_w))
                rng = make_rng(seed, "sweep", family, int(round(ratio * 1e6)), int(f.timestamp))
                mask = make_eval_mask(family, ratio, cfg.grid_h, cfg.grid_w, rng, missing_patches(miss))
                res = gapfill(f, mask, model)
                hidden_px = mask_pixels(mask, cfg.grid_h, cfg.grid_w, cfg.patch_h, cfg.patch_w)
                s = ssim(res.composite.values, f.values, valid=f.observed)
                r = rmse_masked(f, res.composite, hidden_px)
                s_vals.append(s)
                r_vals.append(r)
                per_frame.append({"family": family, "ratio": ratio, "timestamp": int(f.timestamp),
                                  "achieved_ratio": float(mask.hidden.mean()), "ssim": s, "rmse": r})
            rows.append({"family": family, "ratio": ratio, "ssim_mean": float(np.mean(s_vals)),
                         "ssim_std": float(np.std(s_vals)), "rmse_mean": float(np.mean(r_vals)),
                         "rmse_std": float(np.std(r_vals)), "n": len(frames)})
    return SweepReport(rows, per_frame)
