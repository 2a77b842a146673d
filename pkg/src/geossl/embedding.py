"""Embedding diagnostics: de-meaned PCA variance profiles and temporal coherence."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .data import Field, load_frames, read_manifest
from .patches import patchify
from .vit import MaskedViT, load_model


@dataclass
class VarianceProfile:
    explained: list[float]

    @property
    def cumulative_top3(self) -> float:
        return float(sum(self.explained[:3]))

    def to_json(self) -> dict:
        return {"explained": self.explained, "cumulative_top3": self.cumulative_top3}


@dataclass
class CoherenceCurve:
    lags: list[int]
    mean_cosine: list[float]

    def to_json(self) -> dict:
        return {"lags": self.lags, "mean_cosine": self.mean_cosine}


def embed_dataset(model, manifest=None, mask_ratio: float = 0.0, *, frames: list[Field] | None = None,
                  batch_size: int = 8) -> list[np.ndarray]:
    """Full-visibility encoder pass per frame; returns ``(n_patches, enc_width)`` arrays.

    The global token is dropped. ``mask_ratio`` other than 0 is not supported:
    hidden patches would have no embedding row.
    """
    if mask_ratio != 0:
        raise ValueError("embeddings are computed with every patch visible")
    if not isinstance(model, MaskedViT):
        model, _ = load_model(model)
    cfg = model.cfg
    if frames is None:
        frames = load_frames(read_manifest(manifest))
    dtype = next(model.parameters()).dtype
    out = []
    model.eval()
    with torch.no_grad():
        for i in range(0, len(frames), batch_size):
            chunk = frames[i:i + batch_size]
            grids = []
            for f in chunk:
                if f.shape != (cfg.image_h, cfg.image_w):
                    raise ValueError(f"frame shape {f.shape} does not match checkpoint config")
                grids.append(patchify(f, (cfg.patch_h, cfg.patch_w))[0].data)
            x = torch.as_tensor(np.stack(grids), dtype=dtype)
            hidden = torch.zeros(x.shape[:2], dtype=torch.bool)
            ts = model.encoder(x, hidden)
            out.extend(t.double().numpy() for t in ts.tokens)
    return out


def pca_profile(embeddings: list[np.ndarray], k: int = 3, *, pooled: bool = True):
    """PCA of per-frame de-meaned embeddings.

    Each frame's mean embedding is removed from its own rows; with
    ``pooled=True`` one decomposition is fit on the stacked rows of all frames
    and every frame is projected onto its top ``k`` components. With
    ``pooled=False`` each frame gets its own decomposition and the reported
    ratios are averaged over frames.

    Returns ``(VarianceProfile, projections)`` with one ``(n_rows, k)`` array per frame.
    """
    centered = [np.asarray(e, np.float64) - np.asarray(e, np.float64).mean(axis=0, keepdims=True)
                for e in embeddings]
    if sum(c.shape[0] for c in centered) < 2:
        raise ValueError("need at least two embedding vectors")
    if pooled:
        ratios, comps = _pca(np.concatenate(centered, axis=0))
        proj = [c @ comps[:k].T for c in centered]
        return VarianceProfile(ratios.tolist()), proj
    per, proj = [], []
    for c in centered:
        r, comps = _pca(c)
        per.append(r)
        proj.append(c @ comps[:k].T)
    width = max(len(r) for r in per)
    mean = np.mean([np.pad(r, (0, width - len(r))) for r in per], axis=0)
    return VarianceProfile(mean.tolist()), proj


def principal_components(embeddings: list[np.ndarray], k: int = 3) -> np.ndarray:
    centered = np.concatenate([e - e.mean(axis=0, keepdims=True) for e in embeddings])
    return _pca(centered)[1][:k]


def _pca(x: np.ndarray):
    _, s, vt = np.linalg.svd(x, full_matrices=False)
    var = s ** 2
    total = var.sum()
    if total <= 0 or not np.isfinite(total):
        raise ValueError("rank-0 input: all rows identical after de-meaning")
    return var / total, vt


def temporal_coherence(embeddings: list[np.ndarray], max_lag: int, *, centered: bool = False) -> CoherenceCurve:
    """Mean cosine similarity between patch-mean embeddings ``l`` frames apart, for ``l = 0..max_lag``.

    Pooled vectors of a layer-normed encoder share a large common component,
    so raw cosines sit close to 1. ``centered=True`` removes the sequence mean
    of the pooled vectors first, which spreads the curve out.
    """
    if len(embeddings) <= max_lag:
        raise ValueError("sequence must be longer than max_lag")
    pooled = np.stack([np.asarray(e, np.float64).mean(axis=0) for e in embeddings])
    if centered:
        pooled = pooled - pooled.mean(axis=0, keepdims=True)
    norms = np.linalg.norm(pooled, axis=1)
    if np.any(norms == 0):
        raise ValueError("zero-norm pooled embedding")
    unit = pooled / norms[:, None]
    lags, vals = [], []
    for lag in range(max_lag + 1):
        if lag == 0:
            c = 1.0
        else:
            c = float(np.clip(np.mean(np.sum(unit[:-lag] * unit[lag:], axis=1)), -1.0, 1.0))
        lags.append(lag)
        vals.append(c)
    return CoherenceCurve(lags, vals)
