"""Patch sequences, fixed 2-D sinusoidal position embeddings and patch masks."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import Field, _rle, _unrle

MASK_FAMILIES = ("random", "stripes_v", "stripes_h", "missing", "sweep")
MISSING_PATCH_THRESHOLD = 0.5


@dataclass(frozen=True)
class PatchGrid:
    """``data`` holds one row per patch, row-major over the patch grid."""

    data: np.ndarray
    grid_h: int
    grid_w: int
    patch_h: int
    patch_w: int

    def __post_init__(self):
        if self.data.ndim != 2 or self.data.shape[0] != self.grid_h * self.grid_w:
            raise ValueError(f"data shape {self.data.shape} does not match a {self.grid_h}x{self.grid_w} grid")

    @property
    def n_patches(self) -> int:
        return self.grid_h * self.grid_w


@dataclass(frozen=True)
class MaskSpec:
    hidden: np.ndarray
    ratio: float
    family: str = "random"
    grid_h: int | None = None
    grid_w: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "hidden", np.asarray(self.hidden, dtype=bool).ravel())
        if self.family not in MASK_FAMILIES:
            raise ValueError(f"unknown mask family {self.family!r}")

    @property
    def n_hidden(self) -> int:
        return int(self.hidden.sum())

    @property
    def visible_index(self) -> np.ndarray:
        return np.flatnonzero(~self.hidden)

    @classmethod
    def empty(cls, n_patches: int) -> "MaskSpec":
        return cls(np.zeros(n_patches, dtype=bool), 0.0, "random")

    def to_json(self) -> dict:
        return {"family": self.family, "ratio": self.ratio, "grid_h": self.grid_h, "grid_w": self.grid_w,
                "hidden": _rle(self.hidden)}

    @classmethod
    def from_json(cls, d: dict) -> "MaskSpec":
        n = int(d["grid_h"]) * int(d["grid_w"])
        return cls(_unrle(d["hidden"], n), float(d["ratio"]), d["family"], int(d["grid_h"]), int(d["grid_w"]))


def save_mask(path: str | Path, mask: MaskSpec) -> Path:
    path = Path(path)
    path.write_text(json.dumps(mask.to_json()))
    return path


def load_mask(path: str | Path) -> MaskSpec:
    return MaskSpec.from_json(json.loads(Path(path).read_text()))


def patchify(field: Field, patch: int | tuple[int, int]) -> tuple[PatchGrid, np.ndarray]:
    """Split a field into patches; also returns per-patch missing-pixel masks."""
    ph, pw = (patch, patch) if isinstance(patch, int) else patch
    h, w = field.shape
    if h % ph or w % pw:
        raise ValueError(f"field {h}x{w} is not divisible into {ph}x{pw} patches")
    gh, gw = h // ph, w // pw
    data = _blocks(field.values, gh, ph, gw, pw)
    missing = _blocks(field.missing, gh, ph, gw, pw)
    return PatchGrid(data, gh, gw, ph, pw), missing


def _blocks(a, gh, ph, gw, pw):
    return a.reshape(gh, ph, gw, pw).transpose(0, 2, 1, 3).reshape(gh * gw, ph * pw)


def _unblocks(a, gh, ph, gw, pw):
    return a.reshape(gh, gw, ph, pw).transpose(0, 2, 1, 3).reshape(gh * ph, gw * pw)


def unpatchify(patches: PatchGrid, missing: np.ndarray | None = None, *, timestamp: int = 0,
               grid_id: str = "synthetic") -> Field:
    g = patches
    if g.data.shape[1] != g.patch_h * g.patch_w:
        raise ValueError(f"patch rows have width {g.data.shape[1]}, expected {g.patch_h * g.patch_w}")
    values = _unblocks(g.data, g.grid_h, g.patch_h, g.grid_w, g.patch_w)
    if missing is None:
        miss = np.zeros(values.shape, dtype=bool)
    else:
        miss = _unblocks(np.asarray(missing, dtype=bool), g.grid_h, g.patch_h, g.grid_w, g.patch_w)
    return Field(values, miss, timestamp, grid_id)


def sincos_1d(width: int, positions: np.ndarray) -> np.ndarray:
    """Interleaved sinusoidal code: column ``2i`` is ``sin(p * w_i)``, ``2i+1`` is ``cos(p * w_i)``,
    with ``w_i = 10000 ** (-2i / width)``."""
    if width % 2:
        raise ValueError("width must be even")
    omega = 1.0 / 10000.0 ** (np.arange(width // 2, dtype=np.float64) * 2.0 / width)
    ang = np.asarray(positions, dtype=np.float64).reshape(-1, 1) * omega[None, :]
    out = np.empty((ang.shape[0], width), dtype=np.float64)
    out[:, 0::2] = np.sin(ang)
    out[:, 1::2] = np.cos(ang)
    return out


def positional_embedding(grid_h: int, grid_w: int, width: int) -> np.ndarray:
    """Fixed 2-D embedding: first half encodes the patch row, second half the column."""
    if width % 4:
        raise ValueError(f"positional embedding width must be divisible by 4, got {width}")
    rows, cols = np.meshgrid(np.arange(grid_h), np.arange(grid_w), indexing="ij")
    return np.concatenate([sincos_1d(width // 2, rows.ravel()), sincos_1d(width // 2, cols.ravel())], axis=1)


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def sample_mask(n_patches: int, ratio: float, rng: np.random.Generator,
                forced_hidden: np.ndarray | None = None, *, grid: tuple[int, int] | None = None,
                family: str = "random") -> MaskSpec:
    """Uniform random mask hiding ``max(round(ratio*n), |forced|)`` patches, forced ones included."""
    if not 0.0 <= ratio < 1.0:
        raise ValueError(f"mask ratio must lie in [0, 1), got {ratio}")
    hidden = np.zeros(n_patches, dtype=bool)
    if forced_hidden is not None:
        forced_hidden = np.asarray(forced_hidden, dtype=bool).ravel()
        if forced_hidden.size != n_patches:
            raise ValueError("forced_hidden length does not match n_patches")
        hidden |= forced_hidden
    target = max(_round_half_up(ratio * n_patches), int(hidden.sum()))
    need = target - int(hidden.sum())
    if need > 0:
        pool = np.flatnonzero(~hidden)
        hidden[rng.choice(pool, size=need, replace=False)] = True
    gh, gw = grid if grid is not None else (None, None)
    return MaskSpec(hidden, ratio, family, gh, gw)


def structured_mask(grid_h: int, grid_w: int, family: str, period: int, phase: int = 0,
                    hidden_width: int = 1) -> MaskSpec:
    if period < 2:
        raise ValueError("stripe period must be >= 2")
    if not 1 <= hidden_width < period:
        raise ValueError("hidden_width must lie in [1, period)")
    rows, cols = np.meshgrid(np.arange(grid_h), np.arange(grid_w), indexing="ij")
    if family == "stripes_v":
        hidden = (cols - phase) % period < hidden_width
    elif family == "stripes_h":
        hidden = (rows - phase) % period < hidden_width
    else:
        raise ValueError(f"structured masks are stripes_v or stripes_h, got {family!r}")
    hidden = hidden.ravel()
    return MaskSpec(hidden, float(hidden.mean()), family, grid_h, grid_w)


def stripes_for_ratio(grid_h: int, grid_w: int, family: str, ratio: float) -> MaskSpec:
    """Stripe mask whose achieved hidden fraction is closest to ``ratio``."""
    n = grid_w if family == "stripes_v" else grid_h
    best = None
    for period in range(2, max(2, n) + 1):
        for width in range(1, period):
            m = structured_mask(grid_h, grid_w, family, period, 0, width)
            if m.hidden.all():
                continue
            err = abs(m.ratio - ratio)
            if best is None or err < best[0] - 1e-12:
                best = (err, m)
    if best is None:
        raise ValueError(f"no stripe mask fits a {grid_h}x{grid_w} grid")
    return best[1]


def missing_patches(missing_pixels: np.ndarray, threshold: float = MISSING_PATCH_THRESHOLD) -> np.ndarray:
    """Patches with more than ``threshold`` of their pixels missing."""
    return np.asarray(missing_pixels, dtype=bool).mean(axis=1) > threshold


def missing_mask(missing_pixels: np.ndarray, grid: tuple[int, int] | None = None) -> MaskSpec:
    hidden = missing_patches(missing_pixels)
    gh, gw = grid if grid is not None else (None, None)
    return MaskSpec(hidden, float(hidden.mean()), "missing", gh, gw)


def missing_style_mask(grid_h: int, grid_w: int, ratio: float, rng: np.random.Generator) -> MaskSpec:
    """Contiguous blob-and-band patch mask with about ``ratio`` of patches hidden.

    Stand-in for masks cut from real missing-data patterns: grows rectangular
    swaths and elliptical blobs over the patch grid until the hidden fraction
    reaches ``ratio``, then trims random boundary patches to hit it exactly.
    """
    n = grid_h * grid_w
    target = _round_half_up(ratio * n)
    target = min(target, n - 1)
    hidden = np.zeros((grid_h, grid_w), dtype=bool)
    yy, xx = np.mgrid[0:grid_h, 0:grid_w]
    while hidden.sum() < target:
        if rng.random() < 0.3:
            c = rng.integers(grid_w)
            wdt = int(rng.integers(1, max(2, grid_w // 6)))
            hidden[:, (c + np.arange(wdt)) % grid_w] = True
        else:
            cy, cx = rng.uniform(0, grid_h), rng.uniform(0, grid_w)
            ry = rng.uniform(0.5, max(1.0, grid_h / 3))
            rx = rng.uniform(0.5, max(1.0, grid_w / 4))
            hidden |= ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
    flat = hidden.ravel()
    excess = int(flat.sum()) - target
    if excess > 0:
        drop = rng.choice(np.flatnonzero(flat), size=excess, replace=False)
        flat[drop] = False
    return MaskSpec(flat, float(flat.mean()), "missing", grid_h, grid_w)


def mask_pixels(mask: MaskSpec, grid_h: int, grid_w: int, patch_h: int, patch_w: int) -> np.ndarray:
    """Expand a patch mask to an ``(H, W)`` pixel mask."""
    return np.kron(mask.hidden.reshape(grid_h, grid_w), np.ones((patch_h, patch_w), dtype=bool)).astype(bool)
