"""Gridded infrared fields: normalization, local gap filling, downscaling,
synthetic sequences and labels, and the ``.fld`` container."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field as dc_field, replace
from pathlib import Path

import numpy as np

from . import _accel
from .rng import make_rng

MISSING_SENTINEL = 0.0


@dataclass(frozen=True)
class Field:
    """A 2-D scalar grid with an aligned missing mask.

    ``values`` under ``missing`` hold :data:`MISSING_SENTINEL` and are never read
    by a loss or metric. ``filled`` marks pixels produced by
    :func:`local_gap_fill` (observed, but not original measurements); it is
    provenance only and lets a repeated fill use the same anchors.
    """

    values: np.ndarray
    missing: np.ndarray
    timestamp: int = 0
    grid_id: str = "synthetic"
    filled: np.ndarray | None = None
    normalization: "NormalizationSpec | None" = None

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        missing = np.asarray(self.missing, dtype=bool)
        if values.ndim != 2:
            raise ValueError(f"Field values must be 2-D, got shape {values.shape}")
        if values.shape != missing.shape:
            raise ValueError(f"values {values.shape} and missing {missing.shape} differ in shape")
        values = np.where(missing, MISSING_SENTINEL, values)
        filled = self.filled
        if filled is None:
            filled = np.zeros_like(missing)
        else:
            filled = np.asarray(filled, dtype=bool)
            if filled.shape != missing.shape:
                raise ValueError("filled mask shape mismatch")
            filled = filled & ~missing
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "missing", missing)
        object.__setattr__(self, "filled", filled)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    @property
    def observed(self) -> np.ndarray:
        return ~self.missing

    @property
    def missing_fraction(self) -> float:
        return float(self.missing.mean())

    def with_values(self, values, missing=None, **kw) -> "Field":
        return replace(self, values=values, missing=self.missing if missing is None else missing, **kw)


@dataclass(frozen=True)
class NormalizationSpec:
    t_min: float = 180.0
    t_max: float = 330.0

    def __post_init__(self):
        if not self.t_min < self.t_max:
            raise ValueError(f"t_min ({self.t_min}) must be below t_max ({self.t_max})")


DEFAULT_NORMALIZATION = NormalizationSpec()


@dataclass(frozen=True)
class SyntheticConfig:
    height: int = 64
    width: int = 192
    n_timesteps: int = 8
    correlation_length: float = 8.0
    advection: tuple[float, float] = (0.0, 2.0)
    missing_fraction: float = 0.075
    innovation: float = 0.1
    seed: int = 0
    start_timestamp: int = 0
    minutes_per_step: int = 30

    def __post_init__(self):
        if not 0.0 <= self.missing_fraction < 1.0:
            raise ValueError("missing_fraction must lie in [0, 1)")
        if self.correlation_length < 1:
            raise ValueError("correlation_length must be >= 1 pixel")
        if not 0.0 <= self.innovation <= 1.0:
            raise ValueError("innovation must lie in [0, 1]")
        if self.height < 1 or self.width < 1 or self.n_timesteps < 1:
            raise ValueError("height, width and n_timesteps must be positive")


# ---------------------------------------------------------------------------
# normalization


def normalize(field: Field, spec: NormalizationSpec = DEFAULT_NORMALIZATION) -> Field:
    """Affine kelvin -> [0, 1] map with clamping."""
    obs = field.values[field.observed]
    if not np.all(np.isfinite(obs)):
        raise ValueError("non-finite observed values cannot be normalized")
    scaled = (field.values - spec.t_min) / (spec.t_max - spec.t_min)
    return field.with_values(np.clip(scaled, 0.0, 1.0), normalization=spec)


def denormalize(field: Field, spec: NormalizationSpec | None = None) -> Field:
    spec = spec or field.normalization or DEFAULT_NORMALIZATION
    return field.with_values(spec.t_min + field.values * (spec.t_max - spec.t_min), normalization=None)


# ---------------------------------------------------------------------------
# preprocessing


def local_gap_fill(field: Field, radius: int = 5, *, use_numba: bool | None = None) -> Field:
    """Fill small voids by 1-D linear interpolation along rows and columns.

    Only original measurements (observed and not previously filled) serve as
    interpolation anchors, which makes the operation idempotent. Where both
    axes give a value the two are averaged; pixels with no anchor within
    ``radius`` stay missing.
    """
    if radius < 1:
        raise ValueError("radius must be >= 1")
    anchor = field.observed & ~field.filled
    v = np.where(anchor, field.values, 0.0)
    row_val, row_ok = _accel.line_fill(v, anchor, radius, use_numba=use_numba)
    col_val, col_ok = _accel.line_fill(v.T, anchor.T, radius, use_numba=use_numba)
    col_val, col_ok = col_val.T, col_ok.T

    target = field.missing
    both = row_ok & col_ok
    fill = np.where(both, 0.5 * (row_val + col_val), np.where(row_ok, row_val, col_val))
    newly = target & (row_ok | col_ok)
    values = np.where(newly, fill, field.values)
    return field.with_values(values, missing=target & ~newly, filled=field.filled | newly)


def downscale(field: Field, out_h: int, out_w: int, *, use_numba: bool | None = None) -> Field:
    """Block-mean downscaling over observed pixels."""
    h, w = field.shape
    if out_h < 1 or out_w < 1 or out_h > h or out_w > w or h % out_h or w % out_w:
        raise ValueError(f"cannot downscale {h}x{w} to {out_h}x{out_w}: block ratios must be integers")
    bh, bw = h // out_h, w // out_w
    sums, counts = _accel.block_sums(field.values, field.observed, bh, bw, use_numba=use_numba)
    missing = counts == 0
    with np.errstate(invalid="ignore", divide="ignore"):
        means = np.where(missing, 0.0, sums / np.maximum(counts, 1))
    original = field.observed & ~field.filled
    _, n_orig = _accel.block_sums(np.zeros_like(field.values), original, bh, bw, use_numba=use_numba)
    filled = ~missing & (n_orig == 0)
    return Field(means, missing, field.timestamp, field.grid_id, filled, field.normalization)


def preprocess(field: Field, out_shape: tuple[int, int] | None = None, radius: int = 5,
               spec: NormalizationSpec | None = DEFAULT_NORMALIZATION) -> Field:
    """Gap fill at native resolution, then downscale and normalize."""
    out = local_gap_fill(field, radius)
    if out_shape is not None and tuple(out_shape) != out.shape:
        out = downscale(out, *out_shape)
    if spec is not None and field.normalization is None:
        out = normalize(out, spec)
    return out


# ---------------------------------------------------------------------------
# synthetic data


def _lowpass(noise: np.ndarray, corr: float) -> np.ndarray:
    h, w = noise.shape
    ky = np.fft.fftfreq(h)[:, None]
    kx = np.fft.rfftfreq(w)[None, :]
    k2 = ky ** 2 + kx ** 2
    # amplitude exp(-(pi*l*k)^2) gives covariance exp(-r^2 / (2 l^2))
    filt = np.exp(-2.0 * (math.pi * corr) ** 2 * k2 / 2.0)
    out = np.fft.irfft2(np.fft.rfft2(noise) * filt, s=(h, w))
    std = out.std()
    return out / std if std > 0 else out


def _shift(frame: np.ndarray, dy: float, dx: float) -> np.ndarray:
    if float(dy).is_integer() and float(dx).is_integer():
        return np.roll(frame, (int(dy), int(dx)), axis=(0, 1))
    h, w = frame.shape
    ky = np.fft.fftfreq(h)[:, None]
    kx = np.fft.fftfreq(w)[None, :]
    phase = np.exp(-2j * math.pi * (ky * dy + kx * dx))
    return np.real(np.fft.ifft2(np.fft.fft2(frame) * phase))


def _missing_mask(rng: np.random.Generator, h: int, w: int, fraction: float) -> np.ndarray:
    """Scanline dropouts plus elliptical blobs covering about ``fraction`` of pixels."""
    mask = np.zeros((h, w), dtype=bool)
    target = int(round(fraction * h * w))
    if target == 0:
        return mask
    yy, xx = np.mgrid[0:h, 0:w]
    # roughly a quarter of the budget as partial scanlines
    line_budget = target // 4
    while mask.sum() < line_budget:
        r = rng.integers(h)
        x0 = rng.integers(w)
        length = int(rng.integers(max(1, w // 8), max(2, w // 2)))
        cols = (x0 + np.arange(length)) % w
        mask[r, cols] = True
    r_max = max(1.5, 0.08 * min(h, w))
    while True:
        remaining = target - int(mask.sum())
        if remaining <= 0:
            break
        cap = max(1.0, math.sqrt(remaining / math.pi))
        ry = rng.uniform(1.0, min(r_max, cap) + 0.5)
        rx = ry * rng.uniform(1.0, 3.0)
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        dx = np.minimum(np.abs(xx - cx), w - np.abs(xx - cx))
        blob = ((yy - cy) / ry) ** 2 + (dx / rx) ** 2 <= 1.0
        if not blob.any():
            mask[int(cy) % h, int(cx) % w] = True
        mask |= blob
    return mask


def synth_sequence(cfg: SyntheticConfig) -> list[Field]:
    """Advected Gaussian random field sequence in normalized units.

    Each frame is ``sqrt(1 - a^2) * shift(previous) + a * fresh`` with
    ``a = cfg.innovation``, so the marginal statistics are stationary; with
    ``innovation == 0`` consecutive frames are exact periodic shifts.
    """
    rng = make_rng(cfg.seed, "synth", "field")
    z = _lowpass(rng.standard_normal((cfg.height, cfg.width)), cfg.correlation_length)
    a = cfg.innovation
    frames = []
    dy, dx = cfg.advection
    for t in range(cfg.n_timesteps):
        if t > 0:
            z = _shift(z, dy, dx)
            if a > 0:
                fresh = _lowpass(rng.standard_normal(z.shape), cfg.correlation_length)
                z = math.sqrt(1.0 - a * a) * z + a * fresh
        kelvin = 255.0 - 18.0 * z
        mrng = make_rng(cfg.seed, "synth", "missing", t)
        missing = _missing_mask(mrng, cfg.height, cfg.width, cfg.missing_fraction)
        f = Field(kelvin, missing, cfg.start_timestamp + t * cfg.minutes_per_step, "synthetic")
        frames.append(normalize(f, DEFAULT_NORMALIZATION))
    return frames


@dataclass
class TrackRecord:
    storm_id: int
    boxes: list[tuple[int, float, float, float, float]]  # (t, y0, x0, y1, x1)
    first_label_time: int
    centers: list[tuple[float, float]] = dc_field(default_factory=list)
    radius: float = 0.0

    def __post_init__(self):
        times = [b[0] for b in self.boxes]
        if times != sorted(times):
            raise ValueError("track boxes must be time ordered")
        for t, y0, x0, y1, x1 in self.boxes:
            if not (y0 < y1 and x0 < x1):
                raise ValueError(f"malformed box at t={t}: {(y0, x0, y1, x1)}")

    def to_json(self) -> dict:
        return {"storm_id": self.storm_id, "boxes": [list(b) for b in self.boxes],
                "first_label_time": self.first_label_time,
                "centers": [list(c) for c in self.centers], "radius": self.radius}

    @classmethod
    def from_json(cls, d: dict) -> "TrackRecord":
        return cls(int(d["storm_id"]), [tuple(b) for b in d["boxes"]], int(d["first_label_time"]),
                   [tuple(c) for c in d.get("centers", [])], float(d.get("radius", 0.0)))


def precip_from_field(values: np.ndarray, rng: np.random.Generator, max_rate: float = 20.0,
                      cold_quantile: float = 0.35, noise: float = 0.2) -> np.ndarray:
    thr = np.quantile(values, cold_quantile)
    depth = np.clip((thr - values) / max(thr, 1e-6), 0.0, None)
    rate = max_rate * depth ** 2
    return rate * np.exp(noise * rng.standard_normal(values.shape))


def ar_from_field(values: np.ndarray, rng: np.random.Generator, fraction: float = 0.08) -> np.ndarray:
    gy, gx = np.gradient(values)
    mag = np.hypot(gy, gx)
    mag = mag + 0.05 * mag.std() * rng.standard_normal(mag.shape)
    thr = np.quantile(mag, 1.0 - fraction)
    return mag > thr


def synth_labels(fields: list[Field], task: str, seed: int = 0, *, ar_fraction: float = 0.08,
                 n_tracks: int = 2, tc_radius: float | None = None):
    """Synthetic stand-ins for the downstream labels.

    ``precip`` and ``ar`` return one label Field per input frame. ``tc`` returns
    ``(tracks, masks)`` where ``masks[t]`` is a boolean disc mask for frame ``t``.
    """
    if task == "precip":
        out = []
        for i, f in enumerate(fields):
            rng = make_rng(seed, "labels", "precip", f.timestamp, i)
            vals = np.where(f.missing, np.median(f.values[f.observed]) if f.observed.any() else 0.0, f.values)
            out.append(Field(precip_from_field(vals, rng), np.zeros(f.shape, bool), f.timestamp, f.grid_id))
        return out
    if task == "ar":
        if not 0.0 < ar_fraction < 1.0:
            raise ValueError("ar_fraction must lie in (0, 1)")
        out = []
        for i, f in enumerate(fields):
            rng = make_rng(seed, "labels", "ar", f.timestamp, i)
            vals = np.where(f.missing, np.median(f.values[f.observed]) if f.observed.any() else 0.0, f.values)
            out.append(Field(ar_from_field(vals, rng, ar_fraction).astype(np.float64),
                             np.zeros(f.shape, bool), f.timestamp, f.grid_id))
        return out
    if task == "tc":
        return _synth_tracks(fields, seed, n_tracks, tc_radius)
    raise ValueError(f"unknown task {task!r}; expected precip, ar or tc")


def _synth_tracks(fields, seed, n_tracks, tc_radius):
    if not fields:
        return [], []
    h, w = fields[0].shape
    n = len(fields)
    rng = make_rng(seed, "labels", "tc")
    yy, xx = np.mgrid[0:h, 0:w]
    masks = [np.zeros((h, w), dtype=bool) for _ in range(n)]
    tracks = []
    for sid in range(n_tracks):
        radius = float(tc_radius) if tc_radius is not None else float(rng.uniform(0.04, 0.08) * min(h, w))
        start = int(rng.integers(0, max(1, n // 2)))
        length = int(rng.integers(max(1, n // 3), n - start + 1))
        cy, cx = rng.uniform(radius, h - radius), rng.uniform(radius, w - radius)
        vy, vx = rng.uniform(-0.5, 0.5), rng.uniform(-1.5, 1.5)
        label_delay = int(rng.integers(0, max(1, length // 3)))
        boxes, centers = [], []
        for k in range(length):
            t = start + k
            y, x = cy + vy * k, (cx + vx * k) % w
            centers.append((y, x))
            if radius > 0:
                masks[t] |= (yy - y) ** 2 + (xx - x) ** 2 <= radius ** 2
                if k >= label_delay:
                    boxes.append((t, max(0.0, y - radius), max(0.0, x - radius),
                                  min(float(h), y + radius), min(float(w), x + radius)))
        first = boxes[0][0] if boxes else start + label_delay
        tracks.append(TrackRecord(sid, boxes, first, centers, radius))
    return tracks, masks


# ---------------------------------------------------------------------------
# .fld container and manifests

_FLD_MAGIC = b"FLD1"


def _rle(mask: np.ndarray) -> list[int]:
    """Run lengths of a flat boolean array, starting with a run of False."""
    flat = np.asarray(mask, dtype=bool).ravel()
    if flat.size == 0:
        return []
    change = np.flatnonzero(np.diff(flat.astype(np.int8))) + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    runs = np.diff(bounds).tolist()
    if flat[0]:
        runs = [0] + runs
    return [int(r) for r in runs]


def _unrle(runs: list[int], size: int) -> np.ndarray:
    out = np.zeros(size, dtype=bool)
    pos, val = 0, False
    for r in runs:
        if val:
            out[pos:pos + r] = True
        pos += r
        val = not val
    if pos != size:
        raise ValueError(f"run lengths cover {pos} entries, expected {size}")
    return out


def write_field(path: str | Path, field: Field, channels: np.ndarray | None = None) -> Path:
    """Write a Field (or a stack of ``k`` channels sharing its mask) as ``.fld``.

    Layout: 4-byte magic, little-endian uint32 header length, JSON header,
    ``k*H*W`` little-endian float32 values (row-major, channel-major), ``H*W``
    mask bytes (0 observed / 1 missing).
    """
    path = Path(path)
    h, w = field.shape
    data = field.values[None] if channels is None else np.asarray(channels)
    if data.shape[1:] != (h, w):
        raise ValueError("channel stack does not match field shape")
    norm = field.normalization
    header = {
        "height": h, "width": w, "timestamp": int(field.timestamp), "grid_id": field.grid_id,
        "normalization": None if norm is None else {"t_min": norm.t_min, "t_max": norm.t_max},
        "byte_order": "little", "channels": int(data.shape[0]),
    }
    if field.filled.any():
        header["filled_rle"] = _rle(field.filled)
    hb = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_FLD_MAGIC)
        fh.write(np.uint32(len(hb)).astype("<u4").tobytes())
        fh.write(hb)
        fh.write(np.ascontiguousarray(data, dtype="<f4").tobytes())
        fh.write(field.missing.astype(np.uint8).tobytes())
    return path


def read_field(path: str | Path, *, with_channels: bool = False):
    raw = Path(path).read_bytes()
    if raw[:4] != _FLD_MAGIC:
        raise ValueError(f"{path}: not a .fld file")
    n = int(np.frombuffer(raw[4:8], dtype="<u4")[0])
    header = json.loads(raw[8:8 + n].decode("utf-8"))
    h, w, k = header["height"], header["width"], header.get("channels", 1)
    off = 8 + n
    data = np.frombuffer(raw, dtype="<f4", count=k * h * w, offset=off).reshape(k, h, w).astype(np.float64)
    off += 4 * k * h * w
    mask = np.frombuffer(raw, dtype=np.uint8, count=h * w, offset=off).reshape(h, w)
    if off + h * w != len(raw):
        raise ValueError(f"{path}: trailing or truncated payload")
    if not np.isin(mask, (0, 1)).all():
        raise ValueError(f"{path}: mask bytes must be 0 or 1")
    filled = None
    if "filled_rle" in header:
        filled = _unrle(header["filled_rle"], h * w).reshape(h, w)
    norm = header.get("normalization")
    f = Field(data[0], mask.astype(bool), int(header["timestamp"]), header["grid_id"], filled,
              None if norm is None else NormalizationSpec(norm["t_min"], norm["t_max"]))
    return (f, data) if with_channels else f


def write_manifest(path: str | Path, records: list[dict]) -> Path:
    path = Path(path)
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")
    return path


def read_manifest(path: str | Path) -> list[dict]:
    """Read a JSON-lines manifest; relative paths resolve against its directory."""
    path = Path(path)
    out = []
    for line in path.read_text().splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        for key in ("path", "label"):
            if key in rec and not Path(rec[key]).is_absolute():
                rec[key] = str(path.parent / rec[key])
        out.append(rec)
    if not out:
        raise ValueError(f"{path}: empty manifest")
    return out


def load_frames(manifest: str | Path | list[dict]) -> list[Field]:
    recs = read_manifest(manifest) if not isinstance(manifest, list) else manifest
    return [read_field(r["path"]) for r in recs]


def save_sequence(frames: list[Field], out_dir: str | Path, prefix: str = "frame") -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = []
    for i, f in enumerate(frames):
        name = f"{prefix}_{i:05d}.fld"
        write_field(out_dir / name, f)
        records.append({"path": name, "timestamp": int(f.timestamp)})
    return write_manifest(out_dir / "manifest.jsonl", records)
