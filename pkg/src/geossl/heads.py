"""Downstream heads: precipitation regression, atmospheric-river segmentation,
the token-grid feature-pyramid adapter, and a shared fine-tuning routine."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import Field, read_field, read_manifest
from .patches import missing_patches, patchify, sample_mask, unpatchify
from .rng import make_rng, torch_seed
from .trainer import cosine_lr
from .vit import (Decoder, Encoder, MaskedViT, ModelConfig, TokenSet, init_weights, load_checkpoint,
                  load_model, prefixed, save_checkpoint, unprefixed)

log = logging.getLogger(__name__)

TASKS = ("precip", "ar")


class TaskModel(nn.Module):
    """Pretrained encoder plus a decoder-geometry head emitting one value per pixel.

    ``precip``: the output is a regression in ``log1p`` label space scaled by
    ``label_scale``; :meth:`predict` inverts it and applies ReLU.
    ``ar``: the output is a per-pixel logit; :meth:`predict` applies a sigmoid.
    """

    def __init__(self, cfg: ModelConfig, task: str, label_scale: float = 1.0):
        super().__init__()
        if task not in TASKS:
            raise ValueError(f"unknown task {task!r}")
        self.cfg = cfg
        self.task = task
        self.label_scale = float(label_scale)
        self.encoder = Encoder(cfg)
        self.decoder = Decoder(cfg)

    def forward(self, x, hidden):
        return self.decoder(self.encoder(x, hidden))

    def transform_labels(self, y: torch.Tensor) -> torch.Tensor:
        if self.task == "precip":
            return torch.log1p(y.clamp_min(0.0)) / self.label_scale
        return y

    def activate(self, raw: torch.Tensor) -> torch.Tensor:
        if self.task == "precip":
            return F.relu(torch.expm1(raw * self.label_scale))
        return torch.sigmoid(raw)


def task_model_from_pretrained(checkpoint, task: str, seed: int = 0, label_scale: float = 1.0) -> TaskModel:
    base, _ = load_model(checkpoint) if not isinstance(checkpoint, MaskedViT) else (checkpoint, None)
    tm = TaskModel(base.cfg, task, label_scale)
    tm.encoder.load_state_dict(base.encoder.state_dict())
    tm.decoder.load_state_dict(base.decoder.state_dict())
    init_weights(tm.decoder.head, torch_seed(seed, "head", task) % (2 ** 62))
    return tm.to(next(base.parameters()).dtype)


def _forward_field(field: Field, model: TaskModel, mask_ratio: float, rng) -> np.ndarray:
    cfg = model.cfg
    grid, miss = patchify(field, (cfg.patch_h, cfg.patch_w))
    # mostly-missing patches are hidden, as during pretraining and fine-tuning
    hidden = missing_patches(miss)
    if mask_ratio > 0:
        rng = rng if rng is not None else make_rng(0, "inference", int(field.timestamp))
        hidden = sample_mask(grid.n_patches, mask_ratio, rng, hidden).hidden
    dtype = next(model.parameters()).dtype
    model.eval()
    with torch.no_grad():
        raw = model(torch.as_tensor(grid.data, dtype=dtype)[None], torch.as_tensor(hidden)[None])
        out = model.activate(raw)[0].double().numpy()
    return unpatchify(type(grid)(out, grid.grid_h, grid.grid_w, grid.patch_h, grid.patch_w)).values


def precip_forward(field: Field, model, mask_ratio: float = 0.0, rng=None) -> Field:
    """Precipitation rate (mm/hr, non-negative) for every pixel."""
    model = _as_task_model(model, "precip")
    vals = _forward_field(field, model, mask_ratio, rng)
    return Field(vals, np.zeros(field.shape, bool), field.timestamp, field.grid_id)


def ar_forward(field: Field, model) -> Field:
    """Per-pixel atmospheric-river probability."""
    model = _as_task_model(model, "ar")
    vals = _forward_field(field, model, 0.0, None)
    return Field(vals, np.zeros(field.shape, bool), field.timestamp, field.grid_id)


def bce_with_logits(logits, target) -> torch.Tensor:
    return F.binary_cross_entropy_with_logits(logits, target)


# ---------------------------------------------------------------------------
# feature pyramid adapter


@dataclass
class PyramidFeatures:
    levels: list[torch.Tensor]  # each (B, C, h_i, w_i), finest last

    @property
    def shapes(self) -> list[tuple[int, int, int]]:
        return [tuple(p.shape[1:]) for p in self.levels]


class FpnAdapter(nn.Module):
    """Token grid -> 1x1 lateral -> 3x3 conv (P0) -> stride-2 transposed convs (P1..)."""

    def __init__(self, enc_width: int, channels: int = 256, n_levels: int = 4):
        super().__init__()
        if n_levels < 1:
            raise ValueError("need at least one pyramid level")
        self.lateral = nn.Conv2d(enc_width, channels, kernel_size=1)
        self.smooth = nn.Conv2d(channels, channels, kernel_size=3, padding=1)
        self.up = nn.ModuleList(
            nn.ConvTranspose2d(channels, channels, kernel_size=2, stride=2) for _ in range(n_levels - 1)
        )

    def forward(self, grid: torch.Tensor) -> PyramidFeatures:
        """``grid``: (B, enc_width, grid_h, grid_w)."""
        p = self.smooth(self.lateral(grid))
        levels = [p]
        for up in self.up:
            p = up(p)
            levels.append(p)
        return PyramidFeatures(levels)


def build_adapter(enc_width: int, seed: int = 0, channels: int = 256, n_levels: int = 4) -> FpnAdapter:
    return init_weights(FpnAdapter(enc_width, channels, n_levels), seed)


def tokens_to_grid(tokens: TokenSet, grid_h: int, grid_w: int) -> torch.Tensor:
    if not bool(tokens.valid.all()) or tokens.tokens.shape[1] != grid_h * grid_w:
        raise ValueError("the pyramid adapter needs a full-visibility TokenSet")
    order = torch.argsort(tokens.visible_index, dim=1)
    tok = torch.gather(tokens.tokens, 1, order[..., None].expand(-1, -1, tokens.tokens.shape[-1]))
    b, n, d = tok.shape
    return tok.transpose(1, 2).reshape(b, d, grid_h, grid_w)


def fpn_adapter(tokens: TokenSet, adapter: FpnAdapter, grid_h: int, grid_w: int) -> PyramidFeatures:
    return adapter(tokens_to_grid(tokens, grid_h, grid_w))


# ---------------------------------------------------------------------------
# fine-tuning


@dataclass(frozen=True)
class FinetuneConfig:
    task: str = "precip"
    epochs: int = 20
    base_lr: float = 1e-3
    lr_warmup_epochs: float = 0.0
    weight_decay: float = 0.05
    batch_size: int = 4
    seed: int = 0
    mask_ratio: float | None = None  # None -> 0.10 for precip, 0.0 for ar

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")

    @property
    def train_mask_ratio(self) -> float:
        if self.mask_ratio is not None:
            return self.mask_ratio
        return 0.10 if self.task == "precip" else 0.0

    @classmethod
    def from_dict(cls, d: dict) -> "FinetuneConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown finetune keys: {sorted(unknown)}")
        return cls(**d)


def read_labeled(manifest) -> list[tuple[Field, Field]]:
    pairs = []
    for rec in read_manifest(manifest):
        f, y = read_field(rec["path"]), read_field(rec["label"])
        if f.timestamp != y.timestamp or ("timestamp" in rec and int(rec["timestamp"]) != f.timestamp):
            raise ValueError(f"label misaligned with frame: {rec['path']} ({f.timestamp}) vs "
                             f"{rec['label']} ({y.timestamp})")
        pairs.append((f, y))
    return pairs


def save_task_model(path, model: TaskModel, cfg: FinetuneConfig, extra: dict | None = None) -> Path:
    header = {"task": model.task, "config": {"model": model.cfg.to_dict(), "finetune": asdict(cfg)},
              "meta": {"label_scale": model.label_scale, **(extra or {})}}
    tensors = {}
    tensors.update(prefixed(model.encoder.state_dict(), "task/encoder/"))
    tensors.update(prefixed(model.decoder.state_dict(), "task/decoder/"))
    return save_checkpoint(path, tensors, header)


def load_task_model(path) -> TaskModel:
    header, tensors = load_checkpoint(path)
    if header.get("task") not in TASKS:
        raise ValueError(f"{path}: not a task checkpoint (task={header.get('task')!r})")
    cfg = ModelConfig.from_dict(header["config"]["model"])
    tm = TaskModel(cfg, header["task"], header["meta"]["label_scale"])
    tm.encoder.load_state_dict(unprefixed(tensors, "task/encoder/"))
    tm.decoder.load_state_dict(unprefixed(tensors, "task/decoder/"))
    return tm.to(tensors["task/decoder/head.weight"].dtype).eval()


def _as_task_model(model, task) -> TaskModel:
    if not isinstance(model, TaskModel):
        model = load_task_model(model)
    if model.task != task:
        raise ValueError(f"expected a {task} model, got {model.task}")
    return model


def finetune(task: str, checkpoint, pairs, cfg: FinetuneConfig | None = None, output_dir=None, *,
             return_model: bool = False):
    """Fine-tune encoder and head on ``(frame, label)`` pairs (or a labeled manifest path).

    Precipitation uses MSE over every pixel in scaled ``log1p`` space with a
    random ``mask_ratio`` patch mask per sample; AR uses BCE with logits.
    Writes ``<task>.ckpt`` and ``<task>_metrics.jsonl`` when ``output_dir`` is given.
    The pretraining checkpoint is only read.
    """
    cfg = cfg or FinetuneConfig(task=task)
    if cfg.task != task:
        cfg = FinetuneConfig(**{**asdict(cfg), "task": task})
    if not isinstance(pairs, list):
        pairs = read_labeled(pairs)
    if not pairs:
        raise ValueError("no labeled frames")
    for f, y in pairs:
        if f.timestamp != y.timestamp:
            raise ValueError(f"label misaligned with frame at timestamp {f.timestamp} vs {y.timestamp}")

    label_scale = 1.0
    if task == "precip":
        label_scale = max(1e-6, max(float(np.log1p(np.clip(y.values, 0, None)).max()) for _, y in pairs))
    model = task_model_from_pretrained(checkpoint, task, cfg.seed, label_scale)
    mcfg = model.cfg
    dtype = next(model.parameters()).dtype

    xs, ms, ys = [], [], []
    for f, y in pairs:
        g, miss = patchify(f, (mcfg.patch_h, mcfg.patch_w))
        yg, _ = patchify(y, (mcfg.patch_h, mcfg.patch_w))
        xs.append(g.data)
        ms.append(miss)
        ys.append(yg.data)
    x_all = torch.as_tensor(np.stack(xs), dtype=dtype)
    y_all = model.transform_labels(torch.as_tensor(np.stack(ys), dtype=dtype))
    forced = [missing_patches(m) for m in ms]

    n = len(pairs)
    spe = math.ceil(n / cfg.batch_size)
    total = cfg.epochs * spe
    warm = int(round(cfg.lr_warmup_epochs * spe))
    decay = [p for k, p in model.named_parameters() if p.ndim >= 2 and "token" not in k]
    no_decay = [p for k, p in model.named_parameters() if not (p.ndim >= 2 and "token" not in k)]
    opt = torch.optim.AdamW([{"params": decay, "weight_decay": cfg.weight_decay},
                             {"params": no_decay, "weight_decay": 0.0}], lr=cfg.base_lr, foreach=False)
    records = []
    step = 0
    ratio = cfg.train_mask_ratio
    for epoch in range(cfg.epochs):
        model.train()
        order = make_rng(cfg.seed, "finetune", task, "shuffle", epoch).permutation(n)
        for k in range(spe):
            idx = order[k * cfg.batch_size:(k + 1) * cfg.batch_size]
            rng = make_rng(cfg.seed, "finetune", task, "mask", step)
            hidden = torch.as_tensor(np.stack([
                sample_mask(mcfg.n_patches, ratio, rng, forced[i]).hidden for i in idx]))
            raw = model(x_all[idx], hidden)
            target = y_all[idx]
            loss = F.mse_loss(raw, target) if task == "precip" else bce_with_logits(raw, target)
            if not torch.isfinite(loss):
                raise FloatingPointError(f"non-finite {task} loss at step {step}")
            lr = cosine_lr(step, total, cfg.base_lr, warm)
            for g in opt.param_groups:
                g["lr"] = lr
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            records.append({"step": step, "epoch": epoch, "lr": lr, "loss": loss.item()})
            step += 1
    model.eval()
    path = None
    if output_dir is not None:
        out = Path(output_dir)
        out.mkdir(parents=True, exist_ok=True)
        path = save_task_model(out / f"{task}.ckpt", model, cfg, {"steps": step})
        (out / f"{task}_metrics.jsonl").write_text("".join(json.dumps(r) + "\n" for r in records))
    if return_model:
        return model, records, path
    return path
