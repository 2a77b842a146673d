"""Joint optimization: DINO-weight schedule, convex loss mixture, AdamW with
cosine learning rate, momentum teacher, checkpointing and resume."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from . import dino as dino_mod
from .data import load_frames, read_manifest
from .mae import mae_loss
from .patches import missing_patches, patchify, sample_mask
from .rng import make_rng, torch_seed
from .vit import (MaskedViT, ModelConfig, init_weights, load_checkpoint, prefixed, save_checkpoint,
                  unprefixed)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainSchedule:
    E_w: int = 5
    E_p: int = 20
    lambda_star: float = 0.5
    total_epochs: int = 30
    base_lr: float = 5e-4
    lr_warmup_epochs: float = 1.0
    weight_decay: float = 0.05
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    batch_size: int = 4
    seed: int = 0
    teacher_mask_ratio: float = 0.25
    student_mask_ratio: float = 0.75
    tau_s: float = 0.1
    tau_t: float = 0.04
    tau_t_start: float = 0.04
    teacher_momentum: float = 0.996
    momentum_ramp: bool = False
    center_momentum: float = 0.9
    center_retention: bool = True

    def __post_init__(self):
        _check_schedule(self.E_w, self.E_p, self.lambda_star)
        if self.total_epochs < 0 or self.batch_size < 1:
            raise ValueError("total_epochs must be >= 0 and batch_size >= 1")
        if not (0 <= self.teacher_mask_ratio < 1 and 0 <= self.student_mask_ratio < 1):
            raise ValueError("mask ratios must lie in [0, 1)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainSchedule":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown schedule keys: {sorted(unknown)}")
        d = dict(d)
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        return cls(**d)


def _check_schedule(E_w, E_p, lambda_star):
    if E_w < 0 or E_p < 1 or not 0.0 <= lambda_star <= 1.0:
        raise ValueError(f"invalid schedule: E_w={E_w}, E_p={E_p}, lambda_star={lambda_star}")


def lambda_schedule(epoch: int, E_w: int, E_p: int, lambda_star: float) -> float:
    """DINO loss weight: 1 during warm-up, linear ramp to ``lambda_star`` over ``E_p`` epochs."""
    _check_schedule(E_w, E_p, lambda_star)
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    if epoch < E_w:
        return 1.0
    if epoch < E_w + E_p:
        return 1.0 - ((epoch - E_w) / E_p) * (1.0 - lambda_star)
    return float(lambda_star)


def cosine_lr(step: int, total_steps: int, base_lr: float, warmup_steps: int = 0) -> float:
    if step < warmup_steps:
        return base_lr * step / warmup_steps
    decay = total_steps - warmup_steps
    if decay <= 0:
        return base_lr if step == warmup_steps else 0.0
    progress = min(1.0, (step - warmup_steps) / decay)
    return max(0.0, base_lr * 0.5 * (1.0 + math.cos(math.pi * progress)))


@dataclass
class LossBreakdown:
    total: float
    dino: float
    mae: float
    lam: float
    lr: float
    teacher_entropy: float = float("nan")
    decoder_grad_norm: float = 0.0
    collapse_alarm: bool = False

    def record(self, step: int, epoch: int) -> dict:
        return {"step": step, "epoch": epoch, "lambda": self.lam, "lr": self.lr, "dino": self.dino,
                "mae": self.mae, "total": self.total, "teacher_entropy": self.teacher_entropy,
                "decoder_grad_norm": self.decoder_grad_norm, "collapse_alarm": self.collapse_alarm}


@dataclass
class TrainState:
    model: MaskedViT
    head: dino_mod.DinoHead
    teacher: dino_mod.TeacherState
    optimizer: torch.optim.Optimizer
    total_steps: int
    warmup_steps: int
    epoch: int = 0
    step: int = 0
    monitor: dino_mod.CollapseMonitor | None = None
    dump_dir: Path | None = None

    def named_trainables(self):
        yield from (("student/" + k, p) for k, p in self.model.named_parameters())
        yield from (("head/" + k, p) for k, p in self.head.named_parameters())


_NO_DECAY = ("global_token", "mask_token")


def build_state(cfg: ModelConfig, schedule: TrainSchedule, steps_per_epoch: int = 1,
                dtype=torch.float32) -> TrainState:
    model = init_weights(MaskedViT(cfg), torch_seed(schedule.seed, "init", "model") % (2 ** 62)).to(dtype)
    head = init_weights(
        dino_mod.DinoHead(cfg.enc_width, cfg.dino_hidden, cfg.dino_bottleneck, cfg.n_prototypes),
        torch_seed(schedule.seed, "init", "head") % (2 ** 62),
    ).to(dtype)
    teacher = dino_mod.TeacherState.from_student(model.encoder, head, schedule.teacher_momentum,
                                                 schedule.center_momentum)
    decay, no_decay = [], []
    for name, p in list(model.named_parameters()) + list(head.named_parameters()):
        if p.ndim < 2 or any(k in name for k in _NO_DECAY):
            no_decay.append(p)
        else:
            decay.append(p)
    opt = torch.optim.AdamW(
        [{"params": decay, "weight_decay": schedule.weight_decay}, {"params": no_decay, "weight_decay": 0.0}],
        lr=schedule.base_lr, betas=tuple(schedule.betas), eps=schedule.eps, foreach=False,
    )
    total = schedule.total_epochs * steps_per_epoch
    warm = int(round(schedule.lr_warmup_epochs * steps_per_epoch))
    return TrainState(model, head, teacher, opt, total, min(warm, total),
                      monitor=dino_mod.CollapseMonitor(cfg.n_prototypes))


def collate(batch, dtype=torch.float32) -> tuple[torch.Tensor, torch.Tensor]:
    """``batch``: list of ``(patches, missing)`` pairs; patches may be PatchGrid or arrays."""
    if not batch:
        raise ValueError("empty batch")
    xs = [np.asarray(getattr(p, "data", p)) for p, _ in batch]
    ms = [np.asarray(m, dtype=bool) for _, m in batch]
    return torch.as_tensor(np.stack(xs), dtype=dtype), torch.as_tensor(np.stack(ms))


def _views(rng, forced, n_patches, ratio, n_views=2):
    views = []
    for _ in range(n_views):
        hid = [sample_mask(n_patches, ratio, rng, f).hidden for f in forced]
        views.append(torch.as_tensor(np.stack(hid)))
    return views


def _grad_norm(params) -> float:
    sq = 0.0
    for p in params:
        if p.grad is not None:
            sq += float((p.grad.double() ** 2).sum())
    return math.sqrt(sq)


def combined_loss(state: TrainState, schedule: TrainSchedule, x, miss, teacher_views, student_views, lam, tau_t):
    """Forward both branches; returns ``(total, dino, mae, teacher_logits)``."""
    with torch.no_grad():
        t_logits = [state.teacher.head(state.teacher.encoder(x, h).global_token) for h in teacher_views]
    s_tokens = [state.model.encoder(x, h) for h in student_views]
    s_logits = [state.head(ts.global_token) for ts in s_tokens]
    dino = dino_mod.dino_loss(s_logits, t_logits, state.teacher.center, schedule.tau_s, tau_t)
    pred = state.model.decoder(s_tokens[0])
    mae = mae_loss(pred, x, student_views[0], miss).loss
    total = lam * dino + (1.0 - lam) * mae
    return total, dino, mae, t_logits


def train_step(batch, state: TrainState, schedule: TrainSchedule, *, trace=None) -> tuple[TrainState, LossBreakdown]:
    """One optimizer step on ``batch``; mutates and returns ``state``.

    ``trace``, if given, is called with the sampled masks for instrumentation.
    """
    dtype = next(state.model.parameters()).dtype
    x, miss = collate(batch, dtype)
    n = x.shape[1]
    lam = lambda_schedule(state.epoch, schedule.E_w, schedule.E_p, schedule.lambda_star)
    lr = cosine_lr(state.step, state.total_steps, schedule.base_lr, state.warmup_steps)
    tau_t = dino_mod.teacher_temperature(state.epoch, schedule.E_w, schedule.tau_t_start, schedule.tau_t)

    rng = make_rng(schedule.seed, "masks", state.step)
    forced = [missing_patches(m) for m in miss.numpy()]
    t_views = _views(rng, forced, n, schedule.teacher_mask_ratio)
    s_views = _views(rng, forced, n, schedule.student_mask_ratio)
    if trace is not None:
        trace({"step": state.step, "n_patches": n, "forced": forced,
               "teacher": [v.numpy() for v in t_views], "student": [v.numpy() for v in s_views]})

    state.model.train()
    total, dino, mae, t_logits = combined_loss(state, schedule, x, miss, t_views, s_views, lam, tau_t)
    if not torch.isfinite(total):
        _dump(state, x=x, dino=dino.detach(), mae=mae.detach(), teacher_logits=torch.stack(t_logits))
        raise FloatingPointError(
            f"non-finite loss at step {state.step}: dino={dino.item()}, mae={mae.item()}, lambda={lam}"
        )
    state.optimizer.zero_grad(set_to_none=True)
    total.backward()
    dec_norm = _grad_norm(state.model.decoder.parameters())
    for g in state.optimizer.param_groups:
        g["lr"] = lr
    state.optimizer.step()

    m = dino_mod.momentum_at(state.step, state.total_steps, schedule.teacher_momentum, schedule.momentum_ramp)
    dino_mod.ema_update(state.teacher, state.model.encoder, state.head, m)
    entropy = dino_mod.teacher_entropy(t_logits, state.teacher.center, tau_t)
    state.teacher.center = dino_mod.center_update(state.teacher.center, t_logits, schedule.center_momentum,
                                                  retention=schedule.center_retention)
    alarm = state.monitor.update(entropy) if state.monitor is not None else False
    if alarm and state.monitor.run == state.monitor.patience:
        log.warning("teacher entropy below %.3f for %d steps: possible collapse", state.monitor.limit,
                    state.monitor.patience)
    state.step += 1
    return state, LossBreakdown(total.item(), dino.item(), mae.item(), lam, lr, entropy, dec_norm, alarm)


def _dump(state: TrainState, **tensors):
    if state.dump_dir is None:
        return
    path = Path(state.dump_dir) / f"nonfinite_step{state.step:06d}.npz"
    np.savez(path, **{k: v.detach().cpu().numpy() for k, v in tensors.items()})
    log.error("wrote diagnostic dump to %s", path)


# ---------------------------------------------------------------------------
# checkpoints


def state_tensors(state: TrainState) -> dict:
    out = {}
    out.update(prefixed(state.model.state_dict(), "student/"))
    out.update(prefixed(state.head.state_dict(), "head/"))
    out.update(prefixed(state.teacher.encoder.state_dict(), "teacher/encoder/"))
    out.update(prefixed(state.teacher.head.state_dict(), "teacher/head/"))
    out["dino/center"] = state.teacher.center
    for name, p in state.named_trainables():
        st = state.optimizer.state.get(p)
        if st:
            out[f"optim/{name}/exp_avg"] = st["exp_avg"]
            out[f"optim/{name}/exp_avg_sq"] = st["exp_avg_sq"]
            out[f"optim/{name}/step"] = torch.as_tensor(st["step"], dtype=torch.float32).reshape(())
    return out


def save_state(path, state: TrainState, cfg: ModelConfig, schedule: TrainSchedule, extra: dict | None = None):
    monitor = state.monitor
    header = {
        "task": "pretrain",
        "config": {"model": cfg.to_dict(), "schedule": schedule.to_dict()},
        "meta": {"epoch": state.epoch, "step": state.step, "total_steps": state.total_steps,
                 "warmup_steps": state.warmup_steps,
                 "monitor_run": monitor.run if monitor else 0,
                 "monitor_alarmed": monitor.alarmed if monitor else False, **(extra or {})},
    }
    return save_checkpoint(path, state_tensors(state), header)


def load_state(path, steps_per_epoch: int | None = None) -> tuple[TrainState, ModelConfig, TrainSchedule]:
    header, tensors = load_checkpoint(path)
    cfg = ModelConfig.from_dict(header["config"]["model"])
    schedule = TrainSchedule.from_dict(header["config"]["schedule"])
    meta = header["meta"]
    dtype = tensors["dino/center"].dtype
    state = build_state(cfg, schedule, 1, dtype)
    state.total_steps = int(meta["total_steps"])
    state.warmup_steps = int(meta["warmup_steps"])
    state.model.load_state_dict(unprefixed(tensors, "student/"))
    state.head.load_state_dict(unprefixed(tensors, "head/"))
    state.teacher.encoder.load_state_dict(unprefixed(tensors, "teacher/encoder/"))
    state.teacher.head.load_state_dict(unprefixed(tensors, "teacher/head/"))
    state.teacher.center = tensors["dino/center"].clone()
    for name, p in state.named_trainables():
        key = f"optim/{name}"
        if f"{key}/exp_avg" in tensors:
            state.optimizer.state[p] = {
                "step": tensors[f"{key}/step"].clone(),
                "exp_avg": tensors[f"{key}/exp_avg"].clone(),
                "exp_avg_sq": tensors[f"{key}/exp_avg_sq"].clone(),
            }
    state.epoch = int(meta["epoch"])
    state.step = int(meta["step"])
    state.monitor.run = int(meta.get("monitor_run", 0))
    state.monitor.alarmed = bool(meta.get("monitor_alarmed", False))
    return state, cfg, schedule


# ---------------------------------------------------------------------------
# fit


def prepare_frames(frames, cfg: ModelConfig):
    out = []
    for f in frames:
        if f.shape != (cfg.image_h, cfg.image_w):
            raise ValueError(f"frame shape {f.shape} does not match model image size "
                             f"{(cfg.image_h, cfg.image_w)}")
        grid, miss = patchify(f, (cfg.patch_h, cfg.patch_w))
        out.append((grid.data.astype(np.float32), miss))
    return out


def _read_log(path: Path) -> list[dict]:
    if not path.exists():
        return []
    return [json.loads(l) for l in path.read_text().splitlines() if l.strip()]


def _prune(out: Path, keep: int):
    ckpts = sorted(p for p in out.glob("ckpt_epoch*.ckpt") if p.name != "ckpt_epoch0000.ckpt")
    for p in ckpts[:-keep]:
        p.unlink()


def fit(manifest, cfg: ModelConfig, schedule: TrainSchedule, output_dir, *, resume=None,
        stop_after_epoch: int | None = None, frames=None, trace=None,
        checkpoint_every: int = 1, keep_last: int | None = None) -> Path:
    """Train from a manifest, writing per-epoch checkpoints and ``metrics.jsonl``.

    A checkpoint is written every ``checkpoint_every`` epochs and always after
    the last one. ``keep_last`` prunes older epoch checkpoints (the initial
    ``ckpt_epoch0000.ckpt`` is always kept).

    ``resume`` continues from a checkpoint written by this function; the loss
    stream matches an uninterrupted run. ``stop_after_epoch`` ends the run early
    (simulating an interruption) without changing the schedule.
    """
    if checkpoint_every < 1:
        raise ValueError("checkpoint_every must be >= 1")
    if keep_last is not None and keep_last < 1:
        raise ValueError("keep_last must be >= 1")
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    if frames is None:
        frames = load_frames(read_manifest(manifest))
    data = prepare_frames(frames, cfg)
    if not data:
        raise ValueError("empty dataset")
    n = len(data)
    bs = schedule.batch_size
    steps_per_epoch = math.ceil(n / bs)
    log_path = out / "metrics.jsonl"

    if resume is not None:
        state, cfg_r, schedule_r = load_state(resume)
        if cfg_r != cfg or schedule_r != schedule:
            raise ValueError("resume checkpoint was written with a different model config or schedule")
        kept = [r for r in _read_log(log_path) if r["step"] < state.step]
        log_path.write_text("".join(json.dumps(r) + "\n" for r in kept))
    else:
        state = build_state(cfg, schedule, steps_per_epoch)
        log_path.write_text("")
        save_state(out / "ckpt_epoch0000.ckpt", state, cfg, schedule)
    state.dump_dir = out

    last = out / f"ckpt_epoch{state.epoch:04d}.ckpt"
    end = schedule.total_epochs if stop_after_epoch is None else min(stop_after_epoch, schedule.total_epochs)
    with open(log_path, "a") as fh:
        for epoch in range(state.epoch, end):
            state.epoch = epoch
            order = make_rng(schedule.seed, "shuffle", epoch).permutation(n)
            for k in range(steps_per_epoch):
                idx = order[k * bs:(k + 1) * bs]
                state, lb = train_step([data[i] for i in idx], state, schedule, trace=trace)
                fh.write(json.dumps(lb.record(state.step - 1, epoch)) + "\n")
            fh.flush()
            state.epoch = epoch + 1
            if state.epoch % checkpoint_every == 0 or state.epoch == end:
                last = save_state(out / f"ckpt_epoch{state.epoch:04d}.ckpt", state, cfg, schedule)
                if keep_last is not None:
                    _prune(out, keep_last)
            log.info("epoch %d done: step %d", epoch, state.step)
    (out / "latest.json").write_text(json.dumps({"checkpoint": last.name, "epoch": state.epoch, "step": state.step}))
    return last
