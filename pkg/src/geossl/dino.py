"""Self-distillation branch: projection head, centered teacher targets,
cross-view loss, momentum teacher and center updates."""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F


class DinoHead(nn.Module):
    """3-layer GELU MLP -> L2-normalized bottleneck -> weight-normalized prototypes."""

    def __init__(self, in_dim: int, hidden: int, bottleneck: int, n_prototypes: int):
        super().__init__()
        if n_prototypes < 2:
            raise ValueError("need at least two prototypes")
        self.fc1 = nn.Linear(in_dim, hidden)
        self.fc2 = nn.Linear(hidden, hidden)
        self.fc3 = nn.Linear(hidden, bottleneck)
        self.prototypes = nn.Parameter(torch.zeros(n_prototypes, bottleneck))

    def bottleneck(self, x):
        x = F.gelu(self.fc1(x))
        x = F.gelu(self.fc2(x))
        return F.normalize(self.fc3(x), dim=-1, eps=1e-12)

    def forward(self, x):
        w = F.normalize(self.prototypes, dim=-1, eps=1e-12)
        return self.bottleneck(x) @ w.t()


def build_head(cfg, seed: int = 0) -> DinoHead:
    from .vit import init_weights

    return init_weights(DinoHead(cfg.enc_width, cfg.dino_hidden, cfg.dino_bottleneck, cfg.n_prototypes), seed)


def project(global_token: torch.Tensor, head: DinoHead) -> torch.Tensor:
    return head(global_token)


def dino_loss(student_logits, teacher_logits, center, tau_s: float = 0.1, tau_t: float = 0.04) -> torch.Tensor:
    """Cross-entropy between centered, sharpened teacher targets and student predictions.

    Averaged over every (teacher view, student view) pair and over the batch.
    Teacher logits are detached.
    """
    if tau_s <= 0 or tau_t <= 0:
        raise ValueError("temperatures must be positive")
    if len(student_logits) == 0 or len(teacher_logits) == 0:
        raise ValueError("need at least one view per branch")
    center = torch.as_tensor(center)
    targets = [F.softmax((t.detach() - center) / tau_t, dim=-1) for t in teacher_logits]
    logps = [F.log_softmax(s / tau_s, dim=-1) for s in student_logits]
    b = logps[0].shape[0]
    if any(t.shape[0] != b for t in targets):
        raise ValueError("teacher and student batch sizes differ")
    total = 0.0
    for p in targets:
        for lp in logps:
            total = total + (-(p * lp).sum(dim=-1)).mean()
    return total / (len(targets) * len(logps))


def teacher_entropy(teacher_logits, center, tau_t: float) -> float:
    ent = []
    for t in teacher_logits:
        logp = F.log_softmax((t.detach() - center) / tau_t, dim=-1)
        ent.append(-(logp.exp() * logp).sum(dim=-1))
    return float(torch.cat(ent).mean())


@torch.no_grad()
def ema_tensors(teacher: list[torch.Tensor], student: list[torch.Tensor], m: float) -> None:
    for t, s in zip(teacher, student, strict=True):
        if t.shape != s.shape:
            raise ValueError(f"shape mismatch {tuple(t.shape)} vs {tuple(s.shape)}")
        t.mul_(m).add_(s.detach(), alpha=1.0 - m)


@dataclass
class TeacherState:
    encoder: nn.Module
    head: DinoHead
    center: torch.Tensor
    momentum: float = 0.996
    center_momentum: float = 0.9

    def __post_init__(self):
        if not 0.0 < self.momentum < 1.0 or not 0.0 < self.center_momentum < 1.0:
            raise ValueError("momenta must lie in (0, 1)")
        for p in list(self.encoder.parameters()) + list(self.head.parameters()):
            p.requires_grad_(False)

    @classmethod
    def from_student(cls, encoder: nn.Module, head: DinoHead, momentum=0.996, center_momentum=0.9):
        k = head.prototypes.shape[0]
        return cls(copy.deepcopy(encoder), copy.deepcopy(head),
                   torch.zeros(k, dtype=head.prototypes.dtype), momentum, center_momentum)

    def parameters(self):
        return list(self.encoder.parameters()) + list(self.head.parameters())


def ema_update(teacher: TeacherState, student_encoder: nn.Module, student_head: nn.Module,
               momentum: float | None = None) -> TeacherState:
    """``t <- m t + (1 - m) s`` for every teacher tensor; the center is untouched."""
    m = teacher.momentum if momentum is None else momentum
    s = list(student_encoder.parameters()) + list(student_head.parameters())
    ema_tensors(teacher.parameters(), s, m)
    return teacher


@torch.no_grad()
def center_update(center: torch.Tensor, teacher_logits, m_c: float = 0.9, *, retention: bool = True) -> torch.Tensor:
    """``c <- m_c c + (1 - m_c) mean(teacher logits)`` over views and batch.

    With ``retention=False`` the momentum is read as the weight of the new batch
    mean instead, i.e. ``c <- (1 - m_c) c + m_c mean``.
    """
    if isinstance(teacher_logits, torch.Tensor):
        teacher_logits = [teacher_logits]
    rows = torch.cat([t.detach().reshape(-1, t.shape[-1]) for t in teacher_logits])
    if rows.shape[0] == 0:
        raise ValueError("empty teacher batch")
    keep = m_c if retention else 1.0 - m_c
    return keep * center + (1.0 - keep) * rows.mean(dim=0)


def teacher_temperature(epoch: int, warmup_epochs: int, start: float = 0.04, final: float = 0.04) -> float:
    if warmup_epochs <= 0 or epoch >= warmup_epochs:
        return final
    return start + (final - start) * epoch / warmup_epochs


def momentum_at(step: int, total_steps: int, base: float = 0.996, ramp: bool = False) -> float:
    """Constant teacher momentum, or a cosine ramp from ``base`` to 1."""
    if not ramp or total_steps <= 0:
        return base
    return 1.0 - (1.0 - base) * (math.cos(math.pi * min(step, total_steps) / total_steps) + 1.0) / 2.0


class CollapseMonitor:
    """Alarm when mean teacher entropy stays under ``frac * log K`` for ``patience`` steps."""

    def __init__(self, n_prototypes: int, frac: float = 0.1, patience: int = 50):
        self.limit = frac * math.log(n_prototypes)
        self.patience = patience
        self.run = 0
        self.alarmed = False

    def update(self, entropy: float) -> bool:
        self.run = self.run + 1 if entropy < self.limit else 0
        if self.run >= self.patience:
            self.alarmed = True
        return self.run >= self.patience
