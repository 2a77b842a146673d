"""Reconstruction loss over hidden patches."""

from __future__ import annotations

from dataclasses import dataclass

import torch


@dataclass
class MaeLossReport:
    loss: torch.Tensor
    n_hidden_pixels_scored: int


def mae_loss(pred, target, hidden, missing=None) -> MaeLossReport:
    """Mean squared error over pixels inside hidden patches that are observed in the target.

    ``pred``/``target``: (B, N, P) or (N, P); ``hidden``: (B, N) or (N,);
    ``missing``: per-pixel booleans shaped like ``target``. The mean is taken
    over the union of scored pixels in the batch.
    """
    pred = torch.as_tensor(pred)
    target = torch.as_tensor(target, dtype=pred.dtype)
    hidden = torch.as_tensor(getattr(hidden, "hidden", hidden), dtype=torch.bool)
    if pred.shape != target.shape:
        raise ValueError(f"pred {tuple(pred.shape)} and target {tuple(target.shape)} differ")
    if hidden.shape != pred.shape[:-1]:
        hidden = hidden.reshape(pred.shape[:-1])
    scored = hidden[..., None].expand_as(pred)
    if missing is not None:
        scored = scored & ~torch.as_tensor(missing, dtype=torch.bool).reshape(pred.shape)
    n = int(scored.sum())
    if n == 0:
        raise ValueError("degenerate batch: no hidden, observed pixels to score")
    sq = (pred - target.detach()) ** 2
    loss = torch.where(scored, sq, torch.zeros_like(sq)).sum() / n
    return MaeLossReport(loss, n)
