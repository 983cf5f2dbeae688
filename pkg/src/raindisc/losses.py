"""Loss terms for the swath distillation stage.

total = task + feature_loss_weight * feat + reconstruction_loss_weight * rec
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .blocks import ContractError

_EPS = 1e-7


class NumericsError(RuntimeError):
    pass


@dataclass
class LossReport:
    task: float
    feat: float
    rec: float
    total: float


def task_loss(
    pred: torch.Tensor,
    target: torch.Tensor,
    task: str,
    pixel_weights: torch.Tensor | None = None,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Mean-reduced scalar plus the unreduced per-pixel loss map.

    Classification expects probabilities in (0, 1) against a binary target
    (cross entropy); regression is plain MSE in whatever space the caller
    works in.
    """
    if pred.shape != target.shape:
        raise ContractError(f"pred {tuple(pred.shape)} vs target {tuple(target.shape)}")
    if not (torch.isfinite(pred).all() and torch.isfinite(target).all()):
        raise NumericsError("non-finite values in task loss inputs")
    if task == "classification":
        p = pred.clamp(_EPS, 1.0 - _EPS)
        loss_map = -(target * torch.log(p) + (1.0 - target) * torch.log(1.0 - p))
    elif task == "regression":
        loss_map = (pred - target) ** 2
    else:
        raise ValueError(f"unknown task: {task!r}")
    if pixel_weights is None:
        return loss_map.mean(), loss_map
    w = pixel_weights.to(loss_map.dtype)
    return (loss_map * w).sum() / w.sum().clamp_min(_EPS), loss_map


def feat_loss(student_feat: torch.Tensor, teacher_feat: torch.Tensor) -> torch.Tensor:
    """KL(teacher || student) between per-channel spatial softmax distributions.

    Both tensors must already share channel width (the trainer projects the
    student side with a 1x1 conv before calling this).
    """
    if student_feat.shape != teacher_feat.shape:
        raise ContractError("bottleneck feature shapes differ")
    s = student_feat.flatten(start_dim=2)
    t = teacher_feat.flatten(start_dim=2)
    log_ps = F.log_softmax(s, dim=-1)
    log_pt = F.log_softmax(t, dim=-1)
    kl = (log_pt.exp() * (log_pt - log_ps)).sum(dim=-1)
    return kl.mean()


def rec_loss(student_levels: list[torch.Tensor], teacher_levels: list[torch.Tensor]) -> torch.Tensor:
    """Mean over levels of per-level feature MSE (already channel-aligned)."""
    if len(student_levels) != len(teacher_levels):
        raise ContractError(
            f"level count mismatch: {len(student_levels)} vs {len(teacher_levels)}"
        )
    total = None
    for s, t in zip(student_levels, teacher_levels):
        if s.shape != t.shape:
            raise ContractError("reconstruction level shapes differ")
        term = F.mse_loss(s, t)
        total = term if total is None else total + term
    return total / len(student_levels)
