"""Hybrid distillation objective.

Soft-target loss over temperature-scaled token distributions, attention
matching through a learned linear projection of the flattened head-pooled
maps, and their convex combination.  Gradients never flow into teacher
quantities.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .tensor import Tensor

LOSS_MODES = ("cross-entropy", "kl")


@dataclass
class DistillationConfig:
    temperature: float = 2.0
    alpha: float = 0.5
    epsilon: float = 1e-8
    loss_mode: str = "cross-entropy"
    t_squared_scaling: bool = False
    # every position contributes by default, padding included
    exclude_padded_positions: bool = False

    def __post_init__(self):
        if self.temperature <= 0:
            raise ConfigError(f"temperature must be positive, got {self.temperature}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must be in [0, 1], got {self.alpha}")
        if self.epsilon < 0:
            raise ConfigError(f"epsilon must be nonnegative, got {self.epsilon}")
        if self.loss_mode not in LOSS_MODES:
            raise ConfigError(f"loss_mode must be one of {LOSS_MODES}, got {self.loss_mode!r}")


@dataclass
class ProjectionLayer:
    """Learned map from flattened student attention space to the teacher's.

    weight is [teacher_len**2, student_len**2]; there is no bias term.
    """

    weight: Tensor

    @property
    def student_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def teacher_dim(self) -> int:
        return self.weight.shape[0]


def init_projection(len_student: int, len_teacher: int, seed: int = 0) -> ProjectionLayer:
    """Identity when the lengths agree, else seeded uniform in [-1/L_s, 1/L_s]."""
    if len_student < 1 or len_teacher < 1:
        raise ConfigError("sequence lengths must be positive")
    s_dim, t_dim = len_student**2, len_teacher**2
    if len_student == len_teacher:
        w = np.eye(s_dim, dtype=np.float32)
    else:
        rng = np.random.default_rng(seed)
        bound = 1.0 / len_student
        w = rng.uniform(-bound, bound, size=(t_dim, s_dim)).astype(np.float32)
    return ProjectionLayer(weight=Tensor(w, requires_grad=True))


@dataclass
class LossBreakdown:
    """Scalar loss tensors; total stays attached to the graph for backward."""

    distill: Tensor
    attention: Optional[Tensor]
    total: Tensor

    def to_floats(self) -> dict:
        return {
            "loss_total": self.total.item(),
            "loss_distill": self.distill.item(),
            "loss_attention": self.attention.item() if self.attention is not None else None,
        }


def soft_target_loss(
    teacher_logits: Tensor,
    student_logits: Tensor,
    cfg: DistillationConfig,
    mask: Optional[np.ndarray] = None,
) -> Tensor:
    """Soft-target loss between temperature-scaled distributions.

    cross-entropy mode is the mean over rows of -sum(P_T * log(P_S + eps));
    kl mode subtracts the teacher entropy, which leaves the gradient
    unchanged.  The teacher side is detached.
    """
    if teacher_logits.shape != student_logits.shape:
        raise ShapeError(
            f"logit shapes differ: teacher {teacher_logits.shape}, student {student_logits.shape}"
        )
    p_teacher = T.softmax(teacher_logits.detach(), axis=-1, temperature=cfg.temperature)
    p_student = T.softmax(student_logits, axis=-1, temperature=cfg.temperature)

    row_weights = None
    if cfg.exclude_padded_positions and mask is not None:
        row_weights = np.asarray(mask, dtype=np.float64)

    loss = T.soft_cross_entropy(p_teacher, p_student, cfg.epsilon, row_weights=row_weights)
    if cfg.loss_mode == "kl":
        pt = p_teacher.data.astype(np.float64)
        rows = -np.sum(pt * np.log(pt + cfg.epsilon), axis=-1)
        if row_weights is None:
            entropy = rows.mean()
        else:
            entropy = (rows * row_weights).sum() / row_weights.sum()
        loss = loss - float(entropy)
    if cfg.t_squared_scaling:
        loss = loss * (cfg.temperature**2)
    return loss


def pool_attention(per_head: Tensor) -> Tensor:
    """Average [batch, heads, L, L] probabilities over the head axis."""
    if per_head.ndim != 4:
        raise ShapeError(f"expected rank-4 attention [b, heads, L, L], got shape {per_head.shape}")
    return T.mean(per_head, axis=1)


def attention_loss(student_map: Tensor, teacher_map: Tensor, proj: ProjectionLayer) -> Tensor:
    """MSE between the projected flattened student map and the flattened
    teacher map.  Gradient reaches the student attention and the projection
    weight; the teacher map is detached."""
    if student_map.ndim != 3 or teacher_map.ndim != 3:
        raise ShapeError(
            f"pooled maps must be rank 3, got {student_map.shape} and {teacher_map.shape}"
        )
    if student_map.shape[0] != teacher_map.shape[0]:
        raise ShapeError(
            f"batch sizes differ: {student_map.shape[0]} vs {teacher_map.shape[0]}"
        )
    s_dim = student_map.shape[1] * student_map.shape[2]
    t_dim = teacher_map.shape[1] * teacher_map.shape[2]
    if (proj.student_dim, proj.teacher_dim) != (s_dim, t_dim):
        raise ConfigError(
            f"projection is [{proj.teacher_dim}, {proj.student_dim}] but maps flatten to "
            f"student {s_dim} / teacher {t_dim}"
        )
    student_flat = T.flatten_trailing(student_map)
    teacher_flat = T.flatten_trailing(teacher_map.detach())
    projected = T.matmul(student_flat, T.transpose(proj.weight, (1, 0)))
    return T.mse(projected, teacher_flat)


def hybrid_loss(distill: Tensor, attention: Optional[Tensor], cfg: DistillationConfig) -> LossBreakdown:
    """alpha * distill + (1 - alpha) * attention; pure distill when the
    attention term is absent."""
    if attention is None:
        return LossBreakdown(distill=distill, attention=None, total=distill)
    total = distill * cfg.alpha + attention * (1.0 - cfg.alpha)
    return LossBreakdown(distill=distill, attention=attention, total=total)
