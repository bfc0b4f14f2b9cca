"""Shared fixtures: tiny model pairs and the composed hybrid-loss pipeline."""

import numpy as np

from komet.data import Batch
from komet.distill import attention_loss, hybrid_loss, soft_target_loss
from komet.tensor import Tensor
from komet.transformer import ModelConfig, build_model


def tiny_pair(vocab=7, length=4, teacher_hidden=16, student_hidden=8, seed=0):
    """Teacher/student pair sized for finite-difference sweeps."""
    teacher = build_model(
        ModelConfig(teacher_hidden, 2, 2, 2 * teacher_hidden, vocab_size=vocab, max_positions=length + 2, seed=seed)
    )
    student = build_model(
        ModelConfig(student_hidden, 2, 2, 2 * student_hidden, vocab_size=vocab, max_positions=length + 2, seed=seed + 1)
    )
    teacher.freeze()
    return teacher, student


def random_batch(vocab, length, batch=2, seed=0, pad_tail=0):
    rng = np.random.default_rng(seed)
    ids = rng.integers(0, vocab, size=(batch, length))
    mask = np.ones((batch, length), dtype=np.int64)
    if pad_tail:
        mask[:, -pad_tail:] = 0
    return Batch(token_ids=ids, mask=mask)


def pipeline_loss(teacher, student, proj, batch, dcfg):
    """Full hybrid objective composed from the public distillation ops."""
    t_logits, t_atts = teacher.forward(batch.token_ids, batch.mask, collect_attention=True)
    s_logits, s_atts = student.forward(batch.token_ids, batch.mask, collect_attention=True)
    distill = soft_target_loss(t_logits, s_logits, dcfg, mask=batch.mask)
    attn = attention_loss(s_atts[-1].pooled, t_atts[-1].pooled, proj)
    return hybrid_loss(distill, attn, dcfg)


def param_loss_fn(student, proj, loss_builder, name):
    """Wrap the pipeline as a function of one named student parameter (or
    'projection.weight'), for grad_check."""

    def f(p: Tensor) -> Tensor:
        if name == "projection.weight":
            old = proj.weight
            proj.weight = p
            try:
                return loss_builder().total
            finally:
                proj.weight = old
        old = student.params[name]
        student.params[name] = p
        try:
            return loss_builder().total
        finally:
            student.params[name] = old

    return f
