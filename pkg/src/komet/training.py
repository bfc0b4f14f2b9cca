"""Distillation training loop.

One trainer owns the student, projection, and optimizer state.  Per epoch:
teacher forward without gradients, student forward with attention
collection, hybrid loss, gradient accumulation normalized by examples,
AdamW updates, held-out evaluation, checkpointing with bounded retention,
and early stopping.  The best checkpoint is restored at the end.
"""

from __future__ import annotations

import json
import logging
import math
import shutil
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import checkpoint as ckpt
from .data import Batch, Dataset, batches
from .distill import DistillationConfig, LossBreakdown, ProjectionLayer, attention_loss, hybrid_loss, soft_target_loss
from .errors import ConfigError
from .tensor import Tensor
from .transformer import EncoderModel

logger = logging.getLogger(__name__)

BEST_MARKER = "best"


@dataclass
class TrainerConfig:
    learning_rate: float = 5e-5
    epochs: int = 15
    batch_size: int = 8
    grad_accum_steps: int = 2
    logging_steps: int = 50
    early_stop_patience: int = 3
    early_stop_threshold: float = 0.01
    save_total_limit: int = 3
    load_best_at_end: bool = True
    fp16_flag: bool = False  # recorded only; arithmetic stays 32-bit
    seed: int = 0

    def __post_init__(self):
        counts = {
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "grad_accum_steps": self.grad_accum_steps,
            "logging_steps": self.logging_steps,
            "early_stop_patience": self.early_stop_patience,
            "save_total_limit": self.save_total_limit,
        }
        for name, value in counts.items():
            if value < 1:
                raise ConfigError(f"{name} must be >= 1, got {value}")
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.early_stop_threshold < 0:
            raise ConfigError(f"early_stop_threshold must be >= 0, got {self.early_stop_threshold}")


class AdamW:
    """Decoupled weight decay Adam with bias-corrected moments."""

    def __init__(
        self,
        params: Sequence[Tuple[str, Tensor]],
        lr: float,
        betas: Tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.01,
    ):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.params}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params}

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.betas
        corr1 = 1.0 - b1**self.t
        corr2 = 1.0 - b2**self.t
        for name, p in self.params:
            grad = p.grad if p.grad is not None else np.zeros_like(p.data)
            if np.isnan(grad).any():
                raise FloatingPointError(f"NaN gradient in {name} at optimizer step {self.t}")
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * grad
            v *= b2
            v += (1.0 - b2) * grad * grad
            m_hat = m / corr1
            v_hat = v / corr2
            p.data = p.data - self.lr * (m_hat / (np.sqrt(v_hat) + self.eps)) - self.lr * self.weight_decay * p.data

    def state(self) -> Dict:
        tensors: Dict[str, np.ndarray] = {}
        for name in self.m:
            tensors[f"m.{name}"] = self.m[name]
            tensors[f"v.{name}"] = self.v[name]
        return {"step": self.t, "tensors": tensors}

    def load_state(self, state: Dict) -> None:
        self.t = state["step"]
        for name in self.m:
            self.m[name] = np.array(state["tensors"][f"m.{name}"], dtype=np.float32)
            self.v[name] = np.array(state["tensors"][f"v.{name}"], dtype=np.float32)


class EarlyStopping:
    """Stops after `patience` evaluations without improvement beyond
    `threshold`.  The running best updates on any strict improvement; the
    counter resets only when previous_best - current > threshold, so an
    exactly-threshold improvement counts as stale."""

    def __init__(self, patience: int, threshold: float):
        self.patience = patience
        self.threshold = threshold
        self.best_loss = math.inf
        self.stale_evals = 0

    def update(self, eval_loss: float) -> bool:
        """Record one evaluation; returns True when training should stop."""
        if not math.isfinite(eval_loss):
            raise ConfigError(f"eval loss must be finite, got {eval_loss}")
        if self.best_loss - eval_loss > self.threshold:
            self.stale_evals = 0
        else:
            self.stale_evals += 1
        if eval_loss < self.best_loss:
            self.best_loss = eval_loss
        return self.stale_evals >= self.patience


@dataclass
class TrainReport:
    train_losses: List[float]  # index i is epoch i+1
    eval_losses: List[float]  # index 0 is the pre-training baseline
    best_epoch: int
    best_eval_loss: float
    epochs_run: int
    stopped_early: bool
    eval_breakdowns: List[Dict] = field(default_factory=list)

    def to_dict(self) -> Dict:
        return {
            "train_losses": self.train_losses,
            "eval_losses": self.eval_losses,
            "best_epoch": self.best_epoch,
            "best_eval_loss": self.best_eval_loss,
            "epochs_run": self.epochs_run,
            "stopped_early": self.stopped_early,
            "eval_breakdowns": self.eval_breakdowns,
        }


def batch_loss(
    teacher: EncoderModel,
    student: EncoderModel,
    proj: Optional[ProjectionLayer],
    batch: Batch,
    dcfg: DistillationConfig,
) -> LossBreakdown:
    """Hybrid loss for one batch: teacher forward (detached), student forward
    with attention, soft targets plus projected last-layer attention match."""
    with_attention = proj is not None
    teacher_logits, teacher_atts = teacher.forward(batch.token_ids, batch.mask, collect_attention=with_attention)
    student_logits, student_atts = student.forward(batch.token_ids, batch.mask, collect_attention=with_attention)
    distill = soft_target_loss(teacher_logits, student_logits, dcfg, mask=batch.mask)
    attn = None
    if with_attention:
        attn = attention_loss(student_atts[-1].pooled, teacher_atts[-1].pooled, proj)
    return hybrid_loss(distill, attn, dcfg)


def evaluate(
    teacher: EncoderModel,
    student: EncoderModel,
    proj: Optional[ProjectionLayer],
    dataset: Dataset,
    dcfg: DistillationConfig,
    batch_size: int,
) -> Dict:
    """Example-weighted mean loss breakdown over a dataset, in fixed order."""
    if len(dataset) == 0:
        raise ConfigError("cannot evaluate on an empty dataset")
    totals = {"loss_total": 0.0, "loss_distill": 0.0, "loss_attention": 0.0}
    has_attention = proj is not None
    n = 0
    for batch in batches(dataset, batch_size, seed=0, shuffle=False):
        breakdown = batch_loss(teacher, student, proj, batch, dcfg)
        values = breakdown.to_floats()
        weight = len(batch)
        totals["loss_total"] += values["loss_total"] * weight
        totals["loss_distill"] += values["loss_distill"] * weight
        if has_attention:
            totals["loss_attention"] += values["loss_attention"] * weight
        n += weight
    out = {k: v / n for k, v in totals.items()}
    if not has_attention:
        out["loss_attention"] = None
    return out


class MetricsLogger:
    """Appends one JSON object per logging event to a line-delimited file."""

    def __init__(self, path: Path):
        self.path = path
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.path.write_text("")
        self.start = time.monotonic()

    def log(self, phase: str, step: int, epoch: int, losses: Dict, lr: float) -> None:
        record = {
            "phase": phase,
            "step": step,
            "epoch": epoch,
            "loss_total": losses.get("loss_total"),
            "loss_distill": losses.get("loss_distill"),
            "loss_attention": losses.get("loss_attention"),
            "lr": lr,
            "wall_ms": round((time.monotonic() - self.start) * 1000.0, 3),
        }
        with self.path.open("a") as fh:
            fh.write(json.dumps(record) + "\n")


def _chunked(items: List[Batch], size: int) -> List[List[Batch]]:
    return [items[i : i + size] for i in range(0, len(items), size)]


class _CheckpointKeeper:
    """Writes per-epoch checkpoints, maintains the best marker, and evicts
    the oldest checkpoints beyond the retention limit (never the best)."""

    def __init__(self, out_dir: Path, limit: int):
        self.out_dir = out_dir
        self.limit = limit
        self.saved: List[Tuple[int, Path]] = []
        self.best_epoch: Optional[int] = None
        self.best_loss = math.inf

    def save(self, epoch: int, eval_loss: float, weights: Dict, optimizer_state: Dict) -> None:
        path = self.out_dir / f"ckpt-{epoch}"
        ckpt.save_checkpoint(path, weights, epoch, eval_loss, optimizer_state)
        self.saved.append((epoch, path))
        if eval_loss < self.best_loss:  # ties keep the earliest epoch
            self.best_loss = eval_loss
            self.best_epoch = epoch
            (self.out_dir / BEST_MARKER).write_text(
                json.dumps({"checkpoint": path.name, "epoch": epoch, "eval_loss": eval_loss})
            )
        while len(self.saved) > self.limit:
            for i, (ep, p) in enumerate(self.saved):
                if ep != self.best_epoch:
                    shutil.rmtree(p)
                    del self.saved[i]
                    break
            else:
                break

    @property
    def best_path(self) -> Path:
        return self.out_dir / f"ckpt-{self.best_epoch}"


def distill_train(
    teacher: EncoderModel,
    student: EncoderModel,
    proj: ProjectionLayer,
    train_data: Dataset,
    eval_data: Dataset,
    dcfg: DistillationConfig,
    tcfg: TrainerConfig,
    out_dir,
) -> TrainReport:
    """Run the full distillation regimen and restore the best student.

    The student and projection are updated in place.  An evaluation of the
    untrained student is recorded as epoch 0 before training; it seeds the
    early-stop state and serves as the untrained baseline.
    """
    if len(train_data) == 0 or len(eval_data) == 0:
        raise ConfigError("train and eval datasets must be non-empty")
    if teacher.config.vocab_size != student.config.vocab_size:
        raise ConfigError(
            f"teacher and student must share a tokenizer: vocab "
            f"{teacher.config.vocab_size} vs {student.config.vocab_size}"
        )
    if train_data.seq_len != eval_data.seq_len:
        raise ConfigError("train and eval datasets must share one sequence length")
    expected_dim = train_data.seq_len**2
    if proj.student_dim != expected_dim or proj.teacher_dim != expected_dim:
        raise ConfigError(
            f"projection [{proj.teacher_dim}, {proj.student_dim}] does not match "
            f"sequence length {train_data.seq_len}"
        )

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    teacher.freeze()

    trainable = list(student.parameters()) + [("projection.weight", proj.weight)]
    optimizer = AdamW(trainable, lr=tcfg.learning_rate)
    stopper = EarlyStopping(tcfg.early_stop_patience, tcfg.early_stop_threshold)
    keeper = _CheckpointKeeper(out_dir, tcfg.save_total_limit)
    metrics = MetricsLogger(out_dir / "metrics.jsonl")

    def weights_snapshot() -> Dict[str, np.ndarray]:
        snap = {name: p.data for name, p in student.parameters()}
        snap["projection.weight"] = proj.weight.data
        return snap

    baseline = evaluate(teacher, student, proj, eval_data, dcfg, tcfg.batch_size)
    metrics.log("eval", 0, 0, baseline, tcfg.learning_rate)
    keeper.save(0, baseline["loss_total"], weights_snapshot(), optimizer.state())
    stopper.update(baseline["loss_total"])

    train_losses: List[float] = []
    eval_losses: List[float] = [baseline["loss_total"]]
    eval_breakdowns: List[Dict] = [baseline]
    micro_step = 0
    epochs_run = 0
    stopped_early = False

    for epoch in range(1, tcfg.epochs + 1):
        epoch_batches = list(batches(train_data, tcfg.batch_size, seed=tcfg.seed, epoch=epoch))
        epoch_loss = 0.0
        epoch_examples = 0
        for group in _chunked(epoch_batches, tcfg.grad_accum_steps):
            group_examples = sum(len(b) for b in group)
            optimizer.zero_grad()
            for batch in group:
                breakdown = batch_loss(teacher, student, proj, batch, dcfg)
                total = breakdown.total.item()
                if math.isnan(total):
                    raise FloatingPointError(
                        f"loss became NaN at micro-step {micro_step + 1}; "
                        f"last checkpoint left intact under {out_dir}"
                    )
                # normalize by examples so accumulation matches one big batch
                scaled = breakdown.total * (len(batch) / group_examples)
                scaled.backward()
                micro_step += 1
                epoch_loss += total * len(batch)
                epoch_examples += len(batch)
                if micro_step % tcfg.logging_steps == 0:
                    metrics.log("train", micro_step, epoch, breakdown.to_floats(), tcfg.learning_rate)
            optimizer.step()
        epochs_run = epoch
        train_losses.append(epoch_loss / epoch_examples)

        eval_metrics = evaluate(teacher, student, proj, eval_data, dcfg, tcfg.batch_size)
        metrics.log("eval", micro_step, epoch, eval_metrics, tcfg.learning_rate)
        eval_losses.append(eval_metrics["loss_total"])
        eval_breakdowns.append(eval_metrics)
        keeper.save(epoch, eval_metrics["loss_total"], weights_snapshot(), optimizer.state())
        if stopper.update(eval_metrics["loss_total"]):
            stopped_early = True
            logger.info("early stopping after epoch %d", epoch)
            break

    if tcfg.load_best_at_end and keeper.best_epoch is not None:
        restored = ckpt.load_checkpoint(keeper.best_path)
        apply_weights(student, proj, restored["weights"])

    return TrainReport(
        train_losses=train_losses,
        eval_losses=eval_losses,
        best_epoch=keeper.best_epoch if keeper.best_epoch is not None else 0,
        best_eval_loss=keeper.best_loss,
        epochs_run=epochs_run,
        stopped_early=stopped_early,
        eval_breakdowns=eval_breakdowns,
    )


def apply_weights(student: EncoderModel, proj: Optional[ProjectionLayer], weights: Dict[str, np.ndarray]) -> None:
    """Load a checkpoint's arrays into a student model and projection."""
    model_arrays = {k: v for k, v in weights.items() if k != "projection.weight"}
    student.load_state(model_arrays)
    if proj is not None and "projection.weight" in weights:
        proj.weight.data = np.asarray(weights["projection.weight"], dtype=np.float32)
