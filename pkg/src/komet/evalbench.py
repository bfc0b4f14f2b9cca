"""Downstream evaluation and compression reporting.

Fine-tunes an encoder for 3-class classification over the pooled
first-position representation, scores predictions with macro-F1, measures
wall-clock forward latency, and emits the parameter/size/reduction report.
"""

from __future__ import annotations

import logging
import time
import warnings
from dataclasses import dataclass
from typing import Dict, List, Optional

import numpy as np

from . import tensor as T
from .data import Dataset, batches
from .errors import DataError, ParameterError
from .tensor import Tensor
from .training import AdamW
from .transformer import EncoderModel, ModelConfig, count_parameters, model_size_mb

logger = logging.getLogger(__name__)

NUM_SENTIMENT_CLASSES = 3


@dataclass
class ClassifierModel:
    """Encoder body plus a linear head over the pooled representation."""

    body: EncoderModel
    head_weight: Tensor
    head_bias: Tensor

    def logits(self, token_ids: np.ndarray, mask: np.ndarray) -> Tensor:
        hidden, _ = self.body.encode(token_ids, mask)
        pooled = self.body.pooled(hidden)
        return T.linear(pooled, self.head_weight, self.head_bias)

    def predict(self, token_ids: np.ndarray, mask: np.ndarray) -> np.ndarray:
        return np.argmax(self.logits(token_ids, mask).data, axis=-1)

    def state(self) -> Dict[str, np.ndarray]:
        arrays = self.body.state().copy()
        arrays["classifier.weight"] = self.head_weight.data
        arrays["classifier.bias"] = self.head_bias.data
        return arrays

    def load_state(self, arrays: Dict[str, np.ndarray]) -> None:
        self.body.load_state({k: v for k, v in arrays.items() if not k.startswith("classifier.")})
        self.head_weight.data = np.asarray(arrays["classifier.weight"], dtype=np.float32)
        self.head_bias.data = np.asarray(arrays["classifier.bias"], dtype=np.float32)


def attach_head(model: EncoderModel, num_classes: int = NUM_SENTIMENT_CLASSES, seed: int = 0) -> ClassifierModel:
    rng = np.random.default_rng(seed)
    weight = Tensor(rng.standard_normal((num_classes, model.config.hidden_size), dtype=np.float32) * np.float32(0.02), requires_grad=True)
    bias = Tensor(np.zeros(num_classes, dtype=np.float32), requires_grad=True)
    return ClassifierModel(body=model, head_weight=weight, head_bias=bias)


def finetune_classifier(
    model: EncoderModel,
    labeled: Dataset,
    epochs: int = 5,
    lr: float = 2e-5,
    seed: int = 0,
    batch_size: int = 8,
) -> ClassifierModel:
    """Train body + pooler + head with cross-entropy on hard labels."""
    if labeled.labels is None or len(labeled) == 0:
        raise DataError("fine-tuning needs a non-empty labeled dataset")
    labels = np.asarray(labeled.labels)
    if labels.min() < 0 or labels.max() >= NUM_SENTIMENT_CLASSES:
        raise DataError(
            f"labels must lie in [0, {NUM_SENTIMENT_CLASSES}), got range [{labels.min()}, {labels.max()}]"
        )
    classifier = attach_head(model, seed=seed)
    if epochs == 0:
        return classifier

    trainable = list(model.parameters()) + [
        ("classifier.weight", classifier.head_weight),
        ("classifier.bias", classifier.head_bias),
    ]
    optimizer = AdamW(trainable, lr=lr)
    for epoch in range(1, epochs + 1):
        epoch_loss = 0.0
        for batch in batches(labeled, batch_size, seed=seed, epoch=epoch):
            one_hot = np.zeros((len(batch), NUM_SENTIMENT_CLASSES), dtype=np.float32)
            one_hot[np.arange(len(batch)), batch.labels] = 1.0
            probs = T.softmax(classifier.logits(batch.token_ids, batch.mask), axis=-1)
            loss = T.soft_cross_entropy(Tensor(one_hot), probs, epsilon=1e-8)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            epoch_loss += loss.item() * len(batch)
        logger.debug("finetune epoch %d loss %.4f", epoch, epoch_loss / len(labeled))
    return classifier


def classify_dataset(classifier: ClassifierModel, dataset: Dataset, batch_size: int = 8) -> np.ndarray:
    preds: List[np.ndarray] = []
    for batch in batches(dataset, batch_size, seed=0, shuffle=False):
        preds.append(classifier.predict(batch.token_ids, batch.mask))
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def macro_f1(predictions, labels, num_classes: Optional[int] = None) -> float:
    """Unweighted mean of per-class F1 over the label universe.

    The universe defaults to 0..max(observed).  A class absent from both
    predictions and labels contributes F1 = 0 with a warning.
    """
    preds = np.asarray(predictions)
    golds = np.asarray(labels)
    if preds.shape != golds.shape:
        raise DataError(f"got {preds.size} predictions for {golds.size} labels")
    if preds.size == 0:
        raise DataError("macro_f1 of empty inputs is undefined")
    if num_classes is None:
        num_classes = int(max(preds.max(), golds.max())) + 1
    scores = []
    for cls in range(num_classes):
        tp = int(np.sum((preds == cls) & (golds == cls)))
        fp = int(np.sum((preds == cls) & (golds != cls)))
        fn = int(np.sum((preds != cls) & (golds == cls)))
        if tp + fp + fn == 0:
            warnings.warn(f"class {cls} absent from predictions and labels; scoring F1=0", stacklevel=2)
            scores.append(0.0)
        elif tp == 0:
            scores.append(0.0)
        else:
            precision = tp / (tp + fp)
            recall = tp / (tp + fn)
            scores.append(2.0 * precision * recall / (precision + recall))
    return float(np.mean(scores))


def benchmark_latency(
    model: EncoderModel,
    seq_len: int = 128,
    batch: int = 1,
    warmup: int = 2,
    iters: int = 5,
    seed: int = 0,
) -> Dict[str, float]:
    """Wall-clock milliseconds per forward pass after warmup discards."""
    if iters < 1:
        raise ParameterError(f"iters must be >= 1, got {iters}")
    rng = np.random.default_rng(seed)
    ids = rng.integers(0, model.config.vocab_size, size=(batch, seq_len))
    mask = np.ones((batch, seq_len), dtype=np.int64)
    for _ in range(warmup):
        model.forward(ids, mask)
    samples = []
    for _ in range(iters):
        start = time.perf_counter()
        model.forward(ids, mask)
        samples.append((time.perf_counter() - start) * 1000.0)
    arr = np.array(samples)
    return {
        "mean_ms": float(arr.mean()),
        "p50_ms": float(np.percentile(arr, 50)),
        "p95_ms": float(np.percentile(arr, 95)),
    }


@dataclass
class CompressionReport:
    teacher_params: int
    student_params: int
    teacher_size_mb: float
    student_size_mb: float
    reduction_pct: float

    def to_dict(self) -> Dict:
        return {
            "teacher": {"parameter_count": self.teacher_params, "size_mb": self.teacher_size_mb},
            "student": {"parameter_count": self.student_params, "size_mb": self.student_size_mb},
            "reduction_pct": self.reduction_pct,
        }

    def to_text(self) -> str:
        rows = [
            ("Model", "Parameter Count", "Size (MB)"),
            ("Teacher", f"{self.teacher_params:,}", f"{self.teacher_size_mb:.2f}"),
            ("Student", f"{self.student_params:,}", f"{self.student_size_mb:.2f}"),
        ]
        widths = [max(len(r[i]) for r in rows) for i in range(3)]
        lines = ["  ".join(cell.ljust(widths[i]) for i, cell in enumerate(row)).rstrip() for row in rows]
        lines.append(f"Parameter reduction: {self.reduction_pct:.2f}%")
        return "\n".join(lines)


def compression_report(teacher_cfg: ModelConfig, student_cfg: ModelConfig, bytes_per_param: int = 4) -> CompressionReport:
    teacher_params = count_parameters(teacher_cfg)
    student_params = count_parameters(student_cfg)
    return CompressionReport(
        teacher_params=teacher_params,
        student_params=student_params,
        teacher_size_mb=model_size_mb(teacher_params, bytes_per_param),
        student_size_mb=model_size_mb(student_params, bytes_per_param),
        reduction_pct=round(100.0 * (1.0 - student_params / teacher_params), 2),
    )
