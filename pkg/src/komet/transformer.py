"""Configurable transformer encoder.

Teacher and student are instances of the same family; a config fixes every
parameter shape, so parameter counts are analytic.  The forward pass exposes
logits from a weight-tied token head and, on request, per-layer attention
probability maps together with their head-pooled and flattened forms.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Dict, Iterator, List, Tuple

import numpy as np

from . import tensor as T
from .errors import ConfigError, InputError
from .tensor import Tensor


@dataclass(frozen=True)
class ModelConfig:
    hidden_size: int
    num_heads: int
    num_layers: int
    intermediate_size: int
    vocab_size: int = 250002
    max_positions: int = 514
    type_vocab_size: int = 1
    with_pooler: bool = True
    layer_norm_eps: float = 1e-5
    seed: int = 0

    def __post_init__(self):
        sizes = {
            "hidden_size": self.hidden_size,
            "num_heads": self.num_heads,
            "num_layers": self.num_layers,
            "intermediate_size": self.intermediate_size,
            "vocab_size": self.vocab_size,
            "max_positions": self.max_positions,
            "type_vocab_size": self.type_vocab_size,
        }
        for name, value in sizes.items():
            if value < 1:
                raise ConfigError(f"{name} must be >= 1, got {value}")
        if self.hidden_size % self.num_heads != 0:
            raise ConfigError(
                f"hidden_size {self.hidden_size} not divisible by num_heads {self.num_heads}"
            )


# Published model family dimensions (hidden, heads, layers, intermediate).
# The base- and mini-sized entries reconstruct the family's intermediate
# sizes; they are used for latency comparisons only.
_PRESET_DIMS = {
    "afroxlmr-large": (1024, 16, 24, 4096),
    "xlmr-comet-small": (384, 12, 6, 1536),
    "afroxlmr-comet": (256, 8, 6, 1024),
    "afroxlmr-base-sized": (768, 12, 12, 3072),
    "afroxlmr-mini-sized": (384, 12, 12, 1536),
}


def preset_config(name: str, seed: int = 0) -> ModelConfig:
    """Expand a preset name to a full ModelConfig."""
    try:
        hidden, heads, layers, intermediate = _PRESET_DIMS[name]
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; known: {sorted(_PRESET_DIMS)}") from None
    return ModelConfig(hidden, heads, layers, intermediate, seed=seed)


def preset_names() -> List[str]:
    return sorted(_PRESET_DIMS)


@dataclass
class AttentionMap:
    """One layer's attention probabilities and their derived forms."""

    per_head: Tensor  # [batch, heads, L, L]
    pooled: Tensor  # [batch, L, L], mean over heads
    flat: Tensor  # [batch, L*L], row-major

    @classmethod
    def from_per_head(cls, per_head: Tensor) -> "AttentionMap":
        pooled = T.mean(per_head, axis=1)
        return cls(per_head=per_head, pooled=pooled, flat=T.flatten_trailing(pooled))


class EncoderModel:
    """Encoder with learned word/position/type embeddings, post-norm
    self-attention blocks, a tied token head, and an optional pooler."""

    def __init__(self, config: ModelConfig, params: Dict[str, Tensor]):
        self.config = config
        self.params = params

    # -- parameter access ---------------------------------------------------

    def parameters(self) -> Iterator[Tuple[str, Tensor]]:
        return iter(self.params.items())

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def freeze(self) -> None:
        for p in self.params.values():
            p.requires_grad = False

    def state(self) -> Dict[str, np.ndarray]:
        return {name: p.data for name, p in self.params.items()}

    def load_state(self, arrays: Dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(arrays)
        if missing:
            raise ConfigError(f"state is missing tensors: {sorted(missing)[:3]}...")
        for name, p in self.params.items():
            arr = np.asarray(arrays[name], dtype=np.float32)
            if arr.shape != p.shape:
                raise ConfigError(f"state tensor {name} has shape {arr.shape}, expected {p.shape}")
            p.data = arr

    # -- forward ------------------------------------------------------------

    def _validate_inputs(self, token_ids: np.ndarray, attention_mask: np.ndarray) -> None:
        cfg = self.config
        if token_ids.ndim != 2 or attention_mask.shape != token_ids.shape:
            raise InputError(
                f"token_ids {token_ids.shape} and attention_mask {attention_mask.shape} "
                "must be matching [batch, length] matrices"
            )
        if token_ids.shape[1] > cfg.max_positions:
            raise InputError(
                f"sequence length {token_ids.shape[1]} exceeds max_positions {cfg.max_positions}"
            )
        if token_ids.size and (token_ids.min() < 0 or token_ids.max() >= cfg.vocab_size):
            raise InputError(
                f"token ids must lie in [0, {cfg.vocab_size}), got range "
                f"[{token_ids.min()}, {token_ids.max()}]"
            )
        if not np.isin(attention_mask, (0, 1)).all():
            raise InputError("attention_mask entries must be 0 or 1")
        if (attention_mask.sum(axis=1) == 0).any():
            raise InputError("attention over a fully masked sequence is ill-posed")

    def encode(
        self,
        token_ids: np.ndarray,
        attention_mask: np.ndarray,
        collect_attention: bool = False,
    ) -> Tuple[Tensor, List[AttentionMap]]:
        """Hidden states [batch, L, hidden] plus per-layer attention maps."""
        token_ids = np.asarray(token_ids)
        attention_mask = np.asarray(attention_mask)
        self._validate_inputs(token_ids, attention_mask)
        cfg = self.config
        p = self.params
        batch, length = token_ids.shape
        head_dim = cfg.hidden_size // cfg.num_heads
        scale = 1.0 / math.sqrt(head_dim)

        h = T.embedding_lookup(p["embeddings.word"], token_ids)
        h = h + T.embedding_lookup(p["embeddings.position"], np.arange(length))
        h = h + T.embedding_lookup(p["embeddings.token_type"], np.zeros_like(token_ids))
        h = T.layer_norm(h, p["embeddings.norm.gain"], p["embeddings.norm.shift"], cfg.layer_norm_eps)

        # masked key positions get a large negative additive bias pre-softmax
        bias = ((attention_mask.astype(np.float32) - 1.0) * 1e9).reshape(batch, 1, 1, length)
        mask_bias = Tensor(bias)

        attentions: List[AttentionMap] = []
        for i in range(cfg.num_layers):
            pref = f"layers.{i}"

            def heads(t: Tensor) -> Tensor:
                return T.transpose(T.reshape(t, (batch, length, cfg.num_heads, head_dim)), (0, 2, 1, 3))

            q = heads(T.linear(h, p[f"{pref}.attention.query.weight"], p[f"{pref}.attention.query.bias"]))
            k = heads(T.linear(h, p[f"{pref}.attention.key.weight"], p[f"{pref}.attention.key.bias"]))
            v = heads(T.linear(h, p[f"{pref}.attention.value.weight"], p[f"{pref}.attention.value.bias"]))

            scores = T.matmul(q, T.transpose(k, (0, 1, 3, 2))) * scale + mask_bias
            probs = T.softmax(scores, axis=-1)
            if collect_attention:
                attentions.append(AttentionMap.from_per_head(probs))

            ctx = T.reshape(T.transpose(T.matmul(probs, v), (0, 2, 1, 3)), (batch, length, cfg.hidden_size))
            attn_out = T.linear(ctx, p[f"{pref}.attention.output.weight"], p[f"{pref}.attention.output.bias"])
            h = T.layer_norm(h + attn_out, p[f"{pref}.norm1.gain"], p[f"{pref}.norm1.shift"], cfg.layer_norm_eps)

            inter = T.gelu(T.linear(h, p[f"{pref}.ffn.intermediate.weight"], p[f"{pref}.ffn.intermediate.bias"]))
            ffn_out = T.linear(inter, p[f"{pref}.ffn.output.weight"], p[f"{pref}.ffn.output.bias"])
            h = T.layer_norm(h + ffn_out, p[f"{pref}.norm2.gain"], p[f"{pref}.norm2.shift"], cfg.layer_norm_eps)

        return h, attentions

    def forward(
        self,
        token_ids: np.ndarray,
        attention_mask: np.ndarray,
        collect_attention: bool = False,
    ) -> Tuple[Tensor, List[AttentionMap]]:
        """Token logits [batch, L, vocab] via the tied embedding head."""
        h, attentions = self.encode(token_ids, attention_mask, collect_attention)
        logits = T.matmul(h, T.transpose(self.params["embeddings.word"], (1, 0)))
        return logits, attentions

    def pooled(self, hidden: Tensor) -> Tensor:
        """First-position representation through the pooler affine + tanh."""
        if not self.config.with_pooler:
            raise ConfigError("model was built without a pooler")
        first = _first_position(hidden)
        return T.tanh(T.linear(first, self.params["pooler.weight"], self.params["pooler.bias"]))


def _first_position(hidden: Tensor) -> Tensor:
    batch, length, width = hidden.shape
    picker = np.zeros((1, length), dtype=np.float32)
    picker[0, 0] = 1.0
    return T.reshape(T.matmul(Tensor(picker), hidden), (batch, width))


def build_model(config: ModelConfig) -> EncoderModel:
    """Instantiate all weights from a seeded normal(0, 0.02); biases zero,
    layer-norm gains one.  Two builds with the same seed are bit-identical."""
    rng = np.random.default_rng(config.seed)
    h, inter = config.hidden_size, config.intermediate_size

    def normal(*shape):
        return Tensor(rng.standard_normal(shape, dtype=np.float32) * np.float32(0.02), requires_grad=True)

    def zeros(*shape):
        return Tensor(np.zeros(shape, dtype=np.float32), requires_grad=True)

    def ones(*shape):
        return Tensor(np.ones(shape, dtype=np.float32), requires_grad=True)

    params: Dict[str, Tensor] = {}
    params["embeddings.word"] = normal(config.vocab_size, h)
    params["embeddings.position"] = normal(config.max_positions, h)
    params["embeddings.token_type"] = normal(config.type_vocab_size, h)
    params["embeddings.norm.gain"] = ones(h)
    params["embeddings.norm.shift"] = zeros(h)
    for i in range(config.num_layers):
        pref = f"layers.{i}"
        for part in ("query", "key", "value", "output"):
            params[f"{pref}.attention.{part}.weight"] = normal(h, h)
            params[f"{pref}.attention.{part}.bias"] = zeros(h)
        params[f"{pref}.norm1.gain"] = ones(h)
        params[f"{pref}.norm1.shift"] = zeros(h)
        params[f"{pref}.ffn.intermediate.weight"] = normal(inter, h)
        params[f"{pref}.ffn.intermediate.bias"] = zeros(inter)
        params[f"{pref}.ffn.output.weight"] = normal(h, inter)
        params[f"{pref}.ffn.output.bias"] = zeros(h)
        params[f"{pref}.norm2.gain"] = ones(h)
        params[f"{pref}.norm2.shift"] = zeros(h)
    if config.with_pooler:
        params["pooler.weight"] = normal(h, h)
        params["pooler.bias"] = zeros(h)
    return EncoderModel(config, params)


def count_parameters(config: ModelConfig) -> int:
    """Analytic parameter count; must equal the built model's exact tally."""
    h, inter = config.hidden_size, config.intermediate_size
    embeddings = (config.vocab_size + config.max_positions + config.type_vocab_size) * h + 2 * h
    attention = 4 * (h * h + h)
    norms = 2 * 2 * h
    ffn = (inter * h + inter) + (h * inter + h)
    per_layer = attention + norms + ffn
    pooler = (h * h + h) if config.with_pooler else 0
    return embeddings + config.num_layers * per_layer + pooler


def model_size_mb(param_count: int, bytes_per_param: int = 4) -> float:
    """Size in MiB at the given width, reported to 2 decimals."""
    if param_count <= 0 or bytes_per_param <= 0:
        raise ConfigError("param_count and bytes_per_param must be positive")
    return round(param_count * bytes_per_param / 2**20, 2)


def with_seed(config: ModelConfig, seed: int) -> ModelConfig:
    return replace(config, seed=seed)
