"""Knowledge distillation engine: compact transformer students trained to
mimic a larger teacher via temperature-scaled soft targets plus mean-pooled,
projected attention matching."""

__version__ = "0.1.0"

from .data import Batch, Corpus, Dataset, Vocab, batches, load_corpus, split_corpus, tokenize  # noqa: F401
from .distill import (  # noqa: F401
    DistillationConfig,
    LossBreakdown,
    ProjectionLayer,
    attention_loss,
    hybrid_loss,
    init_projection,
    pool_attention,
    soft_target_loss,
)
from .evalbench import benchmark_latency, compression_report, finetune_classifier, macro_f1  # noqa: F401
from .tensor import Tensor, grad_check  # noqa: F401
from .training import AdamW, EarlyStopping, TrainerConfig, TrainReport, distill_train, evaluate  # noqa: F401
from .transformer import (  # noqa: F401
    AttentionMap,
    EncoderModel,
    ModelConfig,
    build_model,
    count_parameters,
    model_size_mb,
    preset_config,
)
