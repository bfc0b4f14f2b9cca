"""Corpus ingestion, vocabulary construction, tokenization, and batching.

Corpora are plain text, one sequence per line.  At desk scale the
vocabulary is built from the training split only (char or whitespace
tokens), so evaluation-only tokens map to the unknown id.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigError, DataError

logger = logging.getLogger(__name__)

PAD_ID = 0
UNK_ID = 1

# canonical 3-class sentiment label ids
LABEL_IDS = {"negative": 0, "neutral": 1, "positive": 2}


@dataclass
class Corpus:
    sequences: List[str]
    tags: Optional[List[str]] = None  # per-sequence language tag
    dropped: int = 0

    def __len__(self) -> int:
        return len(self.sequences)


def load_corpus(
    paths: Sequence,
    max_sequences: Optional[Sequence[Optional[int]]] = None,
    tags: Optional[Sequence[Optional[str]]] = None,
) -> Corpus:
    """Concatenate line-per-sequence files in order, dropping empty lines.

    max_sequences caps each file after empties are removed (the per-language
    cap knob).  tags attaches one language tag per file.
    """
    paths = [Path(p) for p in paths]
    if max_sequences is not None and len(max_sequences) != len(paths):
        raise ConfigError("max_sequences must align with paths")
    if tags is not None and len(tags) != len(paths):
        raise ConfigError("tags must align with paths")

    sequences: List[str] = []
    seq_tags: List[str] = []
    dropped = 0
    for idx, path in enumerate(paths):
        if not path.exists():
            raise FileNotFoundError(f"corpus file not found: {path}")
        raw = path.read_bytes()
        kept = 0
        cap = max_sequences[idx] if max_sequences is not None else None
        lines = raw.split(b"\n")
        if lines and lines[-1] == b"":
            lines.pop()  # artifact of a trailing newline, not an empty line
        for lineno, line in enumerate(lines, start=1):
            try:
                text = line.decode("utf-8").strip()
            except UnicodeDecodeError as exc:
                raise DataError(f"{path}: invalid UTF-8 on line {lineno}: {exc}") from exc
            if not text:
                dropped += 1
                continue
            if cap is not None and kept >= cap:
                continue
            sequences.append(text)
            seq_tags.append(tags[idx] if tags is not None and tags[idx] else path.stem)
            kept += 1
    if dropped:
        logger.info("dropped %d empty line(s) while loading corpus", dropped)
    return Corpus(sequences=sequences, tags=seq_tags, dropped=dropped)


def split_corpus(
    corpus: Corpus, train_fraction: float, seed: int, per_language: bool = False
) -> Tuple[Corpus, Corpus]:
    """Seeded shuffle then prefix split; train gets floor(fraction * N).

    With per_language=True each tag group is split separately and the
    groups concatenated, otherwise the split is global over the pool.
    """
    if not 0.0 < train_fraction < 1.0:
        raise ConfigError(f"train_fraction must be in (0, 1), got {train_fraction}")
    if len(corpus) < 2:
        raise ConfigError(f"need at least 2 sequences to split, got {len(corpus)}")

    def split_indices(indices: np.ndarray, rng) -> Tuple[np.ndarray, np.ndarray]:
        shuffled = rng.permutation(indices)
        cut = int(train_fraction * len(shuffled))
        return shuffled[:cut], shuffled[cut:]

    rng = np.random.default_rng(seed)
    if per_language and corpus.tags is not None:
        train_idx: List[int] = []
        eval_idx: List[int] = []
        for tag in sorted(set(corpus.tags)):
            group = np.array([i for i, t in enumerate(corpus.tags) if t == tag])
            tr, ev = split_indices(group, rng)
            train_idx.extend(tr.tolist())
            eval_idx.extend(ev.tolist())
    else:
        tr, ev = split_indices(np.arange(len(corpus)), rng)
        train_idx, eval_idx = tr.tolist(), ev.tolist()

    def subset(idx: List[int]) -> Corpus:
        return Corpus(
            sequences=[corpus.sequences[i] for i in idx],
            tags=[corpus.tags[i] for i in idx] if corpus.tags else None,
        )

    return subset(train_idx), subset(eval_idx)


@dataclass
class Vocab:
    token_to_id: Dict[str, int]
    mode: str  # "char" | "whitespace"

    @property
    def size(self) -> int:
        return len(self.token_to_id) + 2  # pad and unk are reserved

    @classmethod
    def build(cls, sequences: Sequence[str], mode: str = "whitespace") -> "Vocab":
        if mode not in ("char", "whitespace"):
            raise ConfigError(f"tokenizer mode must be 'char' or 'whitespace', got {mode!r}")
        tokens = set()
        for text in sequences:
            tokens.update(_split(text, mode))
        mapping = {tok: i + 2 for i, tok in enumerate(sorted(tokens))}
        return cls(token_to_id=mapping, mode=mode)

    def lookup(self, token: str) -> int:
        return self.token_to_id.get(token, UNK_ID)


def _split(text: str, mode: str) -> List[str]:
    return list(text) if mode == "char" else text.split()


def tokenize(text: str, vocab: Vocab, max_len: int) -> Tuple[np.ndarray, np.ndarray]:
    """Map text to (ids, mask) of fixed length: truncate, then right-pad."""
    if max_len < 1:
        raise ConfigError(f"max_len must be >= 1, got {max_len}")
    ids = [vocab.lookup(tok) for tok in _split(text, vocab.mode)][:max_len]
    if not ids:
        logger.warning("tokenized an empty sequence; emitting all-pad row")
    mask = [1] * len(ids) + [0] * (max_len - len(ids))
    ids = ids + [PAD_ID] * (max_len - len(ids))
    return np.array(ids, dtype=np.int64), np.array(mask, dtype=np.int64)


@dataclass
class Dataset:
    """Tokenized sequences ready for batching."""

    token_ids: np.ndarray  # [N, L] int64
    mask: np.ndarray  # [N, L] in {0, 1}
    labels: Optional[np.ndarray] = None  # [N] class ids, classification only

    def __len__(self) -> int:
        return self.token_ids.shape[0]

    @property
    def seq_len(self) -> int:
        return self.token_ids.shape[1]


def tokenize_corpus(corpus: Corpus, vocab: Vocab, max_len: int) -> Dataset:
    rows = [tokenize(text, vocab, max_len) for text in corpus.sequences]
    ids = np.stack([r[0] for r in rows]) if rows else np.zeros((0, max_len), dtype=np.int64)
    mask = np.stack([r[1] for r in rows]) if rows else np.zeros((0, max_len), dtype=np.int64)
    return Dataset(token_ids=ids, mask=mask)


@dataclass
class Batch:
    token_ids: np.ndarray  # [b, L]
    mask: np.ndarray  # [b, L]
    labels: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return self.token_ids.shape[0]


def batches(
    dataset: Dataset, batch_size: int, seed: int, epoch: int = 0, shuffle: bool = True
) -> Iterator[Batch]:
    """Yield shuffled batches; the final partial batch is emitted.

    The permutation depends only on (seed, epoch), so different batch sizes
    walk the examples in the same order.
    """
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    n = len(dataset)
    order = np.random.default_rng((seed, epoch)).permutation(n) if shuffle else np.arange(n)
    for start in range(0, n, batch_size):
        idx = order[start : start + batch_size]
        yield Batch(
            token_ids=dataset.token_ids[idx],
            mask=dataset.mask[idx],
            labels=dataset.labels[idx] if dataset.labels is not None else None,
        )


def load_labeled_tsv(path) -> Tuple[List[str], List[int]]:
    """Read `ID<TAB>Tweet<TAB>Label` rows; labels map via LABEL_IDS."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"labeled file not found: {path}")
    texts: List[str] = []
    labels: List[int] = []
    with path.open(encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n").split("\t")
        if [h.strip().lower() for h in header] != ["id", "tweet", "label"]:
            raise DataError(f"{path}: expected header 'ID\\tTweet\\tLabel', got {header}")
        for lineno, line in enumerate(fh, start=2):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise DataError(f"{path}:{lineno}: expected 3 tab-separated fields, got {len(parts)}")
            _, tweet, label = parts
            key = label.strip().lower()
            if key not in LABEL_IDS:
                raise DataError(f"{path}:{lineno}: unknown label {label!r}")
            texts.append(tweet)
            labels.append(LABEL_IDS[key])
    return texts, labels
