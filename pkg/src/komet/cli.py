"""Operator command surface.

One command per process: distill, count-params, finetune, eval, bench,
report.  A single JSON configuration file feeds the pipeline; `--seed`
overrides the trainer seed, `--dry-run` validates and echoes the resolved
configuration without side effects.  Exit codes: 0 success, 1 runtime
abort, 2 invalid configuration or missing input.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path
from typing import Dict, Optional

import numpy as np

from . import checkpoint as ckpt
from . import data as D
from .distill import DistillationConfig, init_projection
from .errors import ConfigError, DataError, KometError
from .evalbench import (
    attach_head,
    benchmark_latency,
    classify_dataset,
    compression_report,
    finetune_classifier,
    macro_f1,
)
from .training import TrainerConfig, distill_train
from .transformer import ModelConfig, _PRESET_DIMS, build_model, count_parameters, preset_names

logger = logging.getLogger(__name__)

LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}


def _setup_logging() -> None:
    level = os.environ.get("KOMET_LOG", "info").lower()
    if level not in LOG_LEVELS:
        raise ConfigError(f"KOMET_LOG must be one of {sorted(LOG_LEVELS)}, got {level!r}")
    logging.basicConfig(level=LOG_LEVELS[level], format="%(levelname)s %(name)s: %(message)s")


# ---------------------------------------------------------------------------
# configuration


def _load_json(path: Path) -> Dict:
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from exc


def _build_dataclass(cls, section: Dict, where: str):
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(section) - known
    if unknown:
        raise ConfigError(f"{where}: unknown field(s) {sorted(unknown)}")
    try:
        return cls(**section)
    except ConfigError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def _model_config(section: Dict, where: str, presets: Dict[str, tuple], seed_override: Optional[int]) -> ModelConfig:
    section = dict(section)
    section.pop("checkpoint", None)
    preset = section.pop("preset", None)
    if preset is not None:
        if preset not in presets:
            raise ConfigError(f"{where}.preset: unknown preset {preset!r}; known: {sorted(presets)}")
        hidden, heads, layers, intermediate = presets[preset]
        section.setdefault("hidden_size", hidden)
        section.setdefault("num_heads", heads)
        section.setdefault("num_layers", layers)
        section.setdefault("intermediate_size", intermediate)
    for required in ("hidden_size", "num_heads", "num_layers", "intermediate_size"):
        if required not in section:
            raise ConfigError(f"{where}.{required}: required (directly or via a preset)")
    if seed_override is not None and "seed" not in section:
        section["seed"] = seed_override
    return _build_dataclass(ModelConfig, section, where)


def _resolve_presets(raw: Dict) -> Dict[str, tuple]:
    presets = dict(_PRESET_DIMS)
    for name, dims in raw.get("presets", {}).items():
        try:
            presets[name] = (
                int(dims["hidden_size"]),
                int(dims["num_heads"]),
                int(dims["num_layers"]),
                int(dims["intermediate_size"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"presets.{name}: needs hidden_size/num_heads/num_layers/intermediate_size") from exc
    return presets


@dataclasses.dataclass
class DataConfig:
    files: list
    tokenizer_mode: str = "whitespace"
    max_length: int = 128
    train_fraction: float = 0.8
    split_seed: int = 0
    per_language_split: bool = False

    def __post_init__(self):
        if not self.files:
            raise ConfigError("files must be a non-empty list")
        if self.tokenizer_mode not in ("char", "whitespace"):
            raise ConfigError(f"tokenizer_mode must be 'char' or 'whitespace', got {self.tokenizer_mode!r}")
        if self.max_length < 1:
            raise ConfigError(f"max_length must be >= 1, got {self.max_length}")
        if not 0.0 < self.train_fraction < 1.0:
            raise ConfigError(f"train_fraction must be in (0, 1), got {self.train_fraction}")


def _load_split_corpus(dcfg: DataConfig, base: Path):
    paths, caps, tags = [], [], []
    for entry in dcfg.files:
        if isinstance(entry, str):
            entry = {"path": entry}
        if "path" not in entry:
            raise ConfigError("data.files: each entry needs a 'path'")
        paths.append((base / entry["path"]).resolve() if not Path(entry["path"]).is_absolute() else Path(entry["path"]))
        caps.append(entry.get("max_sequences"))
        tags.append(entry.get("lang"))
    corpus = D.load_corpus(paths, max_sequences=caps, tags=tags)
    return D.split_corpus(corpus, dcfg.train_fraction, dcfg.split_seed, per_language=dcfg.per_language_split)


def _save_vocab(vocab: D.Vocab, path: Path) -> None:
    path.write_text(json.dumps({"mode": vocab.mode, "token_to_id": vocab.token_to_id}))


def _load_vocab(path: Path) -> D.Vocab:
    if not path.exists():
        raise FileNotFoundError(f"vocab file not found: {path}")
    raw = json.loads(path.read_text())
    return D.Vocab(token_to_id=raw["token_to_id"], mode=raw["mode"])


def _maybe_load_weights(model, section: Dict, base: Path) -> None:
    ckpt_path = section.get("checkpoint")
    if not ckpt_path:
        return
    full = base / ckpt_path if not Path(ckpt_path).is_absolute() else Path(ckpt_path)
    restored = ckpt.load_checkpoint(full)
    arrays = {k: v for k, v in restored["weights"].items() if k in model.params}
    missing = set(model.params) - set(arrays)
    if missing:
        raise ConfigError(f"checkpoint {full} lacks tensors for this config: {sorted(missing)[:3]}...")
    model.load_state(arrays)
    logger.info("loaded weights from %s", full)


# ---------------------------------------------------------------------------
# subcommands


def cmd_distill(args) -> int:
    config_path = Path(args.config)
    raw = _load_json(config_path)
    presets = _resolve_presets(raw)
    for section in ("model_teacher", "model_student", "data"):
        if section not in raw:
            raise ConfigError(f"{section}: required section missing")
    teacher_cfg = _model_config(raw["model_teacher"], "model_teacher", presets, args.seed)
    student_cfg = _model_config(raw["model_student"], "model_student", presets, None if args.seed is None else args.seed + 1)
    dist_cfg = _build_dataclass(DistillationConfig, raw.get("distill", {}), "distill")
    trainer_section = dict(raw.get("trainer", {}))
    if args.seed is not None:
        trainer_section["seed"] = args.seed
    train_cfg = _build_dataclass(TrainerConfig, trainer_section, "trainer")
    data_cfg = _build_dataclass(DataConfig, raw["data"], "data")

    resolved = {
        "model_teacher": dataclasses.asdict(teacher_cfg),
        "model_student": dataclasses.asdict(student_cfg),
        "distill": dataclasses.asdict(dist_cfg),
        "trainer": dataclasses.asdict(train_cfg),
        "data": dataclasses.asdict(data_cfg),
    }
    if args.dry_run:
        print(json.dumps(resolved, indent=2))
        return 0

    out_dir = Path(args.out)
    base = config_path.parent
    train_corpus, eval_corpus = _load_split_corpus(data_cfg, base)
    vocab = D.Vocab.build(train_corpus.sequences, mode=data_cfg.tokenizer_mode)
    for name, cfg in (("model_teacher", teacher_cfg), ("model_student", student_cfg)):
        if vocab.size > cfg.vocab_size:
            raise ConfigError(
                f"{name}.vocab_size {cfg.vocab_size} is smaller than the built vocabulary ({vocab.size})"
            )
    train_ds = D.tokenize_corpus(train_corpus, vocab, data_cfg.max_length)
    eval_ds = D.tokenize_corpus(eval_corpus, vocab, data_cfg.max_length)

    teacher = build_model(teacher_cfg)
    _maybe_load_weights(teacher, raw["model_teacher"], base)
    student = build_model(student_cfg)
    _maybe_load_weights(student, raw["model_student"], base)
    proj = init_projection(data_cfg.max_length, data_cfg.max_length, seed=train_cfg.seed)

    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.json").write_text(json.dumps(resolved, indent=2))
    _save_vocab(vocab, out_dir / "vocab.json")

    report = distill_train(teacher, student, proj, train_ds, eval_ds, dist_cfg, train_cfg, out_dir)

    summary = report.to_dict()
    summary["compression"] = compression_report(teacher_cfg, student_cfg).to_dict()
    (out_dir / "report.json").write_text(json.dumps(summary, indent=2))
    logger.info(
        "distillation finished: best epoch %d, eval loss %.6f", report.best_epoch, report.best_eval_loss
    )
    print(json.dumps({"best_epoch": report.best_epoch, "best_eval_loss": report.best_eval_loss}))
    return 0


def cmd_count_params(args) -> int:
    if args.preset:
        cfg = _model_config({"preset": args.preset}, "preset", _resolve_presets({}), None)
    elif args.config:
        raw = _load_json(Path(args.config))
        section = raw.get(f"model_{args.which}")
        if section is None:
            raise ConfigError(f"model_{args.which}: section missing from {args.config}")
        cfg = _model_config(section, f"model_{args.which}", _resolve_presets(raw), None)
    else:
        if None in (args.hidden, args.heads, args.layers, args.intermediate):
            raise ConfigError("need --preset, --config, or all of --hidden/--heads/--layers/--intermediate")
        cfg = ModelConfig(
            hidden_size=args.hidden,
            num_heads=args.heads,
            num_layers=args.layers,
            intermediate_size=args.intermediate,
            vocab_size=args.vocab,
            max_positions=args.max_positions,
            type_vocab_size=args.type_vocab,
            with_pooler=not args.no_pooler,
        )
    print(count_parameters(cfg))
    return 0


def cmd_finetune(args) -> int:
    config_path = Path(args.config)
    raw = _load_json(config_path)
    presets = _resolve_presets(raw)
    if "model_student" not in raw:
        raise ConfigError("model_student: required section missing")
    model_cfg = _model_config(raw["model_student"], "model_student", presets, args.seed)
    ft = raw.get("finetune", {})
    epochs = int(ft.get("epochs", 5))
    lr = float(ft.get("learning_rate", 2e-5))
    batch_size = int(ft.get("batch_size", 8))
    max_length = int(ft.get("max_length", 128))
    tokenizer_mode = ft.get("tokenizer_mode", "whitespace")
    train_tsv = ft.get("train_tsv")
    if not train_tsv:
        raise ConfigError("finetune.train_tsv: required")
    seed = args.seed if args.seed is not None else int(ft.get("seed", 0))

    base = config_path.parent
    texts, labels = D.load_labeled_tsv(base / train_tsv)
    vocab_path = ft.get("vocab")
    vocab = _load_vocab(base / vocab_path) if vocab_path else D.Vocab.build(texts, mode=tokenizer_mode)
    rows = [D.tokenize(t, vocab, max_length) for t in texts]
    dataset = D.Dataset(
        token_ids=np.stack([r[0] for r in rows]),
        mask=np.stack([r[1] for r in rows]),
        labels=np.array(labels, dtype=np.int64),
    )

    model = build_model(model_cfg)
    _maybe_load_weights(model, raw["model_student"], base)
    classifier = finetune_classifier(model, dataset, epochs=epochs, lr=lr, seed=seed, batch_size=batch_size)

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt.save_checkpoint(out_dir, classifier.state(), epoch=epochs, eval_loss=None)
    _save_vocab(vocab, out_dir / "vocab.json")
    (out_dir / "config.json").write_text(
        json.dumps({"model": dataclasses.asdict(model_cfg), "max_length": max_length}, indent=2)
    )
    train_f1 = macro_f1(classify_dataset(classifier, dataset, batch_size), dataset.labels, num_classes=3)
    print(json.dumps({"train_macro_f1": round(train_f1, 4), "classifier": str(out_dir)}))
    return 0


def cmd_eval(args) -> int:
    bundle = Path(args.classifier)
    meta_path = bundle / "config.json"
    if not meta_path.exists():
        raise FileNotFoundError(f"classifier bundle config not found: {meta_path}")
    meta = json.loads(meta_path.read_text())
    model_cfg = ModelConfig(**meta["model"])
    vocab = _load_vocab(bundle / "vocab.json")
    restored = ckpt.load_checkpoint(bundle)

    classifier = attach_head(build_model(model_cfg))
    classifier.load_state(restored["weights"])

    texts, labels = D.load_labeled_tsv(Path(args.tsv))
    rows = [D.tokenize(t, vocab, meta["max_length"]) for t in texts]
    dataset = D.Dataset(
        token_ids=np.stack([r[0] for r in rows]),
        mask=np.stack([r[1] for r in rows]),
        labels=np.array(labels, dtype=np.int64),
    )
    predictions = classify_dataset(classifier, dataset)
    score = macro_f1(predictions, dataset.labels, num_classes=3)
    print(json.dumps({"macro_f1": round(score, 4), "examples": len(dataset)}))
    return 0


def cmd_bench(args) -> int:
    cfg = _model_config({"preset": args.preset}, "preset", _resolve_presets({}), None)
    model = build_model(cfg)
    stats = benchmark_latency(
        model, seq_len=args.seq_len, batch=args.batch, warmup=args.warmup, iters=args.iters, seed=args.seed or 0
    )
    print(json.dumps({"preset": args.preset, **{k: round(v, 3) for k, v in stats.items()}}))
    return 0


def cmd_report(args) -> int:
    presets = _resolve_presets({})
    teacher = _model_config({"preset": args.teacher_preset}, "teacher", presets, None)
    student = _model_config({"preset": args.student_preset}, "student", presets, None)
    report = compression_report(teacher, student)
    if args.json:
        print(json.dumps(report.to_dict(), indent=2))
    else:
        print(report.to_text())
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="komet", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("distill", help="run the distillation training loop")
    p.add_argument("--config", required=True, help="JSON configuration file")
    p.add_argument("--out", default="runs/distill", help="output directory")
    p.add_argument("--seed", type=int, default=None, help="override trainer seed")
    p.add_argument("--dry-run", action="store_true", help="validate config and echo resolved defaults")
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("count-params", help="print the analytic parameter count")
    p.add_argument("--preset", choices=preset_names(), default=None)
    p.add_argument("--config", default=None)
    p.add_argument("--which", choices=("teacher", "student"), default="student")
    p.add_argument("--hidden", type=int, default=None)
    p.add_argument("--heads", type=int, default=None)
    p.add_argument("--layers", type=int, default=None)
    p.add_argument("--intermediate", type=int, default=None)
    p.add_argument("--vocab", type=int, default=250002)
    p.add_argument("--max-positions", type=int, default=514)
    p.add_argument("--type-vocab", type=int, default=1)
    p.add_argument("--no-pooler", action="store_true")
    p.set_defaults(func=cmd_count_params)

    p = sub.add_parser("finetune", help="fine-tune a 3-class classifier head")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default="runs/finetune")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("eval", help="score a classifier bundle on a labeled TSV")
    p.add_argument("--classifier", required=True, help="directory written by finetune")
    p.add_argument("--tsv", required=True, help="ID/Tweet/Label file")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="measure forward latency for a preset")
    p.add_argument("--preset", choices=preset_names(), required=True)
    p.add_argument("--seq-len", type=int, default=128)
    p.add_argument("--batch", type=int, default=1)
    p.add_argument("--warmup", type=int, default=2)
    p.add_argument("--iters", type=int, default=5)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("report", help="parameter/size/reduction comparison")
    p.add_argument("--teacher-preset", default="afroxlmr-large")
    p.add_argument("--student-preset", default="afroxlmr-comet")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        _setup_logging()
        return args.func(args)
    except (ConfigError, DataError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (KometError, FloatingPointError, OSError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
