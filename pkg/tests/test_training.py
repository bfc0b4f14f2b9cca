"""Optimizer formulas, early-stop traces, checkpointing, determinism, and
the training-loop contracts."""

import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from komet import checkpoint as ckpt
from komet.data import Dataset
from komet.distill import DistillationConfig, init_projection
from komet.errors import ConfigError
from komet.tensor import Tensor
from komet.training import (
    AdamW,
    EarlyStopping,
    TrainerConfig,
    apply_weights,
    distill_train,
    evaluate,
)
from komet.transformer import ModelConfig, build_model

VOCAB, LENGTH = 13, 6


def toy_models(teacher_seed=0, student_seed=1, student_hidden=8):
    teacher = build_model(
        ModelConfig(16, 2, 2, 32, vocab_size=VOCAB, max_positions=LENGTH + 2, seed=teacher_seed)
    )
    student = build_model(
        ModelConfig(student_hidden, 2, 2, 2 * student_hidden, vocab_size=VOCAB, max_positions=LENGTH + 2, seed=student_seed)
    )
    return teacher, student


def toy_dataset(n, seed=0):
    rng = np.random.default_rng(seed)
    ids = rng.integers(2, VOCAB, size=(n, LENGTH))
    mask = np.ones((n, LENGTH), dtype=np.int64)
    return Dataset(token_ids=ids, mask=mask)


def quick_tcfg(**kw):
    base = dict(epochs=2, batch_size=4, grad_accum_steps=1, logging_steps=2, seed=0)
    base.update(kw)
    return TrainerConfig(**base)


# ---------------------------------------------------------------------------
# AdamW


def test_adamw_zero_grad_step_is_pure_decay():
    p = Tensor(np.array([1.0, -2.0], dtype=np.float32), requires_grad=True)
    opt = AdamW([("p", p)], lr=0.1, weight_decay=0.01)
    p.grad = np.zeros(2, dtype=np.float32)
    opt.step()
    np.testing.assert_allclose(p.data, np.array([1.0, -2.0]) * (1 - 0.1 * 0.01), rtol=1e-6)


def test_adamw_first_step_is_signed_lr():
    p = Tensor(np.array([0.0, 0.0], dtype=np.float32), requires_grad=True)
    opt = AdamW([("p", p)], lr=1e-3, weight_decay=0.0)
    g = np.array([0.5, -0.25], dtype=np.float32)
    p.grad = g.copy()
    opt.step()
    expected = -1e-3 * g / (np.abs(g) + 1e-8)
    np.testing.assert_allclose(p.data, expected, rtol=1e-5)


def test_adamw_moments_track_torch_formula():
    rng = np.random.default_rng(0)
    arr = rng.standard_normal(5).astype(np.float32)
    p = Tensor(arr.copy(), requires_grad=True)
    opt = AdamW([("p", p)], lr=1e-2, weight_decay=0.01)
    ref = arr.astype(np.float64).copy()
    m = np.zeros(5)
    v = np.zeros(5)
    for t in range(1, 6):
        g = rng.standard_normal(5).astype(np.float32)
        p.grad = g.copy()
        opt.step()
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        m_hat = m / (1 - 0.9**t)
        v_hat = v / (1 - 0.999**t)
        ref = ref - 1e-2 * m_hat / (np.sqrt(v_hat) + 1e-8) - 1e-2 * 0.01 * ref
        np.testing.assert_allclose(p.data, ref, rtol=1e-4, atol=1e-6)


def test_adamw_determinism():
    results = []
    for _ in range(2):
        rng = np.random.default_rng(3)
        p = Tensor(np.ones(4, dtype=np.float32), requires_grad=True)
        opt = AdamW([("p", p)], lr=1e-3)
        for _ in range(10):
            p.grad = rng.standard_normal(4).astype(np.float32)
            opt.step()
        results.append(p.data.copy())
    np.testing.assert_array_equal(results[0], results[1])


def test_adamw_aborts_on_nan_grad():
    p = Tensor(np.ones(2, dtype=np.float32), requires_grad=True)
    opt = AdamW([("p", p)], lr=1e-3)
    p.grad = np.array([np.nan, 0.0], dtype=np.float32)
    with pytest.raises(FloatingPointError, match="p"):
        opt.step()


def test_adamw_state_round_trip():
    p = Tensor(np.ones(3, dtype=np.float32), requires_grad=True)
    opt = AdamW([("p", p)], lr=1e-3)
    p.grad = np.array([1.0, 2.0, 3.0], dtype=np.float32)
    opt.step()
    state = opt.state()

    q = Tensor(np.ones(3, dtype=np.float32), requires_grad=True)
    opt2 = AdamW([("p", q)], lr=1e-3)
    opt2.load_state(state)
    assert opt2.t == 1
    np.testing.assert_array_equal(opt2.m["p"], opt.m["p"])
    np.testing.assert_array_equal(opt2.v["p"], opt.v["p"])


# ---------------------------------------------------------------------------
# early stopping


def test_early_stop_trace_from_training_table():
    stopper = EarlyStopping(patience=3, threshold=0.01)
    decisions = [stopper.update(v) for v in (1.00, 0.995, 0.990, 0.985)]
    assert decisions == [False, False, False, True]


def test_early_stop_strict_improvements_reset():
    stopper = EarlyStopping(patience=3, threshold=0.01)
    for v in (1.00, 0.90, 0.80):
        assert not stopper.update(v)
        assert stopper.stale_evals == 0


def test_early_stop_exact_threshold_is_stale():
    # exactly representable values so best - current == threshold precisely
    stopper = EarlyStopping(patience=3, threshold=0.5)
    stopper.update(2.0)
    stopper.update(1.5)  # improvement == threshold, strict > required
    assert stopper.stale_evals == 1


def test_early_stop_best_tracks_any_improvement():
    stopper = EarlyStopping(patience=5, threshold=0.01)
    for v in (1.00, 0.995, 0.991):
        stopper.update(v)
    assert stopper.best_loss == pytest.approx(0.991)
    assert stopper.stale_evals == 2


def test_early_stop_rejects_nan():
    stopper = EarlyStopping(patience=1, threshold=0.0)
    with pytest.raises(ConfigError):
        stopper.update(math.nan)


@settings(max_examples=80, deadline=None)
@given(losses=st.lists(st.floats(0.1, 10.0), min_size=1, max_size=30))
def test_early_stop_counter_resets_iff_threshold_improvement(losses):
    stopper = EarlyStopping(patience=10**6, threshold=0.05)
    best = math.inf
    stale = 0
    for value in losses:
        stopper.update(value)
        if best - value > 0.05:
            stale = 0
        else:
            stale += 1
        best = min(best, value)
        assert stopper.stale_evals == stale
        assert stopper.best_loss == best


# ---------------------------------------------------------------------------
# checkpoint serialization


def test_checkpoint_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(4)
    weights = {
        "a.weight": rng.standard_normal((3, 4)).astype(np.float32),
        "b.bias": rng.standard_normal(7).astype(np.float32),
    }
    opt_state = {"step": 5, "tensors": {"m.a.weight": rng.standard_normal((3, 4)).astype(np.float32)}}
    ckpt.save_checkpoint(tmp_path / "c", weights, epoch=2, eval_loss=0.125, optimizer_state=opt_state)
    loaded = ckpt.load_checkpoint(tmp_path / "c")
    assert loaded["epoch"] == 2 and loaded["eval_loss"] == 0.125
    for name, arr in weights.items():
        np.testing.assert_array_equal(loaded["weights"][name], arr)
    assert loaded["optimizer"]["step"] == 5
    np.testing.assert_array_equal(loaded["optimizer"]["tensors"]["m.a.weight"], opt_state["tensors"]["m.a.weight"])


def test_checkpoint_manifest_lists_offsets(tmp_path):
    weights = {"x": np.zeros((2, 2), dtype=np.float32), "y": np.ones(3, dtype=np.float32)}
    ckpt.save_checkpoint(tmp_path / "c", weights, epoch=0, eval_loss=1.0)
    manifest = json.loads((tmp_path / "c" / "manifest.json").read_text())
    entries = {e["name"]: e for e in manifest["weights"]}
    assert entries["x"]["offset"] == 0 and entries["x"]["shape"] == [2, 2]
    assert entries["y"]["offset"] == 16  # 4 floats later
    blob = (tmp_path / "c" / "weights.bin").read_bytes()
    assert len(blob) == (4 + 3) * 4


# ---------------------------------------------------------------------------
# distill_train behavior


def test_distill_train_rejects_empty_and_mismatched_data(tmp_path):
    teacher, student = toy_models()
    proj = init_projection(LENGTH, LENGTH)
    dcfg = DistillationConfig()
    empty = Dataset(token_ids=np.zeros((0, LENGTH), dtype=np.int64), mask=np.zeros((0, LENGTH), dtype=np.int64))
    with pytest.raises(ConfigError):
        distill_train(teacher, student, proj, empty, toy_dataset(4), dcfg, quick_tcfg(), tmp_path)
    with pytest.raises(ConfigError):
        distill_train(teacher, student, init_projection(3, 3), toy_dataset(8), toy_dataset(4), dcfg, quick_tcfg(), tmp_path)


def test_distill_train_teacher_unchanged_and_series_shapes(tmp_path):
    teacher, student = toy_models()
    before = {k: v.copy() for k, v in teacher.state().items()}
    proj = init_projection(LENGTH, LENGTH)
    report = distill_train(
        teacher, student, proj, toy_dataset(24), toy_dataset(8, seed=1),
        DistillationConfig(), quick_tcfg(), tmp_path,
    )
    for name, arr in teacher.state().items():
        np.testing.assert_array_equal(arr, before[name], err_msg=name)
    assert len(report.train_losses) == report.epochs_run
    assert len(report.eval_losses) == report.epochs_run + 1  # baseline at index 0


def test_distill_train_metrics_stream_schema(tmp_path):
    teacher, student = toy_models()
    proj = init_projection(LENGTH, LENGTH)
    distill_train(
        teacher, student, proj, toy_dataset(16), toy_dataset(8, seed=1),
        DistillationConfig(), quick_tcfg(logging_steps=2), tmp_path,
    )
    lines = [json.loads(l) for l in (tmp_path / "metrics.jsonl").read_text().splitlines()]
    assert lines, "metrics stream is empty"
    for record in lines:
        for key in ("step", "epoch", "loss_total", "loss_distill", "loss_attention", "lr", "wall_ms"):
            assert key in record
    assert any(r["phase"] == "train" for r in lines)
    assert sum(r["phase"] == "eval" for r in lines) == 3  # baseline + 2 epochs


def test_distill_train_checkpoint_layout_and_best_marker(tmp_path):
    teacher, student = toy_models()
    proj = init_projection(LENGTH, LENGTH)
    report = distill_train(
        teacher, student, proj, toy_dataset(16), toy_dataset(8, seed=1),
        DistillationConfig(), quick_tcfg(epochs=3), tmp_path,
    )
    best = json.loads((tmp_path / "best").read_text())
    assert best["epoch"] == report.best_epoch
    best_dir = tmp_path / best["checkpoint"]
    assert (best_dir / "manifest.json").exists()
    assert (best_dir / "weights.bin").exists()
    assert (best_dir / "optimizer.bin").exists()


def test_distill_train_retention_limit_keeps_best(tmp_path):
    teacher, student = toy_models()
    proj = init_projection(LENGTH, LENGTH)
    report = distill_train(
        teacher, student, proj, toy_dataset(16), toy_dataset(8, seed=1),
        DistillationConfig(), quick_tcfg(epochs=6, save_total_limit=3, early_stop_patience=20), tmp_path,
    )
    dirs = sorted(p.name for p in tmp_path.glob("ckpt-*"))
    assert len(dirs) <= 3
    assert f"ckpt-{report.best_epoch}" in dirs


def test_distill_train_restores_best_eval_loss(tmp_path):
    teacher, student = toy_models()
    proj = init_projection(LENGTH, LENGTH)
    dcfg = DistillationConfig()
    tcfg = quick_tcfg(epochs=3)
    eval_data = toy_dataset(8, seed=1)
    report = distill_train(teacher, student, proj, toy_dataset(24), eval_data, dcfg, tcfg, tmp_path)
    re_eval = evaluate(teacher, student, proj, eval_data, dcfg, tcfg.batch_size)
    assert re_eval["loss_total"] == pytest.approx(min(report.eval_losses), abs=1e-7)
    assert report.best_eval_loss == pytest.approx(min(report.eval_losses), abs=0.0)


def test_distill_train_deterministic_across_runs(tmp_path):
    losses = []
    weights = []
    for run in range(2):
        teacher, student = toy_models()
        proj = init_projection(LENGTH, LENGTH)
        report = distill_train(
            teacher, student, proj, toy_dataset(16), toy_dataset(8, seed=1),
            DistillationConfig(), quick_tcfg(), tmp_path / str(run),
        )
        losses.append((report.train_losses, report.eval_losses))
        weights.append((tmp_path / str(run) / "ckpt-2" / "weights.bin").read_bytes())
    assert losses[0] == losses[1]
    assert weights[0] == weights[1]


def test_distill_train_checkpoint_reload_reproduces_eval(tmp_path):
    teacher, student = toy_models()
    proj = init_projection(LENGTH, LENGTH)
    dcfg = DistillationConfig()
    eval_data = toy_dataset(8, seed=1)
    distill_train(teacher, student, proj, toy_dataset(16), eval_data, dcfg, quick_tcfg(), tmp_path)
    loss_before = evaluate(teacher, student, proj, eval_data, dcfg, 4)["loss_total"]

    _, fresh_student = toy_models(student_seed=42)
    fresh_proj = init_projection(LENGTH, LENGTH)
    best = json.loads((tmp_path / "best").read_text())
    restored = ckpt.load_checkpoint(tmp_path / best["checkpoint"])
    apply_weights(fresh_student, fresh_proj, restored["weights"])
    loss_after = evaluate(teacher, fresh_student, fresh_proj, eval_data, dcfg, 4)["loss_total"]
    assert loss_after == loss_before  # bit-exact forward after reload


def test_identical_teacher_student_stops_after_patience(tmp_path):
    teacher = build_model(ModelConfig(16, 2, 2, 32, vocab_size=VOCAB, max_positions=LENGTH + 2, seed=0))
    student = build_model(ModelConfig(16, 2, 2, 32, vocab_size=VOCAB, max_positions=LENGTH + 2, seed=0))
    proj = init_projection(LENGTH, LENGTH)
    dcfg = DistillationConfig(alpha=1.0, loss_mode="kl")
    tcfg = quick_tcfg(epochs=10, early_stop_patience=3)
    report = distill_train(teacher, student, proj, toy_dataset(16), toy_dataset(8, seed=1), dcfg, tcfg, tmp_path)
    assert report.eval_losses[0] == pytest.approx(0.0, abs=1e-6)
    assert report.stopped_early
    assert report.epochs_run == 3


def test_accumulation_matches_single_large_batch(tmp_path):
    outcomes = []
    for batch_size, accum in ((8, 1), (4, 2)):
        teacher, student = toy_models()
        proj = init_projection(LENGTH, LENGTH)
        tcfg = quick_tcfg(epochs=1, batch_size=batch_size, grad_accum_steps=accum)
        distill_train(
            teacher, student, proj, toy_dataset(32), toy_dataset(8, seed=1),
            DistillationConfig(), tcfg, tmp_path / f"{batch_size}-{accum}",
        )
        outcomes.append(np.concatenate([p.data.ravel() for _, p in student.parameters()]))
    distance = float(np.abs(outcomes[0] - outcomes[1]).max())
    assert distance < 1e-5
