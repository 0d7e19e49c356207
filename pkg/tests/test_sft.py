import math

import numpy as np
import pytest

from deskpost.autodiff import AdamW
from deskpost.data import InstructionExample, pack, render
from deskpost.metrics import read_jsonl
from deskpost.model import ModelConfig, TinyLM
from deskpost.sft import (SFTConfig, TrainingDiverged, lr_at, masked_sequence_loss, sft_step,
                          train_masked, train_sft)

CFG = ModelConfig(vocab_size=256, layers=1, model_dim=16, heads=2, context_len=24, seed=0)


def snapshot(m):
    return {k: p.data.copy() for k, p in m.params.items()}


def batch_of(*examples, pack_len=24):
    (b,) = list(pack([render(e) for e in examples], pack_len))
    return b


def test_config_validation():
    with pytest.raises(ValueError):
        SFTConfig(warmup_ratio=1.0)
    with pytest.raises(ValueError):
        SFTConfig(learning_rate=-1)
    with pytest.raises(ValueError):
        SFTConfig(schedule="linear")


def test_lr_schedule_closed_form():
    c = SFTConfig(learning_rate=2e-5, warmup_ratio=0.05)
    assert lr_at(0, 1000, c) == 0.0
    assert lr_at(50, 1000, c) == pytest.approx(2e-5, abs=1e-18)
    assert abs(lr_at(1000, 1000, c)) < 1e-12
    mid = 50 + (1000 - 50) / 2
    assert lr_at(int(mid), 1000, c) == pytest.approx(1e-5, rel=1e-2)
    assert lr_at(25, 1000, c) == pytest.approx(1e-5)
    flat = SFTConfig(learning_rate=1.0, warmup_ratio=0.0, schedule="constant")
    assert lr_at(0, 10, flat) == lr_at(10, 10, flat) == 1.0
    with pytest.raises(ValueError):
        lr_at(11, 10, c)


def test_all_zero_mask_loss_zero_params_unchanged():
    m = TinyLM(CFG)
    b = batch_of(InstructionExample(user="ab", response="cd"))
    b.loss_mask[:] = 0
    before = snapshot(m)
    opt = AdamW(m.parameters(), lr=1e-2, weight_decay=0.0)
    assert sft_step(m, opt, b, 1e-2) == 0.0
    for k, v in before.items():
        assert np.array_equal(m.params[k].data, v)


def test_zero_learning_rate_is_a_no_op():
    m = TinyLM(CFG)
    b = batch_of(InstructionExample(user="ab", response="cd"))
    before = snapshot(m)
    opt = AdamW(m.parameters(), lr=0.0, weight_decay=0.01)
    sft_step(m, opt, b, 0.0)
    for k, v in before.items():
        assert np.array_equal(m.params[k].data, v)


def test_prompt_tokens_get_zero_gradient():
    m = TinyLM(CFG)
    b = batch_of(InstructionExample(user="hello", response="x"))
    b.loss_mask[:] = 0  # prompt-only batch
    opt = AdamW(m.parameters(), lr=1e-2, weight_decay=0.0)
    before = snapshot(m)
    sft_step(m, opt, b, 1e-2)
    delta = max(np.abs(m.params[k].data - v).max() for k, v in before.items())
    assert delta == 0.0


def test_overfit_single_example_and_monotone_start():
    m = TinyLM(CFG)
    b = batch_of(InstructionExample(user="2+2", response="four"))
    opt = AdamW(m.parameters(), lr=1e-2, weight_decay=0.0)
    losses = [sft_step(m, opt, b, 1e-2) for _ in range(200)]
    assert losses[-1] < 0.05
    rises = sum(b_ > a for a, b_ in zip(losses[:20], losses[1:21]))
    assert rises <= 2


def test_non_finite_loss_aborts_with_dump(tmp_path):
    m = TinyLM(CFG)
    m.params["tok_emb"].data[:] = np.nan
    b = batch_of(InstructionExample(user="a", response="b"))
    with pytest.raises(TrainingDiverged, match="diagnostics"):
        sft_step(m, AdamW(m.parameters()), b, 1e-3, run_dir=tmp_path)
    assert (tmp_path / "sft.diagnostics.json").exists()


def test_train_sft_writes_metrics_and_is_deterministic(tmp_path):
    exs = [InstructionExample(user=f"q{i}", response=f"a{i}") for i in range(10)]
    cfg = SFTConfig(learning_rate=3e-3, epochs=2, global_batch=2, pack_len=24, seed=4)
    m1, m2 = TinyLM(CFG), TinyLM(CFG)
    h1 = train_sft(m1, exs, cfg, run_dir=tmp_path)
    h2 = train_sft(m2, exs, cfg)
    assert [r["loss"] for r in h1] == [r["loss"] for r in h2]
    rows = read_jsonl(tmp_path / "sft_metrics.jsonl")
    assert [set(r) for r in rows] == [{"step", "loss", "lr"}] * len(rows)
    assert rows[0]["lr"] == 0.0
    assert all(math.isfinite(r["loss"]) for r in rows)
    for k in m1.params:
        assert m1.params[k].data.tobytes() == m2.params[k].data.tobytes()


def test_train_sft_counts_skipped_examples():
    exs = [InstructionExample(user="x" * 40, response="y"), InstructionExample(user="a", response="b")]
    hist = train_sft(TinyLM(CFG), exs, SFTConfig(epochs=1, pack_len=24))
    assert hist[-1] == {"skipped": {"too_long": 1}}


def test_masked_sequence_loss_and_train_masked():
    m = TinyLM(CFG)
    seq = (np.array([3, 10, 11, 12, 1]), np.array([0, 0, 1, 1, 1]))
    zero = (seq[0], np.zeros(5, dtype=int))
    assert float(masked_sequence_loss(m, [zero]).data) == 0.0
    hist = train_masked(m, [seq], SFTConfig(learning_rate=1e-2, warmup_ratio=0.0,
                                           schedule="constant", global_batch=2), steps=150)
    assert hist[-1]["loss"] < 0.05
    with pytest.raises(ValueError):
        train_masked(m, [], SFTConfig(), steps=1)
