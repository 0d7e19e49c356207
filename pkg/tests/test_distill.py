import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from deskpost.autodiff import Tensor, gradcheck, ops
from deskpost.data import InstructionExample
from deskpost.distill import (ON_POLICY, REFERENCE, DistillConfig, DistillTarget,
                              OnPolicyDistiller, ResidencyError, ResidencyEvent,
                              ResidencyManager, check_ledger, choose_source, forward_kl,
                              mean_teacher_kl)
from deskpost.model import ModelConfig, TinyLM

finite = st.floats(-8, 8, allow_nan=False)
logit_rows = st.integers(2, 12).flatmap(lambda v: arrays(np.float64, (v,), elements=finite))


def probs(z):
    e = np.exp(z - z.max())
    return e / e.sum()


def kl_value(t_logits, s_logits, mode="full", k=None):
    return float(forward_kl(DistillTarget.from_logits(t_logits, mode, k), s_logits).data)


# -- source selection --------------------------------------------------------------

def test_choose_source_extremes_and_frequency():
    rng = np.random.default_rng(0)
    assert {choose_source(0.0, rng) for _ in range(500)} == {REFERENCE}
    assert {choose_source(1.0, rng) for _ in range(500)} == {ON_POLICY}
    hits = sum(choose_source(0.25, rng) == ON_POLICY for _ in range(10_000))
    assert abs(hits / 10_000 - 0.25) <= 0.015
    with pytest.raises(ValueError):
        choose_source(1.5, rng)


def test_config_validation():
    with pytest.raises(ValueError):
        DistillConfig(mode="topk", k=None)
    with pytest.raises(ValueError):
        DistillConfig(student_fraction=-0.1)
    with pytest.raises(ValueError):
        DistillConfig(mode="reverse")


# -- forward KL ----------------------------------------------------------------------

def test_kl_hand_value():
    teacher = DistillTarget("full", np.array([0.5, 0.5, 0.0, 0.0]))
    assert float(forward_kl(teacher, np.zeros(4)).data) == pytest.approx(math.log(2), abs=1e-12)


@settings(max_examples=200, deadline=None)
@given(logit_rows, st.data())
def test_kl_nonnegative_zero_at_equality_and_topk_at_v(t, data):
    s = data.draw(arrays(np.float64, t.shape, elements=finite))
    full = kl_value(t, s)
    assert full >= -1e-12
    assert abs(kl_value(t, t)) < 1e-9
    assert abs(kl_value(t, s, "topk", len(t)) - full) < 1e-9
    for k in range(1, len(t) + 1):
        assert kl_value(t, s, "topk", k) >= -1e-12


@settings(max_examples=100, deadline=None)
@given(logit_rows)
def test_kl_zero_iff_equal_on_support(t):
    p = probs(t)
    shifted = np.log(np.roll(p, 1))
    if np.allclose(np.roll(p, 1), p, atol=1e-6):
        return
    assert kl_value(t, shifted) > 1e-10


def test_kl_never_nan_with_zero_student_mass():
    t = DistillTarget("full", np.array([0.5, 0.5]))
    val = float(forward_kl(t, np.array([0.0, -1e6])).data)
    assert math.isfinite(val) and val > 0


def test_topk_approaches_full_as_k_grows():
    rng = np.random.default_rng(1)
    V = 32
    gaps = {k: [] for k in (1, V // 4, V // 2, V)}
    for _ in range(300):
        t, s = rng.normal(0, 2, V), rng.normal(0, 2, V)
        full = kl_value(t, s)
        for k in gaps:
            gaps[k].append(abs(kl_value(t, s, "topk", k) - full))
    means = [np.mean(gaps[k]) for k in sorted(gaps)]
    assert all(a > b for a, b in zip(means, means[1:]))
    assert means[-1] < 1e-9


def test_kl_gradcheck_full_and_topk():
    rng = np.random.default_rng(2)
    t = rng.normal(size=(3, 6))
    for target in (DistillTarget.from_logits(t), DistillTarget.from_logits(t, "topk", 3)):
        s = Tensor(rng.normal(size=(3, 6)), requires_grad=True)
        assert max(gradcheck(lambda: ops.sum(forward_kl(target, s)), [s])) < 1e-4


def test_target_validation_and_dump(tmp_path):
    tgt = DistillTarget.from_logits(np.array([[0.0, 2.0, 1.0, -1.0]]), "topk", 2)
    tgt.validate(vocab_size=4)
    assert tgt.ids.tolist() == [[1, 2]]
    assert tgt.tail[0] == pytest.approx(1 - tgt.probs.sum())
    tgt.dump_jsonl(tmp_path / "t.jsonl")
    rec = json.loads((tmp_path / "t.jsonl").read_text().splitlines()[0])
    assert [p[0] for p in rec["pairs"]] == [1, 2] and "tail" in rec
    with pytest.raises(ValueError):
        DistillTarget("topk", np.array([0.2, 0.5]), np.array([0, 1])).validate()
    with pytest.raises(ValueError):
        DistillTarget("topk", np.array([0.5, 0.2]), np.array([1, 1])).validate()
    with pytest.raises(ValueError):
        DistillTarget("full", np.array([0.5, 0.4])).validate()
    with pytest.raises(ValueError):
        DistillTarget.from_logits(np.zeros(4), "topk", 5)


# -- residency -------------------------------------------------------------------

def test_residency_swap_order_and_double_acquire():
    mgr = ResidencyManager()
    for m in ("A", "B"):
        mgr.register(m)
    check_ledger([])
    tok_a = mgr.acquire("A")
    with pytest.raises(ResidencyError):
        mgr.acquire("A")
    with pytest.raises(ResidencyError):
        mgr.acquire("B")
    tok_a.release()
    with pytest.raises(ResidencyError):
        tok_a.release()
    with mgr.acquire("B"):
        pass
    actions = [(e.model_id, e.action) for e in mgr.ledger]
    assert actions == [("A", "load"), ("A", "evict"), ("B", "load")]
    check_ledger(mgr.ledger)
    with pytest.raises(ResidencyError):
        mgr.acquire("C")


def test_ledger_checker_catches_double_residency():
    bad = [ResidencyEvent(1, "A", "fast", "load"), ResidencyEvent(2, "B", "fast", "load")]
    with pytest.raises(AssertionError):
        check_ledger(bad)


def residency_fuzz(n_ops, seed):
    """Random acquire/release interleaving; returns the max fast-resident count seen."""
    rng = np.random.default_rng(seed)
    models = [f"m{i}" for i in range(4)]
    fast: set[str] = set()
    mgr = ResidencyManager(on_load=fast.add, on_evict=fast.discard)
    for m in models:
        mgr.register(m)
    held = None
    worst = 0
    for _ in range(n_ops):
        if held is not None and rng.random() < 0.5:
            held.release()
            held = None
        else:
            want = models[int(rng.integers(len(models)))]
            try:
                held = mgr.acquire(want)
            except ResidencyError:
                assert held is not None
        worst = max(worst, len(fast))
    check_ledger(mgr.ledger)
    return worst


def test_residency_fuzz_10k():
    assert residency_fuzz(10_000, 0) <= 1


# -- training ----------------------------------------------------------------------

CFG = ModelConfig(vocab_size=256, layers=1, model_dim=16, heads=2, context_len=24, seed=0)
REF = [InstructionExample(user=f"q{i}", response=f"r{i}") for i in range(8)]


def test_distiller_rejects_vocab_mismatch():
    other = TinyLM(ModelConfig(vocab_size=300, layers=1, model_dim=16, heads=2, context_len=24))
    with pytest.raises(ValueError, match="vocabulary"):
        OnPolicyDistiller(TinyLM(CFG), other, DistillConfig(), REF)


def test_student_equal_teacher_zero_loss_and_teacher_frozen():
    teacher = TinyLM(CFG)
    student = TinyLM(CFG)
    before = {k: p.data.copy() for k, p in teacher.params.items()}
    d = OnPolicyDistiller(student, teacher, DistillConfig(learning_rate=1e-3, weight_decay=0.0,
                                                          batch_size=4), REF)
    _, batch = d.next_batch()
    loss = d.step(batch)
    assert abs(loss) < 1e-9
    for k, v in before.items():
        assert np.array_equal(teacher.params[k].data, v)
        g = teacher.params[k].grad
        assert g is None or not np.any(g)
    drift = max(np.abs(student.params[k].data - v).max() for k, v in before.items())
    assert drift < 1e-6
    check_ledger(d.residency.ledger)


def test_full_and_topk_at_v_same_loss_curve():
    teacher = TinyLM(CFG)
    curves = []
    for cfg in (DistillConfig(mode="full", steps=6, batch_size=4, learning_rate=1e-2,
                              student_fraction=0.5, max_completion=6),
                DistillConfig(mode="topk", k=256, steps=6, batch_size=4, learning_rate=1e-2,
                              student_fraction=0.5, max_completion=6)):
        student = TinyLM(ModelConfig(**{**CFG.__dict__, "seed": 9}))
        hist = OnPolicyDistiller(student, teacher, cfg, REF).train()
        curves.append([h["loss"] for h in hist])
    assert {h for h in curves[0]} and max(abs(a - b) for a, b in zip(*curves)) < 1e-6


def test_distillation_reduces_teacher_kl(tmp_path):
    teacher = TinyLM(ModelConfig(**{**CFG.__dict__, "seed": 1}))
    student = TinyLM(CFG)
    held = [InstructionExample(user=f"h{i}", response=f"x{i}") for i in range(6)]
    before = mean_teacher_kl(student, teacher, held)
    d = OnPolicyDistiller(student, teacher,
                          DistillConfig(steps=60, batch_size=4, learning_rate=1e-2,
                                        max_completion=6), REF)
    hist = d.train(run_dir=tmp_path)
    assert (tmp_path / "opd_metrics.jsonl").exists()
    assert {h["source"] for h in hist} <= {ON_POLICY, REFERENCE}
    assert mean_teacher_kl(student, teacher, held) < before
