"""The twelve acceptance criteria, each at its stated tolerance and runtime budget."""

import pytest

from deskpost import experiments as E

pytestmark = pytest.mark.acceptance


def check(report_criterion, number, outcome, budget_s=None):
    report_criterion(number, outcome)
    assert outcome.passed, outcome.summary
    if budget_s is not None:
        assert outcome.seconds < budget_s, f"took {outcome.seconds:.0f}s, budget {budget_s}s"


def test_01_gradient_integrity(report_criterion):
    check(report_criterion, 1, E.gradient_integrity(), 60)


def test_02_reward_algebra(report_criterion):
    check(report_criterion, 2, E.reward_algebra(), 1)


def test_03_kl_properties(report_criterion):
    check(report_criterion, 3, E.kl_properties(10_000), 30)


def test_04_bandit_convergence(report_criterion):
    check(report_criterion, 4, E.bandit_convergence((0, 1, 2), 500), 5 * 60)


@pytest.mark.slow
def test_05_ink_beats_grpo_on_document_facts(report_criterion):
    check(report_criterion, 5, E.ink_vs_grpo((0, 1, 2), 2000), 30 * 60)


@pytest.mark.slow
def test_06_opd_beats_sft_only(report_criterion):
    check(report_criterion, 6, E.opd_benefit((0, 1, 2)), 30 * 60)


@pytest.mark.slow
def test_07_topk_versus_full_distillation(report_criterion):
    check(report_criterion, 7, E.topk_vs_full(0), 30 * 60)


@pytest.mark.slow
def test_08_agentic_tools_versus_no_tools(report_criterion):
    check(report_criterion, 8, E.agentic_tools(0), 45 * 60)


def test_09_rho_zero_matches_plain_grpo(report_criterion, tmp_path):
    check(report_criterion, 9, E.rho_zero_equivalence(work_dir=tmp_path))


def test_10_residency_fuzz(report_criterion):
    check(report_criterion, 10, E.residency_fuzz(10_000))


def test_11_search_matches_brute_force(report_criterion):
    check(report_criterion, 11, E.search_oracle(1000, 256))


def test_12_replay_is_bit_identical(report_criterion, tmp_path):
    check(report_criterion, 12, E.replay_determinism(work_dir=tmp_path))
