# This source code is licensed under the MIT license found in the
# LICENSE file in the root directory of this source tree.

# Copyright (c) 2021 scart97

import math

import pytest

from lexguide.hmm.model import Hmm, HmmPolicy
from lexguide.lexicon.dfa import build_keyphrase_dfa
from lexguide.lexicon.tokenizer import make_constraint
from lexguide.oracle import (
    BudgetExceeded,
    EnumerationBudget,
    enumerate_trajectories,
    exact_accept_probability,
    exact_guided_distribution,
    exact_policy_expectation,
    path_sum_probability,
    sequence_probability,
)
from lexguide.policy import ContextPolicy
from lexguide.suites import check_conditional, check_dfa, check_unbiasedness, run_suite


@pytest.fixture
def uniform_ab_hmm():
    # a and b equally likely, the end of sequence token never emitted
    return Hmm.from_probs([1.0], [[1.0]], [[0.5, 0.5, 0.0]])


def test_path_sum_matches_forward(tiny_hmm):
    for tokens in ([0], [1, 2], [3, 3, 0, 1]):
        assert path_sum_probability(tiny_hmm, tokens) == pytest.approx(
            sequence_probability(tiny_hmm, tokens), rel=1e-12
        )


def test_accept_probability_worked_example(uniform_ab_hmm, ab_dfa):
    # aab, aba, abb and bab out of eight strings of length three
    assert exact_accept_probability(uniform_ab_hmm, ab_dfa, 3) == pytest.approx(0.5)
    assert exact_accept_probability(uniform_ab_hmm, ab_dfa, 1) == 0.0
    assert exact_accept_probability(uniform_ab_hmm, ab_dfa, 1, [0]) == pytest.approx(
        0.5
    )


def test_accept_probability_of_an_impossible_prefix(uniform_ab_hmm, ab_dfa):
    assert exact_accept_probability(uniform_ab_hmm, ab_dfa, 2, [2]) == 0.0


def test_enumerate_trajectories_stops_at_eos():
    completions = list(enumerate_trajectories(3, 2, 2))
    assert (2,) in completions
    assert len(completions) == 1 + 2 * 3
    assert all(len(c) == 2 for c in completions if c != (2,))


def test_policy_expectation_of_one_is_one():
    policy = ContextPolicy(3, ctx_order=1, table_size=4)
    policy.logits.data[:, 0] = 1.0
    assert exact_policy_expectation(policy, lambda c: 1.0, 4, 2) == pytest.approx(1.0)


def test_budget_is_enforced(uniform_ab_hmm, ab_dfa):
    with pytest.raises(BudgetExceeded):
        exact_accept_probability(uniform_ab_hmm, ab_dfa, 7)
    with pytest.raises(BudgetExceeded):
        EnumerationBudget(max_sequences=10).check(3, 3)
    with pytest.raises(BudgetExceeded):
        EnumerationBudget().check(3, 2, hmm_states=9)


def test_guided_distribution_is_conditional_for_the_guidance_model(
    uniform_ab_hmm, ab_dfa
):
    policy = HmmPolicy(uniform_ab_hmm)
    guided = exact_guided_distribution(policy, uniform_ab_hmm, ab_dfa, 3)
    assert set(guided) == {(0, 0, 1), (0, 1, 0), (0, 1, 1), (1, 0, 1)}
    for mu, w in guided.values():
        assert mu == pytest.approx(0.25)
        assert w == pytest.approx(0.5)


def test_guided_distribution_is_normalized(tiny_policy, tiny_hmm, abc_vocab):
    dfa = build_keyphrase_dfa(make_constraint("c", ["a b"], abc_vocab), abc_vocab)
    guided = exact_guided_distribution(tiny_policy, tiny_hmm, dfa, 3, prompt=[2])
    assert math.fsum(mu for mu, _ in guided.values()) == pytest.approx(1.0, abs=1e-12)
    assert all(dfa.accepts(c) for c in guided)


def test_importance_weights_are_unbiased():
    result = check_unbiasedness(instances=20, seed=0)
    assert result.passed, result.max_error


def test_accepted_prompt_weights_match_the_full_expectation(
    tiny_policy, tiny_hmm, abc_vocab
):
    dfa = build_keyphrase_dfa(make_constraint("c", ["a b"], abc_vocab), abc_vocab)
    prompt = abc_vocab.numericalize(["a", "b"])
    guided = exact_guided_distribution(tiny_policy, tiny_hmm, dfa, 3, prompt=prompt)
    assert all(w == 1.0 for _, w in guided.values())

    def reward(completion):
        return 1.0 if 0 in completion else -1.0

    weighted = math.fsum(mu * w * reward(c) for c, (mu, w) in guided.items())
    full = exact_policy_expectation(tiny_policy, reward, 3, abc_vocab.eos_idx, prompt)
    assert weighted == pytest.approx(full, abs=1e-12)


def test_guided_distribution_matches_the_exact_conditional():
    result = check_conditional(instances=20, seed=0)
    assert result.passed, result.max_error


def test_automata_match_naive_search():
    assert check_dfa(instances=30, seed=1).passed


def test_run_suite_by_name():
    result = run_suite("dfa", instances=2, seed=0)
    assert result.name == "dfa"
    assert result.instances == 2
