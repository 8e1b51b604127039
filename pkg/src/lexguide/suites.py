"""Randomized cross-checks of the guidance and rollout code against the
enumeration oracles, used by the `oracle-check` command and the tests.
"""

# This source code is licensed under the MIT license found in the
# LICENSE file in the root directory of this source tree.

# Copyright (c) 2021 scart97

__all__ = [
    "SUITES",
    "SuiteResult",
    "tiny_vocab",
    "random_hmm",
    "random_constraint",
    "random_policy",
    "check_gamma",
    "check_dfa",
    "check_unbiasedness",
    "check_conditional",
    "run_suite",
]

import itertools
import math
from dataclasses import dataclass
from typing import Callable, Dict

import torch

from lexguide.guidance import (
    advance_session,
    build_guidance_tables,
    gamma_all_tokens,
    start_session,
)
from lexguide.hmm.model import Hmm, HmmPolicy, sequence_log_prob
from lexguide.lexicon.dfa import build_keyphrase_dfa
from lexguide.lexicon.tokenizer import KeyphraseConstraint
from lexguide.lexicon.vocab import Vocab
from lexguide.oracle import (
    exact_accept_probability,
    exact_guided_distribution,
    exact_policy_expectation,
)
from lexguide.policy import ContextPolicy
from lexguide.rollout import sample_trajectory
from lexguide.utils import make_generator


@dataclass
class SuiteResult:
    """Outcome of a cross-check suite.

    Attributes:
        name: Suite name.
        instances: Random instances checked.
        max_error: Largest absolute error observed.
        tolerance: Largest admissible error.
    """

    name: str
    instances: int
    max_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tolerance


def tiny_vocab(size: int) -> Vocab:
    """Vocabulary of `size` tokens, the last one being the end of sequence token."""
    return Vocab([f"t{i}" for i in range(size - 1)])


def random_hmm(
    num_states: int, vocab_size: int, generator: torch.Generator, eos_idx: int = None
) -> Hmm:
    """Random model. When `eos_idx` is given, that token gets no emission mass."""
    hmm = Hmm.random(num_states, vocab_size, generator)
    if eos_idx is None:
        return hmm
    emit = torch.exp(hmm.log_emit)
    emit[:, eos_idx] = 0.0
    return Hmm.from_probs(torch.exp(hmm.log_init), torch.exp(hmm.log_trans), emit)


def random_constraint(
    vocab: Vocab, generator: torch.Generator, max_total_length: int = 3
) -> KeyphraseConstraint:
    """One or two random phrases over the non end of sequence tokens, with at
    most `max_total_length` tokens overall so the automaton stays small.
    """
    tokens = [i for i in range(vocab.size) if i != vocab.eos_idx]

    def draw(n):
        return int(torch.randint(n, (1,), generator=generator))

    phrases = []
    budget = max_total_length
    for _ in range(1 + draw(2)):
        if budget == 0:
            break
        length = 1 + draw(min(2, budget))
        phrases.append(tuple(tokens[draw(len(tokens))] for _ in range(length)))
        budget -= length
    return KeyphraseConstraint(id="random", phrases=tuple(dict.fromkeys(phrases)))


def random_policy(vocab_size: int, generator: torch.Generator) -> ContextPolicy:
    """Small context policy with random logits in [−2, 2]."""
    logits = torch.rand(64, vocab_size, generator=generator, dtype=torch.float64)
    logits = 4 * logits - 2
    return ContextPolicy(vocab_size, ctx_order=2, table_size=64, logits=logits)


def _draw(generator: torch.Generator, low: int, high: int) -> int:
    return int(torch.randint(low, high + 1, (1,), generator=generator))


def check_gamma(instances: int = 100, seed: int = 0) -> SuiteResult:
    """Guidance values of the dynamic program against the conditional
    acceptance probability enumerated under the HMM.
    """
    max_error = 0.0
    for i in range(instances):
        generator = make_generator(seed, i)
        vocab = tiny_vocab(_draw(generator, 3, 4))
        hmm = random_hmm(_draw(generator, 1, 3), vocab.size, generator)
        dfa = build_keyphrase_dfa(random_constraint(vocab, generator), vocab)
        horizon = _draw(generator, 1, 5)
        tables = build_guidance_tables(hmm, dfa, horizon)
        t = _draw(generator, 0, horizon - 1)
        prefix = [_draw(generator, 0, vocab.size - 2) for _ in range(t)]

        session = start_session(tables, [], log_floor=-math.inf)
        for tok in prefix:
            session = advance_session(session, tables, tok, log_floor=-math.inf)
        gamma = torch.exp(gamma_all_tokens(session, tables)).tolist()
        for v in range(vocab.size):
            if v == vocab.eos_idx:
                expected = 1.0 if dfa.accepts(prefix) else 0.0
            else:
                expected = exact_accept_probability(
                    hmm, dfa, horizon - t - 1, prefix + [v]
                )
            max_error = max(max_error, abs(gamma[v] - expected))
    return SuiteResult("gamma", instances, max_error, 1e-9)


def check_dfa(instances: int = 100, seed: int = 0) -> SuiteResult:
    """Automaton acceptance against naive substring search on every short sequence."""
    errors = 0
    for i in range(instances):
        generator = make_generator(seed, i)
        vocab = tiny_vocab(_draw(generator, 3, 5))
        constraint = random_constraint(vocab, generator, max_total_length=4)
        dfa = build_keyphrase_dfa(constraint, vocab)
        plain = [v for v in range(vocab.size) if v != vocab.eos_idx]
        for length in range(5):
            for seq in itertools.product(plain, repeat=length):
                errors += dfa.accepts(seq) != constraint.is_satisfied_by(seq)
    return SuiteResult("dfa", instances, float(errors), 0.0)


def _sign_reward(completion) -> float:
    return 1.0 if 0 in completion else -1.0


def check_unbiasedness(instances: int = 20, seed: int = 0) -> SuiteResult:
    """Σ μ·w·f against the proximal expectation restricted to the support
    of μ, for f ≡ 1 and a ±1 reward. Every instance is checked a second time
    with a prompt that already holds a phrase, where μ covers the whole
    support of the policy and Σ μ·w·f must equal the full expectation.
    """
    max_error = 0.0
    for i in range(instances):
        generator = make_generator(seed, i)
        vocab = tiny_vocab(_draw(generator, 3, 4))
        hmm = random_hmm(_draw(generator, 1, 3), vocab.size, generator)
        policy = random_policy(vocab.size, generator)
        constraint = random_constraint(vocab, generator)
        dfa = build_keyphrase_dfa(constraint, vocab)
        horizon = _draw(generator, 1, 4)

        for prompt in ((), constraint.phrases[0]):
            guided = exact_guided_distribution(policy, hmm, dfa, horizon, prompt)
            support = set(guided)

            def expectation(f):
                return exact_policy_expectation(
                    policy, f, horizon, vocab.eos_idx, prompt
                )

            covered = expectation(lambda c: float(c in support))
            for f in (lambda c: 1.0, _sign_reward):
                weighted = math.fsum(mu * w * f(c) for c, (mu, w) in guided.items())
                restricted = expectation(lambda c: f(c) if c in support else 0.0)
                max_error = max(max_error, abs(weighted - restricted))
                if covered > 1.0 - 1e-12:
                    max_error = max(max_error, abs(weighted - expectation(f)))
            if prompt:
                # an accepted prompt leaves nothing for the guide to restrict
                max_error = max(max_error, abs(covered - 1.0))
            total_mu = math.fsum(mu for mu, _ in guided.values())
            max_error = max(max_error, abs(total_mu - 1.0))
    return SuiteResult("unbiasedness", instances, max_error, 1e-9)


def check_conditional(instances: int = 20, seed: int = 0) -> SuiteResult:
    """With the guidance HMM as the sampling policy, the guided distribution
    is the policy conditioned on the constraint, and every sampled
    trajectory carries the weight P(α).
    """
    max_error = 0.0
    for i in range(instances):
        generator = make_generator(seed, i)
        vocab = tiny_vocab(_draw(generator, 3, 4))
        hmm = random_hmm(_draw(generator, 1, 3), vocab.size, generator, vocab.eos_idx)
        policy = HmmPolicy(hmm)
        dfa = build_keyphrase_dfa(random_constraint(vocab, generator), vocab)
        horizon = _draw(generator, 2, 4)
        p_accept = exact_accept_probability(hmm, dfa, horizon)
        if p_accept < 1e-6:
            continue

        guided = exact_guided_distribution(policy, hmm, dfa, horizon)
        conditional = {}
        for completion in itertools.product(range(vocab.size), repeat=horizon):
            if dfa.accepts(completion):
                p = math.exp(sequence_log_prob(hmm, completion))
                conditional[completion] = p / p_accept
        keys = set(guided) | set(conditional)
        tv = 0.5 * math.fsum(
            abs(guided.get(k, (0.0, 0.0))[0] - conditional.get(k, 0.0)) for k in keys
        )
        max_error = max(max_error, tv)

        tables = build_guidance_tables(hmm, dfa, horizon)
        for g in range(10):
            traj = sample_trajectory(
                policy, tables, [], horizon, make_generator(seed, i, g), group=g
            )
            if not traj.fallback:
                max_error = max(max_error, abs(math.exp(traj.log_weight) - p_accept))
    return SuiteResult("conditional", instances, max_error, 1e-9)


SUITES: Dict[str, Callable[..., SuiteResult]] = {
    "gamma": check_gamma,
    "dfa": check_dfa,
    "unbiasedness": check_unbiasedness,
    "conditional": check_conditional,
}


def run_suite(name: str, instances: int = None, seed: int = 0) -> SuiteResult:
    """Run a suite by name with its default instance count unless given."""
    suite = SUITES[name]
    if instances is None:
        return suite(seed=seed)
    return suite(instances=instances, seed=seed)
