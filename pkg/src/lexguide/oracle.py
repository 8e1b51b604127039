"""Brute force enumeration oracles for tiny instances.

Everything here is recomputed from the definitions in probability space,
with exactly rounded sums and without the dynamic programs of the
guidance and rollout modules.
"""

# This source code is licensed under the MIT license found in the
# LICENSE file in the root directory of this source tree.

# Copyright (c) 2021 scart97

__all__ = [
    "BudgetExceeded",
    "EnumerationBudget",
    "path_sum_probability",
    "sequence_probability",
    "exact_accept_probability",
    "exact_continuation_accept_probability",
    "exact_policy_expectation",
    "exact_guided_distribution",
    "enumerate_trajectories",
]

import itertools
import math
from dataclasses import dataclass
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple

from lexguide.hmm.model import Hmm
from lexguide.lexicon.dfa import KeyphraseDfa

DEFAULT_FLOOR = math.exp(-40.0)


class BudgetExceeded(ValueError):
    pass


@dataclass(frozen=True)
class EnumerationBudget:
    """Size limits of the instances the oracles accept.

    Attributes:
        max_vocab: Largest vocabulary. defaults to 5.
        max_horizon: Longest enumerated continuation. defaults to 6.
        max_hmm_states: Most latent states. defaults to 4.
        max_dfa_states: Most automaton states. defaults to 6.
        max_sequences: Cap on vocab_size ** horizon. defaults to 2 ** 16.
    """

    max_vocab: int = 5
    max_horizon: int = 6
    max_hmm_states: int = 4
    max_dfa_states: int = 6
    max_sequences: int = 2 ** 16

    def check(
        self,
        vocab_size: int,
        horizon: int,
        hmm_states: Optional[int] = None,
        dfa_states: Optional[int] = None,
    ):
        """Raises:
        BudgetExceeded: Some size is above its limit.
        """
        if vocab_size > self.max_vocab or horizon > self.max_horizon:
            raise BudgetExceeded(
                f"Vocabulary {vocab_size} or horizon {horizon} exceeds the budget"
            )
        if vocab_size ** horizon > self.max_sequences:
            raise BudgetExceeded(f"{vocab_size}^{horizon} sequences exceed the budget")
        if hmm_states is not None and hmm_states > self.max_hmm_states:
            raise BudgetExceeded(f"{hmm_states} HMM states exceed the budget")
        if dfa_states is not None and dfa_states > self.max_dfa_states:
            raise BudgetExceeded(f"{dfa_states} automaton states exceed the budget")


DEFAULT_BUDGET = EnumerationBudget()


def _tables(hmm: Hmm):
    init = [math.exp(x) for x in hmm.log_init.tolist()]
    trans = [[math.exp(x) for x in row] for row in hmm.log_trans.tolist()]
    emit = [[math.exp(x) for x in row] for row in hmm.log_emit.tolist()]
    return init, trans, emit


def path_sum_probability(hmm: Hmm, tokens: Sequence[int]) -> float:
    """p(tokens) as the sum over every latent path of the product of its
    initial, transition and emission probabilities. Exponential in the length.
    """
    if len(tokens) == 0:
        return 1.0
    init, trans, emit = _tables(hmm)
    h = len(init)
    terms = []
    for path in itertools.product(range(h), repeat=len(tokens)):
        p = init[path[0]] * emit[path[0]][tokens[0]]
        for t in range(1, len(tokens)):
            p *= trans[path[t - 1]][path[t]] * emit[path[t]][tokens[t]]
        terms.append(p)
    return math.fsum(terms)


def _forward_probs(init, trans, emit, tokens, start: Optional[List[float]] = None):
    # start, when given, is the distribution of the latent state before the first token
    h = len(init)
    alpha = None
    if start is not None:
        alpha = list(start)
    for tok in tokens:
        if alpha is None:
            alpha = [init[z] * emit[z][tok] for z in range(h)]
        else:
            alpha = [
                math.fsum(alpha[z] * trans[z][z2] for z in range(h)) * emit[z2][tok]
                for z2 in range(h)
            ]
    return alpha


def sequence_probability(hmm: Hmm, tokens: Sequence[int]) -> float:
    """p(tokens) by the forward recursion in probability space, 1.0 when empty."""
    if len(tokens) == 0:
        return 1.0
    init, trans, emit = _tables(hmm)
    return math.fsum(_forward_probs(init, trans, emit, tokens))


def _accepts(dfa: KeyphraseDfa, tokens: Sequence[int], state: Optional[int] = None):
    table = dfa.transitions.tolist()
    state = dfa.start if state is None else state
    for tok in tokens:
        state = table[state][tok]
    return state in dfa.accept


def exact_accept_probability(
    hmm: Hmm,
    dfa: KeyphraseDfa,
    horizon: int,
    prefix: Sequence[int] = (),
    budget: EnumerationBudget = DEFAULT_BUDGET,
) -> float:
    """Probability under the HMM that the prefix followed by `horizon` more
    tokens is accepted, conditioned on the prefix.

    Raises:
        BudgetExceeded: The instance is too large to enumerate.
    """
    budget.check(hmm.vocab_size, horizon, hmm.num_states, dfa.state_count)
    init, trans, emit = _tables(hmm)
    prefix = list(prefix)
    terms = []
    for continuation in itertools.product(range(hmm.vocab_size), repeat=horizon):
        sequence = prefix + list(continuation)
        if _accepts(dfa, sequence):
            alpha = _forward_probs(init, trans, emit, sequence) or [1.0]
            terms.append(math.fsum(alpha))
    evidence = math.fsum(_forward_probs(init, trans, emit, prefix) or [1.0])
    if evidence == 0.0:
        return 0.0
    return math.fsum(terms) / evidence


def exact_continuation_accept_probability(
    hmm: Hmm,
    dfa: KeyphraseDfa,
    steps: int,
    latent: int,
    state: int,
    budget: EnumerationBudget = DEFAULT_BUDGET,
) -> float:
    """Probability of reaching an accepting state within `steps` tokens,
    starting from a known latent state of the last token and an automaton state.
    """
    budget.check(hmm.vocab_size, steps, hmm.num_states, dfa.state_count)
    if state in dfa.accept:
        return 1.0
    if steps == 0:
        return 0.0
    init, trans, emit = _tables(hmm)
    h = len(init)
    start = [trans[latent][z] for z in range(h)]
    terms = []
    for continuation in itertools.product(range(hmm.vocab_size), repeat=steps):
        if _accepts(dfa, continuation, state):
            # alpha before the first token is the next latent distribution
            alpha = [start[z] * emit[z][continuation[0]] for z in range(h)]
            alpha = _forward_probs(init, trans, emit, continuation[1:], alpha)
            terms.append(math.fsum(alpha))
    return math.fsum(terms)


def enumerate_trajectories(
    vocab_size: int,
    eos_idx: int,
    horizon: int,
    budget: EnumerationBudget = DEFAULT_BUDGET,
) -> Iterator[Tuple[int, ...]]:
    """Every completion stopping at its first end of sequence token or at the horizon."""
    budget.check(vocab_size, horizon)

    def extend(prefix):
        if len(prefix) == horizon or (prefix and prefix[-1] == eos_idx):
            yield tuple(prefix)
            return
        for tok in range(vocab_size):
            yield from extend(prefix + [tok])

    yield from extend([])


def _policy_probs(policy, context) -> List[float]:
    return [math.exp(x) for x in policy.next_token_log_probs(list(context)).tolist()]


def exact_policy_expectation(
    policy,
    f: Callable[[Tuple[int, ...]], float],
    horizon: int,
    eos_idx: int,
    prompt: Sequence[int] = (),
    budget: EnumerationBudget = DEFAULT_BUDGET,
) -> float:
    """Σ_τ π(τ)·f(τ) over every completion τ of the prompt.

    Args:
        policy : Object with `next_token_log_probs(context)` and `vocab_size`
        f : Function of the completion tokens
        horizon : Maximum completion length
        eos_idx : End of sequence token
        prompt : Prompt token ids
        budget : Enumeration limits

    Raises:
        BudgetExceeded: The instance is too large to enumerate.
    """
    terms = []
    completions = enumerate_trajectories(policy.vocab_size, eos_idx, horizon, budget)
    for completion in completions:
        p = 1.0
        context = list(prompt)
        for tok in completion:
            p *= _policy_probs(policy, context)[tok]
            context.append(tok)
        terms.append(p * f(completion))
    return math.fsum(terms)


def exact_guided_distribution(
    policy,
    hmm: Hmm,
    dfa: KeyphraseDfa,
    horizon: int,
    prompt: Sequence[int] = (),
    floor: float = DEFAULT_FLOOR,
    budget: EnumerationBudget = DEFAULT_BUDGET,
) -> Dict[Tuple[int, ...], Tuple[float, float]]:
    """Behavior probability μ(τ) and importance weight w(τ) of every
    completion, by the chain rule with guidance values recomputed by
    enumeration at every prefix. The fallback rule of the sampler is
    mirrored: once the HMM acceptance probability of the prefix or the
    guided normalizer drops below `floor`, the proximal policy is used with
    unit weights.

    Args:
        policy : Proximal policy, object with `next_token_log_probs(context)` and `vocab_size`
        hmm : Guidance model
        dfa : Constraint automaton
        horizon : Maximum completion length
        prompt : Prompt token ids
        floor : Smallest admissible feasible mass
        budget : Enumeration limits

    Raises:
        BudgetExceeded: The instance is too large to enumerate.

    Returns:
        Map from completion to (μ, w). Completions outside the support of μ are omitted.
    """
    budget.check(hmm.vocab_size, horizon, hmm.num_states, dfa.state_count)
    vocab_size, eos_idx = hmm.vocab_size, dfa.eos_idx
    prompt = list(prompt)
    result = {}

    def gammas(prefix, remaining):
        values = []
        for v in range(vocab_size):
            if v == eos_idx:
                values.append(0.0)
            else:
                sequence = prompt + prefix + [v]
                if sequence_probability(hmm, sequence) == 0.0:
                    values.append(0.0)
                else:
                    values.append(
                        exact_accept_probability(
                            hmm, dfa, remaining - 1, sequence, budget
                        )
                    )
        return values

    def visit(prefix, mu, w, fallback):
        if len(prefix) == horizon or (prefix and prefix[-1] == eos_idx):
            result[tuple(prefix)] = (mu, w)
            return
        pi = _policy_probs(policy, prompt + prefix)
        accepted = _accepts(dfa, prompt + prefix)
        remaining = horizon - len(prefix)
        if not (accepted or fallback):
            context = prompt + prefix
            feasible = exact_accept_probability(hmm, dfa, remaining, context, budget)
            fallback = feasible < floor
        if accepted or fallback:
            for v in range(vocab_size):
                if pi[v] > 0:
                    visit(prefix + [v], mu * pi[v], w, fallback)
            return
        gamma = gammas(prefix, remaining)
        z = math.fsum(p * g for p, g in zip(pi, gamma))
        for v in range(vocab_size):
            if z < floor:
                if pi[v] > 0:
                    visit(prefix + [v], mu * pi[v], w, True)
            elif pi[v] * gamma[v] > 0:
                step_mu, step_w = pi[v] * gamma[v] / z, z / gamma[v]
                visit(prefix + [v], mu * step_mu, w * step_w, False)

    visit([], 1.0, 1.0, False)
    return result
