"""Keyphrase automata: a multi-pattern matcher (trie plus failure links)
collapsed into a dense transition table with absorbing acceptance.
"""

# This source code is licensed under the MIT license found in the
# LICENSE file in the root directory of this source tree.

# Copyright (c) 2021 scart97

__all__ = ["KeyphraseDfa", "build_keyphrase_dfa", "dfa_step", "dfa_run"]

from collections import deque
from dataclasses import dataclass
from typing import Dict, FrozenSet, List, Sequence

import torch

from lexguide.lexicon.tokenizer import EmptyConstraint, KeyphraseConstraint
from lexguide.lexicon.vocab import Vocab


@dataclass(frozen=True)
class KeyphraseDfa:
    """Deterministic automaton over token ids that accepts every sequence
    containing at least one keyphrase of its constraint.

    Attributes:
        transitions: Long tensor of shape (state_count, vocab_size), the dense table δ.
        accept: Accepting states. All of them are absorbing.
        start: Start state.
        eos_idx: End of sequence token, which never advances the matcher.
        constraint_id: Label of the constraint the automaton was compiled from.
    """

    transitions: torch.Tensor
    accept: FrozenSet[int]
    start: int
    eos_idx: int
    constraint_id: str = ""

    @property
    def state_count(self) -> int:
        return self.transitions.shape[0]

    @property
    def vocab_size(self) -> int:
        return self.transitions.shape[1]

    def is_accepting(self, state: int) -> bool:
        return state in self.accept

    def accept_mask(self) -> torch.Tensor:
        """Boolean tensor of shape (state_count,) marking the accepting states."""
        mask = torch.zeros(self.state_count, dtype=torch.bool)
        mask[list(self.accept)] = True
        return mask

    def accepts(self, tokens: Sequence[int]) -> bool:
        return dfa_run(self, tokens) in self.accept


def _build_trie(phrases: Sequence[Sequence[int]]):
    children: List[Dict[int, int]] = [{}]
    terminal = [False]
    for phrase in phrases:
        node = 0
        for tok in phrase:
            if tok not in children[node]:
                children.append({})
                terminal.append(False)
                children[node][tok] = len(children) - 1
            node = children[node][tok]
        terminal[node] = True
    return children, terminal


def build_keyphrase_dfa(constraint: KeyphraseConstraint, vocab: Vocab) -> KeyphraseDfa:
    """Compile a keyphrase constraint into a dense automaton.

    The goto trie is built first, then failure links are computed breadth
    first and folded into the table, so that δ(s, v) follows the longest
    suffix of the consumed input that is still a prefix of some phrase.
    Every state whose path ends with a phrase is merged into one absorbing
    accepting state, and unreachable states are dropped.

    Args:
        constraint : Constraint with tokenized phrases, combined by OR.
        vocab : Vocabulary the phrases were tokenized with.

    Raises:
        EmptyConstraint: The constraint has no phrases.
        ValueError: A phrase contains the end of sequence token.

    Returns:
        The automaton. State count is at most 1 + the sum of phrase lengths.
    """
    if len(constraint.phrases) == 0:
        raise EmptyConstraint(f"Constraint {constraint.id!r} has no phrases")
    constraint.validate(vocab)
    if any(vocab.eos_idx in phrase for phrase in constraint.phrases):
        raise ValueError("Keyphrases cannot contain the end of sequence token")

    children, terminal = _build_trie(constraint.phrases)
    n_nodes = len(children)
    vocab_size = vocab.size
    table = [[0] * vocab_size for _ in range(n_nodes)]
    fail = [0] * n_nodes
    accepting = list(terminal)

    queue = deque()
    for tok in range(vocab_size):
        child = children[0].get(tok)
        if child is not None:
            table[0][tok] = child
            queue.append(child)
    while queue:
        node = queue.popleft()
        accepting[node] = accepting[node] or accepting[fail[node]]
        for tok in range(vocab_size):
            child = children[node].get(tok)
            if child is not None:
                fail[child] = table[fail[node]][tok]
                table[node][tok] = child
                queue.append(child)
            else:
                table[node][tok] = table[fail[node]][tok]

    # Collapse all accepting nodes into a single absorbing sink, then keep the
    # states reachable from the root, numbered in breadth first order.
    sink = n_nodes
    table.append([sink] * vocab_size)
    accepting.append(True)
    for node in range(n_nodes):
        if accepting[node]:
            table[node] = [sink] * vocab_size
        else:
            table[node] = [sink if accepting[t] else t for t in table[node]]
        table[node][vocab.eos_idx] = node

    relabel = {0: 0}
    order = [0]
    queue = deque([0])
    while queue:
        node = queue.popleft()
        if accepting[node]:
            continue
        for tok in range(vocab_size):
            target = table[node][tok]
            if target not in relabel:
                relabel[target] = len(order)
                order.append(target)
                queue.append(target)

    transitions = torch.tensor(
        [
            [relabel[node] if accepting[node] else relabel[t] for t in table[node]]
            for node in order
        ],
        dtype=torch.long,
    )
    accept = frozenset(relabel[n] for n in order if accepting[n])
    return KeyphraseDfa(
        transitions=transitions,
        accept=accept,
        start=0,
        eos_idx=vocab.eos_idx,
        constraint_id=constraint.id,
    )


def dfa_step(dfa: KeyphraseDfa, state: int, token: int) -> int:
    """Single transition δ(state, token).

    Args:
        dfa : Automaton
        state : Current state
        token : Consumed token id

    Returns:
        Next state
    """
    return int(dfa.transitions[state, token])


def dfa_run(dfa: KeyphraseDfa, tokens: Sequence[int], state: int = None) -> int:
    """Extended transition δ* over a token sequence.

    Args:
        dfa : Automaton
        tokens : Consumed token ids
        state : Initial state. Defaults to the start state.

    Returns:
        Final state
    """
    state = dfa.start if state is None else state
    for tok in tokens:
        state = dfa_step(dfa, state, tok)
    return state
