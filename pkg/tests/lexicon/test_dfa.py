# This source code is licensed under the MIT license found in the
# LICENSE file in the root directory of this source tree.

# Copyright (c) 2021 scart97

import itertools

import pytest

from hypothesis import given
from hypothesis import strategies as st

from lexguide.lexicon.dfa import build_keyphrase_dfa, dfa_run, dfa_step
from lexguide.lexicon.tokenizer import (
    EmptyConstraint,
    KeyphraseConstraint,
    make_constraint,
)
from lexguide.lexicon.vocab import Vocab


def test_single_phrase_automaton(ab_vocab, ab_dfa):
    # start, "a" seen, accepted
    assert ab_dfa.state_count == 3
    assert len(ab_dfa.accept) == 1
    assert ab_dfa.vocab_size == ab_vocab.size
    assert ab_dfa.accepts([0, 1])
    assert ab_dfa.accepts([1, 1, 0, 0, 1])
    assert not ab_dfa.accepts([1, 0, 0])
    assert not ab_dfa.accepts([])


def test_length_three_strings_accepted(ab_dfa):
    accepted = [
        seq for seq in itertools.product([0, 1], repeat=3) if ab_dfa.accepts(seq)
    ]
    assert sorted(accepted) == [(0, 0, 1), (0, 1, 0), (0, 1, 1), (1, 0, 1)]


def test_accepting_states_are_absorbing(ab_vocab, ab_dfa):
    (final,) = ab_dfa.accept
    for tok in range(ab_vocab.size):
        assert dfa_step(ab_dfa, final, tok) == final


def test_eos_never_advances(abc_vocab):
    constraint = make_constraint("c", ["a b c", "c a"], abc_vocab)
    dfa = build_keyphrase_dfa(constraint, abc_vocab)
    for state in range(dfa.state_count):
        assert dfa_step(dfa, state, abc_vocab.eos_idx) == state


def test_eos_inside_a_phrase_is_rejected(ab_vocab):
    constraint = KeyphraseConstraint(id="c", phrases=((0, ab_vocab.eos_idx),))
    with pytest.raises(ValueError):
        build_keyphrase_dfa(constraint, ab_vocab)


def test_empty_constraint_is_rejected(ab_vocab):
    with pytest.raises(EmptyConstraint):
        build_keyphrase_dfa(KeyphraseConstraint(id="c", phrases=()), ab_vocab)


def test_overlapping_phrases_follow_failure_links(abc_vocab):
    # "a a b" must still be found after the prefix "a a a"
    dfa = build_keyphrase_dfa(make_constraint("c", ["a a b"], abc_vocab), abc_vocab)
    assert dfa.accepts([0, 0, 0, 1])
    assert not dfa.accepts([0, 0, 2, 1])


def test_phrase_contained_in_another(abc_vocab):
    constraint = make_constraint("c", ["a b c", "b"], abc_vocab)
    dfa = build_keyphrase_dfa(constraint, abc_vocab)
    assert dfa.accepts([0, 1])
    assert dfa.accepts([1])


def test_state_count_bound(abc_vocab):
    constraint = make_constraint("c", ["a b c", "c a", "b b"], abc_vocab)
    dfa = build_keyphrase_dfa(constraint, abc_vocab)
    assert dfa.state_count <= 1 + 3 + 2 + 2


def test_accept_mask_matches_accept_set(ab_dfa):
    mask = ab_dfa.accept_mask()
    assert [i for i, m in enumerate(mask.tolist()) if m] == sorted(ab_dfa.accept)


def test_dfa_run_from_given_state(ab_dfa):
    middle = dfa_run(ab_dfa, [0])
    assert dfa_run(ab_dfa, [1], state=middle) in ab_dfa.accept


phrase = st.lists(st.integers(min_value=0, max_value=2), min_size=1, max_size=3)


@given(
    st.lists(phrase, min_size=1, max_size=3),
    st.lists(st.integers(min_value=0, max_value=3), max_size=10),
)
def test_acceptance_matches_naive_search(phrases, tokens):
    vocab = Vocab(["a", "b", "c"])
    constraint = KeyphraseConstraint(
        id="c", phrases=tuple(dict.fromkeys(tuple(p) for p in phrases))
    )
    dfa = build_keyphrase_dfa(constraint, vocab)
    # the end of sequence token is a self loop, transparent to the matcher
    plain = [tok for tok in tokens if tok != vocab.eos_idx]
    assert dfa.accepts(tokens) == constraint.is_satisfied_by(plain)
