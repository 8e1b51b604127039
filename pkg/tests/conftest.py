# -*- coding: utf-8 -*-
"""
    Shared fixtures for lexguide: tiny vocabularies, models and automata
    small enough for the enumeration oracles.

    Read more about conftest.py under:
    - https://docs.pytest.org/en/stable/fixture.html
    - https://docs.pytest.org/en/stable/writing_plugins.html
"""

import os

import pytest

import torch
from hypothesis import settings

from lexguide.hmm.model import Hmm
from lexguide.lexicon.dfa import build_keyphrase_dfa
from lexguide.lexicon.tokenizer import make_constraint
from lexguide.lexicon.vocab import Vocab
from lexguide.policy import ContextPolicy
from lexguide.toyworld import ToyTask, ToyTaskConfig

# Increase deadline on CI, where the machine might be slower
# 3 seconds
settings.register_profile("ci", deadline=3000)
settings.load_profile(os.getenv(u"HYPOTHESIS_PROFILE", "default"))


@pytest.fixture
def ab_vocab():
    # a=0, b=1, eos=2
    return Vocab(["a", "b"])


@pytest.fixture
def abc_vocab():
    # a=0, b=1, c=2, eos=3
    return Vocab(["a", "b", "c"])


@pytest.fixture
def ab_dfa(ab_vocab):
    return build_keyphrase_dfa(make_constraint("ab", ["a b"], ab_vocab), ab_vocab)


@pytest.fixture
def tiny_hmm(abc_vocab):
    generator = torch.Generator()
    generator.manual_seed(7)
    return Hmm.random(2, abc_vocab.size, generator)


@pytest.fixture
def tiny_policy(abc_vocab):
    generator = torch.Generator()
    generator.manual_seed(11)
    logits = torch.randn(16, abc_vocab.size, generator=generator, dtype=torch.float64)
    return ContextPolicy(abc_vocab.size, ctx_order=2, table_size=16, logits=logits)


@pytest.fixture(scope="session")
def toy_task():
    return ToyTask(ToyTaskConfig())
