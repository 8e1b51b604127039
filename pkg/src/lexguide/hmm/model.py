"""Log-space hidden Markov model over token ids: forward algorithm,
ancestral sampling and checkpoint files.
"""

# This source code is licensed under the MIT license found in the
# LICENSE file in the root directory of this source tree.

# Copyright (c) 2021 scart97

__all__ = [
    "Hmm",
    "ForwardState",
    "MalformedCheckpoint",
    "forward_init",
    "forward_update",
    "forward_sequence",
    "sequence_log_prob",
    "predictive_latent",
    "next_token_log_probs",
    "sample_sequence",
    "sample_sequences",
    "HmmPolicy",
    "save_hmm",
    "load_hmm",
]

from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Union

import torch
from torch import Tensor

CHECKPOINT_VERSION = 1


class MalformedCheckpoint(ValueError):
    pass


def _normalize_log(x: Tensor) -> Tensor:
    return x - torch.logsumexp(x, dim=-1, keepdim=True)


@dataclass(frozen=True)
class Hmm:
    """Hidden Markov model with every table stored as log-probabilities.

    Attributes:
        log_init: Tensor of shape (h,), initial latent distribution.
        log_trans: Tensor of shape (h, h), rows are z and columns z′.
        log_emit: Tensor of shape (h, vocab_size), emission distribution of each latent state.
    """

    log_init: Tensor
    log_trans: Tensor
    log_emit: Tensor

    @property
    def num_states(self) -> int:
        return self.log_init.shape[0]

    @property
    def vocab_size(self) -> int:
        return self.log_emit.shape[1]

    @classmethod
    def from_probs(cls, init, trans, emit) -> "Hmm":
        """Build a model from probability tables. Rows are renormalized, zeros stay exact zeros.

        Args:
            init : Initial distribution, shape (h,)
            trans : Transition matrix, shape (h, h)
            emit : Emission matrix, shape (h, vocab_size)

        Returns:
            The model in log space.
        """
        init = torch.as_tensor(init, dtype=torch.float64)
        trans = torch.as_tensor(trans, dtype=torch.float64)
        emit = torch.as_tensor(emit, dtype=torch.float64)
        return cls(
            log_init=_normalize_log(torch.log(init)),
            log_trans=_normalize_log(torch.log(trans)),
            log_emit=_normalize_log(torch.log(emit)),
        )

    @classmethod
    def random(
        cls, num_states: int, vocab_size: int, generator: torch.Generator
    ) -> "Hmm":
        """Random model with every row drawn from a flat Dirichlet, by normalizing
        exponential draws in probability space before taking the log.

        Args:
            num_states : Latent state count h
            vocab_size : Number of tokens
            generator : Source of randomness

        Returns:
            The model.
        """

        def draw(*shape):
            x = torch.empty(*shape, dtype=torch.float64).exponential_(
                generator=generator
            )
            return x / x.sum(dim=-1, keepdim=True)

        return cls.from_probs(
            draw(num_states),
            draw(num_states, num_states),
            draw(num_states, vocab_size),
        )

    def validate(self, atol: float = 1e-9):
        """Check the shapes and that every row is a distribution.

        Raises:
            ValueError: Some invariant is broken.
        """
        h = self.num_states
        if self.log_trans.shape != (h, h) or self.log_emit.shape[0] != h:
            raise ValueError("Inconsistent HMM table shapes")
        for name, table in (
            ("log_init", self.log_init),
            ("log_trans", self.log_trans),
            ("log_emit", self.log_emit),
        ):
            if torch.isnan(table).any() or (table > 0).any():
                raise ValueError(f"{name} must contain log-probabilities")
            total = torch.exp(table).sum(dim=-1)
            if not torch.allclose(total, torch.ones_like(total), atol=atol, rtol=0):
                raise ValueError(f"{name} rows must sum to one")


@dataclass(frozen=True)
class ForwardState:
    """Unnormalized forward values after consuming a prefix.

    Attributes:
        log_alpha: Tensor of shape (h,), log p(x_{1:t}, z_t).
        log_evidence: log p(x_{1:t}).
    """

    log_alpha: Tensor
    log_evidence: float


def forward_init(hmm: Hmm, token: int) -> ForwardState:
    """Forward values for the first token.

    Args:
        hmm : Model
        token : First token id

    Returns:
        State with log_alpha(z) = log_init(z) + log_emit(z, token).
    """
    log_alpha = hmm.log_init + hmm.log_emit[:, token]
    return ForwardState(log_alpha, float(torch.logsumexp(log_alpha, dim=0)))


def predictive_latent(hmm: Hmm, state: Optional[ForwardState]) -> Tensor:
    """Unnormalized log distribution of the next latent state. For an empty
    prefix (state is None) this is the initial distribution.

    Args:
        hmm : Model
        state : Forward state of the consumed prefix, or None

    Returns:
        Tensor of shape (h,), normalized to the prefix evidence.
    """
    if state is None:
        return hmm.log_init
    return torch.logsumexp(state.log_alpha.unsqueeze(1) + hmm.log_trans, dim=0)


def forward_update(hmm: Hmm, state: ForwardState, token: int) -> ForwardState:
    """One step of the forward recursion.

    Args:
        hmm : Model
        state : State of the prefix x_{1:t}
        token : Next token id

    Returns:
        State of the prefix x_{1:t+1}.
    """
    log_alpha = predictive_latent(hmm, state) + hmm.log_emit[:, token]
    return ForwardState(log_alpha, float(torch.logsumexp(log_alpha, dim=0)))


def forward_sequence(hmm: Hmm, tokens: Sequence[int]) -> Optional[ForwardState]:
    """Run the forward recursion over a whole prefix.

    Returns:
        The final state, or None for an empty prefix.
    """
    state = None
    for tok in tokens:
        if state is None:
            state = forward_init(hmm, tok)
        else:
            state = forward_update(hmm, state, tok)
    return state


def sequence_log_prob(hmm: Hmm, tokens: Sequence[int]) -> float:
    """log p(tokens) under the model, 0.0 for the empty sequence."""
    state = forward_sequence(hmm, tokens)
    return 0.0 if state is None else state.log_evidence


def next_token_log_probs(hmm: Hmm, state: Optional[ForwardState]) -> Tensor:
    """Normalized log distribution of the next token given a consumed prefix.

    Args:
        hmm : Model
        state : Forward state of the prefix, or None when it is empty

    Returns:
        Tensor of shape (vocab_size,)
    """
    pred = predictive_latent(hmm, state)
    joint = torch.logsumexp(pred.unsqueeze(1) + hmm.log_emit, dim=0)
    return joint - torch.logsumexp(joint, dim=0)


def sample_sequences(
    hmm: Hmm, num_sequences: int, length: int, generator: torch.Generator
) -> Tensor:
    """Ancestral sampling of a batch of sequences.

    Args:
        hmm : Model
        num_sequences : Batch size
        length : Tokens per sequence, at least 1
        generator : Source of randomness

    Returns:
        Long tensor of shape (num_sequences, length).
    """
    assert length >= 1, "Sequences need at least one token"
    init = torch.exp(hmm.log_init)
    trans = torch.exp(hmm.log_trans)
    emit = torch.exp(hmm.log_emit)

    out = torch.empty(num_sequences, length, dtype=torch.long)
    z = torch.multinomial(
        init.expand(num_sequences, -1), 1, replacement=True, generator=generator
    ).squeeze(1)
    for t in range(length):
        out[:, t] = torch.multinomial(
            emit[z], 1, replacement=True, generator=generator
        ).squeeze(1)
        if t + 1 < length:
            z = torch.multinomial(
                trans[z], 1, replacement=True, generator=generator
            ).squeeze(1)
    return out


def sample_sequence(hmm: Hmm, length: int, seed: int) -> list:
    """Sample a single sequence, deterministic per seed.

    Args:
        hmm : Model
        length : Number of tokens, at least 1
        seed : Random seed

    Returns:
        Token ids
    """
    generator = torch.Generator()
    generator.manual_seed(seed)
    return sample_sequences(hmm, 1, length, generator)[0].tolist()


class HmmPolicy:
    def __init__(self, hmm: Hmm):
        """Expose the predictive next-token distribution of an HMM through
        the same interface as [`ContextPolicy`][lexguide.policy.ContextPolicy],
        so the model itself can be used as a sampling policy.

        Args:
            hmm : Model
        """
        self.hmm = hmm

    @property
    def vocab_size(self) -> int:
        return self.hmm.vocab_size

    def next_token_log_probs(self, context: Sequence[int]) -> Tensor:
        return next_token_log_probs(self.hmm, forward_sequence(self.hmm, context))


def save_hmm(hmm: Hmm, path: Union[str, Path]):
    """Save a versioned checkpoint with the three log tables."""
    torch.save(
        {
            "version": CHECKPOINT_VERSION,
            "num_states": hmm.num_states,
            "vocab_size": hmm.vocab_size,
            "log_init": hmm.log_init,
            "log_trans": hmm.log_trans,
            "log_emit": hmm.log_emit,
        },
        str(path),
    )


def load_hmm(path: Union[str, Path]) -> Hmm:
    """Load a checkpoint written by [`save_hmm`][lexguide.hmm.model.save_hmm].

    Raises:
        MalformedCheckpoint: Unknown version or inconsistent tables.
    """
    data = torch.load(str(path))
    if not isinstance(data, dict) or data.get("version") != CHECKPOINT_VERSION:
        raise MalformedCheckpoint(f"{path} is not a version {CHECKPOINT_VERSION} HMM")
    hmm = Hmm(
        log_init=data["log_init"].to(torch.float64),
        log_trans=data["log_trans"].to(torch.float64),
        log_emit=data["log_emit"].to(torch.float64),
    )
    if hmm.num_states != data["num_states"] or hmm.vocab_size != data["vocab_size"]:
        raise MalformedCheckpoint(f"{path} has inconsistent table shapes")
    try:
        hmm.validate()
    except ValueError as err:
        raise MalformedCheckpoint(str(err)) from err
    return hmm
