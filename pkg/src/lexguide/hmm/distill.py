"""Distillation of a reference policy into an HMM: corpus sampling and
batched Baum-Welch.
"""

# This source code is licensed under the MIT license found in the
# LICENSE file in the root directory of this source tree.

# Copyright (c) 2021 scart97

__all__ = [
    "DegenerateCorpus",
    "EmFitResult",
    "pad_corpus",
    "corpus_log_likelihood",
    "fit_baum_welch",
    "build_distillation_corpus",
]

import logging
from dataclasses import dataclass, field
from typing import List, Sequence, Tuple

import torch
from torch import Tensor
from tqdm.auto import tqdm

from lexguide.hmm.model import Hmm
from lexguide.utils import make_generator

logger = logging.getLogger(__name__)

EMISSION_SMOOTHING = 1e-8
MONOTONE_SLACK = 1e-8


class DegenerateCorpus(ValueError):
    pass


@dataclass
class EmFitResult:
    """Outcome of an EM run.

    Attributes:
        hmm: Fitted model.
        log_likelihoods: Corpus log-likelihood of every evaluated model. The last entry belongs to the returned model.
        converged: True if the relative change fell below the tolerance before the iteration limit.
        likelihood_drops: Iterations whose likelihood fell below the previous one by more than 1e-8.
    """

    hmm: Hmm
    log_likelihoods: List[float] = field(default_factory=list)
    converged: bool = False
    likelihood_drops: int = 0


def pad_corpus(corpus: Sequence[Sequence[int]]) -> Tuple[Tensor, Tensor]:
    """Stack variable length sequences into a padded batch.

    Args:
        corpus : Token id sequences

    Raises:
        DegenerateCorpus: The corpus or one of its sequences is empty.

    Returns:
        Long tensor (N, L) of tokens padded with zeros, and boolean mask (N, L) of valid positions.
    """
    if len(corpus) == 0:
        raise DegenerateCorpus("The corpus has no sequences")
    lengths = [len(seq) for seq in corpus]
    if min(lengths) == 0:
        raise DegenerateCorpus("The corpus contains an empty sequence")
    max_len = max(lengths)
    tokens = torch.zeros(len(corpus), max_len, dtype=torch.long)
    for i, seq in enumerate(corpus):
        tokens[i, : len(seq)] = torch.as_tensor(list(seq), dtype=torch.long)
    mask = torch.arange(max_len).unsqueeze(0) < torch.tensor(lengths).unsqueeze(1)
    return tokens, mask


def _forward(hmm: Hmm, tokens: Tensor, mask: Tensor) -> Tensor:
    # Padded steps carry the previous alpha so the last column holds the
    # alpha of each sequence's final token.
    emit = hmm.log_emit.t()[tokens]  # (N, L, h)
    log_alpha = torch.empty_like(emit)
    log_alpha[:, 0] = hmm.log_init + emit[:, 0]
    for t in range(1, tokens.shape[1]):
        step = (
            torch.logsumexp(log_alpha[:, t - 1].unsqueeze(2) + hmm.log_trans, dim=1)
            + emit[:, t]
        )
        log_alpha[:, t] = torch.where(mask[:, t, None], step, log_alpha[:, t - 1])
    return log_alpha


def _backward(hmm: Hmm, tokens: Tensor, mask: Tensor) -> Tensor:
    emit = hmm.log_emit.t()[tokens]
    log_beta = torch.zeros_like(emit)
    for t in range(tokens.shape[1] - 2, -1, -1):
        step = torch.logsumexp(
            hmm.log_trans + (emit[:, t + 1] + log_beta[:, t + 1]).unsqueeze(1), dim=2
        )
        log_beta[:, t] = torch.where(mask[:, t + 1, None], step, torch.zeros_like(step))
    return log_beta


def _total_log_likelihood(hmm: Hmm, tokens: Tensor, mask: Tensor) -> float:
    log_alpha = _forward(hmm, tokens, mask)
    return float(torch.logsumexp(log_alpha[:, -1], dim=1).sum())


def corpus_log_likelihood(hmm: Hmm, corpus: Sequence[Sequence[int]]) -> float:
    """Total log-likelihood Σ_n log p(x^n) of a corpus.

    Args:
        hmm : Model
        corpus : Token id sequences

    Returns:
        Sum over sequences
    """
    tokens, mask = pad_corpus(corpus)
    return _total_log_likelihood(hmm, tokens, mask)


def _em_step(hmm: Hmm, tokens: Tensor, mask: Tensor) -> Tuple[Hmm, float]:
    log_alpha = _forward(hmm, tokens, mask)
    log_beta = _backward(hmm, tokens, mask)
    seq_ll = torch.logsumexp(log_alpha[:, -1], dim=1)  # (N,)

    posterior = torch.exp(log_alpha + log_beta - seq_ll[:, None, None])
    posterior = posterior * mask.unsqueeze(2)

    init_counts = posterior[:, 0].sum(dim=0)

    emit_counts = torch.zeros_like(hmm.log_emit)
    flat_tokens = tokens.reshape(-1)
    flat_post = posterior.reshape(-1, hmm.num_states)
    emit_counts.index_add_(1, flat_tokens, flat_post.t())

    emit = hmm.log_emit.t()[tokens]
    trans_counts = torch.zeros_like(hmm.log_trans)
    for t in range(tokens.shape[1] - 1):
        log_xi = (
            log_alpha[:, t].unsqueeze(2)
            + hmm.log_trans
            + (emit[:, t + 1] + log_beta[:, t + 1]).unsqueeze(1)
            - seq_ll[:, None, None]
        )
        xi = torch.exp(log_xi) * mask[:, t + 1, None, None]
        trans_counts += xi.sum(dim=0)

    init = init_counts / init_counts.sum()
    trans = trans_counts / trans_counts.sum(dim=1, keepdim=True)
    # States never left in the corpus keep their previous transition row
    unused = trans_counts.sum(dim=1) == 0
    trans[unused] = torch.exp(hmm.log_trans[unused])
    # Emissions are the mixture (1 − ε)·q + ε/|V|. Only the share of each
    # count explained by q re-estimates q, so the step is exact EM for the
    # smoothed model.
    floor = EMISSION_SMOOTHING / hmm.vocab_size
    old_emit = torch.exp(hmm.log_emit)
    q_counts = emit_counts * (1 - floor / old_emit).clamp(min=0)
    q_totals = q_counts.sum(dim=1, keepdim=True)
    unvisited = q_totals.squeeze(1) <= 0
    emit_probs = (1 - EMISSION_SMOOTHING) * q_counts / q_totals.clamp(
        min=1e-300
    ) + floor
    emit_probs[unvisited] = old_emit[unvisited]

    return Hmm.from_probs(init, trans, emit_probs), float(seq_ll.sum())


def fit_baum_welch(
    corpus: Sequence[Sequence[int]],
    num_states: int,
    vocab_size: int,
    seed: int = 0,
    max_iters: int = 200,
    tol: float = 1e-6,
    restarts: int = 1,
    quiet: bool = True,
) -> EmFitResult:
    """Fit an HMM to a corpus with expectation maximization. The E-step is
    computed for the whole padded corpus at once, so the reduction order is fixed.

    Emission rows are mixed with a uniform distribution of mass 1e-8 after
    every M-step, and the M-step re-estimates only the unsmoothed part, so
    the likelihood history is nondecreasing. The fit stops when the relative
    change falls below `tol` or after `max_iters` steps. A drop of more than
    1e-8 is logged and counted in `likelihood_drops`, it never ends the fit.

    Args:
        corpus : Token id sequences, none of them empty
        num_states : Latent state count h
        vocab_size : Number of tokens
        seed : Seed of the random initialization
        max_iters : Maximum EM iterations
        tol : Relative log-likelihood improvement considered converged
        restarts : Number of random initializations. The best final likelihood wins.
        quiet : Disable the progress bar

    Raises:
        DegenerateCorpus: The corpus or one of its sequences is empty.

    Returns:
        Fit result with the model and its likelihood history.
    """
    assert num_states >= 1, "The HMM needs at least one latent state"
    tokens, mask = pad_corpus(corpus)
    if int(tokens.max()) >= vocab_size:
        raise ValueError("The corpus uses token ids outside the vocabulary")

    best = None
    for restart in range(restarts):
        result = _fit_once(
            tokens, mask, num_states, vocab_size, (seed, restart), max_iters, tol, quiet
        )
        logger.info(
            "EM restart %d finished after %d iterations, log-likelihood %.6f",
            restart,
            len(result.log_likelihoods) - 1,
            result.log_likelihoods[-1],
        )
        if best is None or result.log_likelihoods[-1] > best.log_likelihoods[-1]:
            best = result
    return best


def _smoothed(hmm: Hmm) -> Hmm:
    emit = (1 - EMISSION_SMOOTHING) * torch.exp(hmm.log_emit)
    return Hmm.from_probs(
        torch.exp(hmm.log_init),
        torch.exp(hmm.log_trans),
        emit + EMISSION_SMOOTHING / hmm.vocab_size,
    )


def _fit_once(tokens, mask, num_states, vocab_size, seed_keys, max_iters, tol, quiet):
    hmm = _smoothed(Hmm.random(num_states, vocab_size, make_generator(*seed_keys)))
    history: List[float] = []
    drops = 0

    def record(ll: float):
        nonlocal drops
        if history and ll < history[-1] - MONOTONE_SLACK:
            drops += 1
            logger.warning(
                "EM iteration %d lowered the log-likelihood by %.3g",
                len(history),
                history[-1] - ll,
            )
        history.append(ll)

    for _ in tqdm(range(max_iters), desc="Baum-Welch", disable=quiet):
        new_hmm, ll = _em_step(hmm, tokens, mask)
        record(ll)
        if len(history) > 1 and abs(history[-1] - history[-2]) <= tol * abs(
            history[-2]
        ):
            return EmFitResult(hmm, history, converged=True, likelihood_drops=drops)
        hmm = new_hmm

    record(_total_log_likelihood(hmm, tokens, mask))
    return EmFitResult(hmm, history, converged=False, likelihood_drops=drops)


def build_distillation_corpus(
    policy,
    prompts: Sequence[Sequence[int]],
    length: int,
    seed: int = 0,
    quiet: bool = True,
) -> List[List[int]]:
    """Sample one fixed length continuation of every prompt from a policy.
    The end of sequence token is an ordinary token here, sampling never stops early.

    Args:
        policy : Object with `next_token_log_probs(context)`, like [`ContextPolicy`][lexguide.policy.ContextPolicy]
        prompts : Prompt token ids, one continuation each
        length : Tokens sampled after each prompt
        seed : Base seed, the stream of prompt i is derived from (seed, i)
        quiet : Disable the progress bar

    Returns:
        Sequences made of the prompt followed by its continuation.
    """
    corpus = []
    progress = tqdm(prompts, desc="Distillation corpus", disable=quiet)
    for i, prompt in enumerate(progress):
        generator = make_generator(seed, i)
        sequence = list(prompt)
        for _ in range(length):
            probs = torch.exp(policy.next_token_log_probs(sequence))
            sequence.append(int(torch.multinomial(probs, 1, generator=generator)))
        corpus.append(sequence)
    logger.info("Sampled a distillation corpus of %d sequences", len(corpus))
    return corpus
