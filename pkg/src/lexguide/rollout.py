"""Guided behavior policy: composition of the proximal policy with the
guidance values, per-token importance weights and trajectory sampling.
"""

# This source code is licensed under the MIT license found in the
# LICENSE file in the root directory of this source tree.

# Copyright (c) 2021 scart97

__all__ = [
    "InfeasibleStep",
    "GuidedStepDistribution",
    "GuidedTrajectory",
    "guided_next_distribution",
    "truncate_log_probs",
    "sample_constraint",
    "sample_trajectory",
]

import math
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional, Sequence

import torch
from torch import Tensor

from lexguide.guidance import (
    DEFAULT_LOG_FLOOR,
    GuidanceTables,
    advance_session,
    gamma_all_tokens,
    start_session,
)
from lexguide.lexicon.dfa import dfa_run, dfa_step


class InfeasibleStep(ArithmeticError):
    pass


@dataclass(frozen=True)
class GuidedStepDistribution:
    """Guided next-token distribution μ(v) = π_old(v)·γ(v) / Z.

    Attributes:
        log_mu: Tensor of shape (vocab_size,)
        log_z: Log normalizer, log Σ_v π_old(v)·γ(v)
        log_w: Tensor of shape (vocab_size,), log Z − log γ(v). +inf where γ(v) = 0, those tokens are never sampled.
    """

    log_mu: Tensor
    log_z: float
    log_w: Tensor


def guided_next_distribution(
    log_pi_old: Tensor, log_gamma: Tensor, log_floor: float = DEFAULT_LOG_FLOOR
) -> GuidedStepDistribution:
    """Compose the proximal next-token distribution with guidance values.

    Args:
        log_pi_old : Proximal log-probabilities, shape (vocab_size,)
        log_gamma : Log guidance values, shape (vocab_size,)
        log_floor : Smallest admissible log normalizer

    Raises:
        InfeasibleStep: The feasible mass log Z is below `log_floor`.

    Returns:
        The guided distribution and per-token weights.
    """
    joint = log_pi_old + log_gamma
    log_z = float(torch.logsumexp(joint, dim=0))
    if not log_z >= log_floor:
        raise InfeasibleStep(f"Feasible guided mass {log_z:.3f} is below {log_floor}")
    return GuidedStepDistribution(
        log_mu=joint - log_z, log_z=log_z, log_w=log_z - log_gamma
    )


def truncate_log_probs(
    log_probs: Tensor, top_k: Optional[int] = None, top_p: Optional[float] = None
) -> Tensor:
    """Top-k and nucleus truncation followed by renormalization. Only used by
    evaluation decoding, training rollouts sample the full distribution.

    Args:
        log_probs : Normalized log-probabilities
        top_k : Keep the k most likely tokens
        top_p : Keep the smallest set of most likely tokens with mass at least p

    Returns:
        Truncated log-probabilities, −inf outside the kept set
    """
    keep = torch.ones_like(log_probs, dtype=torch.bool)
    order = torch.argsort(log_probs, descending=True)
    if top_k is not None and top_k > 0:
        keep[order[top_k:]] = False
    if top_p is not None and top_p < 1.0:
        cumulative = torch.cumsum(torch.exp(log_probs[order]), dim=0)
        # always keeps the most likely token
        outside = (cumulative - torch.exp(log_probs[order])) >= top_p
        keep[order[outside]] = False
    truncated = log_probs.masked_fill(~keep, -math.inf)
    return truncated - torch.logsumexp(truncated, dim=0)


def sample_constraint(constraint_ids: Sequence[str], generator: torch.Generator) -> str:
    """Uniform draw of one constraint.

    Args:
        constraint_ids : Nonempty collection of constraint ids
        generator : Source of randomness

    Returns:
        The drawn id
    """
    assert len(constraint_ids) > 0, "Cannot sample from an empty constraint set"
    index = int(torch.randint(len(constraint_ids), (1,), generator=generator))
    return constraint_ids[index]


@dataclass
class GuidedTrajectory:
    """A sampled completion with every quantity the loss needs.

    Attributes:
        prompt_id: Id of the prompt.
        group: Index of the trajectory inside its group.
        constraint_id: Constraint used for guidance.
        prompt: Prompt token ids.
        tokens: Completion token ids, at most the horizon, ending at the first end of sequence token.
        log_pi_old: Proximal log-probability of every completion token.
        log_mu: Behavior log-probability of every completion token.
        log_w: Log importance weight of every completion token, log π_old − log μ.
        accept_step: Index of the first token sampled with the constraint already satisfied, None if never satisfied.
        log_weight: Sum of `log_w`.
        fallback: Guidance was abandoned because the feasible mass vanished.
        reward: Task reward, filled in after scoring.
        iteration: Training iteration that sampled the trajectory.
    """

    prompt_id: int
    group: int
    constraint_id: str
    prompt: List[int]
    tokens: List[int] = field(default_factory=list)
    log_pi_old: List[float] = field(default_factory=list)
    log_mu: List[float] = field(default_factory=list)
    log_w: List[float] = field(default_factory=list)
    accept_step: Optional[int] = None
    log_weight: float = 0.0
    fallback: bool = False
    reward: float = 0.0
    iteration: int = 0

    @property
    def satisfied(self) -> bool:
        return self.accept_step is not None

    @property
    def weight(self) -> float:
        return math.exp(self.log_weight)

    def __len__(self) -> int:
        return len(self.tokens)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "GuidedTrajectory":
        return cls(**data)


def sample_trajectory(
    policy,
    tables: GuidanceTables,
    prompt: Sequence[int],
    horizon: int,
    generator: torch.Generator,
    prompt_id: int = 0,
    group: int = 0,
    guided: bool = True,
    log_floor: float = DEFAULT_LOG_FLOOR,
    top_k: Optional[int] = None,
    top_p: Optional[float] = None,
) -> GuidedTrajectory:
    """Sample one completion from the guided behavior policy.

    At every step the proximal distribution is composed with the guidance
    values of the constraint. Once the constraint is satisfied, tokens are
    sampled from the proximal policy itself with unit weight. When the
    feasible mass vanishes the trajectory falls back to the proximal policy
    for good, with unit weight for the remaining tokens. Sampling stops at
    the end of sequence token or at the horizon.

    Args:
        policy : Proximal policy, any object with `next_token_log_probs(context)`
        tables : Guidance tables. The automaton is also used to track satisfaction of unguided samples.
        prompt : Prompt token ids
        horizon : Maximum number of completion tokens
        generator : Source of randomness, owned by this trajectory
        prompt_id : Id recorded in the trajectory
        group : Index recorded in the trajectory
        guided : If False, sample from the proximal policy alone
        log_floor : Smallest admissible log normalizer of the guided distribution
        top_k : Evaluation only truncation, requires `guided=False`
        top_p : Evaluation only truncation, requires `guided=False`

    Returns:
        The trajectory, reward not yet scored.
    """
    assert guided is False or (
        top_k is None and top_p is None
    ), "Guided rollouts sample the full distribution"
    dfa = tables.dfa
    eos_idx = dfa.eos_idx
    trajectory = GuidedTrajectory(
        prompt_id=prompt_id,
        group=group,
        constraint_id=tables.constraint_id,
        prompt=list(prompt),
    )

    dfa_state = dfa_run(dfa, prompt)
    if dfa.is_accepting(dfa_state):
        trajectory.accept_step = 0
    session = start_session(tables, prompt, log_floor) if guided else None
    fallback = guided and session.fallback
    context = list(prompt)

    for t in range(horizon):
        log_pi = policy.next_token_log_probs(context)
        guiding = guided and not fallback and trajectory.accept_step is None
        step_log_w = None
        if guiding:
            try:
                step = guided_next_distribution(
                    log_pi, gamma_all_tokens(session, tables), log_floor
                )
                log_mu, step_log_w = step.log_mu, step.log_w
            except InfeasibleStep:
                fallback = True
                log_mu = log_pi
        else:
            log_mu = log_pi
            if top_k or top_p:
                log_mu = truncate_log_probs(log_pi, top_k, top_p)

        token = int(torch.multinomial(torch.exp(log_mu), 1, generator=generator))
        trajectory.tokens.append(token)
        trajectory.log_pi_old.append(float(log_pi[token]))
        trajectory.log_mu.append(float(log_mu[token]))
        trajectory.log_w.append(
            0.0 if step_log_w is None else float(step_log_w[token])
        )

        dfa_state = dfa_step(dfa, dfa_state, token)
        if trajectory.accept_step is None and dfa.is_accepting(dfa_state):
            trajectory.accept_step = t + 1
        if guiding and not fallback and trajectory.accept_step is None:
            session = advance_session(session, tables, token, log_floor)
            fallback = session.fallback
        if token == eos_idx:
            break
        context.append(token)

    trajectory.fallback = fallback
    trajectory.log_weight = math.fsum(trajectory.log_w)
    return trajectory
