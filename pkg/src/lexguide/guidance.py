"""Exact guidance marginals for keyphrase constraints: the backward
dynamic program over the product of an HMM and a keyphrase automaton,
and the per-trajectory session that evaluates it token by token.
"""

# This source code is licensed under the MIT license found in the
# LICENSE file in the root directory of this source tree.

# Copyright (c) 2021 scart97

__all__ = [
    "DEFAULT_LOG_FLOOR",
    "GuidanceTables",
    "GuidanceSession",
    "build_guidance_tables",
    "start_session",
    "gamma_all_tokens",
    "advance_session",
    "log_accept_probability",
]

import math
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import torch
from torch import Tensor

from lexguide.hmm.model import (
    ForwardState,
    Hmm,
    forward_init,
    forward_update,
    predictive_latent,
)
from lexguide.lexicon.dfa import KeyphraseDfa, dfa_run, dfa_step

DEFAULT_LOG_FLOOR = -40.0


@dataclass(frozen=True)
class GuidanceTables:
    """Backward tables of one (HMM, constraint, horizon) triple, shared read-only
    by every rollout that uses the constraint.

    Attributes:
        hmm: Guidance model.
        dfa: Constraint automaton.
        horizon: Maximum number of completion tokens T.
        log_b: Tensor of shape (T + 1, h, m). `log_b[k, z, s]` is the log
            probability of reaching an accepting state within k more tokens,
            given the latent state z of the last consumed token and the
            automaton state s.
    """

    hmm: Hmm
    dfa: KeyphraseDfa
    horizon: int
    log_b: Tensor

    @property
    def constraint_id(self) -> str:
        return self.dfa.constraint_id


def _grouped_emissions(hmm: Hmm, dfa: KeyphraseDfa) -> Tensor:
    # C[z', s, s'] = log of the emission mass of z' on tokens moving s to s'
    m = dfa.state_count
    dest = dfa.transitions  # (m, V)
    hits = dest.unsqueeze(1) == torch.arange(m).view(1, m, 1)  # (m, m, V)
    log_mask = torch.zeros(hits.shape, dtype=torch.float64).masked_fill(
        ~hits, -math.inf
    )
    return torch.logsumexp(hmm.log_emit[:, None, None, :] + log_mask[None], dim=-1)


def build_guidance_tables(
    hmm: Hmm, dfa: KeyphraseDfa, horizon: int
) -> GuidanceTables:
    """Run the backward recursion

    b(k, z, s) = logsumexp_z′ [log A(z, z′) + logsumexp_s′ (C(z′, s, s′) + b(k−1, z′, s′))]

    where C groups the emission mass of every latent state by destination
    automaton state. Cost is O(T·m²·h + T·m·h²) after an O(h·m²·V) precomputation.

    Args:
        hmm : Guidance model
        dfa : Constraint automaton, over the same vocabulary as the model
        horizon : Number of tokens T, at least 1

    Returns:
        The tables for k = 0..T
    """
    assert horizon >= 1, "The horizon must be at least one token"
    assert dfa.vocab_size == hmm.vocab_size, "HMM and automaton vocabularies differ"
    h, m = hmm.num_states, dfa.state_count
    accept = dfa.accept_mask()

    grouped = _grouped_emissions(hmm, dfa)
    log_b = torch.full((horizon + 1, h, m), -math.inf, dtype=torch.float64)
    log_b[0][:, accept] = 0.0
    for k in range(1, horizon + 1):
        by_next_latent = torch.logsumexp(grouped + log_b[k - 1].unsqueeze(1), dim=2)
        step = torch.logsumexp(
            hmm.log_trans.unsqueeze(2) + by_next_latent.unsqueeze(0), dim=1
        )
        step = step.clamp(max=0.0)
        step[:, accept] = 0.0
        log_b[k] = step
    return GuidanceTables(hmm=hmm, dfa=dfa, horizon=horizon, log_b=log_b)


@dataclass(frozen=True)
class GuidanceSession:
    """Guidance bookkeeping of a single trajectory.

    Attributes:
        forward: HMM forward state of the prompt and the consumed completion, None if both are empty.
        dfa_state: Automaton state after the prompt and the consumed completion.
        t: Number of completion tokens consumed.
        horizon: Maximum number of completion tokens.
        fallback: Set once the feasible guided mass vanished. Guidance is never evaluated again.
        constraint_id: Constraint being guided towards.
    """

    forward: Optional[ForwardState]
    dfa_state: int
    t: int
    horizon: int
    fallback: bool = False
    constraint_id: str = ""


def _advance_forward(hmm: Hmm, state: Optional[ForwardState], token: int):
    if state is None:
        return forward_init(hmm, token)
    return forward_update(hmm, state, token)


def _log_next_token_mass(
    session: GuidanceSession, tables: GuidanceTables, remaining: Optional[int]
):
    # Per candidate token: unnormalized log p(v | prefix) and, when remaining
    # is given, the same mass restricted to continuations that accept.
    hmm = tables.hmm
    pred = predictive_latent(hmm, session.forward)
    joint = pred.unsqueeze(1) + hmm.log_emit  # (h, V)
    log_den = torch.logsumexp(joint, dim=0)
    if remaining is None:
        return log_den, None
    dest = tables.dfa.transitions[session.dfa_state]
    log_num = torch.logsumexp(joint + tables.log_b[remaining][:, dest], dim=0)
    return log_den, log_num


def start_session(
    tables: GuidanceTables,
    prompt: Sequence[int],
    log_floor: float = DEFAULT_LOG_FLOOR,
) -> GuidanceSession:
    """Open a session for a trajectory: the HMM forward pass and the automaton
    both consume the prompt first. The horizon counts completion tokens only.

    Args:
        tables : Guidance tables of the constraint
        prompt : Prompt token ids
        log_floor : Log of the smallest feasible acceptance probability

    Returns:
        Session at t = 0
    """
    forward = None
    for tok in prompt:
        forward = _advance_forward(tables.hmm, forward, tok)
    session = GuidanceSession(
        forward=forward,
        dfa_state=dfa_run(tables.dfa, prompt),
        t=0,
        horizon=tables.horizon,
        constraint_id=tables.constraint_id,
    )
    return _check_feasible(session, tables, log_floor)


def log_accept_probability(session: GuidanceSession, tables: GuidanceTables) -> float:
    """Log probability under the HMM that the constraint is satisfied by the
    end of the horizon, given everything the session consumed.

    Returns:
        0.0 once accepted, −inf if acceptance is impossible.
    """
    if tables.dfa.is_accepting(session.dfa_state):
        return 0.0
    remaining = session.horizon - session.t
    if remaining == 0:
        return -math.inf
    log_den, log_num = _log_next_token_mass(session, tables, remaining - 1)
    total = float(torch.logsumexp(log_den, dim=0))
    if math.isinf(total):
        return -math.inf
    return float(torch.logsumexp(log_num, dim=0)) - total


def gamma_all_tokens(session: GuidanceSession, tables: GuidanceTables) -> Tensor:
    """Log guidance values log γ(v) for every candidate next token v: the
    probability under the HMM that the constraint is satisfied by the end of
    the horizon, given the consumed prefix and x_{t+1} = v.

    The end of sequence token terminates the trajectory, so its value is the
    acceptance indicator of the current automaton state. Tokens the HMM
    cannot emit get γ = 0.

    Args:
        session : Session with t < T, not in fallback
        tables : Guidance tables of the session's constraint

    Returns:
        Tensor of shape (vocab_size,), entries in [−inf, 0]
    """
    assert session.t < session.horizon, "The session already reached the horizon"
    assert not session.fallback, "Guidance is disabled after fallback"
    vocab_size = tables.hmm.vocab_size
    if tables.dfa.is_accepting(session.dfa_state):
        return torch.zeros(vocab_size, dtype=torch.float64)

    remaining = session.horizon - session.t - 1
    log_den, log_num = _log_next_token_mass(session, tables, remaining)
    log_gamma = (log_num - log_den).clamp(max=0.0)
    log_gamma = log_gamma.masked_fill(torch.isinf(log_den), -math.inf)
    log_gamma[tables.dfa.eos_idx] = -math.inf
    return log_gamma


def _check_feasible(
    session: GuidanceSession, tables: GuidanceTables, log_floor: float
) -> GuidanceSession:
    if session.fallback or session.t >= session.horizon:
        return session
    if log_accept_probability(session, tables) < log_floor:
        return replace(session, fallback=True)
    return session


def advance_session(
    session: GuidanceSession,
    tables: GuidanceTables,
    token: int,
    log_floor: float = DEFAULT_LOG_FLOOR,
) -> GuidanceSession:
    """Consume one completion token.

    The fallback flag is raised when the HMM probability of still satisfying
    the constraint drops below `exp(log_floor)`.

    Args:
        session : Session with t < T
        tables : Guidance tables of the session's constraint
        token : Sampled token id
        log_floor : Log of the smallest feasible acceptance probability

    Returns:
        New session, the input is left untouched.
    """
    assert session.t < session.horizon, "The session already reached the horizon"
    advanced = replace(
        session,
        forward=_advance_forward(tables.hmm, session.forward, token),
        dfa_state=dfa_step(tables.dfa, session.dfa_state, token),
        t=session.t + 1,
    )
    return _check_feasible(advanced, tables, log_floor)
