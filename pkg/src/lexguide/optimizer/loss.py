"""Group relative advantages, reward shaping and the power scaled clipped
surrogate loss with its analytic gradient.
"""

# This source code is licensed under the MIT license found in the
# LICENSE file in the root directory of this source tree.

# Copyright (c) 2021 scart97

__all__ = [
    "NonFiniteLoss",
    "GroupBatch",
    "group_advantages",
    "shaped_reward",
    "power_scale",
    "clipped_token_term",
    "ctrlr_loss_and_grad",
    "grpo_loss_and_grad",
]

import math
from dataclasses import dataclass
from typing import TYPE_CHECKING, List, Sequence, Tuple

import torch
from torch import Tensor

from lexguide.policy import ContextPolicy, PolicyGradient, log_prob_grad
from lexguide.rollout import GuidedTrajectory

if TYPE_CHECKING:  # pragma: no cover
    from lexguide.optimizer.trainer import TrainConfig

ZERO_STD = 1e-8


class NonFiniteLoss(ArithmeticError):
    pass


def group_advantages(rewards: Sequence[float]) -> Tensor:
    """Standardize rewards within a group, using the population standard deviation.

    Args:
        rewards : Rewards of the G trajectories of one prompt, G ≥ 2

    Returns:
        Tensor of shape (G,). All zeros when the standard deviation is at most 1e-8.
    """
    assert len(rewards) >= 2, "Advantages need at least two trajectories per group"
    rewards = torch.as_tensor(rewards, dtype=torch.float64)
    std = rewards.std(unbiased=False)
    if std <= ZERO_STD:
        return torch.zeros_like(rewards)
    return (rewards - rewards.mean()) / std


def shaped_reward(reward: float, matched: bool) -> float:
    """Reward shaping baseline R′ = R + F, with F = 1 only for correct
    answers that also match the target pattern.

    Args:
        reward : Base reward in {−1, +1}
        matched : The trajectory contains the target pattern

    Returns:
        Shaped reward
    """
    bonus = 1.0 if (reward > 0 and matched) else 0.0
    return reward + bonus


def power_scale(log_w: float, beta: float, w_clamp: float = 60.0) -> float:
    """Trajectory multiplier W = exp(β · clamp(log w, −w_clamp, w_clamp)).

    β = 1 is the exact importance weight, β = 0 drops it entirely.
    """
    clamped = min(max(log_w, -w_clamp), w_clamp)
    return math.exp(beta * clamped)


@dataclass
class GroupBatch:
    """The trajectories sampled for one prompt.

    Attributes:
        prompt_id: Id of the prompt.
        trajectories: G scored trajectories.
        rewards: Their rewards, as used by the advantages.
        advantages: Tensor of shape (G,), see [`group_advantages`][lexguide.optimizer.loss.group_advantages].
    """

    prompt_id: int
    trajectories: List[GuidedTrajectory]
    rewards: List[float]
    advantages: Tensor

    @classmethod
    def from_trajectories(
        cls, prompt_id: int, trajectories: List[GuidedTrajectory]
    ) -> "GroupBatch":
        rewards = [traj.reward for traj in trajectories]
        return cls(prompt_id, trajectories, rewards, group_advantages(rewards))

    @property
    def has_signal(self) -> bool:
        return bool((self.advantages != 0).any())


def clipped_token_term(
    ratio: float, advantage: float, eps_low: float, eps_high: float
) -> Tuple[float, bool]:
    """Clipped surrogate of one token, min(r·A, clip(r, 1−ε_low, 1+ε_high)·A).

    Returns:
        The term, and whether its gradient flows through r. It does not when
        the clipped branch is the minimum and the clip binds.
    """
    clipped = min(max(ratio, 1.0 - eps_low), 1.0 + eps_high)
    term = min(ratio * advantage, clipped * advantage)
    if advantage > 0:
        active = ratio <= 1.0 + eps_high
    elif advantage < 0:
        active = ratio >= 1.0 - eps_low
    else:
        active = False
    return term, active


def _surrogate(
    groups: Sequence[GroupBatch],
    policy: ContextPolicy,
    multipliers: Sequence[Sequence[float]],
    eps_low: float,
    eps_high: float,
) -> Tuple[float, PolicyGradient]:
    trajectory_losses = []
    grad = PolicyGradient(policy.vocab_size)
    count = 0
    for group, group_multipliers in zip(groups, multipliers):
        for traj, advantage, multiplier in zip(
            group.trajectories, group.advantages.tolist(), group_multipliers
        ):
            count += 1
            n_tokens = len(traj.tokens)
            if n_tokens == 0:
                trajectory_losses.append(0.0)
                continue
            terms = []
            traj_grad = PolicyGradient(policy.vocab_size)
            context = list(traj.prompt)
            for token, log_pi_old in zip(traj.tokens, traj.log_pi_old):
                log_pi = float(policy.next_token_log_probs(context)[token])
                try:
                    ratio = math.exp(log_pi - log_pi_old)
                except OverflowError:
                    ratio = math.inf
                term, active = clipped_token_term(ratio, advantage, eps_low, eps_high)
                terms.append(term)
                if active:
                    token_grad = log_prob_grad(policy, context, token)
                    traj_grad.add_(token_grad, ratio * advantage)
                context.append(token)
            trajectory_losses.append(-(multiplier * (math.fsum(terms) / n_tokens)))
            grad.add_(traj_grad, -multiplier / n_tokens)

    if count == 0:
        return 0.0, grad
    loss = math.fsum(trajectory_losses) / count
    for cid, row in list(grad.rows.items()):
        grad.rows[cid] = row / count
    if not math.isfinite(loss) or not grad.is_finite():
        raise NonFiniteLoss(f"The surrogate loss is not finite ({loss})")
    return loss, grad


def ctrlr_loss_and_grad(
    groups: Sequence[GroupBatch], policy: ContextPolicy, config: "TrainConfig"
) -> Tuple[float, PolicyGradient]:
    """Power scaled clipped surrogate loss of a batch and its gradient with
    respect to the logits of `policy`.

    Every trajectory contributes −W · (1/n) Σ_t min(r_t·A, clip(r_t)·A), where
    the ratio r_t compares the current policy with the proximal
    log-probabilities recorded at sampling time and W is the power scaled
    importance weight. The batch loss is the mean over trajectories.

    Args:
        groups : Scored groups with advantages
        policy : Policy being trained
        config : Training config, provides β, the clip bounds and the log weight clamp

    Raises:
        NonFiniteLoss: The loss or its gradient is not finite.

    Returns:
        Loss value and sparse gradient
    """
    multipliers = [
        [power_scale(t.log_weight, config.beta, config.w_clamp) for t in g.trajectories]
        for g in groups
    ]
    return _surrogate(groups, policy, multipliers, config.eps_low, config.eps_high)


def grpo_loss_and_grad(
    groups: Sequence[GroupBatch], policy: ContextPolicy, config: "TrainConfig"
) -> Tuple[float, PolicyGradient]:
    """Plain clipped group relative loss, every trajectory with unit weight."""
    multipliers = [[1.0] * len(g.trajectories) for g in groups]
    return _surrogate(groups, policy, multipliers, config.eps_low, config.eps_high)
