# This source code is licensed under the MIT license found in the
# LICENSE file in the root directory of this source tree.

# Copyright (c) 2021 scart97

__all__ = [
    "REGIME_BOUNDARIES",
    "REGIME_NAMES",
    "regime_of",
    "strict_usage_rate",
    "ConstraintSatisfaction",
    "KeyphraseUsage",
    "WeightRegimeHistogram",
]

import math
from typing import Dict, List, Sequence

import torch
from torch import Tensor, tensor
from torchmetrics import Metric

from lexguide.toyworld import contains_pattern

REGIME_BOUNDARIES = (1e-6, 1e-1)
REGIME_NAMES = ("low", "mid", "high")
_BOUNDARY_SLACK = 1e-12


def regime_of(log_weight: float) -> int:
    """Weight regime of a trajectory: 0 when w < 1e-6, 2 when w > 1e-1, 1 otherwise."""
    # both boundaries belong to the mid regime, up to rounding of log(w)
    low, high = (math.log(b) for b in REGIME_BOUNDARIES)
    if log_weight < low - _BOUNDARY_SLACK:
        return 0
    if log_weight > high + _BOUNDARY_SLACK:
        return 2
    return 1


def strict_usage_rate(
    completions: Sequence[Sequence[int]], pattern: Sequence[int]
) -> float:
    """Fraction of completions containing the pattern contiguously.
    This is the functional form, and it's recommended to use inside the training loop the class
    [`KeyphraseUsage`][lexguide.metrics.KeyphraseUsage] instead.

    Args:
        completions : Completion token ids
        pattern : Token pattern

    Returns:
        Value between 0.0 and 1.0, 0.0 for no completions.
    """
    if len(completions) == 0:
        return 0.0
    return sum(contains_pattern(c, pattern) for c in completions) / len(completions)


def _safe_ratio(num: Tensor, den: Tensor) -> Tensor:
    return torch.where(den > 0, num / den.clamp(min=1), torch.zeros_like(num))


class ConstraintSatisfaction(Metric):
    def __init__(self, constraint_ids: Sequence[str], **kwargs):
        """Satisfaction rate of every constraint over the trajectories guided towards it.

        Args:
            constraint_ids : Constraints tracked, in report order
            kwargs : Forwarded to `torchmetrics.Metric`
        """
        super().__init__(**kwargs)
        self.constraint_ids = list(constraint_ids)
        n = len(self.constraint_ids)
        self.add_state(
            "satisfied",
            default=torch.zeros(n, dtype=torch.float64),
            dist_reduce_fx="sum",
        )
        self.add_state(
            "total", default=torch.zeros(n, dtype=torch.float64), dist_reduce_fx="sum"
        )

    def update(self, trajectories: List):
        for traj in trajectories:
            index = self.constraint_ids.index(traj.constraint_id)
            self.total[index] += 1
            self.satisfied[index] += float(traj.satisfied)

    def compute(self) -> Tensor:
        """Rates in constraint order, 0.0 for constraints without trajectories."""
        return _safe_ratio(self.satisfied, self.total)

    def as_dict(self) -> Dict[str, float]:
        # compute() squeezes a single constraint to a 0-d tensor
        rates = _safe_ratio(self.satisfied, self.total).reshape(-1)
        return dict(zip(self.constraint_ids, rates.tolist()))


class KeyphraseUsage(Metric):
    def __init__(self, pattern: Sequence[int], **kwargs):
        """Strict usage rate of a token pattern and the accuracy of the
        completions that use it.

        Args:
            pattern : Token pattern, matched contiguously
            kwargs : Forwarded to `torchmetrics.Metric`
        """
        super().__init__(**kwargs)
        self.pattern = tuple(pattern)
        self.add_state(
            "hits", default=tensor(0.0, dtype=torch.float64), dist_reduce_fx="sum"
        )
        self.add_state(
            "hits_correct",
            default=tensor(0.0, dtype=torch.float64),
            dist_reduce_fx="sum",
        )
        self.add_state(
            "total", default=tensor(0.0, dtype=torch.float64), dist_reduce_fx="sum"
        )

    def update(self, completions: Sequence[Sequence[int]], rewards: Sequence[float]):
        assert len(completions) == len(rewards), "Every completion needs a reward"
        for completion, reward in zip(completions, rewards):
            self.total += 1
            if contains_pattern(completion, self.pattern):
                self.hits += 1
                self.hits_correct += float(reward > 0)

    def compute(self) -> Tensor:
        return _safe_ratio(self.hits, self.total)

    def hit_accuracy(self) -> Tensor:
        """Fraction of correct completions among those using the pattern."""
        return _safe_ratio(self.hits_correct, self.hits)


class WeightRegimeHistogram(Metric):
    def __init__(self, **kwargs):
        """Trajectory counts in the three weight regimes split at 1e-6 and
        1e-1, with the reward and accuracy accumulated per regime.

        Args:
            kwargs : Forwarded to `torchmetrics.Metric`
        """
        super().__init__(**kwargs)
        for name in ("counts", "reward_sums", "correct"):
            self.add_state(
                name, default=torch.zeros(3, dtype=torch.float64), dist_reduce_fx="sum"
            )

    def update(self, log_weights: Sequence[float], rewards: Sequence[float]):
        assert len(log_weights) == len(rewards), "Every weight needs a reward"
        for log_weight, reward in zip(log_weights, rewards):
            regime = regime_of(log_weight)
            self.counts[regime] += 1
            self.reward_sums[regime] += reward
            self.correct[regime] += float(reward > 0)

    def compute(self) -> Tensor:
        """Counts of the low, mid and high regimes."""
        return self.counts.clone()

    def mean_reward(self) -> Tensor:
        return _safe_ratio(self.reward_sums, self.counts)

    def accuracy(self) -> Tensor:
        return _safe_ratio(self.correct, self.counts)
