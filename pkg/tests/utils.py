# This source code is licensed under the MIT license found in the
# LICENSE file in the root directory of this source tree.

# Copyright (c) 2021 scart97

import math
import os

import pytest

import torch

from lexguide.optimizer.loss import GroupBatch
from lexguide.rollout import GuidedTrajectory

mark_slow = pytest.mark.skipif(not os.getenv("RUN_SLOW"), reason="Skip slow tests")


def make_trajectory(
    prompt, tokens, log_pi_old, reward=0.0, log_weight=0.0, prompt_id=0, group=0
) -> GuidedTrajectory:
    """Hand built trajectory, the behavior policy is taken equal to the proximal one."""
    return GuidedTrajectory(
        prompt_id=prompt_id,
        group=group,
        constraint_id="c",
        prompt=list(prompt),
        tokens=list(tokens),
        log_pi_old=list(log_pi_old),
        log_mu=list(log_pi_old),
        log_w=[0.0] * len(tokens),
        log_weight=log_weight,
        reward=reward,
    )


def sampled_group(policy, prompt, completions, rewards, log_weights=None, prompt_id=0):
    """Group of trajectories whose proximal log-probabilities come from `policy`."""
    log_weights = log_weights or [0.0] * len(completions)
    trajectories = []
    for g, (tokens, reward, log_w) in enumerate(
        zip(completions, rewards, log_weights)
    ):
        context = list(prompt)
        log_pi_old = []
        for tok in tokens:
            log_pi_old.append(float(policy.next_token_log_probs(context)[tok]))
            context.append(tok)
        trajectories.append(
            make_trajectory(
                prompt, tokens, log_pi_old, reward, log_w, prompt_id=prompt_id, group=g
            )
        )
    return GroupBatch.from_trajectories(prompt_id, trajectories)


def total_variation(p, q) -> float:
    keys = set(p) | set(q)
    return 0.5 * math.fsum(abs(p.get(k, 0.0) - q.get(k, 0.0)) for k in keys)


def seeded(seed: int) -> torch.Generator:
    generator = torch.Generator()
    generator.manual_seed(seed)
    return generator
