# This source code is licensed under the MIT license found in the
# LICENSE file in the root directory of this source tree.

# Copyright (c) 2021 scart97

import math

import pytest

import torch
from hypothesis import given
from hypothesis import strategies as st

from lexguide.optimizer.loss import (
    GroupBatch,
    NonFiniteLoss,
    clipped_token_term,
    ctrlr_loss_and_grad,
    group_advantages,
    grpo_loss_and_grad,
    power_scale,
    shaped_reward,
)
from lexguide.optimizer.trainer import TrainConfig
from tests.utils import make_trajectory, sampled_group, seeded


def test_group_advantages_are_standardized():
    adv = group_advantages([1.0, -1.0, 1.0, -1.0])
    assert adv.tolist() == pytest.approx([1.0, -1.0, 1.0, -1.0])
    adv = group_advantages([1.0, -1.0, -1.0, -1.0])
    assert float(adv.mean()) == pytest.approx(0.0, abs=1e-12)
    assert float(adv.std(unbiased=False)) == pytest.approx(1.0)


def test_flat_group_has_no_advantage():
    assert group_advantages([0.5, 0.5, 0.5]).tolist() == [0.0, 0.0, 0.0]


def test_group_of_one_is_rejected():
    with pytest.raises(AssertionError):
        group_advantages([1.0])


@pytest.mark.parametrize(
    "reward,matched,expected",
    [(1.0, True, 2.0), (1.0, False, 1.0), (-1.0, True, -1.0), (-1.0, False, -1.0)],
)
def test_shaped_reward(reward, matched, expected):
    assert shaped_reward(reward, matched) == expected


@given(st.floats(min_value=-50, max_value=50))
def test_power_scale_limits(log_w):
    assert power_scale(log_w, 1.0) == pytest.approx(math.exp(log_w))
    assert power_scale(log_w, 0.0) == 1.0


@pytest.mark.parametrize("w", [1e-9, 1e-6, 1e-3, 0.1, 0.5, 0.99])
def test_power_scale_orders_small_weights(w):
    betas = [0.0, 0.1, 0.2, 0.5, 1.0]
    scaled = [power_scale(math.log(w), beta) for beta in betas]
    assert all(a > b for a, b in zip(scaled, scaled[1:]))


def test_power_scale_clamps_the_log_weight():
    assert power_scale(-500.0, 1.0, w_clamp=60.0) == pytest.approx(math.exp(-60.0))
    assert power_scale(500.0, 0.5, w_clamp=60.0) == pytest.approx(math.exp(30.0))


@pytest.mark.parametrize(
    "ratio,advantage,term,active",
    [
        (1.0, 1.0, 1.0, True),
        (1.5, 1.0, 1.28, False),
        (0.5, 1.0, 0.5, True),
        (0.5, -1.0, -0.8, False),
        (1.5, -1.0, -1.5, True),
        (1.1, 0.0, 0.0, False),
    ],
)
def test_clipped_token_term(ratio, advantage, term, active):
    got_term, got_active = clipped_token_term(ratio, advantage, 0.2, 0.28)
    assert got_term == pytest.approx(term)
    assert got_active is active


def test_group_signal():
    flat = GroupBatch.from_trajectories(
        0, [make_trajectory([0], [1], [-1.0], reward=1.0) for _ in range(3)]
    )
    assert not flat.has_signal
    mixed = GroupBatch.from_trajectories(
        0,
        [
            make_trajectory([0], [1], [-1.0], reward=1.0),
            make_trajectory([0], [1], [-1.0], reward=-1.0),
        ],
    )
    assert mixed.has_signal


def _random_groups(policy, generator, num_groups=3, group_size=4):
    vocab = policy.vocab_size
    groups = []
    for p in range(num_groups):
        prompt = [int(torch.randint(vocab, (1,), generator=generator))]
        lengths = torch.randint(1, 5, (group_size,), generator=generator).tolist()
        completions = [
            torch.randint(vocab, (n,), generator=generator).tolist() for n in lengths
        ]
        rewards = [1.0, -1.0] + [
            float(torch.randint(2, (1,), generator=generator)) * 2 - 1
            for _ in range(group_size - 2)
        ]
        log_weights = (-6 * torch.rand(group_size, generator=generator)).tolist()
        groups.append(
            sampled_group(policy, prompt, completions, rewards, log_weights, p)
        )
    return groups


def test_loss_gradient_matches_finite_differences(tiny_policy):
    config = TrainConfig(beta=0.2)
    generator = seeded(0)
    proximal = tiny_policy.snapshot()
    groups = _random_groups(proximal, generator)
    # move away from the proximal policy, staying far from the clip bounds
    tiny_policy.logits.data += 0.02 * torch.randn(
        tiny_policy.logits.shape, generator=generator, dtype=torch.float64
    )
    _, grad = ctrlr_loss_and_grad(groups, tiny_policy, config)
    vocab = range(tiny_policy.vocab_size)
    entries = [(cid, v) for cid, _ in grad.items() for v in vocab]
    step = 1e-6
    for trial in range(50):
        cid, v = entries[int(torch.randint(len(entries), (1,), generator=generator))]
        tiny_policy.logits.data[cid, v] += step
        upper, _ = ctrlr_loss_and_grad(groups, tiny_policy, config)
        tiny_policy.logits.data[cid, v] -= 2 * step
        lower, _ = ctrlr_loss_and_grad(groups, tiny_policy, config)
        tiny_policy.logits.data[cid, v] += step
        numeric = (upper - lower) / (2 * step)
        analytic = float(grad.rows[cid][v])
        assert abs(numeric - analytic) <= 1e-4 * max(abs(analytic), 1e-4), trial


@pytest.mark.parametrize("beta", [0.0, 0.2, 1.0])
def test_unit_weights_reduce_to_grpo(tiny_policy, beta):
    groups = _random_groups(tiny_policy, seeded(1))
    for group in groups:
        for traj in group.trajectories:
            traj.log_weight = 0.0
    config = TrainConfig(beta=beta)
    loss, grad = ctrlr_loss_and_grad(groups, tiny_policy, config)
    grpo_loss, grpo_grad = grpo_loss_and_grad(groups, tiny_policy, config)
    assert loss == grpo_loss
    assert [cid for cid, _ in grad.items()] == [cid for cid, _ in grpo_grad.items()]
    for (_, row), (_, grpo_row) in zip(grad.items(), grpo_grad.items()):
        assert torch.equal(row, grpo_row)


def test_beta_zero_ignores_the_weights(tiny_policy):
    groups = _random_groups(tiny_policy, seeded(2))
    config = TrainConfig(beta=0.0)
    loss, _ = ctrlr_loss_and_grad(groups, tiny_policy, config)
    grpo_loss, _ = grpo_loss_and_grad(groups, tiny_policy, config)
    assert loss == grpo_loss


def test_on_policy_loss_is_minus_mean_advantage(tiny_policy):
    # ratios are 1, so every token term equals the advantage
    groups = _random_groups(tiny_policy, seeded(4))
    loss, _ = grpo_loss_and_grad(groups, tiny_policy, TrainConfig())
    advantages = [a for g in groups for a in g.advantages.tolist()]
    assert loss == pytest.approx(-sum(advantages) / len(advantages), abs=1e-12)


def test_empty_completion_contributes_nothing(tiny_policy):
    group = GroupBatch.from_trajectories(
        0,
        [
            make_trajectory([0], [], [], reward=1.0),
            make_trajectory([0], [], [], reward=-1.0),
        ],
    )
    loss, grad = grpo_loss_and_grad([group], tiny_policy, TrainConfig())
    assert loss == 0.0
    assert len(grad) == 0


def test_non_finite_loss_is_reported(tiny_policy):
    group = GroupBatch.from_trajectories(
        0,
        [
            make_trajectory([0], [1], [-1000.0], reward=1.0),
            make_trajectory([0], [1], [-1000.0], reward=-1.0),
        ],
    )
    with pytest.raises(NonFiniteLoss):
        grpo_loss_and_grad([group], tiny_policy, TrainConfig())
