"""Rollout jobs as a torch dataset, so the sampling phase can be spread
over dataloader workers.
"""

# This source code is licensed under the MIT license found in the
# LICENSE file in the root directory of this source tree.

# Copyright (c) 2021 scart97

__all__ = ["RolloutJob", "RolloutDataset", "rollout_collate", "run_rollouts"]

from dataclasses import dataclass
from typing import Dict, List, Sequence, Tuple

from torch.utils.data import DataLoader, Dataset

from lexguide.guidance import DEFAULT_LOG_FLOOR, GuidanceTables
from lexguide.rollout import GuidedTrajectory, sample_trajectory
from lexguide.utils import make_generator


@dataclass(frozen=True)
class RolloutJob:
    """One trajectory to sample.

    Attributes:
        prompt_id: Id of the prompt.
        slot: Position of the prompt in the batch, part of the random stream key.
        group: Index of the trajectory in its group.
        prompt: Prompt token ids.
        constraint_id: Constraint to guide towards.
        stream: Extra keys of the random stream, for example the iteration and resampling round.
    """

    prompt_id: int
    slot: int
    group: int
    prompt: Tuple[int, ...]
    constraint_id: str
    stream: Tuple[int, ...] = ()


class RolloutDataset(Dataset):
    def __init__(
        self,
        jobs: Sequence[RolloutJob],
        policy,
        tables: Dict[str, GuidanceTables],
        horizon: int,
        seed: int,
        guided: bool = True,
        log_floor: float = DEFAULT_LOG_FLOOR,
    ):
        """Every item is a trajectory sampled from its own random stream,
        derived from (seed, stream, slot, group), so the result does not
        depend on the worker that produced it.

        Args:
            jobs : Trajectories to sample
            policy : Proximal policy snapshot, only read
            tables : Guidance tables by constraint id, only read
            horizon : Maximum completion length
            seed : Global seed
            guided : Sample from the guided behavior policy, or from the proximal policy alone
            log_floor : Smallest admissible log normalizer
        """
        super().__init__()
        self.jobs = list(jobs)
        self.policy = policy
        self.tables = tables
        self.horizon = horizon
        self.seed = seed
        self.guided = guided
        self.log_floor = log_floor

    def __len__(self) -> int:
        return len(self.jobs)

    def __getitem__(self, index: int) -> GuidedTrajectory:
        job = self.jobs[index]
        generator = make_generator(self.seed, *job.stream, job.slot, job.group)
        return sample_trajectory(
            self.policy,
            self.tables[job.constraint_id],
            job.prompt,
            self.horizon,
            generator,
            prompt_id=job.prompt_id,
            group=job.group,
            guided=self.guided,
            log_floor=self.log_floor,
        )


def rollout_collate(samples: List[GuidedTrajectory]) -> List[GuidedTrajectory]:
    """Keep trajectories as a list, they have different lengths."""
    return list(samples)


def run_rollouts(
    dataset: RolloutDataset, num_workers: int = 0
) -> List[GuidedTrajectory]:
    """Sample every job of the dataset.

    Args:
        dataset : Rollout jobs
        num_workers : Dataloader workers, 0 samples in the calling process

    Returns:
        Trajectories in job order
    """
    loader = DataLoader(
        dataset,
        batch_size=max(1, len(dataset) // max(1, num_workers)),
        shuffle=False,
        collate_fn=rollout_collate,
        num_workers=num_workers,
    )
    trajectories = []
    for batch in loader:
        trajectories.extend(batch)
    return trajectories
