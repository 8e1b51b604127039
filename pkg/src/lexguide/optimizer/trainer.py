"""Training loop: rollouts from the proximal snapshot, group scoring,
gradient steps on the surrogate loss and proximal synchronization.
"""

# This source code is licensed under the MIT license found in the
# LICENSE file in the root directory of this source tree.

# Copyright (c) 2021 scart97

__all__ = [
    "BASELINES",
    "TrainConfig",
    "TrainState",
    "setup_training",
    "initial_policy",
    "distill_guidance_hmm",
    "policy_optimizer",
    "run_iteration",
    "evaluate_policy",
    "CtrlRModule",
    "train",
]

import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import pytorch_lightning as pl
import torch
from pytorch_lightning.callbacks import ModelCheckpoint
from pytorch_lightning.loggers import CSVLogger
from torch import Tensor
from torch.utils.data import DataLoader

from lexguide.data import RolloutDataset, RolloutJob, run_rollouts
from lexguide.guidance import GuidanceTables, build_guidance_tables
from lexguide.hmm.distill import (
    EmFitResult,
    build_distillation_corpus,
    fit_baum_welch,
)
from lexguide.hmm.model import Hmm
from lexguide.lexicon.dfa import build_keyphrase_dfa
from lexguide.lexicon.tokenizer import KeyphraseConstraint
from lexguide.metrics import (
    REGIME_NAMES,
    ConstraintSatisfaction,
    KeyphraseUsage,
    WeightRegimeHistogram,
)
from lexguide.optimizer.loss import GroupBatch, ctrlr_loss_and_grad, shaped_reward
from lexguide.policy import ContextPolicy, apply_update, save_policy
from lexguide.reports import early_auc
from lexguide.rollout import GuidedTrajectory, sample_constraint, sample_trajectory
from lexguide.toyworld import (
    ToyTask,
    contains_pattern,
    evaluate_reward,
    generate_prompt,
    initial_policy_params,
)
from lexguide.utils import make_generator, write_jsonl

logger = logging.getLogger(__name__)

BASELINES = ("ctrl_r", "unguided", "reward_shaping")
CONSTRAINT_SAMPLING = ("prompt", "trajectory")
TRAJECTORY_DUMP = "trajectories.jsonl"

# Stream keys separating the random streams of the training run
_PROMPT_STREAM, _ROLLOUT_STREAM, _EVAL_STREAM, _DISTILL_STREAM = 1, 2, 3, 4


@dataclass
class TrainConfig:
    """Configuration of a training run.

    Attributes:
        beta: Power scaling exponent of the importance weight, in [0, 1]. defaults to 0.2.
        eps_low: Lower clip bound of the token ratio is 1 − eps_low. defaults to 0.20.
        eps_high: Upper clip bound of the token ratio is 1 + eps_high. defaults to 0.28.
        group_size: Trajectories per prompt, at least 2. defaults to 8.
        horizon: Maximum completion length T. defaults to 8.
        iterations: Number of training iterations. defaults to 150.
        prompts_per_batch: Prompts per iteration. defaults to 8.
        grad_steps_per_sync: Gradient steps before the proximal snapshot is synchronized, 1 to 4. defaults to 1.
        learning_rate: Plain gradient descent step size. defaults to 0.05.
        seed: Global seed, every random stream is derived from it.
        baseline: `"ctrl_r"` (guided rollouts), `"unguided"` (plain group relative training) or `"reward_shaping"` (unguided rollouts with a key phrase bonus).
        dynamic_group_filter: Resample groups whose rewards are all equal. defaults to `True`.
        max_resample_rounds: Resampling rounds before a flat group is kept. defaults to 3.
        w_clamp: Log weights are clamped to ±w_clamp before power scaling. defaults to 60.
        log_infeasible_floor: Log of the smallest guided normalizer before falling back. defaults to −40.
        constraint_sampling: Draw one constraint per `"prompt"` or per `"trajectory"`.
        hmm_states: Latent states of the distilled HMM. defaults to 8.
        distill_prefixes: Prompts in the distillation corpus. defaults to 500.
        distill_length: Tokens sampled after each distillation prompt. defaults to 64.
        em_max_iters: Maximum Baum-Welch iterations. defaults to 200.
        em_tol: Relative log-likelihood improvement that stops Baum-Welch. defaults to 1e-6.
        eval_prompts: Prompts of the fixed evaluation set. defaults to 200.
        eval_every: Iterations between evaluations. defaults to 10.
        eval_top_k: Optional top-k truncation of evaluation decoding.
        eval_top_p: Optional nucleus truncation of evaluation decoding.
        checkpoint_every: Iterations between policy checkpoints, 0 disables them. defaults to 50.
        num_workers: Dataloader workers of the rollout phase. defaults to 0.
        ctx_order: Context order of the policy. defaults to 4.
        table_size: Rows of the policy logits table. defaults to 4096.
        auc_iterations: Iterations covered by the early efficiency area. defaults to 50.
    """

    beta: float = 0.2
    eps_low: float = 0.20
    eps_high: float = 0.28
    group_size: int = 8
    horizon: int = 8
    iterations: int = 150
    prompts_per_batch: int = 8
    grad_steps_per_sync: int = 1
    learning_rate: float = 0.05
    seed: int = 0
    baseline: str = "ctrl_r"
    dynamic_group_filter: bool = True
    max_resample_rounds: int = 3
    w_clamp: float = 60.0
    log_infeasible_floor: float = -40.0
    constraint_sampling: str = "prompt"
    hmm_states: int = 8
    distill_prefixes: int = 500
    distill_length: int = 64
    em_max_iters: int = 200
    em_tol: float = 1e-6
    eval_prompts: int = 200
    eval_every: int = 10
    eval_top_k: Optional[int] = None
    eval_top_p: Optional[float] = None
    checkpoint_every: int = 50
    num_workers: int = 0
    ctx_order: int = 4
    table_size: int = 4096
    auc_iterations: int = 50

    def __post_init__(self):
        if not (0.0 <= self.beta <= 1.0):
            raise ValueError(f"beta must be in [0, 1], got {self.beta}")
        if self.eps_low <= 0 or self.eps_high <= 0:
            raise ValueError("Clip bounds eps_low and eps_high must be positive")
        if self.group_size < 2:
            raise ValueError("Group relative advantages need group_size >= 2")
        if not (1 <= self.grad_steps_per_sync <= 4):
            raise ValueError("grad_steps_per_sync must be between 1 and 4")
        if self.horizon < 1:
            raise ValueError("The horizon must be at least one token")
        if self.baseline not in BASELINES:
            raise ValueError(f"baseline must be one of {BASELINES}")
        if self.constraint_sampling not in CONSTRAINT_SAMPLING:
            raise ValueError(
                f"constraint_sampling must be one of {CONSTRAINT_SAMPLING}"
            )
        if self.w_clamp <= 0:
            raise ValueError("w_clamp must be positive")

    @property
    def guided(self) -> bool:
        return self.baseline == "ctrl_r"


@dataclass
class TrainState:
    """Everything a training run carries between iterations.

    Attributes:
        task: Toy task providing prompts and rewards.
        constraints: Constraint set sampled for guidance.
        tables: Guidance tables by constraint id.
        hmm: Guidance model the tables were built from.
        policy: Policy being trained.
        proximal: Frozen snapshot used for sampling and for the token ratios.
        iteration: Number of completed iterations.
        history: Metrics of every completed iteration.
        best_eval_reward: Best evaluation reward seen so far.
        best_iteration: Iteration of the best evaluation.
        last_groups: Groups trained on by the latest iteration.
    """

    task: ToyTask
    constraints: List[KeyphraseConstraint]
    tables: Dict[str, GuidanceTables]
    hmm: Hmm
    policy: ContextPolicy
    proximal: ContextPolicy
    iteration: int = 0
    history: List[Dict[str, Any]] = field(default_factory=list)
    best_eval_reward: Optional[float] = None
    best_iteration: Optional[int] = None
    last_groups: List[GroupBatch] = field(default_factory=list)

    @property
    def constraint_ids(self) -> List[str]:
        return [c.id for c in self.constraints]


def setup_training(
    config: TrainConfig,
    task: ToyTask,
    constraints: Sequence[KeyphraseConstraint],
    hmm: Optional[Hmm] = None,
    quiet: bool = True,
) -> TrainState:
    """Create the calibrated initial policy, distill the guidance HMM from
    it unless one is given, and build the guidance tables of every constraint.

    Args:
        config : Training config
        task : Toy task
        constraints : Constraint set, ids must be unique
        hmm : Previously distilled model, skips distillation
        quiet : Disable progress bars

    Returns:
        State at iteration 0
    """
    policy = initial_policy(config, task)
    if hmm is None:
        hmm = distill_guidance_hmm(config, task, policy, quiet).hmm
    elif hmm.vocab_size != task.vocab.size:
        raise ValueError("The HMM vocabulary does not match the task vocabulary")

    tables = {}
    for constraint in constraints:
        dfa = build_keyphrase_dfa(constraint, task.vocab)
        tables[constraint.id] = build_guidance_tables(hmm, dfa, config.horizon)
        logger.info(
            "Constraint %s compiled to %d automaton states",
            constraint.id,
            dfa.state_count,
        )
    return TrainState(
        task=task,
        constraints=list(constraints),
        tables=tables,
        hmm=hmm,
        policy=policy,
        proximal=policy.snapshot(),
    )


def initial_policy(config: TrainConfig, task: ToyTask) -> ContextPolicy:
    """Calibrated initial policy of a run, see
    [`initial_policy_params`][lexguide.toyworld.initial_policy_params].
    """
    return initial_policy_params(
        task,
        seed=config.seed,
        horizon=config.horizon,
        ctx_order=config.ctx_order,
        table_size=config.table_size,
    )


def distill_guidance_hmm(
    config: TrainConfig, task: ToyTask, policy: ContextPolicy, quiet: bool = True
) -> EmFitResult:
    """Fit the guidance HMM on continuations of fresh prompts sampled from a policy.

    Args:
        config : Training config, gives the corpus size and the EM settings
        task : Toy task providing the prompts
        policy : Policy to distill, usually the initial one
        quiet : Disable progress bars

    Returns:
        Fit result with the model and its likelihood history
    """
    generator = make_generator(config.seed, _DISTILL_STREAM)
    prompts = [
        generate_prompt(task, generator)[0] for _ in range(config.distill_prefixes)
    ]
    corpus = build_distillation_corpus(
        policy, prompts, config.distill_length, seed=config.seed, quiet=quiet
    )
    return fit_baum_welch(
        corpus,
        config.hmm_states,
        task.vocab.size,
        seed=config.seed,
        max_iters=config.em_max_iters,
        tol=config.em_tol,
        quiet=quiet,
    )


def _score(task: ToyTask, traj: GuidedTrajectory, baseline: str) -> float:
    reward = evaluate_reward(task, traj.prompt, traj.tokens)
    if baseline == "reward_shaping":
        reward = shaped_reward(reward, contains_pattern(traj.tokens, task.key_phrase))
    return reward


def _sample_groups(
    state: TrainState, config: TrainConfig, generator
) -> List[GroupBatch]:
    task = state.task
    prompts = [
        generate_prompt(task, generator) for _ in range(config.prompts_per_batch)
    ]
    ids = state.constraint_ids
    if config.constraint_sampling == "prompt":
        constraint_of = [
            [sample_constraint(ids, generator)] * config.group_size for _ in prompts
        ]
    else:
        constraint_of = [
            [sample_constraint(ids, generator) for _ in range(config.group_size)]
            for _ in prompts
        ]

    groups: Dict[int, GroupBatch] = {}
    pending = list(range(len(prompts)))
    for round_index in range(config.max_resample_rounds + 1):
        jobs = [
            RolloutJob(
                prompt_id=prompts[slot][1],
                slot=slot,
                group=g,
                prompt=tuple(prompts[slot][0]),
                constraint_id=constraint_of[slot][g],
                stream=(_ROLLOUT_STREAM, state.iteration, round_index),
            )
            for slot in pending
            for g in range(config.group_size)
        ]
        dataset = RolloutDataset(
            jobs,
            state.proximal,
            state.tables,
            config.horizon,
            config.seed,
            guided=config.guided,
            log_floor=config.log_infeasible_floor,
        )
        trajectories = run_rollouts(dataset, config.num_workers)
        for traj in trajectories:
            traj.reward = _score(task, traj, config.baseline)
            traj.iteration = state.iteration

        still_pending = []
        for i, slot in enumerate(pending):
            batch = trajectories[i * config.group_size : (i + 1) * config.group_size]
            group = GroupBatch.from_trajectories(prompts[slot][1], batch)
            last_round = round_index == config.max_resample_rounds
            if config.dynamic_group_filter and not group.has_signal and not last_round:
                still_pending.append(slot)
            else:
                groups[slot] = group
        pending = still_pending
        if not pending:
            break
    return [groups[slot] for slot in sorted(groups)]


def policy_optimizer(policy: ContextPolicy, config: TrainConfig) -> torch.optim.SGD:
    """Plain gradient descent on the logits table."""
    return torch.optim.SGD([policy.logits], lr=config.learning_rate)


def run_iteration(
    state: TrainState,
    config: TrainConfig,
    optimizer: Optional[torch.optim.Optimizer] = None,
) -> Dict[str, Any]:
    """One training iteration: sample a group per prompt from the proximal
    snapshot, take `grad_steps_per_sync` gradient steps on the surrogate loss,
    then synchronize the snapshot with the trained policy.

    Args:
        state : Training state, updated in place
        config : Training config
        optimizer : Optimizer over the policy logits. Plain gradient descent with the config learning rate when missing.

    Raises:
        NonFiniteLoss: The loss or its gradient is not finite.

    Returns:
        Metrics of the iteration
    """
    if optimizer is None:
        optimizer = policy_optimizer(state.policy, config)
    generator = make_generator(config.seed, _PROMPT_STREAM, state.iteration)
    groups = _sample_groups(state, config, generator)

    losses = []
    for _ in range(config.grad_steps_per_sync):
        loss, grad = ctrlr_loss_and_grad(groups, state.policy, config)
        apply_update(state.policy, grad, config.learning_rate, optimizer)
        losses.append(loss)
    state.proximal = state.policy.snapshot()
    state.last_groups = groups

    trajectories = [t for g in groups for t in g.trajectories]
    task_rewards = [
        evaluate_reward(state.task, t.prompt, t.tokens) for t in trajectories
    ]
    satisfaction = ConstraintSatisfaction(state.constraint_ids)
    satisfaction.update(trajectories)
    usage = KeyphraseUsage(state.task.key_phrase)
    usage.update([t.tokens for t in trajectories], task_rewards)
    regimes = WeightRegimeHistogram()
    regimes.update([t.log_weight for t in trajectories], task_rewards)
    fallback_rate = sum(t.fallback for t in trajectories) / len(trajectories)

    metrics = {
        "iteration": state.iteration,
        "mean_reward": math.fsum(task_rewards) / len(task_rewards),
        "loss": losses[0],
        "fallback_rate": fallback_rate,
        "key_usage": float(usage.compute()),
        "key_accuracy": float(usage.hit_accuracy()),
    }
    for name, count in zip(REGIME_NAMES, regimes.compute().tolist()):
        metrics[f"regime_{name}"] = int(count)
    for cid, rate in satisfaction.as_dict().items():
        metrics[f"satisfaction[{cid}]"] = rate

    if fallback_rate > 0.5:
        warnings.warn(
            f"{fallback_rate:.0%} of the trajectories fell back to unguided sampling"
        )
    logger.info(
        "Iteration %d: mean reward %.3f, loss %.4f, key usage %.3f",
        state.iteration,
        metrics["mean_reward"],
        metrics["loss"],
        metrics["key_usage"],
    )
    state.iteration += 1
    state.history.append(metrics)
    return metrics


def evaluate_policy(
    state: TrainState, config: TrainConfig, policy: Optional[ContextPolicy] = None
) -> Dict[str, float]:
    """Unguided evaluation on a fixed set of prompts, with the optional
    top-k and nucleus truncation of the config.

    Args:
        state : Training state
        config : Training config
        policy : Policy to evaluate, defaults to the trained one

    Returns:
        Mean task reward and key phrase rate
    """
    policy = policy or state.policy
    tables = state.tables[state.constraint_ids[0]]
    prompt_generator = make_generator(config.seed, _EVAL_STREAM)
    rewards, key_hits = [], 0
    for slot in range(config.eval_prompts):
        prompt, prompt_id = generate_prompt(state.task, prompt_generator)
        traj = sample_trajectory(
            policy,
            tables,
            prompt,
            config.horizon,
            make_generator(config.seed, _EVAL_STREAM, state.iteration, slot),
            prompt_id=prompt_id,
            guided=False,
            top_k=config.eval_top_k,
            top_p=config.eval_top_p,
        )
        rewards.append(evaluate_reward(state.task, prompt, traj.tokens))
        key_hits += contains_pattern(traj.tokens, state.task.key_phrase)
    n = max(len(rewards), 1)
    return {"eval_reward": math.fsum(rewards) / n, "eval_key_rate": key_hits / n}


class CtrlRModule(pl.LightningModule):
    def __init__(
        self,
        state: TrainState,
        config: TrainConfig,
        out_dir: Optional[Union[str, Path]] = None,
    ):
        """Lightning wrapper around a training run. Every batch is one
        iteration index, and every iteration samples its own groups, so the
        optimization is manual: the sparse gradient of the surrogate loss is
        written into the logits table and stepped by the optimizer.

        Args:
            state : Training state, updated in place
            config : Training config
            out_dir : Folder receiving the trajectory dump. Nothing is dumped when missing.
        """
        super().__init__()
        self.automatic_optimization = False
        self.save_hyperparameters({"config": asdict(config)})
        self.run_state = state
        self.config = config
        self.policy = state.policy
        self.dump_path = Path(out_dir) / TRAJECTORY_DUMP if out_dir else None
        self.last_eval: Dict[str, float] = {}

    def forward(self, context: Sequence[int]) -> Tensor:
        return self.policy(context)

    def train_dataloader(self) -> DataLoader:
        remaining = range(self.run_state.iteration, self.config.iterations)
        return DataLoader(list(remaining), batch_size=None)

    def training_step(self, batch: int, batch_idx: int):
        """Training step. Check the original lightning docs for more information.

        Args:
            batch : Index of the iteration
            batch_idx : Batch index
        """
        state, config = self.run_state, self.config
        metrics = run_iteration(state, config, self.optimizers())
        done = state.iteration
        if done % config.eval_every == 0 or done == config.iterations:
            self.last_eval = evaluate_policy(state, config)
            metrics.update(self.last_eval)
            best = state.best_eval_reward
            if best is None or self.last_eval["eval_reward"] > best:
                state.best_eval_reward = self.last_eval["eval_reward"]
                state.best_iteration = done
        self.log_dict(
            {k: float(v) for k, v in metrics.items()},
            on_step=True,
            on_epoch=False,
            batch_size=1,
        )
        if self.dump_path is not None:
            write_jsonl(
                self.dump_path,
                (t.to_dict() for g in state.last_groups for t in g.trajectories),
                append=True,
            )

    def configure_optimizers(self) -> torch.optim.Optimizer:
        """Configuring optimizers. Check the original lightning docs for more info.

        Returns:
            Plain gradient descent on the policy logits
        """
        return policy_optimizer(self.policy, self.config)


def train(
    state: TrainState,
    config: TrainConfig,
    out_dir: Optional[Union[str, Path]] = None,
    quiet: bool = True,
) -> Dict[str, Any]:
    """Run the remaining iterations of a training run with a lightning trainer.
    When `out_dir` is given it receives `metrics.csv` from the csv logger,
    `policy_{step}.ckpt` every `checkpoint_every` iterations, the trajectory
    dump and `policy_final.pt`.

    Args:
        state : Training state
        config : Training config
        out_dir : Folder of the metrics csv and the checkpoints. Nothing is written when missing.
        quiet : Disable the progress bar

    Returns:
        Run summary: final and best evaluation reward, early efficiency area and final key phrase usage
    """
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None and state.iteration == 0:
        out_dir.mkdir(parents=True, exist_ok=True)
        for stale in ("metrics.csv", TRAJECTORY_DUMP):
            if (out_dir / stale).exists():
                (out_dir / stale).unlink()

    module = CtrlRModule(state, config, out_dir)
    callbacks = []
    if out_dir is not None and config.checkpoint_every > 0:
        # the global step counts optimizer steps, several per iteration
        callbacks.append(
            ModelCheckpoint(
                dirpath=str(out_dir),
                filename="policy_{step:05d}",
                auto_insert_metric_name=False,
                every_n_train_steps=config.checkpoint_every
                * config.grad_steps_per_sync,
                save_top_k=-1,
            )
        )
    trainer = pl.Trainer(
        max_epochs=1,
        logger=CSVLogger(str(out_dir), name="", version="") if out_dir else False,
        callbacks=callbacks,
        enable_checkpointing=bool(callbacks),
        enable_progress_bar=not quiet,
        enable_model_summary=False,
        log_every_n_steps=1,
        accelerator="cpu",
        devices=1,
        default_root_dir=str(out_dir) if out_dir else None,
    )
    if state.iteration < config.iterations:
        trainer.fit(module)

    if out_dir is not None:
        save_policy(state.policy, out_dir / "policy_final.pt")
    rewards = [m["mean_reward"] for m in state.history]
    last_eval = module.last_eval
    return {
        "baseline": config.baseline,
        "beta": config.beta,
        "seed": config.seed,
        "final_eval_reward": last_eval.get("eval_reward", float("nan")),
        "best_eval_reward": state.best_eval_reward,
        "best_iteration": state.best_iteration,
        "early_auc": early_auc(rewards, config.auc_iterations),
        "final_eval_key_rate": last_eval.get("eval_key_rate", float("nan")),
        "final_key_usage": state.history[-1]["key_usage"] if state.history else 0.0,
    }
