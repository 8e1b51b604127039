"""Synthetic verifiable task where the rewarded solutions need a sparse
keyphrase, and the calibrated initial policy used to explore it.
"""

# This source code is licensed under the MIT license found in the
# LICENSE file in the root directory of this source tree.

# Copyright (c) 2021 scart97

__all__ = [
    "CalibrationFailed",
    "ToyTaskConfig",
    "RewardSpec",
    "ToyTask",
    "generate_prompt",
    "evaluate_reward",
    "contains_pattern",
    "default_constraints",
    "unguided_key_rate",
    "initial_policy_params",
]

import logging
import math
import string
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import torch

from lexguide.lexicon.tokenizer import KeyphraseConstraint, make_constraint, tokenize
from lexguide.lexicon.vocab import Vocab
from lexguide.policy import ContextPolicy
from lexguide.utils import default_list, make_generator

logger = logging.getLogger(__name__)

PROB_FLOOR = 1e-4
ANSWER_MARKER = "ANSWER"
MODES = ("needle", "plain")


class CalibrationFailed(RuntimeError):
    pass


@dataclass
class ToyTaskConfig:
    """Configuration to create a [`ToyTask`][lexguide.toyworld.ToyTask]

    Attributes:
        letters: Question tokens, prompts are made of them. defaults to `a` to `v`.
        digits: Digit tokens. The first `num_answers` are the possible answers, the rest are fillers.
        keywords: Reasoning words, keyphrases are built from them.
        key_phrase: Phrase required for a reward in needle mode. defaults to `"wait verify"`.
        mode: `"needle"` or `"plain"`. defaults to `"needle"`.
        prompt_length: Number of question tokens per prompt. defaults to 1.
        num_answers: Number of distinct answer tokens. defaults to 4.
        answer_seed: Seed of the permutation that maps questions to answers.
        distractors: Extra constraints, id mapped to OR-ed phrases, sampled alongside the key phrase.
    """

    letters: List[str] = default_list(list(string.ascii_lowercase[:22]))
    digits: List[str] = default_list([str(d) for d in range(10)])
    keywords: List[str] = default_list(
        ["wait", "verify", "let", "me", "check", "reverse"]
    )
    key_phrase: str = "wait verify"
    mode: str = "needle"
    prompt_length: int = 1
    num_answers: int = 4
    answer_seed: int = 1234
    distractors: Dict[str, List[str]] = field(
        default_factory=lambda: {
            "backtracking": ["let me check", "reverse"],
            "subgoal": ["let me"],
        }
    )

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"Task mode must be one of {MODES}, got {self.mode!r}")
        if self.prompt_length < 1:
            raise ValueError("Prompts need at least one question token")
        if not (1 <= self.num_answers <= len(self.digits)):
            raise ValueError("num_answers must be between 1 and the number of digits")
        if len(self.letters) < self.num_answers:
            raise ValueError("Every answer needs at least one question token")


@dataclass(frozen=True)
class RewardSpec:
    """Reward convention of the task.

    Attributes:
        mode: `"needle"` or `"plain"`.
        positive: Reward of a correct completion.
        negative: Reward of every other completion.
    """

    mode: str = "needle"
    positive: float = 1.0
    negative: float = -1.0


class ToyTask:
    def __init__(self, cfg: Optional[ToyTaskConfig] = None):
        """Question answering task over a small vocabulary. A prompt is a
        sequence of question tokens, its answer is one of a few digit
        tokens given by a fixed random class assignment of the questions.
        A completion answers by emitting the answer marker followed by the
        answer. In needle mode the answer only counts after the key phrase.

        Args:
            cfg : Task configuration, defaults are used when missing
        """
        cfg = cfg or ToyTaskConfig()
        self.cfg = cfg
        self.vocab = Vocab(cfg.letters + cfg.digits + cfg.keywords + [ANSWER_MARKER])
        self.reward_spec = RewardSpec(mode=cfg.mode)
        self.key_phrase = tuple(tokenize(cfg.key_phrase, self.vocab))
        self.answer_marker = self.vocab.stoi[ANSWER_MARKER]
        self.letter_ids = self.vocab.numericalize(cfg.letters)
        self.answer_ids = self.vocab.numericalize(cfg.digits[: cfg.num_answers])

        generator = torch.Generator()
        generator.manual_seed(cfg.answer_seed)
        permutation = torch.randperm(
            len(self.letter_ids), generator=generator
        ).tolist()
        self.letter_class = {
            self.letter_ids[letter]: position % cfg.num_answers
            for position, letter in enumerate(permutation)
        }
        self.letters_by_class = [
            [tok for tok in self.letter_ids if self.letter_class[tok] == c]
            for c in range(cfg.num_answers)
        ]

    @property
    def mode(self) -> str:
        return self.cfg.mode

    @property
    def eos_idx(self) -> int:
        return self.vocab.eos_idx

    def answer_index(self, prompt: Sequence[int]) -> int:
        return sum(self.letter_class[tok] for tok in prompt) % self.cfg.num_answers

    def answer_token(self, prompt: Sequence[int]) -> int:
        """Correct answer token of a prompt."""
        return self.answer_ids[self.answer_index(prompt)]

    def prompt_id(self, prompt: Sequence[int]) -> int:
        """Integer that identifies a prompt, its base len(letters) encoding."""
        base = len(self.letter_ids)
        position = {tok: i for i, tok in enumerate(self.letter_ids)}
        pid = 0
        for tok in prompt:
            pid = pid * base + position[tok]
        return pid

    def key_constraint(self) -> KeyphraseConstraint:
        return KeyphraseConstraint(id="verification", phrases=(self.key_phrase,))


def generate_prompt(
    task: ToyTask, generator: torch.Generator
) -> Tuple[List[int], int]:
    """Draw a random prompt. The answer is drawn uniformly first and the
    question tokens are then drawn so that they encode it.

    Args:
        task : Task
        generator : Source of randomness

    Returns:
        Prompt token ids and prompt id
    """
    cfg = task.cfg
    answer = int(torch.randint(cfg.num_answers, (1,), generator=generator))
    prompt = [
        task.letter_ids[int(i)]
        for i in torch.randint(
            len(task.letter_ids), (cfg.prompt_length - 1,), generator=generator
        )
    ]
    partial = sum(task.letter_class[tok] for tok in prompt)
    candidates = task.letters_by_class[(answer - partial) % cfg.num_answers]
    pick = int(torch.randint(len(candidates), (1,), generator=generator))
    prompt.append(candidates[pick])
    return prompt, task.prompt_id(prompt)


def _find(tokens: Sequence[int], pattern: Sequence[int], start: int = 0) -> int:
    n = len(pattern)
    for i in range(start, len(tokens) - n + 1):
        if tuple(tokens[i : i + n]) == tuple(pattern):
            return i
    return -1


def contains_pattern(tokens: Sequence[int], pattern: Sequence[int]) -> bool:
    """Strict contiguous containment of a token pattern."""
    return len(pattern) > 0 and _find(tokens, pattern) >= 0


def evaluate_reward(
    task: ToyTask, prompt: Sequence[int], completion: Sequence[int]
) -> float:
    """Score a completion.

    Needle mode gives the positive reward only if the key phrase appears and
    the answer marker followed by the correct answer appears after its end.
    Plain mode only looks for the answer marker followed by the correct answer.

    Args:
        task : Task
        prompt : Prompt token ids
        completion : Completion token ids

    Returns:
        +1 or −1
    """
    spec = task.reward_spec
    completion = list(completion)
    answer = (task.answer_marker, task.answer_token(prompt))
    start = 0
    if spec.mode == "needle":
        key_at = _find(completion, task.key_phrase)
        if key_at < 0:
            return spec.negative
        start = key_at + len(task.key_phrase)
    return spec.positive if _find(completion, answer, start) >= 0 else spec.negative


def default_constraints(task: ToyTask) -> List[KeyphraseConstraint]:
    """Structure catalog of the task: the key phrase, useful for the reward,
    followed by the distractor structures of the config.
    """
    constraints = [task.key_constraint()]
    for cid, phrases in task.cfg.distractors.items():
        constraints.append(make_constraint(cid, phrases, task.vocab))
    return constraints


def _sample_unguided_batch(
    policy: ContextPolicy,
    prompts: List[List[int]],
    horizon: int,
    eos_idx: int,
    generator: torch.Generator,
) -> List[List[int]]:
    contexts = [list(p) for p in prompts]
    completions: List[List[int]] = [[] for _ in prompts]
    alive = list(range(len(prompts)))
    for _ in range(horizon):
        if not alive:
            break
        rows = torch.tensor([policy.context_id(contexts[i]) for i in alive])
        probs = torch.softmax(policy.logits.detach()[rows], dim=1)
        tokens = torch.multinomial(probs, 1, generator=generator).squeeze(1).tolist()
        still_alive = []
        for i, tok in zip(alive, tokens):
            completions[i].append(tok)
            contexts[i].append(tok)
            if tok != eos_idx:
                still_alive.append(i)
        alive = still_alive
    return completions


def unguided_key_rate(
    policy: ContextPolicy,
    task: ToyTask,
    num_rollouts: int = 10_000,
    horizon: int = 8,
    seed: int = 0,
) -> float:
    """Fraction of unguided rollouts whose completion contains the key phrase.

    Args:
        policy : Policy sampled without guidance
        task : Task providing prompts and the key phrase
        num_rollouts : Number of rollouts
        horizon : Maximum completion length
        seed : Seed of prompts and sampling

    Returns:
        Empirical key phrase rate
    """
    generator = make_generator(seed, 0)
    prompts = [generate_prompt(task, generator)[0] for _ in range(num_rollouts)]
    completions = _sample_unguided_batch(
        policy, prompts, horizon, task.eos_idx, make_generator(seed, 1)
    )
    hits = sum(contains_pattern(c, task.key_phrase) for c in completions)
    return hits / max(num_rollouts, 1)


def _logit_limit(vocab_size: int) -> float:
    # Logits within ±limit keep every probability above twice the floor
    return -0.5 * math.log(2 * PROB_FLOOR * vocab_size)


def initial_policy_params(
    task: ToyTask,
    seed: int = 0,
    horizon: int = 8,
    ctx_order: int = 4,
    table_size: int = 4096,
    num_rollouts: int = 10_000,
    target_rate: float = 0.01,
    max_redraws: int = 20,
) -> ContextPolicy:
    """Initial policy of the task: noisy logits that favour answering, with
    the key tokens penalized until the unguided key phrase rate is below
    the target. Every token keeps a probability above 1e-4 at every context.

    Args:
        task : Task
        seed : Seed of the logits noise and of the calibration rollouts
        horizon : Maximum completion length used by the calibration
        ctx_order : Context order of the policy
        table_size : Number of rows of the logits table
        num_rollouts : Calibration rollouts per draw
        target_rate : Key phrase rate that must not be reached
        max_redraws : Number of draws before giving up

    Raises:
        CalibrationFailed: No draw met the target rate.

    Returns:
        Calibrated policy
    """
    vocab_size = task.vocab.size
    limit = _logit_limit(vocab_size)
    key_tokens = sorted(set(task.key_phrase))
    for attempt in range(max_redraws):
        generator = make_generator(seed, attempt)
        logits = 0.5 * torch.randn(
            table_size, vocab_size, generator=generator, dtype=torch.float64
        )
        logits[:, task.answer_marker] += 1.0
        logits[:, task.answer_ids] += 0.5
        logits[:, key_tokens] -= 0.5 * (attempt + 1)
        logits = logits.clamp(-limit, limit)
        policy = ContextPolicy(vocab_size, ctx_order, table_size, logits)

        rate = unguided_key_rate(
            policy, task, num_rollouts, horizon, seed=seed + attempt
        )
        logger.info("Calibration draw %d: unguided key phrase rate %.4f", attempt, rate)
        if rate < target_rate:
            return policy
    raise CalibrationFailed(
        f"Key phrase rate stayed above {target_rate} after {max_redraws} draws"
    )
