"""Tabular softmax policy over hashed fixed-width contexts, with closed
form log-probability gradients.
"""

# This source code is licensed under the MIT license found in the
# LICENSE file in the root directory of this source tree.

# Copyright (c) 2021 scart97

__all__ = [
    "NonFiniteGradient",
    "ContextPolicy",
    "PolicyGradient",
    "context_id",
    "log_prob_grad",
    "assign_grad",
    "apply_update",
    "save_policy",
    "load_policy",
]

from pathlib import Path
from typing import Dict, Iterator, Optional, Sequence, Tuple, Union

import torch
from torch import Tensor, nn

from lexguide.hmm.model import MalformedCheckpoint

CHECKPOINT_VERSION = 1
HASH_MULTIPLIER = 1_000_003
PAD_TOKEN = -1


class NonFiniteGradient(ArithmeticError):
    pass


def context_id(context: Sequence[int], ctx_order: int, table_size: int) -> int:
    """Polynomial rolling hash of the last `ctx_order` tokens.
    Shorter contexts are left padded with -1, which contributes 0.

    Args:
        context : Token ids, prompt followed by the completion so far
        ctx_order : Number of trailing tokens hashed
        table_size : Number of rows of the logits table

    Returns:
        Row index in [0, table_size)
    """
    window = list(context[-ctx_order:]) if ctx_order > 0 else []
    window = [PAD_TOKEN] * (ctx_order - len(window)) + window
    h = 0
    for tok in window:
        h = (h * HASH_MULTIPLIER + tok + 1) % table_size
    return h


class ContextPolicy(nn.Module):
    def __init__(
        self,
        vocab_size: int,
        ctx_order: int = 3,
        table_size: int = 4096,
        logits: Optional[Tensor] = None,
    ):
        """Autoregressive policy whose next-token distribution is the softmax
        of one row of a logits table, selected by hashing the trailing context.
        Hash collisions simply tie the weights of the colliding contexts.

        Args:
            vocab_size : Number of tokens
            ctx_order : Number of trailing tokens that select the row
            table_size : Number of rows
            logits : Optional initial table of shape (table_size, vocab_size). Zeros by default, the uniform policy.
        """
        super().__init__()
        assert ctx_order >= 0 and table_size >= 1, "Invalid context hash settings"
        if logits is None:
            logits = torch.zeros(table_size, vocab_size, dtype=torch.float64)
        assert logits.shape == (table_size, vocab_size), "Wrong logits table shape"
        self.ctx_order = ctx_order
        self.table_size = table_size
        self.vocab_size = vocab_size
        self.logits = nn.Parameter(
            logits.to(torch.float64).clone(), requires_grad=False
        )

    def context_id(self, context: Sequence[int]) -> int:
        return context_id(context, self.ctx_order, self.table_size)

    def next_token_log_probs(self, context: Sequence[int]) -> Tensor:
        """Log-softmax of the row selected by the context.

        Args:
            context : Prompt and completion token ids so far

        Returns:
            Tensor of shape (vocab_size,)
        """
        return torch.log_softmax(self.logits[self.context_id(context)], dim=0)

    def forward(self, context: Sequence[int]) -> Tensor:
        return self.next_token_log_probs(context)

    def snapshot(self) -> "ContextPolicy":
        """Frozen copy used as the proximal policy. Later updates of this
        policy never touch the copy.
        """
        return ContextPolicy(
            self.vocab_size, self.ctx_order, self.table_size, self.logits.detach()
        )

    def load_logits_(self, other: "ContextPolicy"):
        """Copy the logits table of another policy into this one."""
        self.logits.data.copy_(other.logits.data)


class PolicyGradient:
    def __init__(self, vocab_size: int):
        """Sparse gradient with respect to the logits table: one dense row
        per touched context id. Rows are reduced in ascending context order.

        Args:
            vocab_size : Number of tokens
        """
        self.vocab_size = vocab_size
        self.rows: Dict[int, Tensor] = {}

    def add_row(self, cid: int, row: Tensor, scale: float = 1.0):
        if cid in self.rows:
            self.rows[cid] = self.rows[cid] + scale * row
        else:
            self.rows[cid] = scale * row

    def add_(self, other: "PolicyGradient", scale: float = 1.0) -> "PolicyGradient":
        for cid, row in other.items():
            self.add_row(cid, row, scale)
        return self

    def items(self) -> Iterator[Tuple[int, Tensor]]:
        for cid in sorted(self.rows):
            yield cid, self.rows[cid]

    def is_finite(self) -> bool:
        return all(bool(torch.isfinite(row).all()) for row in self.rows.values())

    def to_dense(self, table_size: int) -> Tensor:
        dense = torch.zeros(table_size, self.vocab_size, dtype=torch.float64)
        for cid, row in self.items():
            dense[cid] = row
        return dense

    def __len__(self) -> int:
        return len(self.rows)


def log_prob_grad(
    policy: ContextPolicy, context: Sequence[int], token: int
) -> PolicyGradient:
    """Gradient of log π(token | context) with respect to the logits table:
    `onehot(token) − softmax(row)` on the context row, zero elsewhere.

    Args:
        policy : Policy
        context : Token ids preceding `token`
        token : Emitted token id

    Returns:
        Gradient with a single row
    """
    cid = policy.context_id(context)
    row = -torch.softmax(policy.logits[cid].detach(), dim=0)
    row[token] += 1.0
    grad = PolicyGradient(policy.vocab_size)
    grad.add_row(cid, row)
    return grad


def assign_grad(policy: ContextPolicy, grad: PolicyGradient) -> Tensor:
    """Write a sparse gradient into `policy.logits.grad`, so that a
    `torch.optim` optimizer can take the step. Rows the gradient does not
    touch get zeros.

    Args:
        policy : Training policy, never the proximal snapshot
        grad : Gradient of the loss

    Raises:
        NonFiniteGradient: Some gradient entry is nan or infinite.

    Returns:
        The dense gradient now held by the logits table
    """
    if not grad.is_finite():
        raise NonFiniteGradient("Refusing to apply a non finite gradient")
    dense = grad.to_dense(policy.table_size).to(policy.logits.device)
    policy.logits.grad = dense
    return dense


def apply_update(
    policy: ContextPolicy,
    grad: PolicyGradient,
    learning_rate: float,
    optimizer: Optional[torch.optim.Optimizer] = None,
) -> ContextPolicy:
    """Gradient descent step `logits ← logits − lr·grad`, taken by a
    `torch.optim` optimizer over the logits table.

    Args:
        policy : Training policy, never the proximal snapshot
        grad : Gradient of the loss
        learning_rate : Step size of the plain SGD used when no optimizer is given
        optimizer : Optimizer over `policy.logits`, for example the one a lightning module configured

    Raises:
        NonFiniteGradient: Some gradient entry is nan or infinite.

    Returns:
        The same policy object, updated
    """
    if optimizer is None:
        optimizer = torch.optim.SGD([policy.logits], lr=learning_rate)
    assign_grad(policy, grad)
    optimizer.step()
    optimizer.zero_grad()
    return policy


def save_policy(policy: ContextPolicy, path: Union[str, Path]):
    """Save a versioned checkpoint with the hash settings and the logits table."""
    torch.save(
        {
            "version": CHECKPOINT_VERSION,
            "ctx_order": policy.ctx_order,
            "table_size": policy.table_size,
            "vocab_size": policy.vocab_size,
            "logits": policy.logits.detach().clone(),
        },
        str(path),
    )


def load_policy(path: Union[str, Path]) -> ContextPolicy:
    """Load a checkpoint written by [`save_policy`][lexguide.policy.save_policy],
    or a lightning checkpoint saved during training.

    Raises:
        MalformedCheckpoint: Unknown version, wrong shape or non finite logits.
    """
    data = torch.load(str(path), map_location="cpu")
    if isinstance(data, dict) and "state_dict" in data:
        data = _from_lightning_checkpoint(data, path)
    if not isinstance(data, dict) or data.get("version") != CHECKPOINT_VERSION:
        raise MalformedCheckpoint(
            f"{path} is not a version {CHECKPOINT_VERSION} policy"
        )
    logits = data["logits"]
    if logits.shape != (data["table_size"], data["vocab_size"]):
        raise MalformedCheckpoint(f"{path} has a logits table of the wrong shape")
    if not torch.isfinite(logits).all():
        raise MalformedCheckpoint(f"{path} has non finite logits")
    return ContextPolicy(
        data["vocab_size"], data["ctx_order"], data["table_size"], logits
    )


def _from_lightning_checkpoint(data: dict, path: Union[str, Path]) -> dict:
    try:
        logits = data["state_dict"]["policy.logits"]
        ctx_order = data["hyper_parameters"]["config"]["ctx_order"]
    except (KeyError, TypeError) as err:
        raise MalformedCheckpoint(f"{path} holds no trained policy") from err
    return {
        "version": CHECKPOINT_VERSION,
        "ctx_order": ctx_order,
        "table_size": logits.shape[0],
        "vocab_size": logits.shape[1],
        "logits": logits,
    }
