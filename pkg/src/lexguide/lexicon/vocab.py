# This source code is licensed under the MIT license found in the
# LICENSE file in the root directory of this source tree.

# Copyright (c) 2021 scart97

__all__ = ["Vocab"]

from typing import Iterable, List, Sequence


class Vocab:
    def __init__(self, initial_vocab_tokens: List[str], end_token: str = "<eos>"):
        """Class that represents a vocabulary, with the related methods
        to numericalize a sequence of tokens into numbers, and do the
        reverse mapping of numbers back to tokens.
        The end of sequence token is the only special token, and it is
        appended after the initial tokens unless already present.

        Args:
            initial_vocab_tokens : Distinct surface strings. Token ids follow this order.
            end_token : Token that terminates a trajectory.

        Raises:
            ValueError: Surface strings are repeated or the vocabulary is empty.
        """
        itos = list(initial_vocab_tokens)
        if end_token not in itos:
            itos.append(end_token)
        if len(set(itos)) != len(itos):
            raise ValueError("Vocabulary surface strings must be distinct")
        if any((not isinstance(t, str)) or t == "" or t.split() != [t] for t in itos):
            raise ValueError("Every vocabulary token must be a nonempty word")

        self.end_token = end_token
        self.itos = itos
        self.stoi = {token: i for i, token in enumerate(self.itos)}
        self.eos_idx = self.stoi[end_token]

    def __len__(self) -> int:
        return len(self.itos)

    @property
    def size(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def __eq__(self, other: object) -> bool:
        return (
            isinstance(other, Vocab)
            and self.itos == other.itos
            and self.eos_idx == other.eos_idx
        )

    def __repr__(self) -> str:
        return f"Vocab(size={self.size}, eos={self.end_token!r})"

    def numericalize(self, tokens: Iterable[str]) -> List[int]:
        """Function to transform a list of tokens into the corresponding numeric representation.

        Args:
            tokens : A single list of tokens to be transformed

        Raises:
            KeyError: A token is not part of the vocabulary.

        Returns:
            The corresponding token ids
        """
        return [self.stoi[t] for t in tokens]

    def decode_into_text(self, indices: Sequence[int]) -> List[str]:
        """Function to transform back a list of numbers into the corresponding
        tokens.

        Args:
            indices : Token ids

        Returns:
            Corresponding tokens
        """
        return [self.itos[int(it)] for it in indices]

    def to_text(self, indices: Sequence[int]) -> str:
        """Join the decoded tokens with single spaces."""
        return " ".join(self.decode_into_text(indices))

    def to_dict(self) -> dict:
        return {"tokens": list(self.itos), "end_token": self.end_token}

    @classmethod
    def from_dict(cls, data: dict) -> "Vocab":
        return cls(list(data["tokens"]), end_token=data.get("end_token", "<eos>"))
