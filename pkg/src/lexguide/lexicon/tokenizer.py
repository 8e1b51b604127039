# This source code is licensed under the MIT license found in the
# LICENSE file in the root directory of this source tree.

# Copyright (c) 2021 scart97

__all__ = [
    "EmptyPhrase",
    "UnknownToken",
    "EmptyConstraint",
    "MalformedConstraintFile",
    "KeyphraseConstraint",
    "word_tokenizer",
    "tokenize",
    "make_constraint",
    "load_constraints",
    "save_constraints",
]

import json
from dataclasses import dataclass
from pathlib import Path
from typing import List, Sequence, Tuple, Union

from lexguide.lexicon.vocab import Vocab


class EmptyPhrase(ValueError):
    pass


class UnknownToken(ValueError):
    def __init__(self, piece: str):
        super().__init__(f"Token {piece!r} is not part of the vocabulary")
        self.piece = piece


class EmptyConstraint(ValueError):
    pass


class MalformedConstraintFile(ValueError):
    pass


@dataclass(frozen=True)
class KeyphraseConstraint:
    """A lexical constraint: satisfied by any sequence containing at least
    one of the phrases contiguously.

    Attributes:
        id: Label of the constraint, used in metrics and reports.
        phrases: Token id sequences combined by logical OR.
    """

    id: str
    phrases: Tuple[Tuple[int, ...], ...]

    def validate(self, vocab: Vocab):
        """Check the constraint invariants against a vocabulary.

        Args:
            vocab : Vocabulary the phrases were tokenized with.

        Raises:
            EmptyConstraint: No phrases.
            EmptyPhrase: Some phrase has no tokens.
            ValueError: Some token id is outside the vocabulary.
        """
        if len(self.phrases) == 0:
            raise EmptyConstraint(f"Constraint {self.id!r} has no phrases")
        for phrase in self.phrases:
            if len(phrase) == 0:
                raise EmptyPhrase(f"Constraint {self.id!r} has an empty phrase")
            if any(not (0 <= tok < vocab.size) for tok in phrase):
                raise ValueError(
                    f"Constraint {self.id!r} uses a token id outside the vocabulary"
                )

    def is_satisfied_by(self, tokens: Sequence[int]) -> bool:
        """Naive contiguous search, independent of the automaton."""
        tokens = list(tokens)
        for phrase in self.phrases:
            n = len(phrase)
            for start in range(len(tokens) - n + 1):
                if tuple(tokens[start : start + n]) == phrase:
                    return True
        return False


def word_tokenizer(text: str) -> List[str]:
    """Tokenize input text splitting on single spaces

    Args:
        text : Input text

    Returns:
        Tokenized text
    """
    return text.split(" ")


def tokenize(phrase: str, vocab: Vocab) -> List[int]:
    """Map a whitespace separated phrase to token ids. Every piece must be
    an exact vocabulary token, no subword merging is attempted.

    Args:
        phrase : Surface string, for example "let me go back"
        vocab : Vocabulary to look the pieces up

    Raises:
        EmptyPhrase: The phrase has no pieces.
        UnknownToken: Some piece is not in the vocabulary.

    Returns:
        Token ids, in order.
    """
    assert vocab.size > 0, "The vocabulary is empty"
    if phrase.strip() == "":
        raise EmptyPhrase("Cannot tokenize an empty phrase")
    ids = []
    for piece in word_tokenizer(phrase):
        if piece not in vocab:
            raise UnknownToken(piece)
        ids.append(vocab.stoi[piece])
    return ids


def make_constraint(
    constraint_id: str, phrases: Sequence[str], vocab: Vocab
) -> KeyphraseConstraint:
    """Tokenize surface phrases into a validated constraint.

    Args:
        constraint_id : Label of the constraint
        phrases : Surface strings combined by OR
        vocab : Vocabulary

    Returns:
        The constraint.
    """
    constraint = KeyphraseConstraint(
        id=constraint_id, phrases=tuple(tuple(tokenize(p, vocab)) for p in phrases)
    )
    constraint.validate(vocab)
    return constraint


def load_constraints(
    path: Union[str, Path], vocab: Vocab
) -> List[KeyphraseConstraint]:
    """Read a constraint file: a json array of `{"id": ..., "phrases": [...]}`.

    Args:
        path : Constraint file
        vocab : Vocabulary used to tokenize the phrases

    Raises:
        MalformedConstraintFile: The file does not follow the format or repeats ids.

    Returns:
        Constraints in file order.
    """
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as err:
        raise MalformedConstraintFile(f"{path} is not valid json") from err
    if not isinstance(data, list) or len(data) == 0:
        raise MalformedConstraintFile(f"{path} must contain a nonempty json array")

    constraints = []
    for entry in data:
        if not isinstance(entry, dict) or "id" not in entry or "phrases" not in entry:
            raise MalformedConstraintFile(
                f"Every entry of {path} needs the keys 'id' and 'phrases'"
            )
        constraints.append(make_constraint(str(entry["id"]), entry["phrases"], vocab))

    ids = [c.id for c in constraints]
    if len(set(ids)) != len(ids):
        raise MalformedConstraintFile(f"Constraint ids in {path} are not unique")
    return constraints


def save_constraints(
    path: Union[str, Path], constraints: Sequence[KeyphraseConstraint], vocab: Vocab
):
    """Write constraints in the format read by
    [`load_constraints`][lexguide.lexicon.tokenizer.load_constraints].

    Args:
        path : Output file
        constraints : Constraints to save
        vocab : Vocabulary used to turn the ids back into surface strings
    """
    data = [
        {"id": c.id, "phrases": [vocab.to_text(p) for p in c.phrases]}
        for c in constraints
    ]
    Path(path).write_text(json.dumps(data, indent=2))
