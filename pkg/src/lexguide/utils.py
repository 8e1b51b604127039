# This source code is licensed under the MIT license found in the
# LICENSE file in the root directory of this source tree.

# Copyright (c) 2021 scart97

__all__ = [
    "derive_seed",
    "make_generator",
    "read_jsonl",
    "write_jsonl",
    "default_list",
]

import json
from copy import copy
from dataclasses import field
from pathlib import Path
from typing import Any, Dict, Iterable, Iterator, List, TypeVar, Union

import numpy as np
import torch


def derive_seed(*keys: int) -> int:
    """Derive an independent 63 bit seed from a tuple of integer keys.
    The same keys always give the same seed, and different keys give
    statistically independent streams.

    Example:
    ```python
    seed = derive_seed(global_seed, prompt_id, group_index)
    ```

    Args:
        keys : Non negative integers identifying the stream.

    Returns:
        Seed usable by `torch.Generator.manual_seed`.
    """
    # the key count keeps (a, b) apart from (a, b, 0)
    entropy = [len(keys), *(int(k) for k in keys)]
    state = np.random.SeedSequence(entropy).generate_state(2, dtype=np.uint32)
    return (int(state[0]) << 31) ^ int(state[1])


def make_generator(*keys: int) -> torch.Generator:
    """Create a cpu torch generator seeded from the derived seed of `keys`.

    Args:
        keys : Integers identifying the stream, see [`derive_seed`][lexguide.utils.derive_seed]

    Returns:
        Seeded generator.
    """
    generator = torch.Generator()
    generator.manual_seed(derive_seed(*keys))
    return generator


def write_jsonl(
    path: Union[str, Path], records: Iterable[Dict[str, Any]], append: bool = False
) -> int:
    """Write one json object per line.

    Args:
        path : Output file, overwritten if it exists unless `append` is set.
        records : Json serializable dictionaries.
        append : Add the lines at the end of an existing file.

    Returns:
        Number of lines written.
    """
    count = 0
    with open(path, "a" if append else "w", encoding="utf8") as f:
        for record in records:
            json.dump(record, f)
            f.write("\n")
            count += 1
    return count


def read_jsonl(path: Union[str, Path]) -> Iterator[Dict[str, Any]]:
    """Iterate over the json objects of a json-lines file, skipping blank lines.

    Args:
        path : Input file

    Yields:
        One dictionary per line.
    """
    with open(path, "r", encoding="utf8") as f:
        for line in f:
            line = line.strip()
            if line:
                yield json.loads(line)


T = TypeVar("T")


def default_list(elements: List[T]) -> List[T]:
    """Function to create default values on dataclasses that are lists

    Args:
        elements : List of elements to be the default

    Returns:
        field compatible with the way dataclasses handle mutable defaults
    """
    return field(default_factory=lambda: copy(elements))
