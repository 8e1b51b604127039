# This source code is licensed under the MIT license found in the
# LICENSE file in the root directory of this source tree.

# Copyright (c) 2021 scart97

from dataclasses import dataclass
from typing import List

import torch

from lexguide.utils import (
    default_list,
    derive_seed,
    make_generator,
    read_jsonl,
    write_jsonl,
)


def test_derive_seed_is_deterministic():
    assert derive_seed(0, 1, 2) == derive_seed(0, 1, 2)


def test_derive_seed_depends_on_every_key():
    seeds = {derive_seed(0, 1, 2), derive_seed(0, 2, 1), derive_seed(1, 1, 2)}
    assert len(seeds) == 3
    assert derive_seed(5) != derive_seed(5, 0)


def test_derive_seed_trailing_zero_keys_are_separate_streams():
    assert derive_seed(7, 3) != derive_seed(7, 3, 0)
    assert derive_seed(7, 3, 0) != derive_seed(7, 3, 0, 0)
    assert derive_seed(0) != derive_seed()


def test_derive_seed_fits_a_torch_generator():
    seed = derive_seed(2 ** 40, 7)
    assert 0 <= seed < 2 ** 63
    torch.Generator().manual_seed(seed)


def test_make_generator_streams():
    a = torch.rand(4, generator=make_generator(3, 1))
    b = torch.rand(4, generator=make_generator(3, 1))
    c = torch.rand(4, generator=make_generator(3, 2))
    assert torch.equal(a, b)
    assert not torch.equal(a, c)


def test_jsonl_write_then_append(tmp_path):
    path = tmp_path / "records.jsonl"
    assert write_jsonl(path, [{"a": 1}, {"a": 2}]) == 2
    assert write_jsonl(path, iter([{"b": [1, 2]}]), append=True) == 1
    assert list(read_jsonl(path)) == [{"a": 1}, {"a": 2}, {"b": [1, 2]}]


def test_jsonl_overwrites_by_default(tmp_path):
    path = tmp_path / "records.jsonl"
    write_jsonl(path, [{"a": 1}])
    write_jsonl(path, [{"a": 2}])
    assert list(read_jsonl(path)) == [{"a": 2}]


def test_read_jsonl_skips_blank_lines(tmp_path):
    path = tmp_path / "records.jsonl"
    path.write_text('{"a": 1}\n\n   \n{"a": 2}\n')
    assert [r["a"] for r in read_jsonl(path)] == [1, 2]


def test_default_list_gives_independent_copies():
    @dataclass
    class Holder:
        items: List[int] = default_list([1, 2])

    first, second = Holder(), Holder()
    first.items.append(3)
    assert second.items == [1, 2]
