# This source code is licensed under the MIT license found in the
# LICENSE file in the root directory of this source tree.

# Copyright (c) 2021 scart97

import lexguide


def test_version():
    assert lexguide.__version__ is not None
