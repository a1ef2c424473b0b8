# Copyright (c) 2026 The shadowdiff Authors.
# All rights reserved.
#
# This software is licensed under the Apache License, Version 2.0 (the "License").
# You may not use this file except in compliance with the License. You may
# obtain a copy of the License at http://www.apache.org/licenses/LICENSE-2.0.
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.

"""Attention-guided diffusion shadow removal."""

# libtorch symbols come from the torch wheel; load it before the extension.
import torch  # noqa: F401

from ._core import *  # noqa: F401,F403
from ._core import UsageError, DataError, NumericError, NoiseSchedule  # noqa: F401

__version__ = "0.1.0"
