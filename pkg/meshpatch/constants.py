# Copyright DB InfraGO AG and contributors
# SPDX-License-Identifier: Apache-2.0

from __future__ import annotations

import dataclasses
import typing as t

import starlette.config

CONFIG = starlette.config.Config(env_prefix="MESHPATCH_")

FORMAT_VERSION: t.Final[int] = 1
"""Version of the export manifest layout."""

CHANNELS: t.Final[int] = 6
"""Floats stored per selected point: x y z nx ny nz."""


@dataclasses.dataclass
class Defaults:
    jobs: t.Final[int] = 1
    patch_budget: t.Final[int] = 256
    seed: t.Final[int] = 0
    strata_levels: t.Final[int] = 3
    subdivision_levels: t.Final[int] = 3
    target_faces_max: t.Final[int] = 256
    target_faces_min: t.Final[int] = 96
    variants: t.Final[int] = 10


JOBS: int = CONFIG("JOBS", cast=int, default=Defaults.jobs)
PATCH_BUDGET: int = CONFIG(
    "PATCH_BUDGET", cast=int, default=Defaults.patch_budget
)
SEED: int = CONFIG("SEED", cast=int, default=Defaults.seed)
VARIANTS: int = CONFIG("VARIANTS", cast=int, default=Defaults.variants)

AREA_EPSILON: t.Final[float] = 1e-12
"""Relative area below which a face counts as degenerate.

Scaled by the squared bounding box diagonal of the mesh.
"""

WELD_EPSILON: t.Final[float] = 1e-9
"""Relative distance below which vertices are welded during repair."""

BARY_TOLERANCE: t.Final[float] = 1e-9
UV_SNAP_TOLERANCE: t.Final[float] = 1e-9
