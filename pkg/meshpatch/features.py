# Copyright DB InfraGO AG and contributors
# SPDX-License-Identifier: Apache-2.0
"""Patch tensors, label transfer and training-time augmentation."""

from __future__ import annotations

import dataclasses
import logging
import typing as t

import numpy as np
import pydantic as p

import meshpatch.constants as c
from meshpatch import core, selfparam, topology
from meshpatch.mesh import FloatArray, IndexedMesh, IntArray
from meshpatch.topology import PatchLayout, SubdividedTopology

if t.TYPE_CHECKING:
    from meshpatch.simplify import SimplificationTrace

logger = logging.getLogger(__name__)

BoolArray: t.TypeAlias = "np.ndarray[t.Any, np.dtype[np.bool_]]"

# (cos, sin) of 0, pi/2, pi and 3pi/2, exact
_QUARTER_TURNS: t.Final = ((1, 0), (0, 1), (-1, 0), (0, -1))


class ShapeMismatch(core.MeshPatchError):
    pass


class MissingLabel(core.MeshPatchError):
    pass


@dataclasses.dataclass(frozen=True, eq=False)
class PatchTensor:
    """Packed per-patch features.

    Each row of ``data`` holds the units of one patch, each unit its
    ``k`` points, each point the channels ``x y z nx ny nz``. Zero-fill
    patches have all-zero rows and ``mask`` set to False.
    """

    data: FloatArray
    avg_position: FloatArray
    mask: BoolArray
    k: int
    units_per_patch: int

    @property
    def n_patches(self) -> int:
        return len(self.data)

    @property
    def n_real(self) -> int:
        return int(self.mask.sum())

    @property
    def row_length(self) -> int:
        return self.units_per_patch * self.k * c.CHANNELS


def pack_patches(
    features: FloatArray, layout: PatchLayout, k: int
) -> PatchTensor:
    """Pack (units, k, 6) point features into patch rows.

    Units must be in global unit order, i.e. grouped by coarse face.

    Raises
    ------
    ShapeMismatch
        If ``features`` does not hold ``k`` points for every real unit.
    """
    features = np.asarray(features, dtype=np.float64)
    expected = (layout.n_real * layout.units_per_patch, k, c.CHANNELS)
    if features.shape != expected:
        raise ShapeMismatch(
            f"Expected features of shape {expected}, got {features.shape}"
        )
    per_patch = features.reshape(
        layout.n_real, layout.units_per_patch, k, c.CHANNELS
    )[layout.patch_faces][:, layout.unit_order]

    row_length = layout.units_per_patch * k * c.CHANNELS
    data = np.zeros((layout.n_patches, row_length), dtype=np.float32)
    data[: layout.n_real] = per_patch.reshape(layout.n_real, row_length)
    avg_position = np.zeros((layout.n_patches, 3), dtype=np.float32)
    avg_position[: layout.n_real] = per_patch[..., :3].mean(axis=(1, 2))
    return PatchTensor(
        data=data,
        avg_position=avg_position,
        mask=layout.mask,
        k=k,
        units_per_patch=layout.units_per_patch,
    )


def unpack_patches(
    tensor: PatchTensor, k: int, s: int
) -> tuple[FloatArray, FloatArray]:
    """Recover (units, k, 3) positions and normals of the real patches."""
    units = 4**s
    if tensor.data.shape[1] != units * k * c.CHANNELS:
        raise ShapeMismatch(
            f"Rows of length {tensor.data.shape[1]} do not hold"
            f" {units} units of {k} points"
        )
    points = tensor.data[tensor.mask].reshape(-1, k, c.CHANNELS)
    return points[..., :3], points[..., 3:]


@dataclasses.dataclass(frozen=True, eq=False)
class LabelMap:
    unit_labels: IntArray
    face_labels: IntArray
    class_count: int

    def __post_init__(self) -> None:
        for name in ("unit_labels", "face_labels"):
            labels = getattr(self, name)
            if labels.size and (
                labels.min() < 0 or labels.max() >= self.class_count
            ):
                raise ValueError(
                    f"{name} outside [0, {self.class_count})"
                )


def labels_to_units(face_labels: IntArray, point_faces: IntArray) -> IntArray:
    """Vote a label for every unit from the faces of its selected points.

    ``point_faces`` has shape (units, k) and holds faces of the original
    mesh. The most frequent label wins; ties go to the smallest label.

    Raises
    ------
    MissingLabel
        If a point lies on a face without a (non-negative) label.
    """
    face_labels = np.asarray(face_labels, dtype=np.int64)
    point_faces = np.asarray(point_faces, dtype=np.int64)
    if point_faces.size and point_faces.max() >= len(face_labels):
        raise MissingLabel(
            f"No label for face {int(point_faces.max())},"
            f" only {len(face_labels)} labels given"
        )
    votes = face_labels[point_faces]
    if (votes < 0).any():
        raise MissingLabel("Selected point lies on an unlabeled face")
    n_classes = int(votes.max()) + 1 if votes.size else 1
    counts = np.zeros((len(point_faces), n_classes), dtype=np.int64)
    rows = np.repeat(np.arange(len(point_faces)), point_faces.shape[1])
    np.add.at(counts, (rows, votes.reshape(-1)), 1)
    return counts.argmax(axis=1)


def units_to_faces(
    unit_labels: IntArray,
    trace: SimplificationTrace,
    topo: SubdividedTopology,
) -> IntArray:
    """Label every original face with the unit containing its centroid."""
    unit_labels = np.asarray(unit_labels, dtype=np.int64)
    if len(unit_labels) != topo.n_units:
        raise ShapeMismatch(
            f"Expected {topo.n_units} unit labels, got {len(unit_labels)}"
        )
    n = trace.n_faces_fine
    faces, bary = selfparam.map_forward_many(
        selfparam.BijectionMap(trace),
        np.arange(n),
        np.full((n, 3), 1 / 3),
    )
    local, _ = topology.locate_unit(topo.level, bary)
    return unit_labels[faces * topo.units_per_face + local]


class AugmentConfig(p.BaseModel):
    model_config = p.ConfigDict(frozen=True)

    scale: bool = p.Field(True, title="Random anisotropic scaling")
    sigma: float = p.Field(
        0.1, gt=0, title="Standard deviation of the scale factors"
    )
    truncation: float = p.Field(
        3.0, gt=0, title="Clamp scale factors at this many sigmas"
    )
    rotate: bool = p.Field(True, title="Random quarter-turn axis rotations")
    seed: int | None = p.Field(None, title="Seed used when no rng is given")

    @property
    def enabled(self) -> bool:
        return self.scale or self.rotate


def rotation(angles: t.Sequence[int]) -> FloatArray:
    """Return ``Rz @ Ry @ Rx`` for quarter-turn counts about x, y and z."""
    cx, sx = _QUARTER_TURNS[angles[0] % 4]
    cy, sy = _QUARTER_TURNS[angles[1] % 4]
    cz, sz = _QUARTER_TURNS[angles[2] % 4]
    rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]], dtype=np.float64)
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]], dtype=np.float64)
    rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]], dtype=np.float64)
    return rz @ ry @ rx


def draw_augmentation(
    cfg: AugmentConfig, rng: np.random.Generator
) -> tuple[FloatArray, FloatArray]:
    """Draw per-axis scale factors and a rotation matrix."""
    scale = np.ones(3)
    if cfg.scale:
        bound = cfg.truncation * cfg.sigma
        scale = np.clip(rng.normal(1.0, cfg.sigma, 3), 1 - bound, 1 + bound)
    turns = [0, 0, 0]
    if cfg.rotate:
        turns = rng.integers(0, 4, size=3).tolist()
    return scale, rotation(turns)


def augment(
    m: IndexedMesh,
    cfg: AugmentConfig,
    rng: np.random.Generator | None = None,
) -> IndexedMesh:
    """Scale, then rotate the vertices of a mesh; faces stay untouched."""
    if not cfg.enabled:
        return m
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    scale, rot = draw_augmentation(cfg, rng)
    logger.debug(
        "Augmenting with scale %s and rotation %s",
        np.round(scale, 4).tolist(),
        rot.astype(int).tolist(),
    )
    return IndexedMesh((m.vertices * scale) @ rot.T, m.faces)


def quarter_turn(axis: int, turns: int = 1) -> FloatArray:
    angles = [0, 0, 0]
    angles[axis] = turns
    return rotation(angles)
