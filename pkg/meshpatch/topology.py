# Copyright DB InfraGO AG and contributors
# SPDX-License-Identifier: Apache-2.0
"""Connectivity-only 1-to-4 subdivision of the coarse mesh.

Every coarse face is split ``s`` times into four children, without moving
any vertex. The resulting sub-triangles are called topology units. A
unit is addressed by its coarse face and a local index whose base-4
digits, most significant first, name the child taken at each level:
0, 1 and 2 for the corners at the face's first, second and third vertex,
3 for the center.
"""

from __future__ import annotations

import dataclasses
import functools
import logging
import typing as t

import numpy as np

from meshpatch import core, mesh
from meshpatch.mesh import FloatArray, IndexedMesh, IntArray

logger = logging.getLogger(__name__)

CORNER_A: t.Final = 0
CORNER_B: t.Final = 1
CORNER_C: t.Final = 2
CENTER: t.Final = 3


class PatchBudgetExceeded(core.MeshPatchError):
    pass


@dataclasses.dataclass(frozen=True, order=True)
class TopologyUnitId:
    face: int
    local: int

    def path(self, s: int) -> tuple[int, ...]:
        """Return the child index taken at each level, top level first."""
        return tuple((self.local >> (2 * (s - 1 - i))) & 3 for i in range(s))


@functools.cache
def _corner_numerators(s: int) -> IntArray:
    corners = np.array([[[1, 0, 0], [0, 1, 0], [0, 0, 1]]], dtype=np.int64)
    for _ in range(s):
        a, b, c_ = corners[:, 0], corners[:, 1], corners[:, 2]
        ab, bc, ca = a + b, b + c_, c_ + a
        children = np.stack(
            [
                np.stack([2 * a, ab, ca], axis=1),
                np.stack([ab, 2 * b, bc], axis=1),
                np.stack([ca, bc, 2 * c_], axis=1),
                np.stack([bc, ca, ab], axis=1),
            ],
            axis=1,
        )
        corners = children.reshape(-1, 3, 3)
    corners.flags.writeable = False
    return corners


@dataclasses.dataclass(frozen=True)
class SubdividedTopology:
    """The topology units of a coarse mesh after ``level`` splits.

    ``corners`` holds, for every local unit index, the integer numerators
    of the unit's three corner barycentrics over ``denominator``. The
    table is the same for every coarse face.
    """

    coarse_faces: int
    level: int

    @property
    def units_per_face(self) -> int:
        return 4**self.level

    @property
    def n_units(self) -> int:
        return self.coarse_faces * self.units_per_face

    @property
    def denominator(self) -> int:
        return 2**self.level

    @property
    def corners(self) -> IntArray:
        return _corner_numerators(self.level)

    def corner_bary(self, local: int | IntArray) -> FloatArray:
        """Return the (3, 3) coarse barycentrics of a unit's corners."""
        return self.corners[local] / self.denominator

    def unit_ids(self) -> t.Iterator[TopologyUnitId]:
        for face in range(self.coarse_faces):
            for local in range(self.units_per_face):
                yield TopologyUnitId(face, local)

    def global_index(self, unit: TopologyUnitId) -> int:
        return unit.face * self.units_per_face + unit.local

    def unit_of(self, index: int) -> TopologyUnitId:
        face, local = divmod(int(index), self.units_per_face)
        return TopologyUnitId(face, local)

    def check(self, unit: TopologyUnitId) -> None:
        if not (
            0 <= unit.face < self.coarse_faces
            and 0 <= unit.local < self.units_per_face
        ):
            raise ValueError(f"No unit {unit} at level {self.level}")


def subdivide(coarse_face_count: int, s: int) -> SubdividedTopology:
    if s < 0:
        raise ValueError(f"Subdivision level must be >= 0, got {s}")
    if coarse_face_count < 0:
        raise ValueError(f"Invalid face count {coarse_face_count}")
    return SubdividedTopology(coarse_faces=coarse_face_count, level=s)


def unit_to_coarse_bary(
    topo: SubdividedTopology,
    unit: TopologyUnitId,
    local_bary: t.Sequence[float],
) -> tuple[float, float, float]:
    """Express a barycentric point of a unit on its coarse face."""
    topo.check(unit)
    x = np.asarray(local_bary, dtype=np.float64) @ topo.corner_bary(unit.local)
    return (float(x[0]), float(x[1]), float(x[2]))


def units_to_coarse_bary(
    topo: SubdividedTopology, local: IntArray, local_bary: FloatArray
) -> FloatArray:
    """Vectorized `unit_to_coarse_bary` over local indices."""
    return np.einsum("ni,nij->nj", local_bary, topo.corner_bary(local))


def locate_unit(
    s: int, bary: FloatArray
) -> tuple[IntArray, FloatArray]:
    """Find the unit containing each coarse barycentric point.

    Returns the local unit indices and the barycentrics within those
    units. Points on a shared unit edge go to the corner children first,
    in vertex order, then to the center.
    """
    bary = np.clip(np.atleast_2d(np.asarray(bary, dtype=np.float64)), 0, 1)
    bary = bary / bary.sum(axis=1, keepdims=True)
    local = np.zeros(len(bary), dtype=np.int64)
    for _ in range(s):
        child = np.full(len(bary), CENTER, dtype=np.int64)
        for corner in (CORNER_C, CORNER_B, CORNER_A):
            child[bary[:, corner] >= 0.5] = corner
        doubled = 2 * bary
        is_corner = child != CENTER
        rows = np.flatnonzero(is_corner)
        doubled[rows, child[rows]] -= 1.0
        bary = np.where(is_corner[:, None], doubled, 1.0 - doubled)
        bary = np.clip(bary, 0, 1)
        bary = bary / bary.sum(axis=1, keepdims=True)
        local = 4 * local + child
    return local, bary


@dataclasses.dataclass(frozen=True, eq=False)
class PatchLayout:
    """One patch per coarse face, plus zero-fill padding up to a budget.

    ``unit_order`` lists the local unit indices in the order their
    features are stored inside every patch.
    """

    patch_faces: IntArray
    unit_order: IntArray
    padding: int = 0

    @property
    def n_real(self) -> int:
        return len(self.patch_faces)

    @property
    def n_patches(self) -> int:
        return self.n_real + self.padding

    @property
    def units_per_patch(self) -> int:
        return len(self.unit_order)

    @property
    def mask(self) -> np.ndarray[t.Any, np.dtype[np.bool_]]:
        return np.arange(self.n_patches) < self.n_real


def build_patch_layout(
    topo: SubdividedTopology, patch_budget: int | None = None
) -> PatchLayout:
    """Lay out one patch per coarse face, in coarse face order.

    Raises
    ------
    PatchBudgetExceeded
        If there are more coarse faces than ``patch_budget``.
    """
    padding = 0
    if patch_budget is not None:
        if topo.coarse_faces > patch_budget:
            raise PatchBudgetExceeded(
                f"{topo.coarse_faces} coarse faces exceed"
                f" the patch budget of {patch_budget}"
            )
        padding = patch_budget - topo.coarse_faces
    layout = PatchLayout(
        patch_faces=np.arange(topo.coarse_faces),
        unit_order=np.arange(topo.units_per_face),
        padding=padding,
    )
    layout.patch_faces.flags.writeable = False
    layout.unit_order.flags.writeable = False
    return layout


@dataclasses.dataclass(frozen=True, eq=False)
class SubdividedMesh:
    """The flat geometry of the subdivided coarse mesh.

    Face ``i`` of ``mesh`` is the unit with global index ``i``.
    """

    mesh: IndexedMesh
    topology: SubdividedTopology


def subdivided_mesh(
    coarse: IndexedMesh, topo: SubdividedTopology
) -> SubdividedMesh:
    """Build the subdivided mesh, welding unit corners shared by faces."""
    if coarse.n_faces != topo.coarse_faces:
        raise ValueError(
            f"Topology has {topo.coarse_faces} faces,"
            f" the mesh has {coarse.n_faces}"
        )
    points, corner_index = np.unique(
        topo.corners.reshape(-1, 3), axis=0, return_inverse=True
    )
    corner_index = corner_index.reshape(-1, 3)

    # a point's identity is the set of (coarse vertex, numerator) pairs
    # with nonzero numerator, which is shared across neighbouring faces
    vids = np.broadcast_to(
        coarse.faces[:, None, :], (coarse.n_faces, len(points), 3)
    )
    nums = np.broadcast_to(points[None], vids.shape)
    vids = np.where(nums > 0, vids, -1)
    order = np.argsort(vids, axis=2, kind="stable")
    keys = np.concatenate(
        [
            np.take_along_axis(vids, order, axis=2),
            np.take_along_axis(nums, order, axis=2),
        ],
        axis=2,
    ).reshape(-1, 6)
    _, inverse = np.unique(keys, axis=0, return_inverse=True)
    inverse = inverse.reshape(coarse.n_faces, len(points))

    _, first = np.unique(inverse.reshape(-1), return_index=True)
    face_of, point_of = np.divmod(first, len(points))
    positions = (
        np.einsum(
            "ni,nij->nj",
            points[point_of].astype(np.float64),
            coarse.vertices[coarse.faces[face_of]],
        )
        / topo.denominator
    )

    faces = inverse[:, corner_index].reshape(-1, 3)
    logger.debug(
        "Subdivided %d faces %d times into %d units",
        coarse.n_faces,
        topo.level,
        len(faces),
    )
    return SubdividedMesh(IndexedMesh(positions, faces), topo)


def unit_adjacency(
    topo: SubdividedTopology, coarse: IndexedMesh
) -> IntArray:
    """Return the neighbouring unit across each unit edge, shape (n, 3).

    Column ``i`` is the unit across the edge from corner ``i`` to corner
    ``i + 1``, including across coarse face borders.
    """
    flat = subdivided_mesh(coarse, topo).mesh
    return mesh.build_halfedge(flat).face_neighbors()
