# Copyright DB InfraGO AG and contributors
# SPDX-License-Identifier: Apache-2.0
"""Per-collapse UV charts and the point-level bijection they induce.

Every edge collapse only changes the faces around the collapsed edge.
Both versions of that region, before and after the collapse, are
flattened into one UV domain with a shared boundary. A point is carried
across the collapse by evaluating its UV position in one chart and
locating that UV position in the other.

Face identifiers are stable across simplification levels: a face that
survives a collapse keeps its id, so points outside the changed region
are carried over untouched.
"""

from __future__ import annotations

import dataclasses
import logging
import typing as t

import numpy as np

import meshpatch.constants as c
from meshpatch import core
from meshpatch.mesh import FloatArray, IntArray, SurfacePoint

if t.TYPE_CHECKING:
    from meshpatch.simplify import CollapseRecord, SimplificationTrace

logger = logging.getLogger(__name__)

BoundaryMode: t.TypeAlias = t.Literal["circle", "conformal"]
Direction: t.TypeAlias = t.Literal["forward", "backward"]

MIN_UV_AREA: t.Final[float] = 1e-12
"""Smallest signed area accepted for a UV triangle (unit circumradius)."""

INSIDE_TOLERANCE: t.Final[float] = 1e-12


class FlatteningFoldover(core.MeshPatchError):
    pass


class PointOutsideChart(core.MeshPatchError):
    pass


@dataclasses.dataclass(frozen=True, eq=False)
class Chart:
    """A UV triangulation of one version of a collapse region.

    Rows are sorted by face id, so the first containing triangle of a
    query is the one with the lowest id.
    """

    faces: IntArray
    triangles: IntArray
    uv: FloatArray

    def signed_areas(self) -> FloatArray:
        e1 = self.uv[:, 1] - self.uv[:, 0]
        e2 = self.uv[:, 2] - self.uv[:, 0]
        return 0.5 * (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])

    @property
    def area(self) -> float:
        return float(self.signed_areas().sum())

    def contains_face(self, face: int) -> bool:
        pos = np.searchsorted(self.faces, face)
        return bool(pos < len(self.faces) and self.faces[pos] == face)

    def row_of(self, faces: IntArray) -> IntArray:
        return np.searchsorted(self.faces, faces)


@dataclasses.dataclass(frozen=True, eq=False)
class RingFlattening:
    """Matching UV charts of a region before and after one collapse."""

    boundary: IntArray
    boundary_uv: FloatArray
    before: Chart
    after: Chart


def flatten_collapse(
    record: CollapseRecord, *, mode: BoundaryMode = "circle"
) -> RingFlattening:
    """Flatten both versions of a collapse region into one UV domain.

    In ``circle`` mode the shared boundary is placed on the unit circle
    at angles proportional to its 3D arc length, and the interior
    vertices of each chart minimize the discrete conformal energy. In
    ``conformal`` mode the region before the collapse is flattened with
    a free boundary first, and its boundary pins the other chart.

    Raises
    ------
    FlatteningFoldover
        If any UV triangle of either chart is not strictly positive.
    """
    positions_before = dict(
        zip(record.boundary.tolist(), record.boundary_positions, strict=True)
    )
    positions_after = dict(positions_before)
    positions_before[record.v1] = record.position_v1
    positions_before[record.v2] = record.position_v2
    positions_after[record.merged] = record.position_merged

    if mode == "circle":
        boundary_uv = _circle_boundary(record.boundary_positions)
        fixed = dict(zip(record.boundary.tolist(), boundary_uv, strict=True))
        uv_before = _solve_interior(
            record.before_tris,
            positions_before,
            fixed,
            [record.v1, record.v2],
        )
    elif mode == "conformal":
        uv_before = _free_flatten(
            record.before_tris, positions_before, record.boundary
        )
        boundary_uv = np.array([uv_before[v] for v in record.boundary])
        fixed = dict(zip(record.boundary.tolist(), boundary_uv, strict=True))
    else:
        raise ValueError(f"Unknown boundary mode: {mode!r}")

    uv_after = _solve_interior(
        record.after_tris, positions_after, fixed, [record.merged]
    )

    before = _make_chart(record.before_faces, record.before_tris, uv_before)
    after = _make_chart(record.after_faces, record.after_tris, uv_after)
    for name, chart in (("before", before), ("after", after)):
        worst = float(chart.signed_areas().min())
        if not worst > MIN_UV_AREA:
            raise FlatteningFoldover(
                f"UV chart {name} collapse of ({record.v1}, {record.v2})"
                f" folds over (signed area {worst:.3g})"
            )
    return RingFlattening(
        boundary=record.boundary,
        boundary_uv=boundary_uv,
        before=before,
        after=after,
    )


def _make_chart(
    faces: IntArray, tris: IntArray, uv: dict[int, FloatArray]
) -> Chart:
    order = np.argsort(faces, kind="stable")
    tris = tris[order]
    corner_uv = np.array([[uv[v] for v in tri] for tri in tris.tolist()])
    return Chart(faces=faces[order], triangles=tris, uv=corner_uv)


def _circle_boundary(points: FloatArray) -> FloatArray:
    seg = np.linalg.norm(np.roll(points, -1, axis=0) - points, axis=1)
    arc = np.concatenate([[0.0], np.cumsum(seg)[:-1]])
    theta = 2 * np.pi * arc / seg.sum()
    return np.stack([np.cos(theta), np.sin(theta)], axis=1)


def _conformal_rows(
    tris: IntArray, positions: dict[int, FloatArray]
) -> list[tuple[list[int], np.ndarray]]:
    """Return the complex conformality residual of each triangle.

    For local complex corner coordinates z0, z1, z2 the residual
    ``(z1 - z2) U0 + (z2 - z0) U1 + (z0 - z1) U2`` vanishes exactly when
    the triangle's UV image is a similarity of it. Rows are scaled by
    the inverse square root of the area so the energy is area-weighted.
    """
    rows = []
    for tri in tris.tolist():
        p0, p1, p2 = (np.asarray(positions[v]) for v in tri)
        e1 = p1 - p0
        e2 = p2 - p0
        length = np.linalg.norm(e1)
        x_axis = e1 / length
        z2 = complex(
            float(e2 @ x_axis), float(np.linalg.norm(np.cross(x_axis, e2)))
        )
        z0, z1 = 0j, complex(length, 0.0)
        area = 0.5 * length * z2.imag
        coeffs = np.array([z1 - z2, z2 - z0, z0 - z1]) / np.sqrt(area)
        rows.append((tri, coeffs))
    return rows


def _solve_interior(
    tris: IntArray,
    positions: dict[int, FloatArray],
    fixed: dict[int, FloatArray],
    interior: list[int],
) -> dict[int, FloatArray]:
    """Place interior vertices by least-squares conformal energy."""
    column = {v: i for i, v in enumerate(interior)}
    rows = _conformal_rows(tris, positions)
    lhs = np.zeros((len(rows), len(interior)), dtype=np.complex128)
    rhs = np.zeros(len(rows), dtype=np.complex128)
    for r, (tri, coeffs) in enumerate(rows):
        for v, coeff in zip(tri, coeffs, strict=True):
            if v in column:
                lhs[r, column[v]] += coeff
            else:
                u = fixed[v]
                rhs[r] -= coeff * complex(u[0], u[1])
    solution = np.linalg.lstsq(lhs, rhs, rcond=None)[0]

    uv = {v: np.asarray(u, dtype=np.float64) for v, u in fixed.items()}
    for v, i in column.items():
        uv[v] = np.array([solution[i].real, solution[i].imag])
    return uv


def _free_flatten(
    tris: IntArray, positions: dict[int, FloatArray], boundary: IntArray
) -> dict[int, FloatArray]:
    """Flatten a disk with two pinned boundary vertices.

    The result is centered on the boundary centroid and scaled to unit
    circumradius.
    """
    first = int(boundary[0])
    dist = [
        np.linalg.norm(np.asarray(positions[v]) - positions[first])
        for v in boundary.tolist()
    ]
    second = int(boundary[int(np.argmax(dist))])
    pinned = {
        first: np.array([0.0, 0.0]),
        second: np.array([max(dist), 0.0]),
    }
    free = sorted(set(np.unique(tris).tolist()) - set(pinned))
    uv = _solve_interior(tris, positions, pinned, free)

    ring = np.array([uv[v] for v in boundary.tolist()])
    center = ring.mean(axis=0)
    radius = np.linalg.norm(ring - center, axis=1).max()
    return {v: (u - center) / radius for v, u in uv.items()}


def locate_uv(chart: Chart, q: t.Sequence[float]) -> SurfacePoint:
    """Find the chart triangle containing a UV point.

    Points on shared edges resolve to the triangle with the lowest face
    id. Points slightly outside the chart are snapped to its boundary.

    Raises
    ------
    PointOutsideChart
        If the point is farther than the snap tolerance from the chart.
    """
    faces, bary = locate_uv_many(chart, np.asarray([q], dtype=np.float64))
    return SurfacePoint(int(faces[0]), tuple(bary[0]))


def locate_uv_many(chart: Chart, q: FloatArray) -> tuple[IntArray, FloatArray]:
    """Vectorized `locate_uv`, returning face ids and barycentrics."""
    rows, bary = _locate_rows(chart, q)
    return chart.faces[rows], bary


def _locate_rows(chart: Chart, q: FloatArray) -> tuple[IntArray, FloatArray]:
    a = chart.uv[:, 0]
    e1 = chart.uv[:, 1] - a
    e2 = chart.uv[:, 2] - a
    den = e1[:, 0] * e2[:, 1] - e2[:, 0] * e1[:, 1]
    d = q[:, None, :] - a[None]
    lb = (d[..., 0] * e2[:, 1] - e2[:, 0] * d[..., 1]) / den
    lc = (e1[:, 0] * d[..., 1] - d[..., 0] * e1[:, 1]) / den
    bary = np.stack([1.0 - lb - lc, lb, lc], axis=2)

    inside = bary.min(axis=2) >= -INSIDE_TOLERANCE
    found = inside.any(axis=1)
    rows = np.argmax(inside, axis=1)
    result = bary[np.arange(len(q)), rows]

    if not found.all():
        missing = np.flatnonzero(~found)
        snap_rows, snap_bary, dist = _closest_on_chart(chart, q[missing])
        if (dist > c.UV_SNAP_TOLERANCE).any():
            worst = float(dist.max())
            raise PointOutsideChart(
                f"UV point lies {worst:.3g} outside the chart"
            )
        rows[missing] = snap_rows
        result[missing] = snap_bary

    result = np.clip(result, 0.0, None)
    result /= result.sum(axis=1, keepdims=True)
    return rows, result


def _closest_on_chart(
    chart: Chart, q: FloatArray
) -> tuple[IntArray, FloatArray, FloatArray]:
    """Project points onto the nearest triangle edge of the chart."""
    start = chart.uv
    end = np.roll(chart.uv, -1, axis=1)
    seg = end - start
    rel = q[:, None, None, :] - start[None]
    length_sq = (seg**2).sum(axis=-1)
    param = np.clip((rel * seg[None]).sum(axis=-1) / length_sq, 0.0, 1.0)
    closest = start[None] + param[..., None] * seg[None]
    dist = np.linalg.norm(q[:, None, None, :] - closest, axis=-1)

    flat = dist.reshape(len(q), -1)
    best = np.argmin(flat, axis=1)
    rows = best // 3
    edge = best % 3
    s = param.reshape(len(q), -1)[np.arange(len(q)), best]
    bary = np.zeros((len(q), 3))
    bary[np.arange(len(q)), edge] = 1.0 - s
    bary[np.arange(len(q)), (edge + 1) % 3] += s
    return rows, bary, flat[np.arange(len(q)), best]


def _transfer(
    source: Chart, target: Chart, faces: IntArray, bary: FloatArray
) -> tuple[IntArray, FloatArray]:
    uv = np.einsum("ni,nij->nj", bary, source.uv[source.row_of(faces)])
    return locate_uv_many(target, uv)


def map_step(
    record: CollapseRecord, point: SurfacePoint, direction: Direction
) -> SurfacePoint:
    """Carry a point across one collapse.

    ``forward`` maps from the level before the collapse to the level
    after it, ``backward`` the other way. Points outside the changed
    region keep their face and barycentrics.
    """
    flat = _flattening(record)
    source, target = (
        (flat.before, flat.after)
        if direction == "forward"
        else (flat.after, flat.before)
    )
    if not source.contains_face(point.face):
        return point
    faces, bary = _transfer(
        source, target, np.array([point.face]), np.array([point.bary])
    )
    return SurfacePoint(int(faces[0]), tuple(bary[0]))


def _flattening(record: CollapseRecord) -> RingFlattening:
    if record.flattening is None:
        raise ValueError(f"Collapse at level {record.level} is not flattened")
    return record.flattening


@dataclasses.dataclass(frozen=True, eq=False)
class BijectionMap:
    """The composite point map between the original and coarse mesh.

    ``forward`` maps points on the original mesh to the coarse mesh,
    ``backward`` the other way.
    """

    trace: SimplificationTrace
    direction: Direction = "forward"

    def inverse(self) -> BijectionMap:
        return BijectionMap(
            self.trace,
            "backward" if self.direction == "forward" else "forward",
        )

    def __call__(self, point: SurfacePoint) -> SurfacePoint:
        if self.direction == "forward":
            return map_forward(self, point)
        return map_backward(self, point)

    def apply_many(
        self, faces: IntArray, bary: FloatArray
    ) -> tuple[IntArray, FloatArray]:
        if self.direction == "forward":
            return map_forward_many(self, faces, bary)
        return map_backward_many(self, faces, bary)


def map_forward(bij: BijectionMap, point: SurfacePoint) -> SurfacePoint:
    """Map a point on the original mesh to the coarse mesh."""
    faces, bary = map_forward_many(
        bij, np.array([point.face]), np.array([point.bary])
    )
    return SurfacePoint(int(faces[0]), tuple(bary[0]))


def map_backward(bij: BijectionMap, point: SurfacePoint) -> SurfacePoint:
    """Map a point on the coarse mesh back to the original mesh."""
    faces, bary = map_backward_many(
        bij, np.array([point.face]), np.array([point.bary])
    )
    return SurfacePoint(int(faces[0]), tuple(bary[0]))


def map_forward_many(
    bij: BijectionMap, faces: IntArray, bary: FloatArray
) -> tuple[IntArray, FloatArray]:
    """Vectorized `map_forward`."""
    trace = bij.trace
    faces = np.asarray(faces, dtype=np.int64).copy()
    if faces.size and (faces.min() < 0 or faces.max() >= trace.n_faces_fine):
        raise ValueError("Face id out of range for the original mesh")
    bary = np.asarray(bary, dtype=np.float64).copy()
    _compose(trace.records, faces, bary, forward=True)
    return trace.working_to_coarse[faces], bary


def map_backward_many(
    bij: BijectionMap, faces: IntArray, bary: FloatArray
) -> tuple[IntArray, FloatArray]:
    """Vectorized `map_backward`."""
    trace = bij.trace
    faces = np.asarray(faces, dtype=np.int64)
    if faces.size and (
        faces.min() < 0 or faces.max() >= len(trace.coarse_to_working)
    ):
        raise ValueError("Face id out of range for the coarse mesh")
    faces = trace.coarse_to_working[faces]
    bary = np.asarray(bary, dtype=np.float64).copy()
    _compose(trace.records[::-1], faces, bary, forward=False)
    return faces, bary


def _compose(
    records: t.Sequence[CollapseRecord],
    faces: IntArray,
    bary: FloatArray,
    *,
    forward: bool,
) -> None:
    """Push points through a sequence of collapses, in place.

    Points are bucketed by face so that each collapse only touches the
    points currently inside its region.
    """
    buckets = _group(np.arange(len(faces)), faces)
    for record in records:
        flat = _flattening(record)
        source, target = (
            (flat.before, flat.after) if forward else (flat.after, flat.before)
        )
        parts = [
            buckets.pop(f) for f in source.faces.tolist() if f in buckets
        ]
        if not parts:
            continue
        idx = np.concatenate(parts)
        new_faces, new_bary = _transfer(source, target, faces[idx], bary[idx])
        faces[idx] = new_faces
        bary[idx] = new_bary
        for f, members in _group(idx, new_faces).items():
            if f in buckets:
                members = np.concatenate([buckets[f], members])
            buckets[f] = members


def _group(idx: IntArray, faces: IntArray) -> dict[int, IntArray]:
    if len(idx) == 0:
        return {}
    order = np.argsort(faces, kind="stable")
    keys, starts = np.unique(faces[order], return_index=True)
    groups = np.split(idx[order], starts[1:])
    return dict(zip(keys.tolist(), groups, strict=True))
