# Copyright DB InfraGO AG and contributors
# SPDX-License-Identifier: Apache-2.0
"""Quadric error metric edge-collapse simplification.

Each accepted collapse is recorded together with the UV charts that
carry points across it, so the whole simplification can be replayed as
a point-level bijection.
"""

from __future__ import annotations

import collections
import dataclasses
import heapq
import logging
import math
import typing as t

import numpy as np

from meshpatch import core, mesh, selfparam
from meshpatch.mesh import FloatArray, IndexedMesh, IntArray

logger = logging.getLogger(__name__)

RejectReason: t.TypeAlias = t.Literal["link", "manifold", "flip", "foldover"]
REJECT_REASONS: t.Final[tuple[RejectReason, ...]] = t.get_args(RejectReason)

MAX_CONDITION: t.Final[float] = 1e8
DEFAULT_JITTER: t.Final[float] = 0.1

BoolArray: t.TypeAlias = "np.ndarray[t.Any, np.dtype[np.bool_]]"


class TargetUnreachable(core.MeshPatchError):
    pass


def face_quadrics(m: IndexedMesh) -> FloatArray:
    """Return the area-weighted plane quadric of every face."""
    cross = m.face_cross()
    double_area = np.linalg.norm(cross, axis=1)
    if (0.5 * double_area <= m.area_epsilon).any():
        raise mesh.DegenerateFace("Cannot build quadrics: zero-area face")
    normals = cross / double_area[:, None]
    offsets = -np.einsum("ij,ij->i", normals, m.vertices[m.faces[:, 0]])
    planes = np.concatenate([normals, offsets[:, None]], axis=1)
    return 0.5 * double_area[:, None, None] * np.einsum(
        "ni,nj->nij", planes, planes
    )


def initial_quadrics(m: IndexedMesh) -> FloatArray:
    """Sum the face quadrics around every vertex, shape (n, 4, 4)."""
    per_face = face_quadrics(m)
    quadrics = np.zeros((m.n_vertices, 4, 4))
    for corner in range(3):
        np.add.at(quadrics, m.faces[:, corner], per_face)
    return quadrics


def evaluate_quadric(q: FloatArray, x: t.Sequence[float]) -> float:
    h = np.append(np.asarray(x, dtype=np.float64), 1.0)
    return float(h @ q @ h)


def optimal_position(
    q: FloatArray, v1: t.Sequence[float], v2: t.Sequence[float]
) -> tuple[FloatArray, float]:
    """Find the point minimizing a quadric.

    Falls back to the best of the midpoint, ``v1`` and ``v2`` (in that
    order of preference) when the linear system is close to singular.
    """
    a = q[:3, :3]
    b = -q[:3, 3]
    with np.errstate(all="ignore"):
        condition = np.linalg.cond(a)
    if np.isfinite(condition) and condition <= MAX_CONDITION:
        x = np.linalg.solve(a, b)
        return x, evaluate_quadric(q, x)

    p1 = np.asarray(v1, dtype=np.float64)
    p2 = np.asarray(v2, dtype=np.float64)
    candidates = [(p1 + p2) / 2, p1, p2]
    costs = [evaluate_quadric(q, x) for x in candidates]
    best = int(np.argmin(costs))
    return candidates[best], costs[best]


@dataclasses.dataclass(frozen=True, eq=False)
class CollapseRecord:
    """Everything needed to replay and invert one edge collapse.

    ``before_faces``/``before_tris`` describe the region around the edge
    before the collapse, ``after_faces``/``after_tris`` the same region
    afterwards. Both share the boundary vertex cycle ``boundary``. The
    merged vertex reuses the id of ``v1``.
    """

    level: int
    v1: int
    v2: int
    merged: int
    position_v1: FloatArray
    position_v2: FloatArray
    position_merged: FloatArray
    boundary: IntArray
    boundary_positions: FloatArray
    before_faces: IntArray
    before_tris: IntArray
    after_faces: IntArray
    after_tris: IntArray
    flattening: selfparam.RingFlattening | None = None

    @property
    def removed_faces(self) -> IntArray:
        return np.setdiff1d(self.before_faces, self.after_faces)


@dataclasses.dataclass(frozen=True, eq=False)
class SimplificationTrace:
    """The ordered collapses turning the original mesh into the coarse one.

    Face ids stay stable while simplifying; ``working_to_coarse`` and
    ``coarse_to_working`` translate between those ids and the compact
    face numbering of ``coarse``.
    """

    records: tuple[CollapseRecord, ...]
    coarse: IndexedMesh
    working_to_coarse: IntArray
    coarse_to_working: IntArray
    coarse_vertices: IntArray
    n_faces_fine: int
    n_vertices_fine: int
    seed: int = 0
    rejections: dict[str, int] = dataclasses.field(default_factory=dict)

    @property
    def levels(self) -> int:
        return len(self.records)

    @classmethod
    def identity(cls, m: IndexedMesh, seed: int = 0) -> SimplificationTrace:
        return cls(
            records=(),
            coarse=m,
            working_to_coarse=np.arange(m.n_faces),
            coarse_to_working=np.arange(m.n_faces),
            coarse_vertices=np.arange(m.n_vertices),
            n_faces_fine=m.n_faces,
            n_vertices_fine=m.n_vertices,
            seed=seed,
            rejections=dict.fromkeys(REJECT_REASONS, 0),
        )

    def replay(self, m: IndexedMesh) -> IndexedMesh:
        """Apply the recorded collapses to ``m`` and return the result."""
        positions = np.array(m.vertices)
        faces = np.array(m.faces)
        face_alive = np.ones(len(faces), dtype=bool)
        vertex_alive = np.ones(len(positions), dtype=bool)
        for record in self.records:
            faces[record.after_faces] = record.after_tris
            face_alive[record.removed_faces] = False
            vertex_alive[record.v2] = False
            positions[record.merged] = record.position_merged
        coarse, *_ = _compact(positions, faces, face_alive, vertex_alive)
        return coarse


def _compact(
    positions: FloatArray,
    faces: IntArray,
    face_alive: BoolArray,
    vertex_alive: BoolArray,
) -> tuple[IndexedMesh, IntArray, IntArray, IntArray]:
    kept_faces = np.flatnonzero(face_alive)
    kept_vertices = np.flatnonzero(vertex_alive)
    vertex_map = np.full(len(positions), -1, dtype=np.int64)
    vertex_map[kept_vertices] = np.arange(len(kept_vertices))
    face_map = np.full(len(faces), -1, dtype=np.int64)
    face_map[kept_faces] = np.arange(len(kept_faces))
    coarse = IndexedMesh(
        positions[kept_vertices], vertex_map[faces[kept_faces]]
    )
    return coarse, face_map, kept_faces, kept_vertices


class _Simplifier:
    """Mutable working state of one `simplify_to` run."""

    def __init__(
        self,
        m: IndexedMesh,
        seed: int,
        jitter: float,
        boundary_mode: selfparam.BoundaryMode,
    ) -> None:
        self.positions = np.array(m.vertices)
        self.faces = np.array(m.faces)
        self.face_alive = np.ones(m.n_faces, dtype=bool)
        self.vertex_alive = np.ones(m.n_vertices, dtype=bool)
        self.n_alive = m.n_faces
        self.vertex_faces: list[set[int]] = [
            set() for _ in range(m.n_vertices)
        ]
        for f, tri in enumerate(m.faces.tolist()):
            for v in tri:
                self.vertex_faces[v].add(f)
        self.quadrics = initial_quadrics(m)
        self.area_epsilon = m.area_epsilon
        self.rng = np.random.default_rng(seed)
        self.jitter = jitter
        self.boundary_mode = boundary_mode

        self.heap: list[tuple[float, float, int, int, int, FloatArray]] = []
        self.tokens: dict[tuple[int, int], int] = {}
        self.next_token = 0
        self.parked: dict[int, set[tuple[int, int]]] = (
            collections.defaultdict(set)
        )
        self.rejections: collections.Counter[str] = collections.Counter(
            dict.fromkeys(REJECT_REASONS, 0)
        )
        self.records: list[CollapseRecord] = []

    def neighbors(self, v: int) -> set[int]:
        ring = set(self.faces[list(self.vertex_faces[v])].reshape(-1).tolist())
        ring.discard(v)
        return ring

    def push(self, a: int, b: int) -> None:
        a, b = min(a, b), max(a, b)
        q = self.quadrics[a] + self.quadrics[b]
        position, cost = optimal_position(
            q, self.positions[a], self.positions[b]
        )
        cost = max(cost, 0.0)
        if self.jitter:
            cost *= math.exp(self.rng.uniform(-self.jitter, self.jitter))
        tie = float(self.rng.random())
        self.next_token += 1
        self.tokens[a, b] = self.next_token
        heapq.heappush(self.heap, (cost, tie, a, b, self.next_token, position))

    def run(self, target: int) -> None:
        for a, b in np.array(
            sorted({tuple(sorted(e)) for e in _face_edges(self.faces)})
        ).tolist():
            self.push(a, b)

        while self.n_alive > target:
            if not self.heap:
                raise TargetUnreachable(
                    f"No valid collapse left at {self.n_alive} faces,"
                    f" target was {target}"
                )
            _, _, a, b, token, position = heapq.heappop(self.heap)
            if self.tokens.get((a, b)) != token:
                continue
            del self.tokens[a, b]
            if not (self.vertex_alive[a] and self.vertex_alive[b]):
                continue

            outcome = self.attempt(a, b, position)
            if isinstance(outcome, str):
                self.rejections[outcome] += 1
                self.parked[a].add((a, b))
                self.parked[b].add((a, b))
                logger.debug("Rejected collapse (%d, %d): %s", a, b, outcome)
                continue
            self.commit(outcome)

    def attempt(
        self, a: int, b: int, position: FloatArray
    ) -> CollapseRecord | RejectReason:
        faces_a = self.vertex_faces[a]
        faces_b = self.vertex_faces[b]
        shared = faces_a & faces_b
        if len(shared) != 2:
            return "manifold"
        opposite = {
            v
            for f in shared
            for v in self.faces[f].tolist()
            if v not in (a, b)
        }
        if self.neighbors(a) & self.neighbors(b) != opposite:
            return "link"

        region = np.array(sorted(faces_a | faces_b), dtype=np.int64)
        before_tris = self.faces[region]
        keep = ~np.isin(region, list(shared))
        after_faces = region[keep]
        after_tris = np.where(before_tris[keep] == b, a, before_tris[keep])

        boundary = _boundary_cycle(before_tris, a, b)
        if boundary is None or len(boundary) != len(after_faces):
            return "manifold"

        old = self.positions[before_tris[keep]]
        new_positions = self.positions.copy()
        new_positions[a] = position
        new = new_positions[after_tris]
        old_cross = np.cross(old[:, 1] - old[:, 0], old[:, 2] - old[:, 0])
        new_cross = np.cross(new[:, 1] - new[:, 0], new[:, 2] - new[:, 0])
        new_area = 0.5 * np.linalg.norm(new_cross, axis=1)
        if (new_area <= self.area_epsilon).any():
            return "flip"
        if (np.einsum("ij,ij->i", old_cross, new_cross) <= 0).any():
            return "flip"

        record = CollapseRecord(
            level=0,
            v1=a,
            v2=b,
            merged=a,
            position_v1=self.positions[a].copy(),
            position_v2=self.positions[b].copy(),
            position_merged=np.asarray(position, dtype=np.float64),
            boundary=boundary,
            boundary_positions=self.positions[boundary].copy(),
            before_faces=region,
            before_tris=before_tris,
            after_faces=after_faces,
            after_tris=after_tris,
        )
        try:
            flattening = selfparam.flatten_collapse(
                record, mode=self.boundary_mode
            )
        except selfparam.FlatteningFoldover:
            return "foldover"
        return dataclasses.replace(record, flattening=flattening)

    def commit(self, record: CollapseRecord) -> None:
        a, b = record.v1, record.v2
        for f in record.removed_faces.tolist():
            self.face_alive[f] = False
            for v in self.faces[f].tolist():
                self.vertex_faces[v].discard(f)
        self.faces[record.after_faces] = record.after_tris
        self.vertex_faces[a] = set(record.after_faces.tolist())
        self.vertex_faces[b] = set()
        self.vertex_alive[b] = False
        self.positions[a] = record.position_merged
        self.quadrics[a] = self.quadrics[a] + self.quadrics[b]
        self.n_alive -= 2
        self.records.append(record)

        ring = self.neighbors(a)
        for w in sorted(ring):
            self.push(a, w)
        for v in sorted(ring | {a, b}):
            for x, y in sorted(self.parked.pop(v, ())):
                if (
                    self.vertex_alive[x]
                    and self.vertex_alive[y]
                    and (x, y) not in self.tokens
                ):
                    self.push(x, y)


def _face_edges(faces: IntArray) -> list[tuple[int, int]]:
    return [
        (u, v)
        for tri in faces.tolist()
        for u, v in ((tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0]))
    ]


def _boundary_cycle(tris: IntArray, a: int, b: int) -> IntArray | None:
    """Order the outer vertex cycle of the faces around edge (a, b).

    The cycle follows the faces' winding and starts at the vertex
    opposite the directed edge a -> b. Returns None if the region is not
    a disk bounded by one simple cycle.
    """
    successor: dict[int, int] = {}
    start = None
    for tri in tris.tolist():
        special = [i for i, v in enumerate(tri) if v in (a, b)]
        if len(special) == 2:
            i = special[0]
            if tri[i] == a and tri[(i + 1) % 3] == b:
                start = tri[(i + 2) % 3]
            elif tri[(i + 2) % 3] == a and tri[i] == b:
                start = tri[(i + 1) % 3]
            continue
        i = special[0]
        p, q = tri[(i + 1) % 3], tri[(i + 2) % 3]
        if p in successor:
            return None
        successor[p] = q

    if start is None or start not in successor:
        return None
    cycle = [start]
    v = successor[start]
    while v != start:
        if v not in successor or len(cycle) > len(successor):
            return None
        cycle.append(v)
        v = successor[v]
    if len(cycle) != len(successor):
        return None
    return np.array(cycle, dtype=np.int64)


def simplify_to(
    m: IndexedMesh,
    target_faces: int,
    seed: int,
    *,
    jitter: float = DEFAULT_JITTER,
    boundary_mode: selfparam.BoundaryMode = "circle",
) -> SimplificationTrace:
    """Collapse edges until the mesh has exactly ``target_faces`` faces.

    Candidate edges are ordered by their quadric cost, multiplied by
    ``exp(u)`` with ``u ~ U(-jitter, jitter)`` drawn at queue insertion;
    exact ties are broken by a random key. Both come from a generator
    seeded with ``seed``, so equal inputs give identical traces.

    Raises
    ------
    TargetUnreachable
        If the target cannot be reached by valid collapses.
    NonManifoldInput
        If the input is not a closed, oriented 2-manifold.
    """
    if target_faces < 4:
        raise ValueError(
            f"Target must be at least 4 faces, got {target_faces}"
        )
    mesh.build_halfedge(m)
    if target_faces > m.n_faces:
        raise TargetUnreachable(
            f"Mesh has {m.n_faces} faces, fewer than the target {target_faces}"
        )
    if (m.n_faces - target_faces) % 2:
        raise TargetUnreachable(
            f"Cannot reach {target_faces} faces from {m.n_faces}:"
            " every collapse removes two"
        )

    state = _Simplifier(m, seed, jitter, boundary_mode)
    state.run(target_faces)

    levels = len(state.records)
    records = tuple(
        dataclasses.replace(r, level=levels - i)
        for i, r in enumerate(state.records)
    )
    coarse, face_map, kept_faces, kept_vertices = _compact(
        state.positions, state.faces, state.face_alive, state.vertex_alive
    )
    logger.info(
        "Simplified %d -> %d faces in %d collapses (rejected: %s)",
        m.n_faces,
        coarse.n_faces,
        levels,
        dict(state.rejections),
    )
    return SimplificationTrace(
        records=records,
        coarse=coarse,
        working_to_coarse=face_map,
        coarse_to_working=kept_faces,
        coarse_vertices=kept_vertices,
        n_faces_fine=m.n_faces,
        n_vertices_fine=m.n_vertices,
        seed=seed,
        rejections=dict(state.rejections),
    )


def _chart_to_dict(chart: selfparam.Chart) -> dict[str, t.Any]:
    return {
        "faces": chart.faces.tolist(),
        "triangles": chart.triangles.tolist(),
        "uv": chart.uv.tolist(),
    }


def _chart_from_dict(data: dict[str, t.Any]) -> selfparam.Chart:
    return selfparam.Chart(
        faces=np.asarray(data["faces"], dtype=np.int64),
        triangles=np.asarray(data["triangles"], dtype=np.int64).reshape(-1, 3),
        uv=np.asarray(data["uv"], dtype=np.float64).reshape(-1, 3, 2),
    )


_RECORD_ARRAYS: t.Final = {
    "position_v1": np.float64,
    "position_v2": np.float64,
    "position_merged": np.float64,
    "boundary": np.int64,
    "boundary_positions": np.float64,
    "before_faces": np.int64,
    "before_tris": np.int64,
    "after_faces": np.int64,
    "after_tris": np.int64,
}


def trace_to_dict(trace: SimplificationTrace) -> dict[str, t.Any]:
    """Convert a trace into plain JSON-compatible data."""
    records = []
    for r in trace.records:
        item: dict[str, t.Any] = {
            "level": r.level,
            "v1": r.v1,
            "v2": r.v2,
            "merged": r.merged,
        }
        for name in _RECORD_ARRAYS:
            item[name] = getattr(r, name).tolist()
        if r.flattening is not None:
            item["flattening"] = {
                "boundary_uv": r.flattening.boundary_uv.tolist(),
                "before": _chart_to_dict(r.flattening.before),
                "after": _chart_to_dict(r.flattening.after),
            }
        records.append(item)
    return {
        "seed": trace.seed,
        "n_faces_fine": trace.n_faces_fine,
        "n_vertices_fine": trace.n_vertices_fine,
        "rejections": trace.rejections,
        "coarse": {
            "vertices": trace.coarse.vertices.tolist(),
            "faces": trace.coarse.faces.tolist(),
        },
        "working_to_coarse": trace.working_to_coarse.tolist(),
        "coarse_to_working": trace.coarse_to_working.tolist(),
        "coarse_vertices": trace.coarse_vertices.tolist(),
        "records": records,
    }


def trace_from_dict(data: dict[str, t.Any]) -> SimplificationTrace:
    records = []
    for item in data["records"]:
        arrays = {
            name: np.asarray(item[name], dtype=dtype)
            for name, dtype in _RECORD_ARRAYS.items()
        }
        arrays["before_tris"] = arrays["before_tris"].reshape(-1, 3)
        arrays["after_tris"] = arrays["after_tris"].reshape(-1, 3)
        arrays["boundary_positions"] = arrays["boundary_positions"].reshape(
            -1, 3
        )
        flattening = None
        if "flattening" in item:
            flattening = selfparam.RingFlattening(
                boundary=arrays["boundary"],
                boundary_uv=np.asarray(
                    item["flattening"]["boundary_uv"], dtype=np.float64
                ),
                before=_chart_from_dict(item["flattening"]["before"]),
                after=_chart_from_dict(item["flattening"]["after"]),
            )
        records.append(
            CollapseRecord(
                level=item["level"],
                v1=item["v1"],
                v2=item["v2"],
                merged=item["merged"],
                flattening=flattening,
                **arrays,
            )
        )
    return SimplificationTrace(
        records=tuple(records),
        coarse=IndexedMesh(
            np.asarray(data["coarse"]["vertices"], dtype=np.float64),
            np.asarray(data["coarse"]["faces"], dtype=np.int64),
        ),
        working_to_coarse=np.asarray(
            data["working_to_coarse"], dtype=np.int64
        ),
        coarse_to_working=np.asarray(
            data["coarse_to_working"], dtype=np.int64
        ),
        coarse_vertices=np.asarray(data["coarse_vertices"], dtype=np.int64),
        n_faces_fine=data["n_faces_fine"],
        n_vertices_fine=data["n_vertices_fine"],
        seed=data["seed"],
        rejections=dict(data["rejections"]),
    )
