# Copyright DB InfraGO AG and contributors
# SPDX-License-Identifier: Apache-2.0
"""Triangle mesh representation, IO, validation and area measures.

Meshes are immutable once constructed: the vertex and face arrays are
flagged read-only, so a mesh can be shared between threads without
copying.
"""

from __future__ import annotations

import collections
import dataclasses
import io
import logging
import pathlib
import typing as t

import numpy as np
import numpy.typing as npt
import pydantic as p
from scipy import sparse
from scipy.sparse import csgraph
from scipy.spatial import cKDTree

import meshpatch.constants as c
from meshpatch import core

logger = logging.getLogger(__name__)

FloatArray: t.TypeAlias = npt.NDArray[np.float64]
IntArray: t.TypeAlias = npt.NDArray[np.int64]

MeshFormat: t.TypeAlias = t.Literal["obj", "off"]


class ParseError(core.MeshPatchError):
    def __init__(self, message: str, line: int) -> None:
        super().__init__(f"line {line}: {message}")
        self.line = line


class NonTriangleFace(ParseError):
    pass


class InvalidMesh(core.MeshPatchError):
    pass


class NonManifoldInput(core.MeshPatchError):
    diagnostics: MeshDiagnostics | None = None


class DegenerateExtent(core.MeshPatchError):
    pass


class DegenerateFace(core.MeshPatchError):
    pass


class InvalidFace(core.MeshPatchError):
    pass


@dataclasses.dataclass(frozen=True, eq=False)
class IndexedMesh:
    """Vertex positions plus counter-clockwise vertex-index triples."""

    vertices: FloatArray
    faces: IntArray

    def __post_init__(self) -> None:
        vertices = np.array(self.vertices, dtype=np.float64, copy=True)
        faces = np.array(self.faces, dtype=np.int64, copy=True)
        if vertices.size == 0:
            vertices = vertices.reshape(0, 3)
        if faces.size == 0:
            faces = faces.reshape(0, 3)
        if vertices.ndim != 2 or vertices.shape[1] != 3:
            raise InvalidMesh(
                f"Expected (n, 3) vertices, got {vertices.shape}"
            )
        if faces.ndim != 2 or faces.shape[1] != 3:
            raise InvalidMesh(f"Expected (m, 3) faces, got {faces.shape}")
        if not np.isfinite(vertices).all():
            raise InvalidMesh("Vertex positions must be finite")
        if faces.size and (faces.min() < 0 or faces.max() >= len(vertices)):
            raise InvalidMesh("Face index out of range")
        same = (
            (faces[:, 0] == faces[:, 1])
            | (faces[:, 1] == faces[:, 2])
            | (faces[:, 2] == faces[:, 0])
        )
        if same.any():
            bad = int(np.flatnonzero(same)[0])
            raise InvalidMesh(
                f"Face {bad} repeats a vertex: {faces[bad].tolist()}"
            )
        vertices.flags.writeable = False
        faces.flags.writeable = False
        object.__setattr__(self, "vertices", vertices)
        object.__setattr__(self, "faces", faces)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    @property
    def bbox_diagonal(self) -> float:
        if self.n_vertices == 0:
            return 0.0
        lo = self.vertices.min(axis=0)
        hi = self.vertices.max(axis=0)
        return float(np.linalg.norm(hi - lo))

    @property
    def area_epsilon(self) -> float:
        """Area below which a face counts as degenerate."""
        return c.AREA_EPSILON * self.bbox_diagonal**2

    def triangles(self) -> FloatArray:
        """Return the (m, 3, 3) corner positions of every face."""
        return self.vertices[self.faces]

    def face_cross(self) -> FloatArray:
        tri = self.triangles()
        return np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])

    def face_areas(self) -> FloatArray:
        return 0.5 * np.linalg.norm(self.face_cross(), axis=1)

    @property
    def surface_area(self) -> float:
        return float(self.face_areas().sum())

    def degenerate_faces(self) -> IntArray:
        return np.flatnonzero(self.face_areas() <= self.area_epsilon)

    def face_normals(self) -> FloatArray:
        """Return unit face normals following the counter-clockwise winding.

        Raises
        ------
        DegenerateFace
            If any face has (near) zero area.
        """
        cross = self.face_cross()
        norms = np.linalg.norm(cross, axis=1)
        if (0.5 * norms <= self.area_epsilon).any():
            bad = int(np.flatnonzero(0.5 * norms <= self.area_epsilon)[0])
            raise DegenerateFace(f"Face {bad} has zero area")
        return cross / norms[:, None]

    def vertex_normals(self) -> FloatArray:
        """Return area-weighted unit vertex normals."""
        cross = self.face_cross()
        normals = np.zeros_like(self.vertices)
        for corner in range(3):
            np.add.at(normals, self.faces[:, corner], cross)
        norms = np.linalg.norm(normals, axis=1)
        norms[norms == 0] = 1.0
        return normals / norms[:, None]

    def edges(self) -> IntArray:
        """Return the sorted unique undirected edges."""
        pairs = self.faces[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2)
        return np.unique(np.sort(pairs, axis=1), axis=0)


@dataclasses.dataclass(frozen=True)
class SurfacePoint:
    """A point on a specific mesh, given by face and barycentric triple."""

    face: int
    bary: tuple[float, float, float]

    def __post_init__(self) -> None:
        bary = tuple(float(b) for b in self.bary)
        if len(bary) != 3:
            raise ValueError(f"Expected three barycentrics, got {bary}")
        if min(bary) < -c.BARY_TOLERANCE:
            raise ValueError(f"Negative barycentric coordinate: {bary}")
        if abs(sum(bary) - 1.0) > c.BARY_TOLERANCE:
            raise ValueError(f"Barycentrics must sum to 1: {bary}")
        object.__setattr__(self, "face", int(self.face))
        object.__setattr__(self, "bary", bary)


class MeshDiagnostics(p.BaseModel):
    is_manifold: bool = p.Field(title="Every vertex fan is a closed cycle")
    is_watertight: bool = p.Field(title="Every edge has two faces")
    is_oriented: bool = p.Field(
        True, title="No directed edge is used twice"
    )
    genus: int | None = p.Field(
        None, title="Genus, if the surface is closed and manifold"
    )
    components: int = p.Field(0, title="Connected components")
    euler_characteristic: int = p.Field(0, title="V - E + F")
    defects: list[str] = p.Field(default_factory=list, title="Defect list")

    @property
    def ok(self) -> bool:
        return (
            self.is_manifold
            and self.is_watertight
            and self.is_oriented
            and not self.defects
        )


@dataclasses.dataclass(frozen=True, eq=False)
class HalfedgeMesh:
    """Halfedge connectivity over a watertight, oriented 2-manifold.

    Halfedge ``3 * f + i`` runs from corner ``i`` to corner ``i + 1`` of
    face ``f``.
    """

    origin: IntArray
    twin: IntArray
    next: IntArray
    face: IntArray
    vertex_halfedge: IntArray
    face_halfedge: IntArray

    @property
    def n_halfedges(self) -> int:
        return len(self.origin)

    def destination(self, h: int) -> int:
        return int(self.origin[self.next[h]])

    def outgoing(self, v: int) -> list[int]:
        """Return the outgoing halfedges of ``v`` in fan order."""
        start = int(self.vertex_halfedge[v])
        ring = [start]
        h = int(self.twin[self.next[self.next[start]]])
        while h != start:
            ring.append(h)
            h = int(self.twin[self.next[self.next[h]]])
        return ring

    def neighbors(self, v: int) -> list[int]:
        return [self.destination(h) for h in self.outgoing(v)]

    def face_neighbors(self) -> IntArray:
        """Return the face across each edge, shape (m, 3)."""
        return self.face[self.twin].reshape(-1, 3)

    def to_indexed(self, vertices: FloatArray) -> IndexedMesh:
        return IndexedMesh(vertices, self.origin.reshape(-1, 3))


@dataclasses.dataclass(frozen=True)
class BoxTransform:
    """Uniform scale and translation mapping a mesh into the unit box."""

    scale: float
    lower: tuple[float, float, float]

    def apply(self, points: npt.ArrayLike) -> FloatArray:
        return (np.asarray(points, dtype=np.float64) - self.lower) * self.scale

    def invert(self, points: npt.ArrayLike) -> FloatArray:
        return np.asarray(points, dtype=np.float64) / self.scale + self.lower


def load_mesh(
    source: bytes | str | t.IO[bytes] | t.IO[str], fmt: MeshFormat
) -> IndexedMesh:
    """Read an OBJ or OFF mesh.

    Only ``v`` and ``f`` lines of OBJ files are interpreted, every other
    directive is ignored. Vertex order is preserved from the file.

    Raises
    ------
    ParseError
        On a malformed line; the exception carries the line number.
    NonTriangleFace
        If a face has more than three vertices.
    """
    if isinstance(source, bytes):
        text = source.decode("utf-8", errors="replace")
    elif isinstance(source, str):
        text = source
    else:
        raw = source.read()
        text = (
            raw.decode("utf-8", errors="replace")
            if isinstance(raw, bytes)
            else raw
        )

    if fmt == "obj":
        vertices, faces = _parse_obj(text)
    elif fmt == "off":
        vertices, faces = _parse_off(text)
    else:
        raise ValueError(f"Unsupported mesh format: {fmt!r}")

    try:
        return IndexedMesh(
            np.asarray(vertices, dtype=np.float64).reshape(-1, 3),
            np.asarray(faces, dtype=np.int64).reshape(-1, 3),
        )
    except InvalidMesh as err:
        raise ParseError(str(err), 0) from None


def load_mesh_file(path: str | pathlib.Path) -> IndexedMesh:
    path = pathlib.Path(path)
    fmt = path.suffix.lower().lstrip(".")
    if fmt not in ("obj", "off"):
        raise ValueError(f"Unsupported mesh file type: {path.name}")
    with path.open("rb") as f:
        return load_mesh(f, t.cast(MeshFormat, fmt))


def _parse_obj(text: str) -> tuple[list[list[float]], list[list[int]]]:
    vertices: list[list[float]] = []
    faces: list[list[int]] = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        tokens = line.split("#", 1)[0].split()
        if not tokens:
            continue
        if tokens[0] == "v":
            if len(tokens) < 4:
                raise ParseError("vertex needs three coordinates", lineno)
            try:
                vertices.append([float(x) for x in tokens[1:4]])
            except ValueError:
                raise ParseError(f"bad vertex: {line!r}", lineno) from None
        elif tokens[0] == "f":
            refs = tokens[1:]
            if len(refs) > 3:
                raise NonTriangleFace(
                    f"face with {len(refs)} vertices", lineno
                )
            if len(refs) < 3:
                raise ParseError("face needs three vertices", lineno)
            face = []
            for ref in refs:
                try:
                    idx = int(ref.split("/", 1)[0])
                except ValueError:
                    raise ParseError(f"bad face: {line!r}", lineno) from None
                if idx == 0:
                    raise ParseError("OBJ indices start at 1", lineno)
                face.append(idx - 1 if idx > 0 else len(vertices) + idx)
            faces.append(face)
    return vertices, faces


def _parse_off(text: str) -> tuple[list[list[float]], list[list[int]]]:
    lines = [
        (lineno, tokens)
        for lineno, line in enumerate(text.splitlines(), start=1)
        if (tokens := line.split("#", 1)[0].split())
    ]
    if not lines or not lines[0][1][0].endswith("OFF"):
        raise ParseError("missing OFF header", lines[0][0] if lines else 1)
    header = lines[0][1][1:]
    body = lines[1:]
    if not header:
        if not body:
            raise ParseError("missing element counts", lines[0][0])
        lineno, header = body[0]
        body = body[1:]
    try:
        n_vertices, n_faces = int(header[0]), int(header[1])
    except (ValueError, IndexError):
        raise ParseError("bad element counts", lines[0][0]) from None
    if len(body) < n_vertices + n_faces:
        last = body[-1][0] if body else lines[0][0]
        raise ParseError("file ends before all elements were read", last)

    vertices: list[list[float]] = []
    for lineno, tokens in body[:n_vertices]:
        try:
            vertices.append([float(x) for x in tokens[:3]])
        except ValueError:
            raise ParseError("bad vertex", lineno) from None
        if len(tokens) < 3:
            raise ParseError("vertex needs three coordinates", lineno)

    faces: list[list[int]] = []
    for lineno, tokens in body[n_vertices : n_vertices + n_faces]:
        try:
            count = int(tokens[0])
            refs = [int(x) for x in tokens[1 : 1 + count]]
        except ValueError:
            raise ParseError("bad face", lineno) from None
        if count > 3:
            raise NonTriangleFace(f"face with {count} vertices", lineno)
        if count < 3 or len(refs) != 3:
            raise ParseError("face needs three vertices", lineno)
        faces.append(refs)
    return vertices, faces


def write_obj(mesh: IndexedMesh) -> str:
    """Render a mesh as OBJ text, for debugging dumps."""
    out = io.StringIO()
    for x, y, z in mesh.vertices:
        out.write(f"v {float(x)!r} {float(y)!r} {float(z)!r}\n")
    for a, b, c_ in mesh.faces + 1:
        out.write(f"f {a} {b} {c_}\n")
    return out.getvalue()


def validate(mesh: IndexedMesh) -> MeshDiagnostics:
    """Check a mesh for watertightness and 2-manifoldness.

    Defects are reported, never raised.
    """
    defects: list[str] = []
    faces = mesh.faces

    directed = faces[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2)
    _, directed_counts = np.unique(directed, axis=0, return_counts=True)
    is_oriented = bool((directed_counts <= 1).all())
    if not is_oriented:
        defects.append(
            f"{int((directed_counts > 1).sum())} directed edges used twice"
        )

    undirected = np.sort(directed, axis=1)
    edges, edge_counts = np.unique(undirected, axis=0, return_counts=True)
    n_boundary = int((edge_counts == 1).sum())
    n_nonmanifold_edges = int((edge_counts > 2).sum())
    if n_boundary:
        defects.append(f"{n_boundary} boundary edges")
    if n_nonmanifold_edges:
        defects.append(f"{n_nonmanifold_edges} non-manifold edges")
    is_watertight = len(faces) > 0 and bool((edge_counts == 2).all())

    _, face_counts = np.unique(
        np.sort(faces, axis=1), axis=0, return_counts=True
    )
    if (face_counts > 1).any():
        defects.append(f"{int((face_counts > 1).sum())} duplicate faces")

    degenerate = mesh.degenerate_faces()
    if len(degenerate):
        defects.append(f"{len(degenerate)} zero-area faces")

    bad_vertices = _nonmanifold_vertices(faces)
    if bad_vertices:
        defects.append(f"{len(bad_vertices)} non-manifold vertices")
    is_manifold = len(faces) > 0 and not bad_vertices

    referenced = np.unique(faces)
    euler = len(referenced) - len(edges) + len(faces)
    components = 0
    if len(edges):
        graph = sparse.coo_matrix(
            (np.ones(len(edges)), (edges[:, 0], edges[:, 1])),
            shape=(mesh.n_vertices, mesh.n_vertices),
        )
        _, labels = csgraph.connected_components(graph, directed=False)
        components = len(np.unique(labels[referenced]))

    genus = None
    if is_watertight and is_manifold:
        genus = (2 * components - euler) // 2

    return MeshDiagnostics(
        is_manifold=is_manifold,
        is_watertight=is_watertight,
        is_oriented=is_oriented,
        genus=genus,
        components=components,
        euler_characteristic=euler,
        defects=defects,
    )


def _nonmanifold_vertices(faces: IntArray) -> list[int]:
    """Find vertices whose link is not a single closed cycle."""
    links: dict[int, list[tuple[int, int]]] = collections.defaultdict(list)
    for a, b, c_ in faces.tolist():
        links[a].append((b, c_))
        links[b].append((c_, a))
        links[c_].append((a, b))

    bad = []
    for v, link in links.items():
        adjacency: dict[int, list[int]] = collections.defaultdict(list)
        for x, y in link:
            adjacency[x].append(y)
            adjacency[y].append(x)
        if any(len(n) != 2 for n in adjacency.values()):
            bad.append(v)
            continue
        start = link[0][0]
        seen = {start}
        stack = [start]
        while stack:
            for n in adjacency[stack.pop()]:
                if n not in seen:
                    seen.add(n)
                    stack.append(n)
        if len(seen) != len(adjacency):
            bad.append(v)
    return sorted(bad)


def build_halfedge(mesh: IndexedMesh) -> HalfedgeMesh:
    """Build halfedge connectivity.

    Raises
    ------
    NonManifoldInput
        If the mesh has boundary or non-manifold edges, inconsistent
        orientation or pinched vertices.
    """
    faces = mesh.faces
    n_faces = len(faces)
    if n_faces == 0:
        raise NonManifoldInput("Mesh has no faces")
    n = max(mesh.n_vertices, 1)

    origin = faces.reshape(-1)
    dest = faces[:, [1, 2, 0]].reshape(-1)
    halfedges = np.arange(3 * n_faces)
    nxt = 3 * (halfedges // 3) + (halfedges + 1) % 3
    face = halfedges // 3

    keys = origin * n + dest
    order = np.argsort(keys, kind="stable")
    sorted_keys = keys[order]
    if (np.diff(sorted_keys) == 0).any():
        raise NonManifoldInput(
            "A directed edge is used twice (non-manifold or flipped face)"
        )
    twin_keys = dest * n + origin
    pos = np.searchsorted(sorted_keys, twin_keys)
    pos = np.minimum(pos, len(sorted_keys) - 1)
    if (sorted_keys[pos] != twin_keys).any():
        raise NonManifoldInput("Mesh has boundary edges")
    twin = order[pos]

    vertex_halfedge = np.full(mesh.n_vertices, -1, dtype=np.int64)
    vertex_halfedge[origin[::-1]] = halfedges[::-1]
    face_halfedge = 3 * np.arange(n_faces)

    he = HalfedgeMesh(
        origin=origin.copy(),
        twin=twin,
        next=nxt,
        face=face,
        vertex_halfedge=vertex_halfedge,
        face_halfedge=face_halfedge,
    )

    degree = np.bincount(origin, minlength=mesh.n_vertices)
    for v in np.flatnonzero(degree):
        if len(he.outgoing(int(v))) != degree[v]:
            raise NonManifoldInput(f"Vertex {int(v)} has more than one fan")
    return he


def repair(mesh: IndexedMesh) -> tuple[IndexedMesh, IntArray]:
    """Weld coincident vertices, drop zero-area and duplicate faces.

    Returns the repaired mesh and, for each of its faces, the index of
    the input face it came from. Nothing else is repaired; meshes that
    still fail `validate` afterwards are meant to be rejected.
    """
    tolerance = c.WELD_EPSILON * mesh.bbox_diagonal
    pairs = cKDTree(mesh.vertices).query_pairs(
        r=tolerance, output_type="ndarray"
    )
    n = mesh.n_vertices
    graph = sparse.coo_matrix(
        (np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(n, n)
    )
    _, labels = csgraph.connected_components(graph, directed=False)
    _, first = np.unique(labels, return_index=True)
    vertices = mesh.vertices[first]
    faces = labels[mesh.faces]

    tri = vertices[faces]
    area = 0.5 * np.linalg.norm(
        np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1
    )
    kept = np.flatnonzero(
        (faces[:, 0] != faces[:, 1])
        & (faces[:, 1] != faces[:, 2])
        & (faces[:, 2] != faces[:, 0])
        & (area > mesh.area_epsilon)
    )
    _, unique_idx = np.unique(
        np.sort(faces[kept], axis=1), axis=0, return_index=True
    )
    kept = kept[np.sort(unique_idx)]
    faces = faces[kept]

    used, inverse = np.unique(faces.reshape(-1), return_inverse=True)
    faces = inverse.reshape(-1, 3)
    welded = n - len(first)
    dropped = mesh.n_faces - len(kept)
    if welded or dropped:
        logger.info(
            "Repaired mesh: welded %d vertices, dropped %d faces",
            welded,
            dropped,
        )
    return IndexedMesh(vertices[used], faces), kept


def normalize_unit_box(mesh: IndexedMesh) -> tuple[IndexedMesh, BoxTransform]:
    """Scale and translate a mesh into the unit box, keeping its aspect.

    The longest bounding box axis spans exactly [0, 1].

    Raises
    ------
    DegenerateExtent
        If the bounding box has zero size.
    """
    if mesh.n_vertices == 0:
        raise DegenerateExtent("Mesh has no vertices")
    lower = mesh.vertices.min(axis=0)
    extent = float((mesh.vertices.max(axis=0) - lower).max())
    if not extent > 0:
        raise DegenerateExtent("Bounding box has zero size")
    transform = BoxTransform(
        scale=1.0 / extent,
        lower=(float(lower[0]), float(lower[1]), float(lower[2])),
    )
    return IndexedMesh(transform.apply(mesh.vertices), mesh.faces), transform


def _check_face(mesh: IndexedMesh, face: int) -> None:
    if not 0 <= face < mesh.n_faces:
        raise InvalidFace(f"No face {face} in a mesh of {mesh.n_faces}")


def eval_point(mesh: IndexedMesh, point: SurfacePoint) -> FloatArray:
    """Return the 3D position of a surface point."""
    _check_face(mesh, point.face)
    return np.asarray(point.bary) @ mesh.vertices[mesh.faces[point.face]]


def eval_points(
    mesh: IndexedMesh, faces: IntArray, bary: FloatArray
) -> FloatArray:
    """Vectorized `eval_point` over (n,) faces and (n, 3) barycentrics."""
    return np.einsum("ni,nij->nj", bary, mesh.vertices[mesh.faces[faces]])


def point_normal(
    mesh: IndexedMesh, point: SurfacePoint, *, smooth: bool = False
) -> FloatArray:
    """Return the unit normal at a surface point.

    By default this is the normal of the containing face. With
    ``smooth=True`` area-weighted vertex normals are interpolated with
    the point's barycentrics instead.
    """
    _check_face(mesh, point.face)
    return point_normals(
        mesh,
        np.array([point.face]),
        np.array([point.bary]),
        smooth=smooth,
    )[0]


def point_normals(
    mesh: IndexedMesh,
    faces: IntArray,
    bary: FloatArray,
    *,
    smooth: bool = False,
    face_normals: FloatArray | None = None,
) -> FloatArray:
    if not smooth:
        tri = mesh.vertices[mesh.faces[faces]]
        cross = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
        norms = np.linalg.norm(cross, axis=1)
        if (0.5 * norms <= mesh.area_epsilon).any():
            raise DegenerateFace("Point lies on a zero-area face")
        return cross / norms[:, None]

    vertex_normals = mesh.vertex_normals()
    normals = np.einsum(
        "ni,nij->nj", bary, vertex_normals[mesh.faces[faces]]
    )
    norms = np.linalg.norm(normals, axis=1)
    flat = norms < 1e-12
    if flat.any():
        fallback = (
            face_normals if face_normals is not None else mesh.face_normals()
        )
        normals[flat] = fallback[faces[flat]]
        norms[flat] = 1.0
    return normals / norms[:, None]


def mixed_voronoi_areas(mesh: IndexedMesh) -> FloatArray:
    """Return per-vertex mixed Voronoi areas.

    Non-obtuse triangles are split at their circumcenter. An obtuse
    triangle gives half its area to the obtuse corner and a quarter to
    each other corner. The areas sum to the surface area.

    Raises
    ------
    DegenerateFace
        If any face has zero area.
    """
    tri = mesh.triangles()
    a, b, c_ = tri[:, 0], tri[:, 1], tri[:, 2]
    double_area = np.linalg.norm(np.cross(b - a, c_ - a), axis=1)
    if (0.5 * double_area <= mesh.area_epsilon).any():
        raise DegenerateFace("Cannot compute Voronoi areas: zero-area face")
    area = 0.5 * double_area

    # squared length of the edge opposite each corner
    opposite_sq = np.stack(
        [
            ((c_ - b) ** 2).sum(axis=1),
            ((a - c_) ** 2).sum(axis=1),
            ((b - a) ** 2).sum(axis=1),
        ],
        axis=1,
    )
    dots = np.stack(
        [
            ((b - a) * (c_ - a)).sum(axis=1),
            ((c_ - b) * (a - b)).sum(axis=1),
            ((a - c_) * (b - c_)).sum(axis=1),
        ],
        axis=1,
    )
    cot = dots / double_area[:, None]

    voronoi = np.stack(
        [
            opposite_sq[:, 2] * cot[:, 2] + opposite_sq[:, 1] * cot[:, 1],
            opposite_sq[:, 0] * cot[:, 0] + opposite_sq[:, 2] * cot[:, 2],
            opposite_sq[:, 1] * cot[:, 1] + opposite_sq[:, 0] * cot[:, 0],
        ],
        axis=1,
    ) / 8.0

    obtuse = dots < 0
    any_obtuse = obtuse.any(axis=1)
    split = np.where(obtuse, area[:, None] / 2, area[:, None] / 4)
    per_corner = np.where(any_obtuse[:, None], split, voronoi)

    return np.bincount(
        mesh.faces.reshape(-1),
        weights=per_corner.reshape(-1),
        minlength=mesh.n_vertices,
    )
