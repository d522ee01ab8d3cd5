# Copyright DB InfraGO AG and contributors
# SPDX-License-Identifier: Apache-2.0
"""Stratified candidate sampling and distortion-aware point selection.

Each topology unit is split into ``4**m`` strata with the same 1-to-4
scheme used for the units themselves, and one area-uniform candidate is
drawn in every stratum. Candidates are mapped back onto the original
mesh, weighted by ``u * J`` with ``u ~ U[0, 1]`` and ``J`` the estimated
area distortion of the map, and the ``k`` heaviest are kept.
"""

from __future__ import annotations

import dataclasses
import logging
import typing as t

import numpy as np
import pydantic as p

import meshpatch.constants as c
from meshpatch import core, mesh, selfparam, topology
from meshpatch.mesh import FloatArray, IndexedMesh, IntArray, SurfacePoint
from meshpatch.topology import SubdividedTopology, TopologyUnitId

if t.TYPE_CHECKING:
    from meshpatch.simplify import SimplificationTrace

logger = logging.getLogger(__name__)

SelectionMode: t.TypeAlias = t.Literal["distortion", "uniform", "barycenter"]
JacobianSource: t.TypeAlias = t.Literal["stratum", "voronoi"]


class ZeroDenominator(core.MeshPatchError):
    pass


class InsufficientCandidates(core.MeshPatchError):
    pass


class SelectionConfig(p.BaseModel):
    model_config = p.ConfigDict(frozen=True)

    strata_levels: int = p.Field(
        c.Defaults.strata_levels,
        ge=0,
        title="Stratification levels; each unit gets 4**m candidates",
    )
    k: int = p.Field(1, ge=1, title="Points selected per topology unit")
    seed: int = p.Field(c.SEED, ge=0, title="Base seed of the unit streams")
    mode: SelectionMode = p.Field("distortion", title="Selection strategy")
    jacobian_source: JacobianSource = p.Field(
        "stratum",
        title="Estimate distortion from mapped strata or Voronoi areas",
    )
    voronoi_on_subdivided: bool = p.Field(
        False,
        title="Voronoi source: denominators from the subdivided mesh",
    )
    smooth_normals: bool = p.Field(
        False, title="Interpolate vertex normals instead of face normals"
    )

    @property
    def candidates(self) -> int:
        if self.mode == "barycenter":
            return 1
        return 4**self.strata_levels

    @p.model_validator(mode="after")
    def _check_k(self) -> SelectionConfig:
        if self.k > self.candidates:
            raise ValueError(
                f"Cannot select {self.k} of {self.candidates} candidates"
            )
        return self


@dataclasses.dataclass(frozen=True)
class CandidatePoint:
    unit: TopologyUnitId
    bary_on_coarse: tuple[float, float, float]
    stratum: int = 0
    mapped: SurfacePoint | None = None
    jacobian: float | None = None
    weight: float | None = None

    def __post_init__(self) -> None:
        if self.jacobian is not None and not self.jacobian > 0:
            raise ValueError(f"Jacobian must be positive, got {self.jacobian}")
        if self.weight is not None and not (
            self.jacobian is not None and 0 <= self.weight <= self.jacobian
        ):
            raise ValueError(
                f"Weight {self.weight} outside [0, {self.jacobian}]"
            )


def unit_rng(seed: int, unit: TopologyUnitId) -> np.random.Generator:
    """Return the random stream of one unit.

    Streams depend only on the seed and the unit, so units can be sampled
    in any order.
    """
    sequence = np.random.SeedSequence(seed, spawn_key=(unit.face, unit.local))
    return np.random.default_rng(sequence)


def _square_root_bary(u: FloatArray) -> FloatArray:
    r = np.sqrt(u[..., 0])
    return np.stack([1 - r, r * (1 - u[..., 1]), r * u[..., 1]], axis=-1)


def _stratum_points(m: int, u: FloatArray) -> FloatArray:
    """Turn (..., 4**m, 2) uniforms into one point per stratum.

    The result is in barycentrics of the unit.
    """
    strata = topology.subdivide(1, m)
    corners = strata.corner_bary(np.arange(strata.units_per_face))
    return np.einsum("...ni,nij->...nj", _square_root_bary(u), corners)


def stratified_candidates(
    topo: SubdividedTopology,
    unit: TopologyUnitId,
    m: int,
    rng: np.random.Generator,
) -> list[CandidatePoint]:
    """Draw one area-uniform point in each of the ``4**m`` strata of a unit.

    Barycentrics are expressed on the unit's coarse face.
    """
    topo.check(unit)
    if m < 0:
        raise ValueError(f"Strata levels must be >= 0, got {m}")
    local = _stratum_points(m, rng.random((4**m, 2)))
    coarse = local @ topo.corner_bary(unit.local)
    return [
        CandidatePoint(unit, (float(a), float(b), float(g)), stratum=i)
        for i, (a, b, g) in enumerate(coarse)
    ]


def corner_areas(m: IndexedMesh) -> FloatArray:
    """Return the mixed Voronoi area at each face corner, shape (F, 3)."""
    return mesh.mixed_voronoi_areas(m)[m.faces]


def _jacobians(
    fine_areas: FloatArray,
    fine_bary: FloatArray,
    coarse_areas: FloatArray,
    coarse_bary: FloatArray,
) -> FloatArray:
    numerator = np.einsum("...i,...i->...", fine_bary, fine_areas)
    denominator = np.einsum("...i,...i->...", coarse_bary, coarse_areas)
    if not (denominator > 0).all():
        raise ZeroDenominator("Interpolated Voronoi area is not positive")
    return numerator / denominator


def jacobian_estimate(
    candidate: CandidatePoint,
    voronoi_coarse: FloatArray,
    voronoi_fine: FloatArray,
) -> float:
    """Estimate the area distortion at a mapped candidate.

    ``voronoi_coarse`` and ``voronoi_fine`` are per-face corner areas as
    returned by `corner_areas`. The estimate is the ratio of the
    barycentrically interpolated areas on the original mesh and on the
    coarse mesh.

    Raises
    ------
    ZeroDenominator
        If the interpolated coarse area is not positive.
    """
    if candidate.mapped is None:
        raise ValueError("Candidate has not been mapped yet")
    jacobian = _jacobians(
        voronoi_fine[candidate.mapped.face],
        np.asarray(candidate.mapped.bary),
        voronoi_coarse[candidate.unit.face],
        np.asarray(candidate.bary_on_coarse),
    )
    return float(jacobian)


def stratum_jacobians(
    trace: SimplificationTrace, level: int, fine: IndexedMesh
) -> FloatArray:
    """Estimate the area distortion of every stratum at ``level``.

    The corners of all level-``level`` sub-triangles of the coarse mesh
    are mapped back onto ``fine``. Each estimate is the area of the
    triangle spanned by the mapped corners over the sub-triangle's area
    on the coarse mesh. Returns shape (coarse faces, 4**level), indexed
    like the units of `topology.subdivide` at that level.

    Raises
    ------
    ZeroDenominator
        If a coarse face has no area.
    """
    coarse = trace.coarse
    grid = topology.subdivide(coarse.n_faces, level)
    coarse_areas = coarse.face_areas() / grid.units_per_face
    if not (coarse_areas > 0).all():
        raise ZeroDenominator("Coarse mesh has a face without area")

    points, corner_index = np.unique(
        grid.corners.reshape(-1, 3), axis=0, return_inverse=True
    )
    corner_index = corner_index.reshape(-1, 3)
    faces, bary = selfparam.map_backward_many(
        selfparam.BijectionMap(trace, "backward"),
        np.repeat(np.arange(coarse.n_faces), len(points)),
        np.tile(points / grid.denominator, (coarse.n_faces, 1)),
    )
    xyz = mesh.eval_points(fine, faces, bary).reshape(
        coarse.n_faces, len(points), 3
    )
    tri = xyz[:, corner_index]
    e1 = tri[..., 1, :] - tri[..., 0, :]
    e2 = tri[..., 2, :] - tri[..., 0, :]
    fine_areas = 0.5 * np.linalg.norm(np.cross(e1, e2), axis=-1)
    return fine_areas / coarse_areas[:, None]


def _top_k(weights: FloatArray, k: int) -> IntArray:
    order = np.argsort(-weights, axis=-1, kind="stable")
    return np.sort(order[..., :k], axis=-1)


def select_top_k(
    candidates: t.Sequence[CandidatePoint],
    k: int,
    rng: np.random.Generator,
    *,
    weighted: bool = True,
) -> list[CandidatePoint]:
    """Keep the ``k`` candidates with the largest ``U[0, jacobian]`` draw.

    Ties go to the lower stratum index, and the result is in stratum
    order. With ``weighted=False`` every jacobian counts as 1.

    Raises
    ------
    InsufficientCandidates
        If there are fewer than ``k`` candidates.
    """
    if k < 1:
        raise ValueError(f"k must be positive, got {k}")
    if k > len(candidates):
        raise InsufficientCandidates(
            f"Cannot select {k} of {len(candidates)} candidates"
        )
    if any(cand.jacobian is None for cand in candidates):
        raise ValueError("All candidates need a jacobian estimate")
    jacobians = np.array([cand.jacobian for cand in candidates])
    u = rng.random(len(candidates))
    weights = u * jacobians if weighted else u
    chosen = _top_k(weights, k)
    return [
        dataclasses.replace(
            candidates[i], weight=float(u[i] * jacobians[i])
        )
        for i in chosen.tolist()
    ]


@dataclasses.dataclass(frozen=True, eq=False)
class SelectedPoints:
    """The selected points of every unit, in global unit order.

    Arrays are shaped (units, k, ...). ``candidate_jacobians`` holds the
    estimate of every candidate, selected or not.
    """

    positions: FloatArray
    normals: FloatArray
    faces: IntArray
    bary: FloatArray
    coarse_bary: FloatArray
    jacobians: FloatArray
    strata: IntArray
    candidate_jacobians: FloatArray

    @property
    def k(self) -> int:
        return self.positions.shape[1]

    @property
    def n_units(self) -> int:
        return self.positions.shape[0]

    def features(self) -> FloatArray:
        """Return (units, k, 6) rows of position and normal."""
        return np.concatenate([self.positions, self.normals], axis=-1)


def _draw(
    topo: SubdividedTopology, config: SelectionConfig
) -> tuple[FloatArray, FloatArray]:
    """Draw the stratum uniforms and weight uniforms of every unit."""
    n = config.candidates
    strata = np.empty((topo.n_units, n, 2))
    weights = np.empty((topo.n_units, n))
    for i, unit in enumerate(topo.unit_ids()):
        rng = unit_rng(config.seed, unit)
        if config.mode != "barycenter":
            strata[i] = rng.random((n, 2))
        weights[i] = rng.random(n)
    return strata, weights


def sample_mesh_features(
    trace: SimplificationTrace,
    topo: SubdividedTopology,
    config: SelectionConfig,
    fine: IndexedMesh,
) -> SelectedPoints:
    """Select ``k`` feature points on the original mesh for every unit.

    ``fine`` is the original mesh the trace was computed from. Every unit
    is sampled from its own random stream (see `unit_rng`), so the result
    does not depend on unit order.
    """
    coarse = trace.coarse
    if topo.coarse_faces != coarse.n_faces:
        raise ValueError(
            f"Topology has {topo.coarse_faces} faces,"
            f" the coarse mesh has {coarse.n_faces}"
        )
    n = config.candidates
    units = np.arange(topo.n_units)
    unit_faces, unit_local = np.divmod(units, topo.units_per_face)

    strata_u, weight_u = _draw(topo, config)
    if config.mode == "barycenter":
        local_bary = np.full((topo.n_units, 1, 3), 1 / 3)
    else:
        local_bary = _stratum_points(config.strata_levels, strata_u)
    coarse_bary = np.einsum(
        "uni,uij->unj", local_bary, topo.corner_bary(unit_local)
    )

    flat_faces = np.repeat(unit_faces, n)
    fine_faces, fine_bary = selfparam.map_backward_many(
        selfparam.BijectionMap(trace, "backward"),
        flat_faces,
        coarse_bary.reshape(-1, 3),
    )
    fine_faces = fine_faces.reshape(topo.n_units, n)
    fine_bary = fine_bary.reshape(topo.n_units, n, 3)

    if config.jacobian_source == "stratum":
        # candidate j of unit i lies in unit i * 4**m + j, m levels down
        m = 0 if config.mode == "barycenter" else config.strata_levels
        per_face = stratum_jacobians(trace, topo.level + m, fine)
        jacobians = per_face.reshape(topo.n_units, n)
    elif config.voronoi_on_subdivided:
        flat = topology.subdivided_mesh(coarse, topo).mesh
        jacobians = _jacobians(
            corner_areas(fine)[fine_faces],
            fine_bary,
            corner_areas(flat)[units][:, None, :],
            local_bary,
        )
    else:
        jacobians = _jacobians(
            corner_areas(fine)[fine_faces],
            fine_bary,
            corner_areas(coarse)[unit_faces][:, None, :],
            coarse_bary,
        )

    weights = weight_u if config.mode == "uniform" else weight_u * jacobians
    chosen = _top_k(weights, config.k)

    def pick(a: FloatArray) -> FloatArray:
        return np.take_along_axis(
            a, chosen.reshape(chosen.shape + (1,) * (a.ndim - 2)), axis=1
        )

    faces = pick(fine_faces)
    bary = pick(fine_bary)
    positions = mesh.eval_points(fine, faces.reshape(-1), bary.reshape(-1, 3))
    normals = mesh.point_normals(
        fine,
        faces.reshape(-1),
        bary.reshape(-1, 3),
        smooth=config.smooth_normals,
    )
    shape = (topo.n_units, config.k, 3)
    logger.debug(
        "Selected %d of %d candidates in %d units (mode %s)",
        config.k,
        n,
        topo.n_units,
        config.mode,
    )
    return SelectedPoints(
        positions=positions.reshape(shape),
        normals=normals.reshape(shape),
        faces=faces,
        bary=bary,
        coarse_bary=pick(coarse_bary),
        jacobians=pick(jacobians),
        strata=chosen,
        candidate_jacobians=jacobians,
    )
