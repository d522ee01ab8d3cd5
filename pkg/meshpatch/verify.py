# Copyright DB InfraGO AG and contributors
# SPDX-License-Identifier: Apache-2.0
"""Brute-force oracles, sampling statistics and the acceptance suite.

Nothing in here uses the selection path of `meshpatch.sampler` to judge
it; oracles only rely on the mesh primitives.
"""

from __future__ import annotations

import dataclasses
import heapq
import logging
import pathlib
import statistics
import time
import typing as t

import numpy as np
import pydantic as p
import scipy.cluster.hierarchy
import scipy.stats
import trimesh

import meshpatch.constants as c
from meshpatch import (
    core,
    features,
    mesh,
    sampler,
    selfparam,
    simplify,
    topology,
)
from meshpatch.mesh import FloatArray, IndexedMesh, IntArray

logger = logging.getLogger(__name__)

MIN_EXPECTED: t.Final[float] = 5.0
SAMPLES_PER_BIN: t.Final[int] = 10
GRID_POINTS: t.Final[int] = 21
GRID_LEVELS: t.Final[int] = 3
GRID_ZOOM: t.Final[float] = 10.0
ROUNDTRIP_TOLERANCE: t.Final[float] = 1e-5
"""Allowed round-trip error, relative to the bounding box diagonal."""
QEM_TOLERANCE: t.Final[float] = 1e-6
"""How far the closed-form cost may exceed the grid search minimum."""
QEM_BOX_PAD: t.Final[float] = 1.0
"""Growth of the quadric search box around an edge, in edge lengths."""
LABEL_BAND: t.Final[float] = 0.1
"""Half-width of the equator band ignored by the label round trip."""


class TooFewSamples(core.MeshPatchError):
    pass


class UniformityReport(p.BaseModel):
    statistic: float = p.Field(title="Chi-square statistic")
    bins: int = p.Field(title="Bins after merging sparse faces")
    samples: int = p.Field(title="Number of points")
    dof: int = p.Field(title="Degrees of freedom")
    p_value: float = p.Field(title="Upper tail probability")
    residuals: list[float] = p.Field(
        default_factory=list,
        title="Observed minus expected count, per face",
    )


class RoundtripReport(p.BaseModel):
    samples: int
    max_error: float = p.Field(title="Largest 3D error")
    mean_error: float = p.Field(title="Mean 3D error")
    failures: int = p.Field(0, title="Points that could not be mapped")
    threshold: float = p.Field(title="Largest acceptable error")

    @property
    def flagged(self) -> bool:
        return self.failures > 0 or self.max_error >= self.threshold


def rejection_sample_uniform(
    m: IndexedMesh, n: int, rng: np.random.Generator
) -> tuple[IntArray, FloatArray]:
    """Draw ``n`` area-uniform surface points.

    Faces are picked proportionally to their area and barycentrics come
    from the square-root transform. Returns face ids and barycentrics.
    """
    areas = m.face_areas()
    faces = rng.choice(m.n_faces, size=n, p=areas / areas.sum())
    u = rng.random((n, 2))
    r = np.sqrt(u[:, 0])
    bary = np.stack([1 - r, r * (1 - u[:, 1]), r * u[:, 1]], axis=1)
    return faces, bary


def merge_bins(
    expected: FloatArray,
    neighbors: IntArray,
    min_expected: float = MIN_EXPECTED,
) -> IntArray:
    """Merge faces into bins whose expected count reaches ``min_expected``.

    The sparsest bin is repeatedly merged into its sparsest neighbour.
    Returns a bin index per face.
    """
    n = len(expected)
    sets = scipy.cluster.hierarchy.DisjointSet(range(n))
    totals = {i: float(e) for i, e in enumerate(expected)}
    adjacent = {i: set(neighbors[i].tolist()) - {i} for i in range(n)}
    heap = [(e, i) for i, e in totals.items()]
    heapq.heapify(heap)
    while heap:
        total, root = heapq.heappop(heap)
        if sets[root] != root or totals.get(root) != total:
            continue
        if total >= min_expected or len(totals) == 1:
            break
        others = {sets[x] for x in adjacent[root]} - {root}
        if not others:
            continue
        other = min(others, key=lambda x: (totals[x], x))
        sets.merge(root, other)
        merged = sets[root]
        totals[merged] = totals.pop(root) + totals.pop(other)
        adjacent[merged] = adjacent.pop(root) | adjacent.pop(other)
        heapq.heappush(heap, (totals[merged], merged))

    roots = np.array([sets[i] for i in range(n)])
    _, bins = np.unique(roots, return_inverse=True)
    return bins.reshape(-1)


def uniformity_chi2(
    faces: IntArray,
    m: IndexedMesh,
    *,
    min_expected: float = MIN_EXPECTED,
    expected: FloatArray | None = None,
) -> UniformityReport:
    """Compare per-face point counts to their expectations.

    Without ``expected`` the counts are expected to follow face areas.

    Raises
    ------
    TooFewSamples
        If there are fewer than 10 points per bin after merging.
    """
    faces = np.asarray(faces, dtype=np.int64).reshape(-1)
    n = len(faces)
    if n == 0:
        raise TooFewSamples("No points given")
    if expected is None:
        areas = m.face_areas()
        expected = n * areas / areas.sum()
    elif expected.shape != (m.n_faces,):
        raise ValueError(
            f"Expected counts have shape {expected.shape},"
            f" the mesh has {m.n_faces} faces"
        )
    observed = np.bincount(faces, minlength=m.n_faces).astype(np.float64)

    neighbors = mesh.build_halfedge(m).face_neighbors()
    bins = merge_bins(expected, neighbors, min_expected)
    n_bins = int(bins.max()) + 1
    if n < SAMPLES_PER_BIN * n_bins:
        raise TooFewSamples(
            f"{n} points are too few for {n_bins} bins,"
            f" need at least {SAMPLES_PER_BIN * n_bins}"
        )
    bin_expected = np.bincount(bins, weights=expected, minlength=n_bins)
    bin_observed = np.bincount(bins, weights=observed, minlength=n_bins)
    statistic = float(
        ((bin_observed - bin_expected) ** 2 / bin_expected).sum()
    )
    dof = max(n_bins - 1, 1)
    return UniformityReport(
        statistic=statistic,
        bins=n_bins,
        samples=n,
        dof=dof,
        p_value=float(scipy.stats.chi2.sf(statistic, dof)),
        residuals=(observed - expected).tolist(),
    )


@dataclasses.dataclass(frozen=True, eq=False)
class UnitReference:
    """Where area-uniform points of every topology unit lie.

    ``shares`` holds, per original face, the summed fraction of each
    unit's reference points that fell into it. ``counts`` holds the
    number of reference points per unit.
    """

    shares: FloatArray
    counts: IntArray
    level: int

    @property
    def covered(self) -> np.ndarray[t.Any, np.dtype[np.bool_]]:
        return self.counts > 0


def unit_reference(
    trace: simplify.SimplificationTrace,
    fine: IndexedMesh,
    level: int,
    n: int,
    rng: np.random.Generator,
) -> UnitReference:
    """Map ``n`` area-uniform points of ``fine`` onto topology units.

    Uses the forward map only.
    """
    faces, bary = rejection_sample_uniform(fine, n, rng)
    coarse_faces, coarse_bary = selfparam.map_forward_many(
        selfparam.BijectionMap(trace), faces, bary
    )
    local, _ = topology.locate_unit(level, coarse_bary)
    units = coarse_faces * 4**level + local
    n_units = trace.coarse.n_faces * 4**level
    counts = np.bincount(units, minlength=n_units)
    pairs, pair_counts = np.unique(
        np.stack([units, faces], axis=1), axis=0, return_counts=True
    )
    shares = np.bincount(
        pairs[:, 1],
        weights=pair_counts / counts[pairs[:, 0]],
        minlength=fine.n_faces,
    )
    logger.debug(
        "Mapped %d reference points into %d of %d units",
        n,
        int((counts > 0).sum()),
        n_units,
    )
    return UnitReference(shares=shares, counts=counts, level=level)


def unit_uniformity_chi2(
    faces: IntArray, reference: UnitReference, fine: IndexedMesh
) -> UniformityReport:
    """Test whether points are uniform on the original mesh within units.

    ``faces`` holds the original faces of the points of every unit, shape
    (units, points per unit). Each unit's points are expected to spread
    over the original faces like its reference points do. Units without
    reference points are left out.

    Raises
    ------
    TooFewSamples
        If there are fewer than 10 points per bin after merging.
    """
    faces = np.asarray(faces, dtype=np.int64)
    if faces.ndim != 2 or len(faces) != len(reference.counts):
        raise ValueError(
            f"Need points of {len(reference.counts)} units,"
            f" got shape {faces.shape}"
        )
    covered = reference.covered
    return uniformity_chi2(
        faces[covered],
        fine,
        min_expected=SAMPLES_PER_BIN,
        expected=faces.shape[1] * reference.shares,
    )


def brute_force_quadric_min(
    q: FloatArray, box: tuple[t.Sequence[float], t.Sequence[float]]
) -> tuple[FloatArray, float]:
    """Minimize a quadric by refining grid search inside ``box``."""
    lower = np.asarray(box[0], dtype=np.float64)
    upper = np.asarray(box[1], dtype=np.float64)
    best = (lower + upper) / 2
    cost = np.inf
    for _ in range(GRID_LEVELS):
        axes = [
            np.linspace(lo, hi, GRID_POINTS)
            for lo, hi in zip(lower, upper, strict=True)
        ]
        grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
        points = np.concatenate(
            [grid.reshape(-1, 3), np.ones((GRID_POINTS**3, 1))], axis=1
        )
        costs = np.einsum("ni,ij,nj->n", points, q, points)
        i = int(np.argmin(costs))
        if costs[i] < cost:
            best, cost = points[i, :3], float(costs[i])
        half = (upper - lower) / GRID_ZOOM / 2
        lower, upper = best - half, best + half
    return best, cost


def roundtrip_report(
    bij: selfparam.BijectionMap,
    fine: IndexedMesh,
    n: int,
    rng: np.random.Generator,
) -> RoundtripReport:
    """Measure how far points move after mapping there and back.

    Points that cannot be mapped at all count as failures.
    """
    forward = bij if bij.direction == "forward" else bij.inverse()
    backward = forward.inverse()
    faces, bary = rejection_sample_uniform(fine, n, rng)
    threshold = ROUNDTRIP_TOLERANCE * fine.bbox_diagonal

    try:
        there = forward.apply_many(faces, bary)
        back_faces, back_bary = backward.apply_many(*there)
        ok = np.arange(n)
    except selfparam.PointOutsideChart:
        back_faces = np.zeros(n, dtype=np.int64)
        back_bary = np.zeros((n, 3))
        mapped = []
        for i in range(n):
            point = mesh.SurfacePoint(int(faces[i]), tuple(bary[i]))
            try:
                result = backward(forward(point))
            except selfparam.PointOutsideChart:
                continue
            back_faces[i] = result.face
            back_bary[i] = result.bary
            mapped.append(i)
        ok = np.array(mapped, dtype=np.int64)

    failures = n - len(ok)
    if len(ok):
        start = mesh.eval_points(fine, faces[ok], bary[ok])
        end = mesh.eval_points(fine, back_faces[ok], back_bary[ok])
        errors = np.linalg.norm(end - start, axis=1)
        max_error, mean_error = float(errors.max()), float(errors.mean())
    else:
        max_error = mean_error = float("inf")
    if failures:
        max_error = float("inf")
    return RoundtripReport(
        samples=n,
        max_error=max_error,
        mean_error=mean_error,
        failures=failures,
        threshold=threshold,
    )


def corrupt_trace(
    trace: simplify.SimplificationTrace, factor: float = 0.8
) -> simplify.SimplificationTrace:
    """Shrink the post-collapse chart of the last collapse.

    The result no longer maps the outer part of that region, which a
    round-trip check must notice.
    """
    if not trace.records:
        raise ValueError("Cannot corrupt a trace without collapses")
    last = trace.records[-1]
    flat = last.flattening
    if flat is None:
        raise ValueError("Cannot corrupt a trace without UV charts")
    after = dataclasses.replace(flat.after, uv=flat.after.uv * factor)
    record = dataclasses.replace(
        last, flattening=dataclasses.replace(flat, after=after)
    )
    return dataclasses.replace(trace, records=(*trace.records[:-1], record))


def builtin_meshes(seed: int = 0) -> list[tuple[str, IndexedMesh]]:
    """Build the procedural test meshes, each with 300 to 3000 faces."""
    rng = np.random.default_rng(seed)
    shapes: list[tuple[str, trimesh.Trimesh]] = [
        ("icosphere-2", trimesh.creation.icosphere(subdivisions=2)),
        ("icosphere-3", trimesh.creation.icosphere(subdivisions=3)),
        ("torus-16x10", trimesh.creation.torus(1.0, 0.4, 16, 10)),
        ("torus-24x16", trimesh.creation.torus(1.0, 0.35, 24, 16)),
        ("torus-40x20", trimesh.creation.torus(1.0, 0.3, 40, 20)),
    ]
    for n_points in (200, 400, 600, 800, 1200):
        directions = rng.normal(size=(n_points, 3))
        directions /= np.linalg.norm(directions, axis=1, keepdims=True)
        radii = rng.uniform(0.6, 1.4, size=3)
        shapes.append(
            (
                f"hull-{n_points}",
                trimesh.convex.convex_hull(directions * radii),
            )
        )
    result = []
    for name, shape in shapes:
        normalized, _ = mesh.normalize_unit_box(
            IndexedMesh(np.asarray(shape.vertices), np.asarray(shape.faces))
        )
        result.append((name, normalized))
    return result


def obtuse_mesh() -> IndexedMesh:
    """Return a flattened icosphere whose faces are mostly obtuse."""
    sphere = trimesh.creation.icosphere(subdivisions=3)
    return IndexedMesh(
        np.asarray(sphere.vertices) * [1.0, 1.0, 0.08],
        np.asarray(sphere.faces),
    )


def obtuse_fraction(m: IndexedMesh) -> float:
    tri = m.triangles()
    edges = [tri[:, (i + 1) % 3] - tri[:, i] for i in range(3)]
    dots = np.stack(
        [-(edges[i] * edges[(i + 2) % 3]).sum(axis=1) for i in range(3)],
        axis=1,
    )
    return float((dots < 0).any(axis=1).mean())


class SuiteConfig(p.BaseModel):
    model_config = p.ConfigDict(frozen=True)

    seeds: list[int] = p.Field([0, 1], min_length=1, title="Trial seeds")
    meshes: int = p.Field(
        10, ge=1, le=10, title="How many built-in meshes to use"
    )
    paths: list[pathlib.Path] = p.Field(
        default_factory=list, title="Additional user meshes"
    )
    target_faces: tuple[int, int] = p.Field(
        (c.Defaults.target_faces_min, c.Defaults.target_faces_max),
        title="Coarse face count range",
    )
    roundtrip_samples: int = p.Field(1000, ge=1)
    strata_levels: int = p.Field(c.Defaults.strata_levels, ge=1)
    subdivision_levels: int = p.Field(c.Defaults.subdivision_levels, ge=0)
    k: int = p.Field(16, ge=1, title="Points per unit for the label check")
    uniformity_subdivision_levels: int = p.Field(
        0, ge=0, title="Subdivision levels of the uniformity check"
    )
    uniformity_k: int = p.Field(
        0, ge=0, title="Points per unit for uniformity, 0 for half"
    )
    uniformity_repeats: int = p.Field(
        4, ge=1, title="Selections pooled per uniformity trial"
    )
    reference_ratio: int = p.Field(
        4, ge=1, title="Reference points per selected point"
    )
    quadrics: int = p.Field(100, ge=1, title="Random quadrics to test")
    corrupt: bool = p.Field(
        False, title="Run the round-trip check on corrupted traces"
    )
    min_win_rate: float = p.Field(0.8, ge=0, le=1)
    min_improvement: float = p.Field(0.1, ge=0)
    budgets: dict[str, float] = p.Field(
        default_factory=lambda: {
            "roundtrip": 60.0,
            "distortion-uniformity": 300.0,
        },
        title="Longest allowed run time per check, in seconds",
    )

    @property
    def selection_k(self) -> int:
        return self.uniformity_k or max(4**self.strata_levels // 2, 1)

    @p.model_validator(mode="after")
    def _check_k(self) -> SuiteConfig:
        if self.selection_k > 4**self.strata_levels:
            raise ValueError(
                f"Cannot select {self.selection_k} of"
                f" {4**self.strata_levels} candidates per unit"
            )
        return self


class Check(p.BaseModel):
    name: str
    passed: bool
    detail: str = ""
    values: dict[str, float] = p.Field(default_factory=dict)
    elapsed: float = p.Field(0.0, title="Run time in seconds")


class SuiteReport(p.BaseModel):
    checks: list[Check] = p.Field(default_factory=list)
    elapsed: float = 0.0

    @property
    def passed(self) -> bool:
        return all(check.passed for check in self.checks)


@dataclasses.dataclass
class _Case:
    name: str
    fine: IndexedMesh
    trace: simplify.SimplificationTrace


def _target(rng: np.random.Generator, lo: int, hi: int, faces: int) -> int:
    target = int(rng.integers(lo, hi + 1))
    target = min(target, faces)
    return target - (faces - target) % 2


def _load_cases(config: SuiteConfig) -> list[_Case]:
    named = builtin_meshes(config.seeds[0])[: config.meshes]
    for path in config.paths:
        loaded, _ = mesh.normalize_unit_box(mesh.load_mesh_file(path))
        diagnostics = mesh.validate(loaded)
        if not diagnostics.ok:
            defects = "; ".join(diagnostics.defects) or "not a 2-manifold"
            error = mesh.NonManifoldInput(f"{path.name}: {defects}")
            error.diagnostics = diagnostics
            raise error
        named.append((path.name, loaded))

    rng = np.random.default_rng(config.seeds[0])
    cases = []
    for name, fine in named:
        target = _target(rng, *config.target_faces, fine.n_faces)
        trace = simplify.simplify_to(fine, target, config.seeds[0])
        cases.append(_Case(name, fine, trace))
    return cases


def _check_roundtrip(config: SuiteConfig, cases: list[_Case]) -> Check:
    worst = 0.0
    failing = []
    for case in cases:
        trace = corrupt_trace(case.trace) if config.corrupt else case.trace
        report = roundtrip_report(
            selfparam.BijectionMap(trace),
            case.fine,
            config.roundtrip_samples,
            np.random.default_rng(config.seeds[0]),
        )
        worst = max(worst, report.max_error / case.fine.bbox_diagonal)
        if report.flagged:
            failing.append(case.name)
    return Check(
        name="roundtrip",
        passed=not failing,
        detail=", ".join(failing),
        values={"max_relative_error": worst},
    )


def _check_negative_control(config: SuiteConfig, case: _Case) -> Check:
    report = roundtrip_report(
        selfparam.BijectionMap(corrupt_trace(case.trace)),
        case.fine,
        config.roundtrip_samples,
        np.random.default_rng(config.seeds[0]),
    )
    return Check(
        name="negative-control",
        passed=report.flagged,
        detail=f"{report.failures} of {report.samples} points unmapped",
    )


def _check_voronoi(cases: list[_Case]) -> Check:
    worst = 0.0
    meshes = [case.fine for case in cases]
    meshes += [case.trace.coarse for case in cases]
    meshes.append(obtuse_mesh())
    for m in meshes:
        total = mesh.mixed_voronoi_areas(m).sum()
        worst = max(worst, abs(total - m.surface_area) / m.surface_area)
    return Check(
        name="voronoi-partition",
        passed=worst < 1e-6,
        values={
            "max_relative_error": worst,
            "obtuse_fraction": obtuse_fraction(meshes[-1]),
        },
    )


def _check_combinatorics() -> Check:
    units = topology.subdivide(1, 3).units_per_face
    candidates = sampler.SelectionConfig(strata_levels=3).candidates
    rows = {}
    for k in (1, 16):
        layout = topology.build_patch_layout(topology.subdivide(2, 3), 4)
        tensor = features.pack_patches(
            np.zeros((2 * units, k, c.CHANNELS)), layout, k
        )
        rows[k] = tensor.data.shape[1]
    return Check(
        name="combinatorics",
        passed=units == 64
        and candidates == 64
        and rows[1] == 384
        and rows[16] == 6144,
        values={
            "units": units,
            "candidates": candidates,
            "row_k1": rows[1],
            "row_k16": rows[16],
        },
    )


def _check_identity_jacobian(cases: list[_Case]) -> Check:
    coarse = cases[0].trace.coarse
    trace = simplify.SimplificationTrace.identity(coarse)
    topo = topology.subdivide(coarse.n_faces, 1)
    selected = sampler.sample_mesh_features(
        trace, topo, sampler.SelectionConfig(strata_levels=2), coarse
    )
    deviation = float(np.abs(selected.candidate_jacobians - 1).max())
    return Check(
        name="identity-jacobian",
        passed=deviation <= 1e-9,
        values={"max_deviation": deviation},
    )


def _repeat_seed(seed: int, repeat: int) -> int:
    return int(np.random.SeedSequence([seed, repeat]).generate_state(1)[0])


def _selected_faces(
    case: _Case,
    config: SuiteConfig,
    seed: int,
    mode: sampler.SelectionMode,
) -> IntArray:
    """Pool the selected original faces of several selections per unit."""
    topo = topology.subdivide(
        case.trace.coarse.n_faces, config.uniformity_subdivision_levels
    )
    pooled = []
    for repeat in range(config.uniformity_repeats):
        selection = sampler.SelectionConfig(
            strata_levels=config.strata_levels,
            k=config.selection_k,
            seed=_repeat_seed(seed, repeat),
            mode=mode,
        )
        selected = sampler.sample_mesh_features(
            case.trace, topo, selection, case.fine
        )
        pooled.append(selected.faces)
    return np.concatenate(pooled, axis=1)


def _check_uniformity(config: SuiteConfig, cases: list[_Case]) -> Check:
    level = config.uniformity_subdivision_levels
    wins = 0
    improvements = []
    for case in cases:
        n_units = case.trace.coarse.n_faces * 4**level
        points = n_units * config.selection_k * config.uniformity_repeats
        reference = unit_reference(
            case.trace,
            case.fine,
            level,
            config.reference_ratio * points,
            np.random.default_rng(config.seeds[0]),
        )
        for seed in config.seeds:
            weighted, unweighted = (
                unit_uniformity_chi2(
                    _selected_faces(case, config, seed, mode),
                    reference,
                    case.fine,
                ).statistic
                for mode in ("distortion", "uniform")
            )
            logger.debug(
                "%s, seed %d: chi2 %.1f weighted, %.1f unweighted",
                case.name,
                seed,
                weighted,
                unweighted,
            )
            wins += weighted < unweighted
            improvements.append(1 - weighted / unweighted)
    trials = len(improvements)
    median = statistics.median(improvements)
    return Check(
        name="distortion-uniformity",
        passed=wins >= config.min_win_rate * trials
        and median >= config.min_improvement,
        detail=f"weighted won {wins} of {trials} trials",
        values={"win_rate": wins / trials, "median_improvement": median},
    )


def _check_qem(config: SuiteConfig) -> Check:
    rng = np.random.default_rng(config.seeds[0])
    excess = -np.inf
    gaps = []
    for _ in range(config.quadrics):
        q, v1, v2 = random_edge_quadric(rng)
        x, cost = simplify.optimal_position(q, v1, v2)
        lower, upper = endpoint_box(v1, v2)
        _, grid_cost = brute_force_quadric_min(q, (lower, upper))
        excess = max(excess, cost - grid_cost)
        if ((x >= lower) & (x <= upper)).all():
            gaps.append((grid_cost - cost) / max(abs(grid_cost), 1e-12))

    plane = mesh.IndexedMesh(
        [[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0]], [[0, 1, 2], [1, 3, 2]]
    )
    q = simplify.initial_quadrics(plane)
    _, planar_cost = simplify.optimal_position(
        q[1] + q[2], plane.vertices[1], plane.vertices[2]
    )
    return Check(
        name="qem-optimality",
        passed=excess <= QEM_TOLERANCE and abs(planar_cost) < 1e-9,
        detail=f"optimum inside the edge box in {len(gaps)} cases",
        values={
            "worst_excess": excess,
            "worst_inside_gap": max(gaps, default=0.0),
            "planar_cost": planar_cost,
        },
    )


def endpoint_box(
    v1: FloatArray, v2: FloatArray, pad: float = QEM_BOX_PAD
) -> tuple[FloatArray, FloatArray]:
    """Return the bounding box of an edge, grown by ``pad`` edge lengths."""
    margin = pad * float(np.linalg.norm(v2 - v1))
    return np.minimum(v1, v2) - margin, np.maximum(v1, v2) + margin


def random_edge_quadric(
    rng: np.random.Generator, planes: int = 4
) -> tuple[FloatArray, FloatArray, FloatArray]:
    """Build the quadric of a random edge from planes through points near it.

    Returns the quadric and both edge endpoints.
    """
    v1, v2 = rng.uniform(-1, 1, size=(2, 3))
    length = float(np.linalg.norm(v2 - v1))
    points = v1 + rng.random((planes, 1)) * (v2 - v1)
    points += rng.normal(scale=0.1 * length, size=(planes, 3))
    normals = rng.normal(size=(planes, 3))
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    offsets = -(normals * points).sum(axis=1)
    p_ = np.concatenate([normals, offsets[:, None]], axis=1)
    weights = rng.uniform(0.5, 2.0, size=planes)
    return np.einsum("n,ni,nj->ij", weights, p_, p_), v1, v2


def hemisphere_labels(m: IndexedMesh) -> IntArray:
    return (m.triangles().mean(axis=1)[:, 2] > 0).astype(np.int64)


def _check_labels(config: SuiteConfig) -> Check:
    sphere = trimesh.creation.icosphere(subdivisions=3)
    fine = IndexedMesh(np.asarray(sphere.vertices), np.asarray(sphere.faces))
    labels = hemisphere_labels(fine)
    trace = simplify.simplify_to(fine, 128, config.seeds[0])
    topo = topology.subdivide(trace.coarse.n_faces, config.subdivision_levels)
    selected = sampler.sample_mesh_features(
        trace,
        topo,
        sampler.SelectionConfig(
            strata_levels=config.strata_levels,
            k=config.k,
            seed=config.seeds[0],
        ),
        fine,
    )
    units = features.labels_to_units(labels, selected.faces)
    back = features.units_to_faces(units, trace, topo)
    # faces straddling the equator are ambiguous at unit resolution
    away = np.abs(fine.triangles().mean(axis=1)[:, 2]) >= LABEL_BAND
    agreement = float((back == labels)[away].mean())
    return Check(
        name="label-roundtrip",
        passed=agreement >= 0.95,
        values={"agreement": agreement},
    )


def _check_determinism(config: SuiteConfig, case: _Case) -> Check:
    seed = config.seeds[0]
    target = case.trace.coarse.n_faces
    first = simplify.simplify_to(case.fine, target, seed)
    second = simplify.simplify_to(case.fine, target, seed)
    same = np.array_equal(
        first.coarse.vertices, second.coarse.vertices
    ) and np.array_equal(first.coarse.faces, second.coarse.faces)

    topo = topology.subdivide(target, 1)
    selection = sampler.SelectionConfig(strata_levels=1, seed=seed)
    a = sampler.sample_mesh_features(first, topo, selection, case.fine)
    b = sampler.sample_mesh_features(second, topo, selection, case.fine)
    same = same and np.array_equal(a.features(), b.features())
    return Check(name="determinism", passed=bool(same))


def _check_guards(cases: list[_Case]) -> Check:
    invalid = [
        case.name
        for case in cases
        if not mesh.validate(case.trace.coarse).ok
    ]
    foldovers = 0
    rejected = dict.fromkeys(simplify.REJECT_REASONS, 0)
    for case in cases:
        for record in case.trace.records:
            if record.flattening is None:
                continue
            flat = record.flattening
            for chart in (flat.before, flat.after):
                foldovers += int((chart.signed_areas() <= 0).any())
        for reason, count in case.trace.rejections.items():
            rejected[reason] = rejected.get(reason, 0) + count
    return Check(
        name="simplification-guards",
        passed=not invalid and foldovers == 0,
        detail=", ".join(invalid),
        values={"foldovers": foldovers, **rejected},
    )


def _timed(
    name: str, step: t.Callable[[], Check], budget: float | None
) -> Check:
    start = time.perf_counter()
    try:
        check = step()
    except core.MeshPatchError as err:
        logger.exception("Check %s raised", name)
        check = Check(name=name, passed=False, detail=str(err))
    check.elapsed = time.perf_counter() - start
    if budget is not None and check.elapsed > budget:
        check.passed = False
        over = f"took {check.elapsed:.1f}s, budget {budget:.0f}s"
        check.detail = f"{check.detail}; {over}" if check.detail else over
    logger.info(
        "Check %s %s after %.1fs",
        check.name,
        "passed" if check.passed else "FAILED",
        check.elapsed,
    )
    return check


def run_suite(config: SuiteConfig | None = None) -> SuiteReport:
    """Run every acceptance check and collect the results.

    Failures are reported as failed checks, never raised. If the meshes
    cannot be loaded, the report holds a single failed ``load`` check.
    """
    config = config or SuiteConfig()
    start = time.perf_counter()
    report = SuiteReport()
    cases: list[_Case] = []

    def load() -> Check:
        cases.extend(_load_cases(config))
        return Check(
            name="load",
            passed=True,
            values={"meshes": len(cases)},
        )

    loaded = _timed("load", load, None)
    if not loaded.passed:
        report.checks.append(loaded)
        report.elapsed = time.perf_counter() - start
        return report

    steps: list[tuple[str, t.Callable[[], Check]]] = [
        ("roundtrip", lambda: _check_roundtrip(config, cases)),
        (
            "negative-control",
            lambda: _check_negative_control(config, cases[0]),
        ),
        ("voronoi-partition", lambda: _check_voronoi(cases)),
        ("combinatorics", _check_combinatorics),
        ("identity-jacobian", lambda: _check_identity_jacobian(cases)),
        ("distortion-uniformity", lambda: _check_uniformity(config, cases)),
        ("qem-optimality", lambda: _check_qem(config)),
        ("label-roundtrip", lambda: _check_labels(config)),
        ("determinism", lambda: _check_determinism(config, cases[0])),
        ("simplification-guards", lambda: _check_guards(cases)),
    ]
    for name, step in steps:
        report.checks.append(_timed(name, step, config.budgets.get(name)))
    report.elapsed = time.perf_counter() - start
    return report
