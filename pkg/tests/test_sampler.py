# Copyright DB InfraGO AG and contributors
# SPDX-License-Identifier: Apache-2.0

import dataclasses

import numpy as np
import pydantic as p
import pytest

from meshpatch import mesh, sampler, simplify, topology
from meshpatch.mesh import SurfacePoint
from meshpatch.sampler import CandidatePoint, SelectionConfig
from meshpatch.topology import TopologyUnitId

UNIT = TopologyUnitId(0, 0)


def candidates_with(jacobians) -> list[CandidatePoint]:
    return [
        CandidatePoint(UNIT, (1 / 3, 1 / 3, 1 / 3), stratum=i, jacobian=j)
        for i, j in enumerate(jacobians)
    ]


def test_config_counts_candidates():
    assert SelectionConfig(strata_levels=3).candidates == 64
    assert SelectionConfig(strata_levels=3, mode="barycenter").candidates == 1


@pytest.mark.parametrize(
    "kwargs",
    [
        pytest.param({"strata_levels": 1, "k": 5}, id="k-above-candidates"),
        pytest.param({"mode": "barycenter", "k": 2}, id="barycenter-k"),
        pytest.param({"k": 0}, id="zero-k"),
        pytest.param({"strata_levels": -1}, id="negative-strata"),
    ],
)
def test_config_validation(kwargs):
    with pytest.raises(p.ValidationError):
        SelectionConfig(**kwargs)


@pytest.mark.parametrize("m", [0, 1, 3])
def test_one_candidate_per_stratum(m):
    topo = topology.subdivide(4, 2)
    unit = TopologyUnitId(2, 9)

    found = sampler.stratified_candidates(
        topo, unit, m, np.random.default_rng(0)
    )

    assert [cand.stratum for cand in found] == list(range(4**m))
    coarse = np.array([cand.bary_on_coarse for cand in found])
    local, within = topology.locate_unit(2, coarse)
    assert (local == unit.local).all()
    strata, _ = topology.locate_unit(m, within)
    np.testing.assert_array_equal(strata, np.arange(4**m))


def test_candidates_reject_unknown_units():
    with pytest.raises(ValueError, match="No unit"):
        sampler.stratified_candidates(
            topology.subdivide(4, 1),
            TopologyUnitId(4, 0),
            1,
            np.random.default_rng(0),
        )


@pytest.mark.slow
def test_candidates_are_area_uniform():
    topo = topology.subdivide(1, 0)
    rng = np.random.default_rng(5)

    points = np.array(
        [
            cand.bary_on_coarse
            for _ in range(1600)
            for cand in sampler.stratified_candidates(topo, UNIT, 3, rng)
        ]
    )

    assert len(points) > 1e5
    np.testing.assert_allclose(points.mean(axis=0), 1 / 3, atol=3e-3)
    assert (points.min(axis=0) >= 0).all()


@pytest.mark.parametrize(
    ("kwargs", "message"),
    [
        pytest.param({"jacobian": 0.0}, "positive", id="zero-jacobian"),
        pytest.param(
            {"jacobian": 2.0, "weight": 2.5}, "outside", id="heavy-weight"
        ),
        pytest.param(
            {"weight": 0.5}, "outside", id="weight-without-jacobian"
        ),
    ],
)
def test_candidate_validation(kwargs, message):
    with pytest.raises(ValueError, match=message):
        CandidatePoint(UNIT, (1.0, 0.0, 0.0), **kwargs)


def test_unit_streams_are_independent():
    first = sampler.unit_rng(3, TopologyUnitId(1, 2)).random(4)
    again = sampler.unit_rng(3, TopologyUnitId(1, 2)).random(4)
    other = sampler.unit_rng(3, TopologyUnitId(2, 1)).random(4)

    np.testing.assert_array_equal(first, again)
    assert not np.allclose(first, other)


def test_jacobian_of_the_identity_is_one(octahedron):
    areas = sampler.corner_areas(octahedron)
    candidate = CandidatePoint(
        TopologyUnitId(3, 0),
        (0.2, 0.3, 0.5),
        mapped=SurfacePoint(3, (0.2, 0.3, 0.5)),
    )

    assert sampler.jacobian_estimate(candidate, areas, areas) == pytest.approx(
        1
    )


def test_jacobian_of_a_doubled_mesh_is_four(octahedron):
    bigger = mesh.IndexedMesh(2 * octahedron.vertices, octahedron.faces)
    candidate = CandidatePoint(
        TopologyUnitId(5, 0),
        (0.6, 0.2, 0.2),
        mapped=SurfacePoint(5, (0.6, 0.2, 0.2)),
    )

    jacobian = sampler.jacobian_estimate(
        candidate,
        sampler.corner_areas(octahedron),
        sampler.corner_areas(bigger),
    )

    assert jacobian == pytest.approx(4)


def test_jacobian_at_a_vertex_is_the_area_ratio():
    coarse = np.array([[2.0, 1.0, 1.0]])
    fine = np.array([[0.5, 3.0, 3.0]])
    candidate = CandidatePoint(
        UNIT, (1.0, 0.0, 0.0), mapped=SurfacePoint(0, (1.0, 0.0, 0.0))
    )

    assert sampler.jacobian_estimate(candidate, coarse, fine) == 0.25


def test_jacobian_needs_a_mapped_candidate(octahedron):
    areas = sampler.corner_areas(octahedron)

    with pytest.raises(ValueError, match="not been mapped"):
        sampler.jacobian_estimate(
            CandidatePoint(UNIT, (1.0, 0.0, 0.0)), areas, areas
        )


def test_jacobian_rejects_zero_area():
    candidate = CandidatePoint(
        UNIT, (0.0, 1.0, 0.0), mapped=SurfacePoint(0, (0.0, 1.0, 0.0))
    )

    with pytest.raises(sampler.ZeroDenominator):
        sampler.jacobian_estimate(
            candidate, np.array([[1.0, 0.0, 1.0]]), np.ones((1, 3))
        )


@pytest.mark.parametrize("level", [0, 2])
def test_stratum_jacobians_of_the_identity_are_one(octahedron, level):
    trace = simplify.SimplificationTrace.identity(octahedron)

    jacobians = sampler.stratum_jacobians(trace, level, octahedron)

    assert jacobians.shape == (8, 4**level)
    np.testing.assert_allclose(jacobians, 1, atol=1e-9)


def test_stratum_jacobians_of_a_doubled_mesh_are_four(octahedron):
    trace = simplify.SimplificationTrace.identity(octahedron)
    bigger = mesh.IndexedMesh(2 * octahedron.vertices, octahedron.faces)

    jacobians = sampler.stratum_jacobians(trace, 1, bigger)

    np.testing.assert_allclose(jacobians, 4)


def test_stratum_jacobians_cover_the_original_surface(sphere, sphere_trace):
    level = 3
    jacobians = sampler.stratum_jacobians(sphere_trace, level, sphere)
    strata_areas = sphere_trace.coarse.face_areas()[:, None] / 4**level

    mapped_area = (jacobians * strata_areas).sum()

    assert mapped_area == pytest.approx(sphere.surface_area, rel=0.02)
    assert (jacobians > 0).all()


def test_stratum_jacobians_reject_zero_area_faces(octahedron):
    flat = mesh.IndexedMesh(
        octahedron.vertices * [1.0, 0.0, 0.0], octahedron.faces
    )
    trace = simplify.SimplificationTrace.identity(flat)

    with pytest.raises(sampler.ZeroDenominator):
        sampler.stratum_jacobians(trace, 1, flat)


def test_selecting_every_candidate_keeps_stratum_order():
    found = candidates_with(np.linspace(1, 2, 64))

    chosen = sampler.select_top_k(found, 64, np.random.default_rng(0))

    assert [cand.stratum for cand in chosen] == list(range(64))
    assert all(0 <= cand.weight <= cand.jacobian for cand in chosen)


def test_select_needs_enough_candidates():
    with pytest.raises(sampler.InsufficientCandidates):
        sampler.select_top_k(
            candidates_with([1, 1]), 3, np.random.default_rng(0)
        )


def test_select_needs_positive_k():
    with pytest.raises(ValueError, match="positive"):
        sampler.select_top_k(
            candidates_with([1, 1]), 0, np.random.default_rng(0)
        )


def test_select_needs_jacobians():
    found = [CandidatePoint(UNIT, (1.0, 0.0, 0.0))]

    with pytest.raises(ValueError, match="jacobian"):
        sampler.select_top_k(found, 1, np.random.default_rng(0))


def test_heavy_candidates_win():
    rng = np.random.default_rng(11)
    found = candidates_with([1.0, 1.0, 1e6, 1.0])

    for _ in range(50):
        (chosen,) = sampler.select_top_k(found, 1, rng)
        assert chosen.stratum == 2


def test_unweighted_selection_ignores_jacobians():
    rng = np.random.default_rng(11)
    found = candidates_with([1.0, 1.0, 1e6, 1.0])

    picked = {
        sampler.select_top_k(found, 1, rng, weighted=False)[0].stratum
        for _ in range(200)
    }

    assert picked == {0, 1, 2, 3}


@pytest.mark.slow
def test_equal_jacobians_select_uniformly():
    rng = np.random.default_rng(2)
    found = candidates_with([1.5] * 4)
    trials = 40_000

    counts = np.bincount(
        [
            sampler.select_top_k(found, 1, rng)[0].stratum
            for _ in range(trials)
        ],
        minlength=4,
    )

    sigma = np.sqrt(trials * 0.25 * 0.75)
    assert (np.abs(counts - trials / 4) < 5 * sigma).all()


@pytest.mark.parametrize("k", [1, 4])
def test_sample_mesh_features_shapes(sphere, sphere_trace, k):
    topo = topology.subdivide(sphere_trace.coarse.n_faces, 1)
    config = SelectionConfig(strata_levels=1, k=k, seed=4)

    points = sampler.sample_mesh_features(sphere_trace, topo, config, sphere)

    assert points.n_units == 384
    assert points.k == k
    assert points.features().shape == (384, k, 6)
    assert points.candidate_jacobians.shape == (384, 4)
    assert (points.candidate_jacobians > 0).all()
    np.testing.assert_allclose(
        points.positions.reshape(-1, 3),
        mesh.eval_points(
            sphere, points.faces.reshape(-1), points.bary.reshape(-1, 3)
        ),
    )
    np.testing.assert_allclose(np.linalg.norm(points.normals, axis=2), 1)


def test_sample_mesh_features_is_deterministic(sphere, sphere_trace):
    topo = topology.subdivide(sphere_trace.coarse.n_faces, 1)
    config = SelectionConfig(strata_levels=2, k=3, seed=9)

    first = sampler.sample_mesh_features(sphere_trace, topo, config, sphere)
    second = sampler.sample_mesh_features(sphere_trace, topo, config, sphere)

    np.testing.assert_array_equal(first.features(), second.features())
    np.testing.assert_array_equal(first.strata, second.strata)


def test_identity_trace_samples_the_mesh_itself(octahedron):
    trace = simplify.SimplificationTrace.identity(octahedron)
    topo = topology.subdivide(octahedron.n_faces, 1)
    config = SelectionConfig(strata_levels=2, k=2)

    points = sampler.sample_mesh_features(trace, topo, config, octahedron)

    np.testing.assert_allclose(points.candidate_jacobians, 1)
    unit_faces = np.arange(topo.n_units) // topo.units_per_face
    np.testing.assert_array_equal(points.faces, np.c_[unit_faces, unit_faces])
    np.testing.assert_allclose(points.bary, points.coarse_bary)


def test_barycenter_mode_takes_unit_centroids(octahedron):
    trace = simplify.SimplificationTrace.identity(octahedron)
    topo = topology.subdivide(octahedron.n_faces, 1)
    config = SelectionConfig(mode="barycenter")

    points = sampler.sample_mesh_features(trace, topo, config, octahedron)

    local = np.arange(topo.n_units) % topo.units_per_face
    expected = topo.corner_bary(local).mean(axis=1)
    np.testing.assert_allclose(points.coarse_bary[:, 0], expected)
    assert (points.strata == 0).all()


def test_subdivided_denominator_matches_coarse_at_level_zero(octahedron):
    trace = simplify.SimplificationTrace.identity(octahedron)
    topo = topology.subdivide(octahedron.n_faces, 0)
    config = SelectionConfig(
        strata_levels=1, jacobian_source="voronoi", voronoi_on_subdivided=True
    )

    points = sampler.sample_mesh_features(trace, topo, config, octahedron)

    np.testing.assert_allclose(points.candidate_jacobians, 1)


def test_sample_mesh_features_checks_the_topology(sphere, sphere_trace):
    with pytest.raises(ValueError, match="Topology has"):
        sampler.sample_mesh_features(
            sphere_trace,
            topology.subdivide(10, 1),
            SelectionConfig(strata_levels=1),
            sphere,
        )


@pytest.mark.parametrize("mode", ["distortion", "uniform"])
def test_per_unit_selection_matches_sample_mesh_features(
    sphere, sphere_trace, mode
):
    topo = topology.subdivide(sphere_trace.coarse.n_faces, 1)
    config = SelectionConfig(strata_levels=2, k=4, seed=11, mode=mode)
    selected = sampler.sample_mesh_features(sphere_trace, topo, config, sphere)

    for index in (0, 57, topo.n_units - 1):
        unit = topo.unit_of(index)
        rng = sampler.unit_rng(config.seed, unit)
        found = [
            dataclasses.replace(cand, jacobian=float(jacobian))
            for cand, jacobian in zip(
                sampler.stratified_candidates(topo, unit, 2, rng),
                selected.candidate_jacobians[index],
                strict=True,
            )
        ]
        chosen = sampler.select_top_k(
            found, 4, rng, weighted=mode == "distortion"
        )

        assert [cand.stratum for cand in chosen] == (
            selected.strata[index].tolist()
        )
        np.testing.assert_allclose(
            [cand.bary_on_coarse for cand in chosen],
            selected.coarse_bary[index],
        )
