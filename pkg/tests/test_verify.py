# Copyright DB InfraGO AG and contributors
# SPDX-License-Identifier: Apache-2.0

import time

import numpy as np
import pytest

from meshpatch import core, mesh, selfparam, simplify, verify
from meshpatch.mesh import IndexedMesh

# Two disjoint triangles of area 1 and 3
UNEVEN_PAIR = IndexedMesh(
    [
        [0, 0, 0],
        [2, 0, 0],
        [0, 1, 0],
        [0, 0, 1],
        [6, 0, 1],
        [0, 1, 1],
    ],
    [[0, 1, 2], [3, 4, 5]],
)


def test_oracle_follows_face_areas():
    faces, _ = verify.rejection_sample_uniform(
        UNEVEN_PAIR, 40_000, np.random.default_rng(0)
    )

    share = (faces == 1).mean()

    sigma = np.sqrt(0.75 * 0.25 / 40_000)
    assert abs(share - 0.75) < 5 * sigma


def test_oracle_is_uniform_inside_a_face():
    faces, bary = verify.rejection_sample_uniform(
        UNEVEN_PAIR, 30_000, np.random.default_rng(1)
    )

    inside = bary[faces == 0]
    np.testing.assert_allclose(inside.mean(axis=0), 1 / 3, atol=6e-3)
    np.testing.assert_allclose(bary.sum(axis=1), 1)
    assert (bary >= 0).all()


def test_uniform_points_pass_the_chi2_test(sphere):
    faces, _ = verify.rejection_sample_uniform(
        sphere, 20_000, np.random.default_rng(2)
    )

    report = verify.uniformity_chi2(faces, sphere)

    assert report.samples == 20_000
    assert report.bins == sphere.n_faces
    assert report.dof == sphere.n_faces - 1
    assert report.p_value > 1e-3
    assert len(report.residuals) == sphere.n_faces
    assert sum(report.residuals) == pytest.approx(0, abs=1e-6)


def test_concentrated_points_fail_the_chi2_test(sphere):
    report = verify.uniformity_chi2(np.zeros(20_000, dtype=int), sphere)

    assert report.p_value < 1e-6


def test_chi2_needs_points(sphere):
    with pytest.raises(verify.TooFewSamples, match="No points"):
        verify.uniformity_chi2(np.array([], dtype=int), sphere)


def test_chi2_needs_enough_points_per_bin(sphere):
    faces = np.arange(50) % sphere.n_faces

    with pytest.raises(verify.TooFewSamples, match="too few"):
        verify.uniformity_chi2(faces, sphere, min_expected=0.1)


def test_sparse_bins_merge_with_their_sparsest_neighbour():
    neighbors = np.array([[1, 0, 0], [0, 2, 1], [1, 3, 2], [2, 3, 3]])

    bins = verify.merge_bins(np.array([1.0, 1.0, 10.0, 10.0]), neighbors)

    np.testing.assert_array_equal(bins, [0, 0, 0, 1])


def test_dense_bins_stay_apart():
    neighbors = np.array([[1, 2, 1], [0, 2, 0], [0, 1, 1]])

    bins = verify.merge_bins(np.array([5.0, 6.0, 7.0]), neighbors)

    np.testing.assert_array_equal(bins, [0, 1, 2])


def test_chi2_takes_explicit_expectations(sphere):
    faces = np.repeat(np.arange(20), 1000)
    expected = np.zeros(sphere.n_faces)
    expected[:20] = 1000

    report = verify.uniformity_chi2(faces, sphere, expected=expected)

    assert report.statistic == pytest.approx(0, abs=1e-9)
    assert verify.uniformity_chi2(faces, sphere).p_value < 1e-6


def test_chi2_checks_the_expectation_shape(sphere):
    with pytest.raises(ValueError, match="shape"):
        verify.uniformity_chi2(
            np.zeros(100, dtype=int), sphere, expected=np.ones(3)
        )


def test_unit_reference_of_the_identity(octahedron):
    trace = simplify.SimplificationTrace.identity(octahedron)

    reference = verify.unit_reference(
        trace, octahedron, 1, 4000, np.random.default_rng(0)
    )

    assert reference.counts.sum() == 4000
    assert reference.covered.all()
    np.testing.assert_allclose(reference.shares, 4)


def test_points_inside_their_own_unit_are_uniform(sphere):
    trace = simplify.SimplificationTrace.identity(sphere)
    reference = verify.unit_reference(
        trace, sphere, 0, 10_000, np.random.default_rng(0)
    )
    faces = np.repeat(np.arange(sphere.n_faces)[:, None], 12, axis=1)

    report = verify.unit_uniformity_chi2(faces, reference, sphere)

    assert report.samples == 12 * sphere.n_faces
    assert report.statistic == pytest.approx(0, abs=1e-9)


def test_points_piled_up_inside_units_are_not_uniform(sphere, sphere_trace):
    reference = verify.unit_reference(
        sphere_trace, sphere, 0, 40_000, np.random.default_rng(0)
    )
    n_units = sphere_trace.coarse.n_faces
    centers, _ = selfparam.map_backward_many(
        selfparam.BijectionMap(sphere_trace, "backward"),
        np.arange(n_units),
        np.full((n_units, 3), 1 / 3),
    )
    faces = np.repeat(centers[:, None], 40, axis=1)

    report = verify.unit_uniformity_chi2(faces, reference, sphere)

    assert report.p_value < 1e-6


def test_unit_chi2_needs_every_unit(sphere, sphere_trace):
    reference = verify.unit_reference(
        sphere_trace, sphere, 0, 1000, np.random.default_rng(0)
    )

    with pytest.raises(ValueError, match="units"):
        verify.unit_uniformity_chi2(
            np.zeros((3, 4), dtype=int), reference, sphere
        )


@pytest.mark.slow
def test_distortion_selection_is_more_uniform_within_units(
    sphere, sphere_trace
):
    case = verify._Case("sphere", sphere, sphere_trace)
    config = verify.SuiteConfig(seeds=[0, 1], min_win_rate=1.0)

    check = verify._check_uniformity(config, [case])

    assert check.values["win_rate"] == 1.0, check.detail
    assert check.values["median_improvement"] > 0


def test_grid_search_finds_a_plane():
    q = np.outer([0, 0, 1, -0.25], [0, 0, 1, -0.25])

    best, cost = verify.brute_force_quadric_min(q, ([-1] * 3, [1] * 3))

    assert cost == pytest.approx(0, abs=1e-9)
    assert best[2] == pytest.approx(0.25, abs=1e-3)


def test_grid_search_finds_a_corner():
    planes = np.array([[1, 0, 0, -0.3], [0, 1, 0, 0.2], [0, 0, 1, -0.1]])
    q = sum(np.outer(p, p) for p in planes)

    best, cost = verify.brute_force_quadric_min(q, ([-1] * 3, [1] * 3))

    np.testing.assert_allclose(best, [0.3, -0.2, 0.1], atol=1e-3)
    assert cost == pytest.approx(0, abs=1e-6)


@pytest.mark.parametrize("seed", range(5))
def test_closed_form_beats_grid_search_over_the_edge_box(seed):
    q, v1, v2 = verify.random_edge_quadric(np.random.default_rng(seed))
    x, cost = simplify.optimal_position(q, v1, v2)
    lower, upper = verify.endpoint_box(v1, v2)

    _, grid_cost = verify.brute_force_quadric_min(q, (lower, upper))

    assert cost <= grid_cost + verify.QEM_TOLERANCE
    if ((x >= lower) & (x <= upper)).all():
        assert grid_cost - cost <= 1e-3


def test_endpoint_box_grows_by_edge_lengths():
    lower, upper = verify.endpoint_box(
        np.array([0.0, 0.0, 0.0]), np.array([3.0, 4.0, 0.0])
    )

    np.testing.assert_allclose(lower, [-5, -5, -5])
    np.testing.assert_allclose(upper, [8, 9, 5])


def test_qem_check_passes():
    check = verify._check_qem(verify.SuiteConfig(seeds=[0], quadrics=20))

    assert check.passed, check.values
    assert check.values["worst_excess"] <= verify.QEM_TOLERANCE


def test_qem_check_catches_a_wrong_optimum(monkeypatch):
    def midpoint(q, v1, v2):
        x = (np.asarray(v1) + np.asarray(v2)) / 2
        return x, simplify.evaluate_quadric(q, x)

    monkeypatch.setattr(simplify, "optimal_position", midpoint)

    check = verify._check_qem(verify.SuiteConfig(seeds=[0], quadrics=10))

    assert not check.passed


def test_identity_round_trip_is_exact(octahedron):
    bij = selfparam.BijectionMap(
        simplify.SimplificationTrace.identity(octahedron)
    )

    report = verify.roundtrip_report(
        bij, octahedron, 200, np.random.default_rng(0)
    )

    assert report.max_error == 0
    assert not report.flagged


def test_simplified_sphere_round_trips(sphere, sphere_trace):
    report = verify.roundtrip_report(
        selfparam.BijectionMap(sphere_trace),
        sphere,
        1000,
        np.random.default_rng(3),
    )

    assert report.failures == 0
    assert report.max_error < 1e-5 * sphere.bbox_diagonal
    assert not report.flagged


def test_corrupted_trace_is_flagged(sphere, sphere_trace):
    report = verify.roundtrip_report(
        selfparam.BijectionMap(verify.corrupt_trace(sphere_trace)),
        sphere,
        1000,
        np.random.default_rng(3),
    )

    assert report.flagged


def test_corrupting_needs_collapses(octahedron):
    with pytest.raises(ValueError, match="without collapses"):
        verify.corrupt_trace(simplify.SimplificationTrace.identity(octahedron))


def test_builtin_meshes():
    meshes = verify.builtin_meshes()

    assert len(meshes) == 10
    assert len({name for name, _ in meshes}) == 10
    for name, m in meshes:
        assert 300 <= m.n_faces <= 3000, name
        assert mesh.validate(m).ok, name
        assert m.vertices.min() >= -1e-12
        assert m.vertices.max() == pytest.approx(1)


def test_builtin_meshes_include_a_torus():
    genus = {
        name: mesh.validate(m).genus for name, m in verify.builtin_meshes()
    }

    assert genus["torus-24x16"] == 1
    assert genus["icosphere-3"] == 0


def test_obtuse_mesh_is_mostly_obtuse():
    flat = verify.obtuse_mesh()

    assert verify.obtuse_fraction(flat) > 0.3
    assert mesh.validate(flat).ok


def test_hemisphere_labels(sphere):
    centered = IndexedMesh(sphere.vertices - 0.5, sphere.faces)

    labels = verify.hemisphere_labels(centered)

    assert set(labels.tolist()) == {0, 1}
    assert labels.sum() == pytest.approx(sphere.n_faces / 2, abs=20)


def test_suite_reports_raising_checks(monkeypatch):
    def broken(config):
        raise core.MeshPatchError("grid search exploded")

    def skipped(config, cases):
        return verify.Check(name="distortion-uniformity", passed=True)

    monkeypatch.setattr(verify, "_check_qem", broken)
    monkeypatch.setattr(verify, "_check_uniformity", skipped)
    config = verify.SuiteConfig(
        seeds=[0],
        meshes=1,
        target_faces=(96, 128),
        roundtrip_samples=200,
        strata_levels=1,
        subdivision_levels=1,
        k=1,
    )

    report = verify.run_suite(config)

    checks = {check.name: check for check in report.checks}
    assert len(checks) == 10
    assert not checks["qem-optimality"].passed
    assert "exploded" in checks["qem-optimality"].detail
    assert checks["roundtrip"].passed
    assert checks["negative-control"].passed
    assert not report.passed


def test_suite_reports_meshes_that_cannot_be_loaded(tmp_path):
    path = tmp_path / "flap.obj"
    path.write_text(
        "v 0 0 0\nv 1 0 0\nv 0 1 0\nv 0 0 1\nf 1 2 3\nf 1 4 2\n",
        encoding="utf-8",
    )
    config = verify.SuiteConfig(seeds=[0], meshes=1, paths=[path])

    report = verify.run_suite(config)

    assert [check.name for check in report.checks] == ["load"]
    assert "flap.obj" in report.checks[0].detail
    assert "boundary edges" in report.checks[0].detail
    assert not report.passed


def test_suite_fails_checks_over_budget(monkeypatch):
    def slow(config):
        time.sleep(0.01)
        return verify.Check(name="qem-optimality", passed=True)

    def skipped(config, cases):
        return verify.Check(name="distortion-uniformity", passed=True)

    monkeypatch.setattr(verify, "_check_qem", slow)
    monkeypatch.setattr(verify, "_check_uniformity", skipped)
    config = verify.SuiteConfig(
        seeds=[0],
        meshes=1,
        target_faces=(96, 128),
        roundtrip_samples=200,
        strata_levels=1,
        subdivision_levels=1,
        k=1,
        budgets={"qem-optimality": 0.001},
    )

    report = verify.run_suite(config)

    checks = {check.name: check for check in report.checks}
    assert not checks["qem-optimality"].passed
    assert "budget" in checks["qem-optimality"].detail
    assert checks["qem-optimality"].elapsed >= 0.01
    assert checks["combinatorics"].passed
    assert checks["roundtrip"].elapsed > 0


@pytest.mark.slow
def test_full_suite_passes():
    report = verify.run_suite(verify.SuiteConfig(seeds=[0, 1]))

    failed = [check.name for check in report.checks if not check.passed]
    assert not failed
    checks = {check.name: check for check in report.checks}
    assert checks["distortion-uniformity"].values["win_rate"] >= 0.8
    assert checks["distortion-uniformity"].values["median_improvement"] >= 0.1
    assert checks["roundtrip"].elapsed < 60
    assert checks["distortion-uniformity"].elapsed < 300


@pytest.mark.slow
def test_corrupted_suite_fails_the_roundtrip():
    config = verify.SuiteConfig(seeds=[0], meshes=2, corrupt=True)

    report = verify.run_suite(config)

    checks = {check.name: check for check in report.checks}
    assert not checks["roundtrip"].passed
    assert not report.passed
