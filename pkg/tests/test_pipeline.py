# Copyright DB InfraGO AG and contributors
# SPDX-License-Identifier: Apache-2.0

import csv
import json
import pathlib

import numpy as np
import pydantic as p
import pytest

from meshpatch import mesh, metrics, pipeline, simplify
from meshpatch.pipeline import PipelineConfig

SMALL = {
    "target_faces": "48:56",
    "subdivision_levels": 1,
    "strata_levels": 1,
    "variants": 2,
    "patch_budget": 64,
}


def small_config(**overrides) -> PipelineConfig:
    return PipelineConfig.model_validate(SMALL | overrides)


def write_hemisphere_labels(mesh_file: pathlib.Path) -> np.ndarray:
    m = mesh.load_mesh_file(mesh_file)
    labels = (m.triangles().mean(axis=1)[:, 2] > 0).astype(int)
    mesh_file.with_suffix(".txt").write_text(
        "\n".join(map(str, labels)) + "\n", encoding="utf-8"
    )
    return labels


@pytest.mark.parametrize(
    ("value", "expected"),
    [(100, (100, 100)), ("96:256", (96, 256)), ("128", (128, 128))],
)
def test_target_faces_forms(value, expected):
    config = PipelineConfig(target_faces=value)

    assert config.target_faces == expected


@pytest.mark.parametrize(
    "kwargs",
    [
        pytest.param({"target_faces": "3:8"}, id="below-four"),
        pytest.param({"target_faces": "60:50"}, id="reversed-range"),
        pytest.param({"target_faces": "many"}, id="not-a-number"),
        pytest.param({"profile": "seg", "strata_levels": 1}, id="k-too-large"),
        pytest.param(
            {"profile": "seg", "selection": "barycenter"}, id="barycenter-k"
        ),
        pytest.param({"variants": 0}, id="no-variants"),
        pytest.param({"colour": "red"}, id="unknown-key"),
    ],
)
def test_config_validation(kwargs):
    with pytest.raises(p.ValidationError):
        PipelineConfig(**kwargs)


def test_profiles_choose_k():
    assert PipelineConfig().effective_k == 1
    assert PipelineConfig(profile="seg").effective_k == 16
    assert PipelineConfig(profile="seg", k=4).effective_k == 4


def test_selection_config_follows_the_pipeline():
    config = PipelineConfig(profile="seg", smooth_normals=True)

    selection = config.selection_config(seed=12)

    assert selection.k == 16
    assert selection.seed == 12
    assert selection.strata_levels == config.strata_levels
    assert selection.smooth_normals
    assert selection.jacobian_source == "stratum"
    assert (
        PipelineConfig(jacobian_source="voronoi")
        .selection_config(seed=0)
        .jacobian_source
        == "voronoi"
    )


def test_config_file_with_overrides(tmp_path):
    path = tmp_path / "config.yaml"
    path.write_text(
        "profile: seg\nstrata_levels: 2\ntarget_faces: '48:56'\n",
        encoding="utf-8",
    )

    config = pipeline.load_config(path, seed=5, variants=None)

    assert config.profile == "seg"
    assert config.target_faces == (48, 56)
    assert config.seed == 5
    assert config.variants == PipelineConfig().variants


def test_config_file_must_be_a_mapping(tmp_path):
    path = tmp_path / "config.yaml"
    path.write_text("- 1\n- 2\n", encoding="utf-8")

    with pytest.raises(ValueError, match="mapping"):
        pipeline.load_config(path)


def test_variant_seeds_are_stable_and_distinct():
    seed = pipeline.variant_seed(0, "ball.obj", 1)

    assert seed == pipeline.variant_seed(0, "ball.obj", 1)
    assert seed != pipeline.variant_seed(0, "ball.obj", 2)
    assert seed != pipeline.variant_seed(0, "bell.obj", 1)
    assert seed != pipeline.variant_seed(1, "ball.obj", 1)


def test_prep_exports_every_variant(mesh_dir, tmp_path):
    out = tmp_path / "out"

    manifest = pipeline.prep(mesh_dir / "ball.obj", small_config(), out)

    assert [e.variant for e in manifest.entries] == [0, 1]
    assert not manifest.skipped
    assert (out / "manifest.json").is_file()
    assert (out / "metrics.prom").is_file()
    assert pipeline.verify_manifest(manifest, out) == []
    for entry in manifest.entries:
        assert entry.fine_faces == 80
        assert 48 <= entry.coarse_faces <= 56
        data = pipeline.read_tensor(entry, out, "data")
        assert data.shape == (64, 4 * 1 * 6)
        assert data.dtype == np.dtype("<f4")
        mask = pipeline.read_tensor(entry, out, "mask")
        assert mask.sum() == entry.coarse_faces
        assert set(entry.rejections) == set(simplify.REJECT_REASONS)


def test_manifest_survives_a_reload(mesh_dir, tmp_path):
    out = tmp_path / "out"
    manifest = pipeline.prep(mesh_dir / "ball.obj", small_config(), out)

    loaded = pipeline.load_manifest(out)

    assert loaded == manifest
    assert loaded.format_version == 1
    assert loaded.generator.startswith("meshpatch ")


def test_variants_differ(mesh_dir, tmp_path):
    out = tmp_path / "out"
    manifest = pipeline.prep(mesh_dir / "ball.obj", small_config(), out)

    first, second = (
        pipeline.read_tensor(entry, out, "data") for entry in manifest.entries
    )

    assert manifest.entries[0].seed != manifest.entries[1].seed
    assert not np.array_equal(first, second)


def test_batch_skips_broken_meshes(mesh_dir, tmp_path):
    manifest = pipeline.batch(mesh_dir, small_config(), tmp_path / "out")

    assert [(e.source, e.variant) for e in manifest.entries] == [
        ("ball.obj", 0),
        ("ball.obj", 1),
        ("nested/ring.obj", 0),
        ("nested/ring.obj", 1),
    ]
    (skip,) = manifest.skipped
    assert skip.source == "broken.off"
    assert skip.variant is None
    assert skip.error == "NonManifoldInput"
    assert skip.diagnostics is not None
    assert not skip.diagnostics.is_watertight


def test_batch_is_independent_of_parallelism(mesh_dir, tmp_path):
    config = small_config()

    serial = pipeline.batch(mesh_dir, config, tmp_path / "serial")
    parallel = pipeline.batch(mesh_dir, config, tmp_path / "parallel", jobs=2)

    assert serial.entries == parallel.entries
    for entry in serial.entries:
        assert (tmp_path / "serial" / entry.blob).read_bytes() == (
            tmp_path / "parallel" / entry.blob
        ).read_bytes()


def test_unreachable_targets_are_skipped(mesh_dir, tmp_path):
    config = small_config(target_faces="100:120")

    manifest = pipeline.prep(mesh_dir / "ball.obj", config, tmp_path / "out")

    assert not manifest.entries
    assert [(s.variant, s.error) for s in manifest.skipped] == [
        (0, "TargetUnreachable"),
        (1, "TargetUnreachable"),
    ]


def test_budget_overflow_is_skipped(mesh_dir, tmp_path):
    config = small_config(patch_budget=32)

    manifest = pipeline.prep(mesh_dir / "ball.obj", config, tmp_path / "out")

    assert {s.error for s in manifest.skipped} == {"PatchBudgetExceeded"}


def test_segmentation_exports_labels(mesh_dir, tmp_path):
    labels = write_hemisphere_labels(mesh_dir / "ball.obj")
    out = tmp_path / "out"
    config = small_config(profile="seg", strata_levels=2, variants=1)

    (entry,) = pipeline.prep(mesh_dir / "ball.obj", config, out).entries

    assert entry.k == 16
    assert pipeline.read_tensor(entry, out, "data").shape == (64, 4 * 16 * 6)
    unit_labels = pipeline.read_tensor(entry, out, "unit_labels")
    face_labels = pipeline.read_tensor(entry, out, "face_labels")
    assert unit_labels.shape == (entry.coarse_faces * 4,)
    assert face_labels.shape == (80,)
    assert set(np.unique(unit_labels)) <= {0.0, 1.0}
    assert (face_labels == labels).mean() > 0.75


def test_label_count_must_match(mesh_dir, tmp_path):
    (mesh_dir / "ball.txt").write_text("0\n1\n", encoding="utf-8")

    manifest = pipeline.prep(
        mesh_dir / "ball.obj", small_config(), tmp_path / "out"
    )

    (skip,) = manifest.skipped
    assert skip.error == "MissingLabel"


def test_corrupted_blobs_are_detected(mesh_dir, tmp_path):
    out = tmp_path / "out"
    manifest = pipeline.prep(mesh_dir / "ball.obj", small_config(), out)
    blob = out / manifest.entries[1].blob
    payload = bytearray(blob.read_bytes())
    payload[7] ^= 0xFF
    blob.write_bytes(bytes(payload))

    problems = pipeline.verify_manifest(manifest, out)

    assert problems == ["ball.obj:1: checksum mismatch"]


def test_missing_blobs_are_reported(mesh_dir, tmp_path):
    out = tmp_path / "out"
    manifest = pipeline.prep(mesh_dir / "ball.obj", small_config(), out)
    (out / manifest.entries[0].blob).unlink()

    (problem,) = pipeline.verify_manifest(manifest, out)

    assert "cannot read blob" in problem


def test_find_entries(mesh_dir, tmp_path):
    manifest = pipeline.batch(mesh_dir, small_config(), tmp_path / "out")

    assert manifest.find(0).source == "ball.obj"
    assert manifest.find("2").source == "nested/ring.obj"
    assert manifest.find("nested/ring.obj:1").variant == 1
    assert manifest.find("ball.obj").variant == 0
    for key in ("ball.obj:7", "missing.obj", 9):
        with pytest.raises(pipeline.EntryNotFound):
            manifest.find(key)


def test_read_tensor_needs_a_known_name(mesh_dir, tmp_path):
    out = tmp_path / "out"
    manifest = pipeline.prep(mesh_dir / "ball.obj", small_config(), out)

    with pytest.raises(pipeline.EntryNotFound, match="unit_labels"):
        pipeline.read_tensor(manifest.entries[0], out, "unit_labels")


def test_invalid_manifest(tmp_path):
    (tmp_path / "manifest.json").write_text('{"entries": 3}')

    with pytest.raises(pipeline.ManifestError):
        pipeline.load_manifest(tmp_path)


def test_traces_can_be_saved(mesh_dir, tmp_path):
    out = tmp_path / "out"
    config = small_config(save_traces=True, variants=1)

    (entry,) = pipeline.prep(mesh_dir / "ball.obj", config, out).entries

    assert entry.trace is not None
    data = json.loads((out / entry.trace).read_text(encoding="utf-8"))
    trace = simplify.trace_from_dict(data)
    fine, _ = mesh.normalize_unit_box(
        mesh.load_mesh_file(mesh_dir / "ball.obj")
    )
    assert trace.replay(fine).n_faces == entry.coarse_faces


def test_batch_records_metrics(mesh_dir, tmp_path):
    ok = metrics.sample_value("meshpatch_jobs_total", status="ok")
    skipped = metrics.sample_value("meshpatch_jobs_total", status="skipped")

    pipeline.batch(mesh_dir, small_config(), tmp_path / "out")

    assert metrics.sample_value("meshpatch_jobs_total", status="ok") == ok + 4
    assert (
        metrics.sample_value("meshpatch_jobs_total", status="skipped")
        == skipped + 1
    )
    text = (tmp_path / "out" / "metrics.prom").read_text(encoding="utf-8")
    assert "meshpatch_collapses_total" in text


def test_inspect_writes_plot_data(mesh_dir, tmp_path):
    write_hemisphere_labels(mesh_dir / "ball.obj")
    export = tmp_path / "out"
    config = small_config(profile="seg", strata_levels=2, variants=1)
    (entry,) = pipeline.prep(mesh_dir / "ball.obj", config, export).entries
    out = tmp_path / "inspect"

    report, text = pipeline.inspect(
        export / "manifest.json",
        "ball.obj",
        out,
        input_root=mesh_dir,
        compare=True,
    )

    with open(out / "points.csv", encoding="utf-8", newline="") as f:
        rows = list(csv.reader(f))
    assert rows[0] == ["x", "y", "z", "nx", "ny", "nz"]
    assert len(rows) - 1 == entry.coarse_faces * 4 * 16
    assert report.points == len(rows) - 1
    assert report.real_patches == entry.coarse_faces
    assert report.uniformity is not None
    assert report.unweighted is not None
    assert sum(n for _, _, n in report.jacobian_histogram) == report.points
    assert text.startswith("ball.obj variant 0\n")
    assert "weighted: chi2 =" in text
    assert (out / "summary.txt").read_text(encoding="utf-8") == text
    uniformity = json.loads((out / "uniformity.json").read_text("utf-8"))
    assert uniformity["weighted"]["bins"] == report.uniformity.bins


def test_inspect_without_sources(mesh_dir, tmp_path):
    export = tmp_path / "out"
    pipeline.prep(mesh_dir / "ball.obj", small_config(), export)

    report, text = pipeline.inspect(
        export, "1", tmp_path / "inspect", input_root=tmp_path
    )

    assert report.variant == 1
    assert report.uniformity is None
    assert "weighted: not available" in text


def test_inspect_rejects_corrupted_entries(mesh_dir, tmp_path):
    export = tmp_path / "out"
    manifest = pipeline.prep(mesh_dir / "ball.obj", small_config(), export)
    (export / manifest.entries[0].blob).write_bytes(b"\0" * 16)

    with pytest.raises(pipeline.ManifestError, match="checksum"):
        pipeline.inspect(export, "0", tmp_path / "inspect")


def test_zero_area_faces_are_rejected_unless_repaired(octahedron, tmp_path):
    sliver = mesh.IndexedMesh(
        np.vstack([octahedron.vertices, [[3, 0, 0], [4, 0, 0], [5, 0, 0]]]),
        np.vstack([octahedron.faces, [[6, 7, 8]]]),
    )
    path = tmp_path / "sliver.obj"
    path.write_text(mesh.write_obj(sliver), encoding="utf-8")

    with pytest.raises(mesh.NonManifoldInput, match="zero-area"):
        pipeline.load_source(path, "sliver.obj", small_config())

    source = pipeline.load_source(
        path, "sliver.obj", small_config(repair=True)
    )
    assert source.mesh.n_faces == 8
