# Copyright DB InfraGO AG and contributors
# SPDX-License-Identifier: Apache-2.0
"""End-to-end preprocessing of mesh files into patch tensor exports.

An export directory contains ``manifest.json``, one blob file per mesh
variant under ``blobs/`` and, optionally, the simplification traces
under ``traces/``. Every tensor in a blob is stored row-major as
little-endian 32-bit floats.
"""

from __future__ import annotations

import concurrent.futures
import csv
import dataclasses
import json
import logging
import os
import pathlib
import time
import typing as t

import jinja2
import numpy as np
import pydantic as p
import yaml

import meshpatch
import meshpatch.constants as c
from meshpatch import (
    core,
    features,
    mesh,
    metrics,
    sampler,
    selfparam,
    simplify,
    topology,
    verify,
)
from meshpatch.mesh import FloatArray, IndexedMesh, IntArray

logger = logging.getLogger(__name__)

MESH_SUFFIXES: t.Final = (".obj", ".off")
LABEL_SUFFIX: t.Final = ".txt"
BLOB_DTYPE: t.Final = "<f4"
MANIFEST_NAME: t.Final = "manifest.json"
HISTOGRAM_BINS: t.Final = 20

Profile: t.TypeAlias = t.Literal["cls", "seg"]
PROFILE_K: t.Final[dict[str, int]] = {"cls": 1, "seg": 16}


class EntryNotFound(core.MeshPatchError):
    pass


class ManifestError(core.MeshPatchError):
    pass


class PipelineConfig(p.BaseModel):
    model_config = p.ConfigDict(frozen=True, extra="forbid")

    profile: Profile = p.Field("cls", title="Task profile")
    target_faces: tuple[int, int] = p.Field(
        (c.Defaults.target_faces_min, c.Defaults.target_faces_max),
        title="Coarse face count, drawn per variant from [min, max]",
    )
    subdivision_levels: int = p.Field(
        c.Defaults.subdivision_levels, ge=0, title="Subdivision levels s"
    )
    strata_levels: int = p.Field(
        c.Defaults.strata_levels, ge=0, title="Stratification levels m"
    )
    k: int = p.Field(0, ge=0, title="Points per unit, 0 for the profile's")
    variants: int = p.Field(c.VARIANTS, ge=1, title="Variants per mesh")
    patch_budget: int = p.Field(c.PATCH_BUDGET, ge=1, title="Patches")
    seed: int = p.Field(c.SEED, ge=0, title="Base seed")
    augment: bool = p.Field(False, title="Augment every variant")
    augmentation: features.AugmentConfig = p.Field(
        default_factory=features.AugmentConfig,
        title="Augmentation settings",
    )
    selection: sampler.SelectionMode = p.Field(
        "distortion", title="Point selection strategy"
    )
    jacobian_source: sampler.JacobianSource = p.Field(
        "stratum", title="Distortion estimate"
    )
    voronoi_on_subdivided: bool = p.Field(False)
    smooth_normals: bool = p.Field(False)
    boundary_mode: selfparam.BoundaryMode = p.Field("circle")
    repair: bool = p.Field(False, title="Weld and clean meshes on load")
    save_traces: bool = p.Field(False, title="Write simplification traces")

    @p.field_validator("target_faces", mode="before")
    @classmethod
    def _parse_target(cls, value: t.Any) -> t.Any:
        if isinstance(value, int):
            return (value, value)
        if isinstance(value, str):
            return parse_target_faces(value)
        return value

    @p.model_validator(mode="after")
    def _check(self) -> PipelineConfig:
        lo, hi = self.target_faces
        if not 4 <= lo <= hi:
            raise ValueError(f"Invalid target face range {lo}:{hi}")
        if self.effective_k > 4**self.strata_levels:
            raise ValueError(
                f"Cannot select {self.effective_k} of"
                f" {4**self.strata_levels} candidates per unit"
            )
        if self.selection == "barycenter" and self.effective_k != 1:
            raise ValueError("Barycenter selection picks one point per unit")
        return self

    @property
    def effective_k(self) -> int:
        return self.k or PROFILE_K[self.profile]

    def selection_config(self, seed: int) -> sampler.SelectionConfig:
        return sampler.SelectionConfig(
            strata_levels=self.strata_levels,
            k=self.effective_k,
            seed=seed,
            mode=self.selection,
            jacobian_source=self.jacobian_source,
            voronoi_on_subdivided=self.voronoi_on_subdivided,
            smooth_normals=self.smooth_normals,
        )


def parse_target_faces(value: str) -> tuple[int, int]:
    """Parse ``MIN`` or ``MIN:MAX``."""
    lo, _, hi = value.partition(":")
    try:
        return int(lo), int(hi or lo)
    except ValueError:
        raise ValueError(f"Expected MIN[:MAX], got {value!r}") from None


def load_config(
    path: str | os.PathLike[str] | None = None,
    **overrides: t.Any,
) -> PipelineConfig:
    """Build a config from a JSON or YAML file and explicit overrides.

    Overrides set to None are ignored. Environment variables only affect
    the defaults.
    """
    data: dict[str, t.Any] = {}
    if path is not None:
        text = pathlib.Path(path).read_text(encoding="utf-8")
        loaded = yaml.safe_load(text) or {}
        if not isinstance(loaded, dict):
            raise ValueError(f"Config file {path} must contain a mapping")
        data.update(loaded)
    data.update({k: v for k, v in overrides.items() if v is not None})
    return PipelineConfig.model_validate(data)


class BlobRef(p.BaseModel):
    offset: int = p.Field(ge=0)
    length: int = p.Field(ge=0, title="Length in bytes")
    shape: list[int]
    dtype: str = BLOB_DTYPE


class ManifestEntry(p.BaseModel):
    source: str = p.Field(title="Mesh file, relative to the input root")
    variant: int
    seed: int
    fine_faces: int
    coarse_faces: int
    patch_budget: int
    k: int
    s: int
    blob: str = p.Field(title="Blob file, relative to the export root")
    tensors: dict[str, BlobRef]
    checksum: str = p.Field(title="Checksum of the blob file")
    trace: str | None = None
    rejections: dict[str, int] = p.Field(default_factory=dict)


class SkipRecord(p.BaseModel):
    source: str
    variant: int | None = None
    error: str
    message: str
    diagnostics: mesh.MeshDiagnostics | None = None


class ExportManifest(p.BaseModel):
    format_version: int = c.FORMAT_VERSION
    generator: str = p.Field(
        default_factory=lambda: f"meshpatch {meshpatch.__version__}"
    )
    config: PipelineConfig
    entries: list[ManifestEntry] = p.Field(default_factory=list)
    skipped: list[SkipRecord] = p.Field(default_factory=list)

    def find(self, key: str | int) -> ManifestEntry:
        """Find an entry by index or by ``SOURCE`` / ``SOURCE:VARIANT``.

        Raises
        ------
        EntryNotFound
            If no entry matches.
        """
        if isinstance(key, int) or str(key).isdigit():
            index = int(key)
            if 0 <= index < len(self.entries):
                return self.entries[index]
            raise EntryNotFound(f"No entry {index}")
        source, _, variant = str(key).rpartition(":")
        if not source or not variant.isdigit():
            source, variant = str(key), "0"
        for entry in self.entries:
            if entry.source == source and entry.variant == int(variant):
                return entry
        raise EntryNotFound(f"No entry for {key!r}")


def variant_seed(seed: int, name: str, variant: int) -> int:
    """Derive the seed of one variant of one mesh file."""
    sequence = np.random.SeedSequence([seed, core.name_key(name), variant])
    return int(sequence.generate_state(1, dtype=np.uint64)[0])


@dataclasses.dataclass(frozen=True)
class Source:
    """A loaded input mesh with optional per-face labels."""

    name: str
    mesh: IndexedMesh
    labels: IntArray | None = None


@dataclasses.dataclass(frozen=True)
class Job:
    source: Source
    variant: int
    config: PipelineConfig


@dataclasses.dataclass
class JobResult:
    entry: ManifestEntry | None = None
    payload: bytes = b""
    trace: dict[str, t.Any] | None = None
    skip: SkipRecord | None = None
    collapses: int = 0


@dataclasses.dataclass(frozen=True, eq=False)
class Variant:
    """Everything computed for one variant of one mesh."""

    seed: int
    fine: IndexedMesh
    trace: simplify.SimplificationTrace
    topology: topology.SubdividedTopology
    selected: sampler.SelectedPoints
    tensor: features.PatchTensor
    unit_labels: IntArray | None = None
    face_labels: IntArray | None = None


def read_labels(path: pathlib.Path) -> IntArray:
    try:
        text = path.read_text(encoding="utf-8")
        return np.array(text.split(), dtype=np.int64)
    except ValueError as err:
        raise features.MissingLabel(
            f"Invalid label file {path}: {err}"
        ) from None


def load_source(
    path: pathlib.Path, name: str, config: PipelineConfig
) -> Source:
    """Load, optionally repair, and validate one input mesh.

    Raises
    ------
    NonManifoldInput
        If the mesh is not a closed, oriented 2-manifold. The exception
        carries the diagnostics as ``diagnostics``.
    """
    m = mesh.load_mesh_file(path)
    sidecar = path.with_suffix(LABEL_SUFFIX)
    labels = read_labels(sidecar) if sidecar.is_file() else None
    if labels is not None and len(labels) != m.n_faces:
        raise features.MissingLabel(
            f"{sidecar.name} has {len(labels)} labels for {m.n_faces} faces"
        )
    if config.repair:
        m, kept = mesh.repair(m)
        if labels is not None:
            labels = labels[kept]

    diagnostics = mesh.validate(m)
    if not diagnostics.ok:
        error = mesh.NonManifoldInput(
            "; ".join(diagnostics.defects) or "Not a closed 2-manifold"
        )
        error.diagnostics = diagnostics
        raise error
    return Source(name=name, mesh=m, labels=labels)


def _pick_target(
    rng: np.random.Generator, config: PipelineConfig, faces: int
) -> int:
    lo, hi = config.target_faces
    if faces < lo:
        raise simplify.TargetUnreachable(
            f"Mesh has {faces} faces, fewer than the target {lo}"
        )
    target = min(int(rng.integers(lo, hi + 1)), faces)
    if (faces - target) % 2:
        target = target - 1 if target - 1 >= lo else target + 1
    if target > faces or (faces - target) % 2:
        raise simplify.TargetUnreachable(
            f"No target in {lo}:{hi} reachable from {faces} faces"
        )
    return target


def prepare_fine(
    source: Source, variant: int, config: PipelineConfig
) -> tuple[int, np.random.Generator, IndexedMesh]:
    """Return the seed, random stream and input mesh of a variant.

    The mesh is normalized to the unit box and augmented if configured.
    """
    seed = variant_seed(config.seed, source.name, variant)
    rng = np.random.default_rng(seed)
    fine, _ = mesh.normalize_unit_box(source.mesh)
    if config.augment:
        fine = features.augment(fine, config.augmentation, rng)
    return seed, rng, fine


def run_variant(
    source: Source,
    variant: int,
    config: PipelineConfig,
    *,
    selection: sampler.SelectionMode | None = None,
) -> Variant:
    """Run the whole pipeline for one variant of a mesh.

    Results depend only on the source, the variant index and the config.
    """
    seed, rng, fine = prepare_fine(source, variant, config)
    target = _pick_target(rng, config, fine.n_faces)
    trace = simplify.simplify_to(
        fine, target, seed, boundary_mode=config.boundary_mode
    )
    topo = topology.subdivide(trace.coarse.n_faces, config.subdivision_levels)
    layout = topology.build_patch_layout(topo, config.patch_budget)

    selection_config = config.selection_config(seed)
    if selection is not None:
        selection_config = selection_config.model_copy(
            update={"mode": selection}
        )
    selected = sampler.sample_mesh_features(
        trace, topo, selection_config, fine
    )
    tensor = features.pack_patches(
        selected.features(), layout, config.effective_k
    )

    unit_labels = face_labels = None
    if source.labels is not None:
        unit_labels = features.labels_to_units(source.labels, selected.faces)
        face_labels = features.units_to_faces(unit_labels, trace, topo)
    return Variant(
        seed=seed,
        fine=fine,
        trace=trace,
        topology=topo,
        selected=selected,
        tensor=tensor,
        unit_labels=unit_labels,
        face_labels=face_labels,
    )


def _pack_blob(
    tensors: dict[str, FloatArray],
) -> tuple[bytes, dict[str, BlobRef]]:
    parts = []
    refs = {}
    offset = 0
    for name, array in tensors.items():
        data = np.ascontiguousarray(array, dtype=BLOB_DTYPE).tobytes()
        refs[name] = BlobRef(
            offset=offset, length=len(data), shape=list(np.shape(array))
        )
        parts.append(data)
        offset += len(data)
    return b"".join(parts), refs


def blob_name(source: str, variant: int) -> str:
    return f"{source.replace('/', '__')}.v{variant}.bin"


def run_job(job: Job) -> JobResult:
    """Process one variant, turning domain errors into a skip record."""
    source, variant, config = job.source, job.variant, job.config
    start = time.perf_counter()
    try:
        result = run_variant(source, variant, config)
    except core.MeshPatchError as err:
        logger.warning(
            "Discarding variant %d of %s: %s",
            variant,
            source.name,
            err,
            extra={"source": source.name, "variant": variant},
        )
        return JobResult(
            skip=SkipRecord(
                source=source.name,
                variant=variant,
                error=type(err).__name__,
                message=str(err),
            )
        )

    tensors: dict[str, FloatArray] = {
        "data": result.tensor.data,
        "avg_position": result.tensor.avg_position,
        "mask": result.tensor.mask,
        "point_faces": result.selected.faces,
        "point_jacobians": result.selected.jacobians,
    }
    if result.unit_labels is not None and result.face_labels is not None:
        tensors["unit_labels"] = result.unit_labels
        tensors["face_labels"] = result.face_labels
    payload, refs = _pack_blob(tensors)

    blob = blob_name(source.name, variant)
    trace_name = None
    trace_data = None
    if config.save_traces:
        trace_name = f"traces/{blob.removesuffix('.bin')}.json"
        trace_data = simplify.trace_to_dict(result.trace)
    entry = ManifestEntry(
        source=source.name,
        variant=variant,
        seed=result.seed,
        fine_faces=result.fine.n_faces,
        coarse_faces=result.trace.coarse.n_faces,
        patch_budget=config.patch_budget,
        k=config.effective_k,
        s=config.subdivision_levels,
        blob=f"blobs/{blob}",
        tensors=refs,
        checksum=core.compute_hash(payload),
        trace=trace_name,
        rejections=result.trace.rejections,
    )
    logger.info(
        "Processed variant %d of %s",
        variant,
        source.name,
        extra={
            "source": source.name,
            "variant": variant,
            "faces": result.trace.coarse.n_faces,
            "elapsed": round(time.perf_counter() - start, 3),
        },
    )
    return JobResult(
        entry=entry,
        payload=payload,
        trace=trace_data,
        collapses=result.trace.levels,
    )


def find_meshes(directory: pathlib.Path) -> list[pathlib.Path]:
    return sorted(
        path
        for path in directory.rglob("*")
        if path.is_file() and path.suffix.lower() in MESH_SUFFIXES
    )


def _skip_for(name: str, err: Exception) -> SkipRecord:
    logger.warning(
        "Discarding %s: %s", name, err, extra={"source": name}
    )
    return SkipRecord(
        source=name,
        error=type(err).__name__,
        message=str(err),
        diagnostics=getattr(err, "diagnostics", None),
    )


def export(
    files: t.Sequence[tuple[pathlib.Path, str]],
    config: PipelineConfig,
    out: pathlib.Path,
    *,
    jobs: int = c.JOBS,
) -> ExportManifest:
    """Process mesh files into an export directory.

    ``files`` pairs each path with the name it is recorded under. Output
    is written in input order, whatever the number of parallel jobs.
    """
    manifest = ExportManifest(config=config)
    work: list[Job] = []
    for path, name in files:
        try:
            source = load_source(path, name, config)
        except (core.MeshPatchError, OSError) as err:
            manifest.skipped.append(_skip_for(name, err))
            metrics.record_job("skipped")
            continue
        work.extend(Job(source, v, config) for v in range(config.variants))

    if jobs > 1 and len(work) > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(run_job, work))
    else:
        results = [run_job(job) for job in work]

    (out / "blobs").mkdir(parents=True, exist_ok=True)
    for result in results:
        if result.skip is not None:
            manifest.skipped.append(result.skip)
            metrics.record_job("skipped")
            continue
        assert result.entry is not None
        (out / result.entry.blob).write_bytes(result.payload)
        if result.entry.trace is not None:
            trace_path = out / result.entry.trace
            trace_path.parent.mkdir(parents=True, exist_ok=True)
            trace_path.write_text(json.dumps(result.trace), encoding="utf-8")
        manifest.entries.append(result.entry)
        metrics.record_job(
            "ok",
            collapses=result.collapses,
            rejections=result.entry.rejections,
        )

    (out / MANIFEST_NAME).write_text(
        manifest.model_dump_json(indent=2) + "\n", encoding="utf-8"
    )
    metrics.write(out / "metrics.prom")
    logger.info(
        "Exported %d variants, skipped %d",
        len(manifest.entries),
        len(manifest.skipped),
    )
    return manifest


def prep(
    path: pathlib.Path, config: PipelineConfig, out: pathlib.Path
) -> ExportManifest:
    """Export all variants of a single mesh file."""
    return export([(path, path.name)], config, out, jobs=1)


def batch(
    directory: pathlib.Path,
    config: PipelineConfig,
    out: pathlib.Path,
    *,
    jobs: int = c.JOBS,
) -> ExportManifest:
    """Export every mesh file below ``directory``.

    Label sidecars are text files with the mesh's stem and one integer
    per face.
    """
    files = [
        (path, path.relative_to(directory).as_posix())
        for path in find_meshes(directory)
    ]
    return export(files, config, out, jobs=jobs)


def load_manifest(path: str | os.PathLike[str]) -> ExportManifest:
    path = pathlib.Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    try:
        return ExportManifest.model_validate_json(
            path.read_text(encoding="utf-8")
        )
    except p.ValidationError as err:
        raise ManifestError(f"Invalid manifest {path}: {err}") from None


def verify_manifest(manifest: ExportManifest, root: pathlib.Path) -> list[str]:
    """Check blob layout and checksums, returning the problems found."""
    problems = []
    seen: set[str] = set()
    for entry in manifest.entries:
        label = f"{entry.source}:{entry.variant}"
        if entry.blob in seen:
            problems.append(f"{label}: blob {entry.blob} referenced twice")
        seen.add(entry.blob)
        try:
            payload = (root / entry.blob).read_bytes()
        except OSError as err:
            problems.append(f"{label}: cannot read blob: {err}")
            continue
        if core.compute_hash(payload) != entry.checksum:
            problems.append(f"{label}: checksum mismatch")

        end = 0
        for name, ref in sorted(
            entry.tensors.items(), key=lambda item: item[1].offset
        ):
            if ref.offset < end:
                problems.append(f"{label}: tensor {name} overlaps")
            expected = int(np.prod(ref.shape)) * np.dtype(ref.dtype).itemsize
            if ref.length != expected:
                problems.append(f"{label}: tensor {name} has a bad length")
            end = ref.offset + ref.length
        if end > len(payload):
            problems.append(f"{label}: tensors extend past the blob")
    return problems


def read_tensor(
    entry: ManifestEntry, root: pathlib.Path, name: str
) -> FloatArray:
    ref = entry.tensors.get(name)
    if ref is None:
        raise EntryNotFound(f"Entry has no tensor {name!r}")
    with open(root / entry.blob, "rb") as f:
        f.seek(ref.offset)
        data = f.read(ref.length)
    return np.frombuffer(data, dtype=ref.dtype).reshape(ref.shape)


class InspectReport(p.BaseModel):
    source: str
    variant: int
    coarse_faces: int
    fine_faces: int
    real_patches: int
    points: int
    jacobian_mean: float
    jacobian_histogram: list[tuple[float, float, int]]
    uniformity: verify.UniformityReport | None = None
    unweighted: verify.UniformityReport | None = None


def _uniformity(
    faces: IntArray, fine: IndexedMesh
) -> verify.UniformityReport | None:
    try:
        return verify.uniformity_chi2(faces, fine)
    except verify.TooFewSamples as err:
        logger.warning("Skipping uniformity statistic: %s", err)
        return None


def inspect(
    manifest_path: pathlib.Path,
    key: str,
    out: pathlib.Path,
    *,
    input_root: pathlib.Path | None = None,
    compare: bool = False,
) -> tuple[InspectReport, str]:
    """Summarize one entry and write plot data next to it.

    Writes ``points.csv``, ``jacobians.csv`` and ``uniformity.json`` into
    ``out`` and returns the report and its rendered text.
    """
    manifest = load_manifest(manifest_path)
    root = manifest_path if manifest_path.is_dir() else manifest_path.parent
    entry = manifest.find(key)
    if problems := verify_manifest(
        manifest.model_copy(update={"entries": [entry]}), root
    ):
        raise ManifestError("; ".join(problems))

    tensor = features.PatchTensor(
        data=read_tensor(entry, root, "data"),
        avg_position=read_tensor(entry, root, "avg_position"),
        mask=read_tensor(entry, root, "mask").astype(bool),
        k=entry.k,
        units_per_patch=4**entry.s,
    )
    positions, normals = features.unpack_patches(tensor, entry.k, entry.s)
    jacobians = read_tensor(entry, root, "point_jacobians").reshape(-1)
    point_faces = read_tensor(entry, root, "point_faces").astype(np.int64)

    out.mkdir(parents=True, exist_ok=True)
    with open(out / "points.csv", "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["x", "y", "z", "nx", "ny", "nz"])
        writer.writerows(
            np.concatenate([positions, normals], axis=-1)
            .reshape(-1, c.CHANNELS)
            .tolist()
        )

    counts, edges = np.histogram(jacobians, bins=HISTOGRAM_BINS)
    histogram = [
        (float(lo), float(hi), int(n))
        for lo, hi, n in zip(edges[:-1], edges[1:], counts, strict=True)
    ]
    with open(out / "jacobians.csv", "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["lower", "upper", "count"])
        writer.writerows(histogram)

    uniformity = unweighted = None
    source_root = input_root or pathlib.Path.cwd()
    source_path = source_root / entry.source
    if source_path.is_file():
        source = load_source(source_path, entry.source, manifest.config)
        _, _, fine = prepare_fine(source, entry.variant, manifest.config)
        uniformity = _uniformity(point_faces, fine)
        if compare:
            plain = run_variant(
                source, entry.variant, manifest.config, selection="uniform"
            )
            unweighted = _uniformity(plain.selected.faces, plain.fine)
    else:
        logger.warning(
            "Source %s not found, skipping uniformity", source_path
        )

    report = InspectReport(
        source=entry.source,
        variant=entry.variant,
        coarse_faces=entry.coarse_faces,
        fine_faces=entry.fine_faces,
        real_patches=tensor.n_real,
        points=len(positions) * entry.k,
        jacobian_mean=float(jacobians.mean()) if jacobians.size else 0.0,
        jacobian_histogram=histogram,
        uniformity=uniformity,
        unweighted=unweighted,
    )
    (out / "uniformity.json").write_text(
        json.dumps(
            {
                "weighted": uniformity and uniformity.model_dump(),
                "unweighted": unweighted and unweighted.model_dump(),
            }
        ),
        encoding="utf-8",
    )
    text = render_report(report)
    (out / "summary.txt").write_text(text, encoding="utf-8")
    return report, text


def _environment() -> jinja2.Environment:
    return jinja2.Environment(
        loader=jinja2.PackageLoader("meshpatch", "templates"),
        lstrip_blocks=True,
        trim_blocks=True,
        keep_trailing_newline=True,
        undefined=jinja2.StrictUndefined,
    )


def render_report(report: InspectReport) -> str:
    template = _environment().get_template("inspect.txt.j2")
    return template.render(report=report)
