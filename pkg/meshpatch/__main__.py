# Copyright DB InfraGO AG and contributors
# SPDX-License-Identifier: Apache-2.0
"""Command line interface for the preprocessing pipeline."""

from __future__ import annotations

import json
import logging
import logging.config
import pathlib
import typing as t

import click
import pydantic as p

import meshpatch
import meshpatch.constants as c
from meshpatch import pipeline, verify

logger = logging.getLogger(__name__)


def _log_config(
    *,
    log_logfmt: bool,
    log_level: str,
    log_file: str | None,
    raw_log_config: str | None,
) -> dict[str, t.Any]:
    if raw_log_config:
        return json.loads(raw_log_config)

    if not log_file:
        handler = {
            "class": "logging.StreamHandler",
            "stream": "ext://sys.stderr",
            "formatter": "default",
        }
    else:
        handler = {
            "class": "logging.FileHandler",
            "filename": log_file,
            "formatter": "default",
        }

    if log_logfmt:
        formatter = {
            "()": "meshpatch.core.Logfmter",
            "keys": [
                "at",
                "logger",
                "msg",
                "source",
                "variant",
                "faces",
                "elapsed",
            ],
            "mapping": {
                "at": "levelname",
                "logger": "name",
            },
        }
    else:
        formatter = {
            "format": "%(asctime)s.%(msecs)03d <%(name)s> %(levelname)s: %(message)s",
        }

    return {
        "version": 1,
        "disable_existing_loggers": False,
        "formatters": {"default": formatter},
        "handlers": {"default": handler},
        "loggers": {
            "": {"level": log_level, "handlers": ["default"]},
        },
    }


@click.group()
@click.option(
    "--log-logfmt / --log-no-logfmt",
    envvar="MESHPATCH_LOGFMT",
    default=True,
    help="Use the logfmt output format for logging",
)
@click.option(
    "--log-level",
    envvar="MESHPATCH_LOG_LEVEL",
    default="INFO",
    type=click.Choice(
        ["DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"],
        case_sensitive=False,
    ),
)
@click.option(
    "--log-file",
    envvar="MESHPATCH_LOG_FILE",
    type=click.Path(dir_okay=False),
    help="Log to this file instead of stderr",
)
@click.option(
    "--log-config",
    "raw_log_config",
    envvar="MESHPATCH_LOG_CONFIG",
    default=None,
    help=(
        "A JSON-encoded log config dictionary, "
        "as understood by 'logging.config.dictConfig()'. "
        "If passed, other '--log-*' arguments are ignored."
    ),
)
@click.version_option(
    version=meshpatch.__version__,
    prog_name="meshpatch",
    message="%(prog)s %(version)s",
)
@click.pass_context
def main(
    ctx: click.Context,
    /,
    *,
    log_logfmt: bool,
    log_level: str,
    log_file: str | None,
    raw_log_config: str | None,
) -> None:
    """Turn triangle meshes into patch tensors for vision transformers."""
    obj = ctx.ensure_object(dict)
    obj["log_config"] = _log_config(
        log_logfmt=log_logfmt,
        log_level=log_level.upper(),
        log_file=log_file,
        raw_log_config=raw_log_config,
    )
    logging.config.dictConfig(obj["log_config"])


def _target_faces(
    ctx: click.Context, param: click.Parameter, value: str | None
) -> tuple[int, int] | None:
    if value is None:
        return None
    try:
        return pipeline.parse_target_faces(value)
    except ValueError as err:
        raise click.BadParameter(str(err), ctx=ctx, param=param) from None


def pipeline_options(f: t.Callable[..., t.Any]) -> t.Callable[..., t.Any]:
    """Attach the flags mirroring `pipeline.PipelineConfig`."""
    options = [
        click.option(
            "--config",
            "config_file",
            envvar="MESHPATCH_CONFIG",
            type=click.Path(exists=True, dir_okay=False),
            help="JSON or YAML config file; flags take precedence.",
        ),
        click.option(
            "--profile",
            type=click.Choice(["cls", "seg"]),
            help="Task profile, sets the default points per unit.",
        ),
        click.option(
            "--target-faces",
            callback=_target_faces,
            metavar="MIN[:MAX]",
            help="Coarse face count or range.",
        ),
        click.option("--subdiv", "subdivision_levels", type=int),
        click.option("--strata", "strata_levels", type=int),
        click.option("--select", "k", type=int, help="Points per unit."),
        click.option("--variants", type=int),
        click.option("--patch-budget", type=int),
        click.option("--seed", type=int),
        click.option(
            "--selection",
            type=click.Choice(["distortion", "uniform", "barycenter"]),
        ),
        click.option(
            "--boundary-mode", type=click.Choice(["circle", "conformal"])
        ),
        click.option(
            "--jacobian-source",
            type=click.Choice(["stratum", "voronoi"]),
            help="Estimate distortion from mapped strata or Voronoi areas.",
        ),
        click.option("--augment/--no-augment", default=None),
        click.option("--repair/--no-repair", default=None),
        click.option(
            "--voronoi-on-subdivided/--voronoi-on-coarse", default=None
        ),
        click.option("--smooth-normals/--face-normals", default=None),
        click.option("--save-traces/--no-save-traces", default=None),
        click.option(
            "-o",
            "--out",
            required=True,
            type=click.Path(file_okay=False, path_type=pathlib.Path),
            help="Export directory.",
        ),
    ]
    for option in reversed(options):
        f = option(f)
    return f


def _config(
    config_file: str | None, **overrides: t.Any
) -> pipeline.PipelineConfig:
    try:
        return pipeline.load_config(config_file, **overrides)
    except (p.ValidationError, ValueError) as err:
        raise click.UsageError(f"Invalid configuration: {err}") from None


@main.command()
@click.argument(
    "mesh_file",
    type=click.Path(exists=True, dir_okay=False, path_type=pathlib.Path),
)
@pipeline_options
def prep(
    mesh_file: pathlib.Path,
    config_file: str | None,
    out: pathlib.Path,
    **overrides: t.Any,
) -> None:
    """Export all variants of a single mesh."""
    config = _config(config_file, **overrides)
    manifest = pipeline.prep(mesh_file, config, out)
    click.echo(
        f"{len(manifest.entries)} variants exported,"
        f" {len(manifest.skipped)} skipped"
    )


@main.command()
@click.argument(
    "directory",
    type=click.Path(exists=True, file_okay=False, path_type=pathlib.Path),
)
@click.option(
    "-j",
    "--jobs",
    envvar="MESHPATCH_JOBS",
    type=click.IntRange(min=1),
    default=c.Defaults.jobs,
    show_default=True,
    help="Number of parallel worker processes.",
)
@pipeline_options
def batch(
    directory: pathlib.Path,
    jobs: int,
    config_file: str | None,
    out: pathlib.Path,
    **overrides: t.Any,
) -> None:
    """Export every mesh below a directory."""
    config = _config(config_file, **overrides)
    manifest = pipeline.batch(directory, config, out, jobs=jobs)
    click.echo(
        f"{len(manifest.entries)} variants exported,"
        f" {len(manifest.skipped)} skipped"
    )


@main.command()
@click.argument(
    "manifest",
    type=click.Path(exists=True, path_type=pathlib.Path),
)
@click.argument("entry", default="0")
@click.option(
    "-o",
    "--out",
    type=click.Path(file_okay=False, path_type=pathlib.Path),
    default=pathlib.Path("inspect"),
    show_default=True,
    help="Directory for the CSV and JSON outputs.",
)
@click.option(
    "--input-root",
    type=click.Path(exists=True, file_okay=False, path_type=pathlib.Path),
    help="Directory the manifest's source paths are relative to.",
)
@click.option(
    "--compare",
    is_flag=True,
    help="Also compute the statistic for unweighted selection.",
)
def inspect(
    manifest: pathlib.Path,
    entry: str,
    out: pathlib.Path,
    input_root: pathlib.Path | None,
    compare: bool,
) -> None:
    """Summarize one exported variant.

    ENTRY is an index or SOURCE[:VARIANT].
    """
    try:
        _, text = pipeline.inspect(
            manifest, entry, out, input_root=input_root, compare=compare
        )
    except (pipeline.EntryNotFound, pipeline.ManifestError) as err:
        raise click.UsageError(str(err)) from None
    click.echo(text, nl=False)


@main.command("verify")
@click.option(
    "--manifest",
    type=click.Path(exists=True, path_type=pathlib.Path),
    help="Check an export's blobs instead of running the suite.",
)
@click.option(
    "--seed",
    "seeds",
    type=int,
    multiple=True,
    help="Trial seed, may be repeated.",
)
@click.option("--meshes", type=click.IntRange(1, 10), default=10)
@click.option(
    "--mesh",
    "paths",
    type=click.Path(exists=True, dir_okay=False, path_type=pathlib.Path),
    multiple=True,
    help="Additional mesh to include, may be repeated.",
)
@click.option(
    "--corrupt",
    is_flag=True,
    help="Corrupt the traces used by the round-trip check.",
)
@click.option(
    "-o",
    "--out",
    type=click.Path(dir_okay=False, path_type=pathlib.Path),
    help="Write the JSON report to this file instead of stdout.",
)
def verify_cmd(
    manifest: pathlib.Path | None,
    seeds: tuple[int, ...],
    meshes: int,
    paths: tuple[pathlib.Path, ...],
    corrupt: bool,
    out: pathlib.Path | None,
) -> None:
    """Run the acceptance suite and report every check."""
    if manifest is not None:
        loaded = pipeline.load_manifest(manifest)
        root = manifest if manifest.is_dir() else manifest.parent
        problems = pipeline.verify_manifest(loaded, root)
        text = json.dumps({"passed": not problems, "problems": problems})
    else:
        config = verify.SuiteConfig(
            seeds=list(seeds) or [0, 1],
            meshes=meshes,
            paths=list(paths),
            corrupt=corrupt,
        )
        report = verify.run_suite(config)
        text = json.dumps(
            {"passed": report.passed, **report.model_dump(mode="json")},
            indent=2,
        )

    if out is None:
        click.echo(text)
    else:
        out.write_text(text + "\n", encoding="utf-8")


if __name__ == "__main__":
    main()
