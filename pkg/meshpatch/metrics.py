# Copyright DB InfraGO AG and contributors
# SPDX-License-Identifier: Apache-2.0

from __future__ import annotations

import os
import typing as t

import prometheus_client

from meshpatch import simplify

registry = prometheus_client.CollectorRegistry()

jobs_counter = prometheus_client.Counter(
    "meshpatch_jobs",
    "Mesh variants processed, by outcome",
    ["status"],
    registry=registry,
)
collapses_counter = prometheus_client.Counter(
    "meshpatch_collapses",
    "Accepted edge collapses",
    registry=registry,
)
rejections_counter = prometheus_client.Counter(
    "meshpatch_collapse_rejections",
    "Rejected edge collapse candidates, by reason",
    ["reason"],
    registry=registry,
)

JobStatus: t.TypeAlias = t.Literal["ok", "skipped"]


def record_job(
    status: JobStatus,
    *,
    collapses: int = 0,
    rejections: t.Mapping[str, int] | None = None,
) -> None:
    jobs_counter.labels(status=status).inc()
    collapses_counter.inc(collapses)
    for reason in simplify.REJECT_REASONS:
        count = (rejections or {}).get(reason, 0)
        rejections_counter.labels(reason=reason).inc(count)


def sample_value(name: str, **labels: str) -> float:
    """Return the current value of a sample, or 0 if it has none yet."""
    return registry.get_sample_value(name, labels) or 0.0


def write(path: str | os.PathLike[str]) -> None:
    prometheus_client.write_to_textfile(os.fspath(path), registry)
