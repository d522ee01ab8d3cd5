# Copyright DB InfraGO AG and contributors
# SPDX-License-Identifier: Apache-2.0

import pytest

from meshpatch import metrics


def test_record_job_counts_outcomes():
    ok = metrics.sample_value("meshpatch_jobs_total", status="ok")
    collapses = metrics.sample_value("meshpatch_collapses_total")
    flips = metrics.sample_value(
        "meshpatch_collapse_rejections_total", reason="flip"
    )

    metrics.record_job("ok", collapses=12, rejections={"flip": 3, "link": 1})

    assert metrics.sample_value("meshpatch_jobs_total", status="ok") == ok + 1
    assert metrics.sample_value("meshpatch_collapses_total") == collapses + 12
    assert (
        metrics.sample_value(
            "meshpatch_collapse_rejections_total", reason="flip"
        )
        == flips + 3
    )


def test_skipped_jobs_add_no_collapses():
    skipped = metrics.sample_value("meshpatch_jobs_total", status="skipped")
    collapses = metrics.sample_value("meshpatch_collapses_total")

    metrics.record_job("skipped")

    assert (
        metrics.sample_value("meshpatch_jobs_total", status="skipped")
        == skipped + 1
    )
    assert metrics.sample_value("meshpatch_collapses_total") == collapses


def test_unknown_samples_read_as_zero():
    assert metrics.sample_value("meshpatch_nothing_total") == 0


@pytest.mark.parametrize(
    "name",
    [
        "meshpatch_jobs_total",
        "meshpatch_collapses_total",
        "meshpatch_collapse_rejections_total",
    ],
)
def test_write_exposes_the_counters(tmp_path, name):
    metrics.record_job("ok", collapses=1)
    path = tmp_path / "metrics.prom"

    metrics.write(path)

    assert f"# TYPE {name} counter" in path.read_text(encoding="utf-8")
