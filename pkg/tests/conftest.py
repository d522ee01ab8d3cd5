# Copyright DB InfraGO AG and contributors
# SPDX-License-Identifier: Apache-2.0

import pathlib

import numpy as np
import pytest
import trimesh

from meshpatch import mesh, simplify
from meshpatch.mesh import IndexedMesh

TETRAHEDRON_VERTICES = [
    [1.0, 1.0, 1.0],
    [1.0, -1.0, -1.0],
    [-1.0, 1.0, -1.0],
    [-1.0, -1.0, 1.0],
]
TETRAHEDRON_FACES = [[0, 1, 2], [0, 2, 3], [0, 3, 1], [1, 3, 2]]

OCTAHEDRON_VERTICES = [
    [1.0, 0.0, 0.0],
    [-1.0, 0.0, 0.0],
    [0.0, 1.0, 0.0],
    [0.0, -1.0, 0.0],
    [0.0, 0.0, 1.0],
    [0.0, 0.0, -1.0],
]
OCTAHEDRON_FACES = [
    [0, 2, 4],
    [2, 1, 4],
    [1, 3, 4],
    [3, 0, 4],
    [2, 0, 5],
    [1, 2, 5],
    [3, 1, 5],
    [0, 3, 5],
]


def from_trimesh(shape: trimesh.Trimesh) -> IndexedMesh:
    return IndexedMesh(np.asarray(shape.vertices), np.asarray(shape.faces))


def icosphere_mesh(subdivisions: int) -> IndexedMesh:
    sphere = from_trimesh(trimesh.creation.icosphere(subdivisions))
    normalized, _ = mesh.normalize_unit_box(sphere)
    return normalized


@pytest.fixture(scope="session")
def tetrahedron() -> IndexedMesh:
    return IndexedMesh(TETRAHEDRON_VERTICES, TETRAHEDRON_FACES)


@pytest.fixture(scope="session")
def octahedron() -> IndexedMesh:
    return IndexedMesh(OCTAHEDRON_VERTICES, OCTAHEDRON_FACES)


@pytest.fixture(scope="session")
def small_sphere() -> IndexedMesh:
    """An 80-face icosphere in the unit box."""
    return icosphere_mesh(1)


@pytest.fixture(scope="session")
def sphere() -> IndexedMesh:
    """A 320-face icosphere in the unit box."""
    return icosphere_mesh(2)


@pytest.fixture(scope="session")
def small_trace(small_sphere: IndexedMesh) -> simplify.SimplificationTrace:
    return simplify.simplify_to(small_sphere, 40, seed=7)


@pytest.fixture(scope="session")
def sphere_trace(sphere: IndexedMesh) -> simplify.SimplificationTrace:
    return simplify.simplify_to(sphere, 96, seed=0)


@pytest.fixture
def mesh_dir(tmp_path: pathlib.Path) -> pathlib.Path:
    """A directory holding two valid meshes and one broken one."""
    directory = tmp_path / "meshes"
    (directory / "nested").mkdir(parents=True)
    sphere = from_trimesh(trimesh.creation.icosphere(1))
    (directory / "ball.obj").write_text(
        mesh.write_obj(sphere), encoding="utf-8"
    )
    torus = from_trimesh(trimesh.creation.torus(1.0, 0.4, 10, 6))
    (directory / "nested" / "ring.obj").write_text(
        mesh.write_obj(torus), encoding="utf-8"
    )
    (directory / "broken.off").write_text(
        "OFF\n5 2 0\n0 0 0\n1 0 0\n0 1 0\n-1 0 0\n0 -1 0\n"
        "3 0 1 2\n3 0 3 4\n",
        encoding="utf-8",
    )
    return directory
