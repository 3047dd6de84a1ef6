"""Shared fixtures: a canonical camera and tiny analytic meshes."""

import numpy as np
import pytest

from drdf.camera import Camera
from drdf.mesh import TriangleMesh


def make_quad(z, half=2.0, label=0, center=(0.0, 0.0)):
    """Fronto-parallel square at camera depth z (for an identity-pose
    camera, world frame == camera frame: +x right, +y down, +z forward)."""
    cx, cy = center
    verts = np.array(
        [
            [cx - half, cy - half, z],
            [cx + half, cy - half, z],
            [cx + half, cy + half, z],
            [cx - half, cy + half, z],
        ]
    )
    faces = np.array([[0, 1, 2], [0, 2, 3]])
    return TriangleMesh(vertices=verts, faces=faces, face_labels=np.full(2, label, np.int64))


def empty_mesh():
    return TriangleMesh(
        vertices=np.zeros((0, 3)),
        faces=np.zeros((0, 3), np.int64),
        face_labels=np.zeros(0, np.int64),
    )


def random_soup(n_tris, rng, lo=-3.0, hi=3.0, scale=1.0):
    """Triangle soup with corners jittered around random anchor points."""
    anchors = rng.uniform(lo, hi, size=(n_tris, 1, 3))
    corners = anchors + rng.normal(scale=scale, size=(n_tris, 3, 3))
    verts = corners.reshape(-1, 3)
    faces = np.arange(3 * n_tris, dtype=np.int64).reshape(-1, 3)
    return TriangleMesh(vertices=verts, faces=faces, face_labels=np.zeros(n_tris, np.int64))


@pytest.fixture
def cam():
    """128x128 canonical camera at the world origin looking along +z."""
    return Camera(
        width=128, height=128, fov_x=63.4, rotation=np.eye(3), translation=np.zeros(3)
    )
