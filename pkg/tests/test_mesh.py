"""Ray-triangle casting: analytic hits, brute-force equality, dedup, and
rigid invariance."""

import numpy as np
import pytest
from conftest import empty_mesh, make_quad, random_soup

from drdf.camera import Ray
from drdf.mesh import (
    DEDUP_EPS,
    TriangleMesh,
    cast_rays,
    cast_rays_brute,
    first_hits,
    intersect_ray,
    merge_meshes,
    transform_mesh,
)
from drdf.metrics import so3_exp

AXIS_RAY = Ray(origin=np.zeros(3), direction=np.array([0.0, 0.0, 1.0]))


def unit_rows(rng, n):
    d = rng.normal(size=(n, 3))
    return d / np.linalg.norm(d, axis=-1, keepdims=True)


def test_single_quad_hit():
    t = intersect_ray(make_quad(2.0), AXIS_RAY, z_max=8.0)
    assert np.array_equal(t, [2.0])


def test_two_quads_sorted_hits():
    mesh = merge_meshes([make_quad(5.0), make_quad(2.0)])
    t = intersect_ray(mesh, AXIS_RAY, z_max=8.0)
    assert np.array_equal(t, [2.0, 5.0])


def test_z_max_cutoff():
    mesh = merge_meshes([make_quad(2.0), make_quad(7.0)])
    assert np.array_equal(intersect_ray(mesh, AXIS_RAY, z_max=5.0), [2.0])


def test_shared_diagonal_dedups_to_one_hit():
    # the quad's triangles share a diagonal; a ray through it strikes both
    # at identical t and must still report a single intersection
    diag = np.array([0.5, 0.5, 3.0])
    d = diag / np.linalg.norm(diag)
    for direction in (np.array([0.0, 0.0, 1.0]), d):
        t = intersect_ray(make_quad(3.0), Ray(origin=np.zeros(3), direction=direction), 8.0)
        assert len(t) == 1


def test_coincident_quads_merge_within_eps():
    mesh = merge_meshes([make_quad(2.0), make_quad(2.0 + 0.5 * DEDUP_EPS)])
    t = intersect_ray(mesh, AXIS_RAY, z_max=8.0)
    assert len(t) == 1


def test_origin_on_surface_is_not_a_hit():
    # ray starting exactly on a quad must skip the t=0 self-hit
    mesh = merge_meshes([make_quad(0.0), make_quad(4.0)])
    t = intersect_ray(mesh, AXIS_RAY, z_max=8.0)
    assert np.array_equal(t, [4.0])


def test_miss_returns_empty():
    t = intersect_ray(make_quad(2.0, half=0.1, center=(1.0, 1.0)), AXIS_RAY, 8.0)
    assert t.shape == (0,)


def test_degenerate_triangles_rejected():
    verts = np.array([[0.0, 0.0, 2.0], [1.0, 0.0, 2.0], [2.0, 0.0, 2.0]])  # collinear
    with pytest.raises(ValueError):
        TriangleMesh(vertices=verts, faces=np.array([[0, 1, 2]]))


def test_empty_mesh_casts_no_hits():
    hits = cast_rays(empty_mesh(), np.zeros((4, 3)), np.tile([0.0, 0.0, 1.0], (4, 1)))
    assert hits.n_rays == 4
    assert all(hits.for_ray(i)[0].size == 0 for i in range(4))


def test_bvh_equals_brute_exactly():
    rng = np.random.default_rng(42)
    for trial in range(5):
        mesh = random_soup(150, rng)
        origins = rng.uniform(-4, 4, size=(200, 3))
        dirs = unit_rows(rng, 200)
        a = cast_rays(mesh, origins, dirs)
        b = cast_rays_brute(mesh, origins, dirs)
        assert np.array_equal(a.offsets, b.offsets)
        assert np.array_equal(a.t, b.t)  # bitwise: same kernel arithmetic
        assert np.array_equal(a.face, b.face)


def test_axis_aligned_rays_brute_equality():
    # inverse-direction slab tests meet the 0 * inf corner on axis rays
    rng = np.random.default_rng(1)
    mesh = random_soup(100, rng)
    dirs = np.array(
        [[1, 0, 0], [0, 1, 0], [0, 0, 1], [-1, 0, 0], [0, -1, 0], [0, 0, -1]], dtype=np.float64
    )
    origins = rng.uniform(-4, 4, size=(len(dirs), 3))
    a = cast_rays(mesh, origins, dirs)
    b = cast_rays_brute(mesh, origins, dirs)
    assert np.array_equal(a.offsets, b.offsets)
    assert np.array_equal(a.t, b.t) and np.array_equal(a.face, b.face)


def test_hits_sorted_and_positive():
    rng = np.random.default_rng(8)
    mesh = random_soup(120, rng)
    origins = rng.uniform(-3, 3, size=(100, 3))
    hits = cast_rays(mesh, origins, unit_rows(rng, 100))
    for i in range(100):
        t, _ = hits.for_ray(i)
        assert (t > 0).all()
        if t.size > 1:
            assert (np.diff(t) > 0).all()


def test_first_hits_matches_per_ray():
    rng = np.random.default_rng(3)
    mesh = random_soup(80, rng)
    origins = rng.uniform(-3, 3, size=(60, 3))
    dirs = unit_rows(rng, 60)
    t_first, face_first, hit = first_hits(mesh, origins, dirs)
    full = cast_rays(mesh, origins, dirs)
    for i in range(60):
        t, f = full.for_ray(i)
        if t.size:
            assert hit[i] and t_first[i] == t[0] and face_first[i] == f[0]
        else:
            assert not hit[i] and t_first[i] == np.inf and face_first[i] == -1


def test_rigid_invariance_of_intersections():
    rng = np.random.default_rng(17)
    mesh = random_soup(100, rng)
    origins = rng.uniform(-3, 3, size=(50, 3))
    dirs = unit_rows(rng, 50)
    base = cast_rays(mesh, origins, dirs)
    Q = so3_exp(rng.normal(size=3))
    u = rng.normal(size=3) * 2.0
    moved = transform_mesh(mesh, Q, u)
    hits = cast_rays(moved, origins @ Q.T + u, dirs @ Q.T)
    assert np.array_equal(base.offsets, hits.offsets)
    assert np.abs(base.t - hits.t).max() < 1e-9


def test_mesh_validation():
    with pytest.raises(ValueError):
        TriangleMesh(vertices=np.zeros((2, 3)), faces=np.array([[0, 1, 2]]))  # bad index
    with pytest.raises(ValueError):
        TriangleMesh(
            vertices=np.eye(3), faces=np.array([[0, 1, 2]]), face_labels=np.zeros(2, np.int64)
        )


def test_merge_meshes_offsets_faces():
    a, b = make_quad(1.0, label=0), make_quad(2.0, label=5)
    m = merge_meshes([a, b])
    assert m.n_faces == 4 and m.n_vertices == 8
    assert np.array_equal(m.face_labels, [0, 0, 5, 5])
    assert m.faces.max() == 7


def test_face_normals_unit():
    rng = np.random.default_rng(6)
    mesh = random_soup(50, rng)
    n = mesh.face_normals()
    assert np.abs(np.linalg.norm(n, axis=-1) - 1.0).max() < 1e-12
