"""Directed ray distance field: exact ground truth, target transform, and
surface decoding.

For a ray with surface intersections at distances s_1 < ... < s_k, the
directed ray distance at depth z is ``s* - z`` where s* is the intersection
nearest to z (ties go to the camera-nearer one).  The field is piecewise
linear with slope -1 and flips sign exactly at the s_j, so surfaces are the
positive-to-negative zero crossings and linear interpolation between two
bracketing samples recovers an isolated intersection exactly.

Training targets squash the raw distance through an odd, bounded log-space
truncation that preserves zero crossings, so decoding can run directly on
transformed predictions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .camera import Camera, Ray, pixel_center_grid, pixel_ray_directions
from .errors import NoSurfaceError
from .mesh import TriangleMesh, cast_rays


@dataclass(frozen=True)
class RayField:
    """One ray plus its sorted surface intersections within (0, z_max]."""

    ray: Ray
    intersections: np.ndarray  # (k,) strictly increasing
    z_max: float

    def __post_init__(self):
        s = np.asarray(self.intersections, dtype=np.float64).reshape(-1)
        object.__setattr__(self, "intersections", s)
        if self.z_max <= 0.0:
            raise ValueError("z_max must be positive")
        if s.size:
            if (np.diff(s) <= 0.0).any():
                raise ValueError("intersections must be strictly increasing")
            if s[0] <= 0.0 or s[-1] > self.z_max:
                raise ValueError("intersections must lie in (0, z_max]")

    @property
    def has_surface(self) -> bool:
        return self.intersections.size > 0


def ray_field(mesh: TriangleMesh, ray: Ray, z_max: float) -> RayField:
    """Cast one ray and package its intersections."""
    hits = cast_rays(mesh, ray.origin[None], ray.direction[None])
    t, _ = hits.for_ray(0)
    return RayField(ray=ray, intersections=t[t <= z_max].copy(), z_max=z_max)


def drdf_values(intersections: np.ndarray, z) -> np.ndarray:
    """Signed distance along the ray from depth(s) z to the nearest
    intersection, ties toward the smaller depth."""
    s = np.asarray(intersections, dtype=np.float64).reshape(-1)
    if s.size == 0:
        raise NoSurfaceError("ray has no intersections; DRDF undefined")
    z = np.asarray(z, dtype=np.float64)
    mids = 0.5 * (s[:-1] + s[1:])
    idx = np.searchsorted(mids, z, side="left")
    return s[idx] - z


def drdf_gt(field: RayField, z):
    """Ground-truth directed ray distance at depth z (scalar or array)."""
    return drdf_values(field.intersections, z)


@dataclass(frozen=True)
class TransformParams:
    """Log-space truncation of raw distances.  ``normalize`` scales the
    output by 1/ln(1+tau) so it saturates at exactly +-1."""

    tau: float = 1.0
    normalize: bool = True

    def __post_init__(self):
        if self.tau <= 0.0:
            raise ValueError("tau must be positive")


def transform_log_trunc(d, params: TransformParams = TransformParams()):
    """sign(d) * min(ln(1+|d|), ln(1+tau)), optionally scaled to [-1, 1].

    Odd, monotone, zero-crossing preserving; |T| saturates for |d| >= tau.
    """
    d = np.asarray(d, dtype=np.float64)
    cap = np.log1p(params.tau)
    out = np.sign(d) * np.minimum(np.log1p(np.abs(d)), cap)
    if params.normalize:
        out = out / cap
    return out


def uniform_depths(n: int, z_max: float) -> np.ndarray:
    """n depths z_k = k * z_max / (n - 1), inclusive of both 0 and z_max."""
    if n < 2:
        raise ValueError("need at least 2 depths")
    return np.arange(n, dtype=np.float64) * (z_max / (n - 1))


def _crossings_rows(z: np.ndarray, values: np.ndarray):
    """Positive-to-nonpositive crossings per row of ``values`` sampled at
    shared depths ``z``.  Returns (row_index, depth) arrays.  NaN samples
    never participate in a crossing."""
    v = values
    lead = v[:, :-1]
    trail = v[:, 1:]
    cross = (lead > 0.0) & (trail <= 0.0)
    rows, cols = np.nonzero(cross)
    vk = lead[rows, cols]
    vk1 = trail[rows, cols]
    zk = z[cols]
    depth = zk + vk * (z[cols + 1] - zk) / (vk - vk1)
    return rows, depth


def decode_zero_crossings(samples) -> np.ndarray:
    """Surface depths from ordered (z, value) samples along one ray.

    A surface sits at every adjacent pair with value_k > 0 >= value_{k+1},
    located by linear interpolation; a value exactly zero at a sample emits
    that sample's depth once.  Negative-to-positive crossings are not
    surfaces.  Raises ValueError if depths are unsorted.
    """
    arr = np.asarray(samples, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 2 or arr.shape[0] < 2:
        raise ValueError("expected an (n >= 2, 2) array of (z, value) samples")
    z, v = arr[:, 0], arr[:, 1]
    if (np.diff(z) < 0.0).any():
        raise ValueError("samples must be sorted by z")
    _, depth = _crossings_rows(z, v[None, :])
    return depth


def decode_ray(z, values) -> np.ndarray:
    """`decode_zero_crossings` on separate depth/value arrays."""
    z = np.asarray(z, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    return decode_zero_crossings(np.stack([z, values], axis=-1))


@dataclass(frozen=True)
class PointCloud:
    """Points with unit normals and a provenance camera index per point
    (-1 where no single camera owns the point)."""

    points: np.ndarray  # (N, 3)
    normals: np.ndarray  # (N, 3)
    camera: np.ndarray  # (N,) int64

    def __post_init__(self):
        p = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        n = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)
        c = np.asarray(self.camera, dtype=np.int64).reshape(-1)
        if not (len(p) == len(n) == len(c)):
            raise ValueError("points, normals, camera must have equal lengths")
        object.__setattr__(self, "points", p)
        object.__setattr__(self, "normals", n)
        object.__setattr__(self, "camera", c)

    def __len__(self) -> int:
        return len(self.points)


def empty_cloud() -> PointCloud:
    return PointCloud(np.empty((0, 3)), np.empty((0, 3)), np.empty(0, np.int64))


def concat_clouds(clouds) -> PointCloud:
    clouds = list(clouds)
    if not clouds:
        return empty_cloud()
    return PointCloud(
        np.concatenate([c.points for c in clouds]),
        np.concatenate([c.normals for c in clouds]),
        np.concatenate([c.camera for c in clouds]),
    )


def mesh_drdf_evaluator(mesh: TriangleMesh, z_max: float):
    """Evaluator over ray batches returning exact ground-truth distances;
    rays that hit nothing yield NaN rows (skipped by decoding)."""

    def evaluate(origins, directions, z):
        origins = np.atleast_2d(origins)
        directions = np.atleast_2d(directions)
        hits = cast_rays(mesh, origins, directions)
        out = np.full((len(origins), len(z)), np.nan)
        for i in range(len(origins)):
            t, _ = hits.for_ray(i)
            t = t[t <= z_max]
            if t.size:
                out[i] = drdf_values(t, z)
        return out

    return evaluate


def decode_frustum(
    cam: Camera,
    evaluate,
    g: int,
    n_pt: int,
    z_max: float | None = None,
    source_camera: int = 0,
) -> PointCloud:
    """Decode surfaces along a g x g grid of query rays.

    ``evaluate(origins, directions, z) -> (rays, len(z))`` supplies field
    values (ground truth or model predictions, raw or transformed; only
    sign structure matters).  Decoded depths become world points tagged
    with the source camera; normals face back along the ray.
    """
    if z_max is None:
        z_max = cam.far
    pixels = pixel_center_grid(cam.width, cam.height, g)
    dirs = pixel_ray_directions(cam, pixels)
    origins = np.broadcast_to(cam.center, dirs.shape)
    z = uniform_depths(n_pt, z_max)
    values = np.asarray(evaluate(origins, dirs, z), dtype=np.float64)
    if values.shape != (len(dirs), n_pt):
        raise ValueError("evaluator returned wrong shape")
    rows, depth = _crossings_rows(z, values)
    points = origins[rows] + depth[:, None] * dirs[rows]
    return PointCloud(
        points=points,
        normals=-dirs[rows],
        camera=np.full(len(rows), source_camera, dtype=np.int64),
    )
