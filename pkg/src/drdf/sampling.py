"""Query-ray generation and along-ray depth sampling for training and
inference.

Training supervises depths drawn mostly from Gaussians centered on the
ray's surface intersections (so the loss concentrates where the field
changes sign) plus a uniform remainder that keeps empty space supervised.
Inference uses a regular pixel grid with uniformly spaced depths.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .camera import Camera, Ray, pixel_center_grid, pixel_ray_directions
from .errors import DegenerateSceneError, NoSurfaceError
from .field import RayField, TransformParams, drdf_values, transform_log_trunc
from .mesh import TriangleMesh, cast_rays

_MAX_REJECT_ROUNDS = 50  # per-sample redraws before clamping into range
_MAX_RESAMPLE_ROUNDS = 100  # ray redraw rounds before declaring degenerate


@dataclass(frozen=True)
class SamplingConfig:
    rays_per_image: int = 80
    points_per_ray: int = 512
    gaussian_sigma: float = 0.15
    gaussian_fraction: float = 0.75
    z_max: float = 8.0
    rng_seed: int = 0

    def __post_init__(self):
        if self.rays_per_image < 1 or self.points_per_ray < 1:
            raise ValueError("counts must be >= 1")
        if self.gaussian_sigma <= 0.0:
            raise ValueError("gaussian_sigma must be positive")
        if not (0.0 <= self.gaussian_fraction <= 1.0):
            raise ValueError("gaussian_fraction must lie in [0, 1]")
        if self.z_max <= 0.0:
            raise ValueError("z_max must be positive")


@dataclass(frozen=True)
class TrainBatch:
    """Flat per-sample training records.

    ``source`` indexes into ``view_indices`` (the batch's own view list);
    every x lies on the ray from its source camera through its pixel, and
    targets are transformed field values in [-1, 1].
    """

    view_indices: np.ndarray  # (N,) indices into the caller's camera list
    x: np.ndarray  # (M, 3) world points
    r_q: np.ndarray  # (M, 3) unit query-ray directions
    source: np.ndarray  # (M,) local view index of the query ray
    target: np.ndarray  # (M,)

    def __len__(self) -> int:
        return len(self.target)


def sample_rays(cam: Camera, n: int, rng: np.random.Generator, source_camera: int = 0):
    """n query rays through uniformly random sub-pixel locations."""
    if n < 1:
        raise ValueError("n must be >= 1")
    u = rng.uniform(0.0, cam.width, size=n)
    v = rng.uniform(0.0, cam.height, size=n)
    pixels = np.stack([u, v], axis=-1)
    dirs = pixel_ray_directions(cam, pixels)
    origin = cam.center
    return [
        Ray(origin=origin, direction=dirs[i], source_camera=source_camera, pixel=(u[i], v[i]))
        for i in range(n)
    ]


def grid_rays(cam: Camera, g: int, source_camera: int = 0):
    """g x g inference rays through pixel centers of a regular tiling."""
    pixels = pixel_center_grid(cam.width, cam.height, g)
    dirs = pixel_ray_directions(cam, pixels)
    origin = cam.center
    return [
        Ray(origin=origin, direction=dirs[i], source_camera=source_camera, pixel=tuple(pixels[i]))
        for i in range(len(pixels))
    ]


def sample_points_uniform(ray: Ray, n: int, z_max: float) -> np.ndarray:
    """Depths z_k = k * z_max / (n - 1) along the ray."""
    if n < 2:
        raise ValueError("need n >= 2")
    return np.arange(n, dtype=np.float64) * (z_max / (n - 1))


def _gaussian_depths(intersections, n, sigma, z_max, rng):
    """n depths from an equal-weight mixture of Normals at the
    intersections, redrawn while outside [0, z_max] then clamped."""
    s = np.asarray(intersections, dtype=np.float64)
    modes = rng.integers(0, len(s), size=n)
    z = rng.normal(loc=s[modes], scale=sigma)
    bad = (z < 0.0) | (z > z_max)
    for _ in range(_MAX_REJECT_ROUNDS):
        if not bad.any():
            break
        z[bad] = rng.normal(loc=s[modes[bad]], scale=sigma)
        bad = (z < 0.0) | (z > z_max)
    return np.clip(z, 0.0, z_max)


def sample_points_gaussian(
    field: RayField, n: int, cfg: SamplingConfig, rng: np.random.Generator
) -> np.ndarray:
    """ceil(gaussian_fraction * n) mixture-of-Normals depths plus a uniform
    remainder on [0, z_max], sorted ascending."""
    if not field.has_surface:
        raise NoSurfaceError("cannot sample near intersections of an empty ray")
    if n < 1:
        raise ValueError("n must be >= 1")
    n_gauss = math.ceil(cfg.gaussian_fraction * n)
    parts = []
    if n_gauss:
        parts.append(_gaussian_depths(field.intersections, n_gauss, cfg.gaussian_sigma, cfg.z_max, rng))
    if n - n_gauss:
        parts.append(rng.uniform(0.0, cfg.z_max, size=n - n_gauss))
    return np.sort(np.concatenate(parts))


def build_training_batch(
    scene: TriangleMesh,
    cameras,
    cfg: SamplingConfig,
    rng: np.random.Generator,
    transform: TransformParams = TransformParams(),
    n_views: int | None = None,
) -> TrainBatch:
    """Assemble one training batch.

    Picks N in {1, 2, 3} uniformly (capped by available views, or forced
    via ``n_views``), draws random rays per view until each has its quota
    of surface-hitting rays, then samples depths near intersections and
    computes transformed targets.  Rays that hit nothing carry no defined
    field value and are excluded from supervision.
    """
    cameras = list(cameras)
    if not cameras:
        raise ValueError("need at least one camera")
    if n_views is None:
        n_views = int(rng.integers(1, min(3, len(cameras)) + 1))
    if not (1 <= n_views <= len(cameras)):
        raise ValueError("n_views out of range")
    view_idx = np.sort(rng.choice(len(cameras), size=n_views, replace=False))

    xs, rqs, srcs, targets = [], [], [], []
    total_hit_rays = 0
    for local, vi in enumerate(view_idx):
        cam = cameras[vi]
        origin = cam.center
        kept_dirs = []
        need = cfg.rays_per_image
        for _ in range(_MAX_RESAMPLE_ROUNDS):
            if need <= 0:
                break
            u = rng.uniform(0.0, cam.width, size=need)
            v = rng.uniform(0.0, cam.height, size=need)
            dirs = pixel_ray_directions(cam, np.stack([u, v], axis=-1))
            hits = cast_rays(scene, np.broadcast_to(origin, dirs.shape), dirs)
            for i in range(len(dirs)):
                t, _ = hits.for_ray(i)
                t = t[t <= cfg.z_max]
                if t.size:
                    kept_dirs.append((dirs[i], t))
            need = cfg.rays_per_image - len(kept_dirs)
        total_hit_rays += len(kept_dirs)
        for d, t in kept_dirs:
            z = _gaussian_depths(t, _gauss_count(cfg), cfg.gaussian_sigma, cfg.z_max, rng)
            n_uni = cfg.points_per_ray - len(z)
            if n_uni:
                z = np.concatenate([z, rng.uniform(0.0, cfg.z_max, size=n_uni)])
            z = np.sort(z)
            xs.append(origin + z[:, None] * d)
            rqs.append(np.broadcast_to(d, (len(z), 3)))
            srcs.append(np.full(len(z), local, dtype=np.int64))
            targets.append(transform_log_trunc(drdf_values(t, z), transform))

    if total_hit_rays == 0:
        raise DegenerateSceneError("no sampled ray hit any surface")
    return TrainBatch(
        view_indices=view_idx.astype(np.int64),
        x=np.concatenate(xs),
        r_q=np.concatenate(rqs),
        source=np.concatenate(srcs),
        target=np.concatenate(targets),
    )


def _gauss_count(cfg: SamplingConfig) -> int:
    return math.ceil(cfg.gaussian_fraction * cfg.points_per_ray)
