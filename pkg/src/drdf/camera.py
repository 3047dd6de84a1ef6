"""Pinhole cameras, projection, and query rays.

Conventions (OpenCV-style):
  camera frame: +x right, +y down, +z forward along the optical axis
  pixel (u, v): u grows right, v grows down, origin at the top-left corner
  pose: world -> camera, ``x_cam = R @ x_world + t``

The principal point sits at the image center and pixels are square, so a
single horizontal field of view fixes the focal length.  Two different
"depth" quantities appear throughout the package and must not be confused:

  * camera depth: the z coordinate of a point in the camera frame
    (what `project` returns and `unproject` consumes), and
  * ray distance: Euclidean distance along a unit ray from the camera
    center (what ray casting and the distance field use).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

_TINY_Z = 1e-12


@dataclass(frozen=True)
class Camera:
    """Pinhole camera with a rigid world->camera pose.

    ``rotation`` must be orthonormal with determinant +1; ``near``/``far``
    bound the usable depth range in camera-z.
    """

    width: int
    height: int
    fov_x: float  # horizontal field of view, degrees
    rotation: np.ndarray  # (3, 3) world -> camera
    translation: np.ndarray  # (3,) world -> camera
    near: float = 0.0
    far: float = 8.0

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)
        if self.width < 1 or self.height < 1:
            raise ValueError("image dimensions must be positive")
        if not (0.0 < self.fov_x < 180.0):
            raise ValueError(f"fov_x must lie in (0, 180), got {self.fov_x}")
        if not (0.0 <= self.near < self.far):
            raise ValueError(f"need 0 <= near < far, got near={self.near} far={self.far}")
        err = np.abs(R.T @ R - np.eye(3)).max()
        if err >= 1e-9:
            raise ValueError(f"rotation is not orthonormal (|R^T R - I|_inf = {err:.2e})")
        if np.linalg.det(R) < 0.0:
            raise ValueError("rotation must have determinant +1")

    @property
    def focal(self) -> float:
        return (self.width / 2.0) / np.tan(np.deg2rad(self.fov_x) / 2.0)

    @property
    def cx(self) -> float:
        return self.width / 2.0

    @property
    def cy(self) -> float:
        return self.height / 2.0

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation

    def world_to_cam(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        return x @ self.rotation.T + self.translation

    def cam_to_world(self, x_cam: np.ndarray) -> np.ndarray:
        x_cam = np.asarray(x_cam, dtype=np.float64)
        return (x_cam - self.translation) @ self.rotation


@dataclass(frozen=True)
class Ray:
    """A single query ray: unit direction from an origin, tagged with its
    source camera index and the continuous pixel it passes through."""

    origin: np.ndarray  # (3,)
    direction: np.ndarray  # (3,), unit norm
    source_camera: int = 0
    pixel: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        o = np.asarray(self.origin, dtype=np.float64).reshape(3)
        d = np.asarray(self.direction, dtype=np.float64).reshape(3)
        object.__setattr__(self, "origin", o)
        object.__setattr__(self, "direction", d)
        n = np.linalg.norm(d)
        if abs(n - 1.0) > 1e-9:
            raise ValueError(f"ray direction must be unit length (|d| = {n})")

    def point_at(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=np.float64)
        return self.origin + t[..., None] * self.direction


@dataclass(frozen=True)
class Projection:
    """Result of projecting world points: continuous pixels, camera depth,
    and an in-frustum flag (pixel in bounds and near <= depth <= far)."""

    pixel: np.ndarray  # (..., 2)
    depth: np.ndarray  # (...,) camera-z
    in_frustum: np.ndarray  # (...,) bool


def project(cam: Camera, x: np.ndarray) -> Projection:
    """Project world points into the image.

    Points with non-positive camera depth get the in-frustum flag cleared;
    their pixel values are finite but meaningless.
    """
    x = np.asarray(x, dtype=np.float64)
    x_cam = cam.world_to_cam(x)
    z = x_cam[..., 2]
    safe_z = np.where(np.abs(z) < _TINY_Z, _TINY_Z, z)
    u = cam.focal * x_cam[..., 0] / safe_z + cam.cx
    v = cam.focal * x_cam[..., 1] / safe_z + cam.cy
    ok = (
        (z > 0.0)
        & (z >= cam.near)
        & (z <= cam.far)
        & (u >= 0.0)
        & (u < cam.width)
        & (v >= 0.0)
        & (v < cam.height)
    )
    return Projection(pixel=np.stack([u, v], axis=-1), depth=z, in_frustum=ok)


def unproject(cam: Camera, pixel: np.ndarray, depth: np.ndarray) -> np.ndarray:
    """Invert `project`: pixel + camera depth -> world point.  depth > 0."""
    pixel = np.asarray(pixel, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64)
    if np.any(depth <= 0.0):
        raise ValueError("unproject requires positive depth")
    xc = (pixel[..., 0] - cam.cx) * depth / cam.focal
    yc = (pixel[..., 1] - cam.cy) * depth / cam.focal
    x_cam = np.stack([xc, yc, depth], axis=-1)
    return cam.cam_to_world(x_cam)


def ndc(cam: Camera, x: np.ndarray) -> np.ndarray:
    """Normalized device coordinates: pixel mapped to [-1, 1]^2 and camera
    depth mapped linearly so near -> -1 and far -> +1.  Every component lies
    in [-1, 1] exactly when the point is in the frustum."""
    proj = project(cam, x)
    nx = 2.0 * proj.pixel[..., 0] / cam.width - 1.0
    ny = 2.0 * proj.pixel[..., 1] / cam.height - 1.0
    nz = 2.0 * (proj.depth - cam.near) / (cam.far - cam.near) - 1.0
    return np.stack([nx, ny, nz], axis=-1)


def pixel_ray_directions(cam: Camera, pixels: np.ndarray) -> np.ndarray:
    """World-frame unit directions through continuous pixel coordinates."""
    pixels = np.asarray(pixels, dtype=np.float64)
    dx = (pixels[..., 0] - cam.cx) / cam.focal
    dy = (pixels[..., 1] - cam.cy) / cam.focal
    d_cam = np.stack([dx, dy, np.ones_like(dx)], axis=-1)
    d_cam /= np.linalg.norm(d_cam, axis=-1, keepdims=True)
    return d_cam @ cam.rotation

def ray_for_pixel(cam: Camera, pixel, source_camera: int = 0) -> Ray:
    """The query ray from the camera center through a pixel."""
    d = pixel_ray_directions(cam, np.asarray(pixel, dtype=np.float64))
    return Ray(
        origin=cam.center,
        direction=d,
        source_camera=source_camera,
        pixel=(float(pixel[0]), float(pixel[1])),
    )


def in_frustum(cam: Camera, x: np.ndarray, z_max: float) -> np.ndarray:
    """True where a point projects inside the image with 0 < depth <= z_max
    (and inside the camera's near/far range)."""
    proj = project(cam, x)
    return proj.in_frustum & (proj.depth <= z_max)


def pixel_center_grid(width: int, height: int, g: int) -> np.ndarray:
    """(g*g, 2) pixel coordinates at the centers of a g x g tiling of the
    image, u varying fastest."""
    us = (np.arange(g) + 0.5) * (width / g)
    vs = (np.arange(g) + 0.5) * (height / g)
    uu, vv = np.meshgrid(us, vs)
    return np.stack([uu.ravel(), vv.ravel()], axis=-1)


def look_at_rotation(forward) -> np.ndarray:
    """World-to-camera rotation for a roll-free camera looking along
    ``forward`` in a y-up world."""
    f = np.asarray(forward, dtype=np.float64)
    f = f / np.linalg.norm(f)
    down = np.array([0.0, -1.0, 0.0])
    right = np.cross(down, f)
    nr = np.linalg.norm(right)
    if nr < 1e-9:
        raise ValueError("camera cannot look straight up or down")
    right /= nr
    down = np.cross(f, right)
    return np.stack([right, down, f])


def camera_at(
    position,
    yaw: float,
    pitch: float,
    width: int = 128,
    height: int = 128,
    fov_x: float = 63.4,
    near: float = 0.0,
    far: float = 8.0,
) -> Camera:
    """Camera at a world position with heading yaw (about +y, 0 = +z) and
    pitch (negative looks down)."""
    cp, sp = np.cos(pitch), np.sin(pitch)
    forward = np.array([cp * np.sin(yaw), sp, cp * np.cos(yaw)])
    R = look_at_rotation(forward)
    t = -R @ np.asarray(position, dtype=np.float64)
    return Camera(width=width, height=height, fov_x=fov_x, rotation=R, translation=t, near=near, far=far)


def rigid_transform_camera(cam: Camera, Q: np.ndarray, u: np.ndarray) -> Camera:
    """Camera observing a scene moved by x' = Q x + u such that every world
    point keeps its original camera-frame coordinates."""
    Q = np.asarray(Q, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    R_new = cam.rotation @ Q.T
    t_new = cam.translation - R_new @ u
    return Camera(
        width=cam.width,
        height=cam.height,
        fov_x=cam.fov_x,
        rotation=R_new,
        translation=t_new,
        near=cam.near,
        far=cam.far,
    )
