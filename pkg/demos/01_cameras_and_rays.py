"""Cameras: projection, unprojection, pixel rays, and frustum tests.

The camera model is a pinhole with x right, y down, z forward.  World
coordinates are y-up, so a camera standing in a scene maps world +y to
image -v.  Everything below is exact geometry, no learning.
"""

import numpy as np

from drdf.camera import (
    Camera,
    camera_at,
    in_frustum,
    ndc,
    pixel_ray_directions,
    project,
    ray_for_pixel,
    unproject,
)

# A canonical camera: 128x128 pixels, 63.4 degree horizontal field of view,
# stationed at the origin looking along +z.
cam = Camera(width=128, height=128, fov_x=63.4, rotation=np.eye(3), translation=np.zeros(3))
print(f"focal length: {cam.focal:.4f} px")

# Project a few world points.  The optical axis lands on the image center.
pts = np.array([
    [0.0, 0.0, 4.0],    # straight ahead
    [1.0, 0.0, 4.0],    # one meter to the right
    [0.0, -1.0, 4.0],   # one meter up (y-down image axis)
    [0.0, 0.0, -1.0],   # behind the camera
])
proj = project(cam, pts)
for p, (u, v), d, ok in zip(pts, proj.pixel, proj.depth, proj.in_frustum):
    print(f"  {p} -> (u={u:7.2f}, v={v:7.2f}) depth={d:5.2f} in_frustum={ok}")

# Unprojection inverts projection at a given depth.
u, v = 96.0, 32.0
x = unproject(cam, np.array([[u, v]]), np.array([3.0]))[0]
back = project(cam, x[None])
print(f"unproject(u={u}, v={v}, depth=3) = {np.round(x, 4)}; reprojects to "
      f"({back.pixel[0, 0]:.6f}, {back.pixel[0, 1]:.6f})")

# Rays through pixels are unit vectors from the camera center.
ray = ray_for_pixel(cam, (64.0, 64.0))
print(f"central ray direction: {np.round(ray.direction, 6)} "
      f"(|d| = {np.linalg.norm(ray.direction):.6f})")
corners = np.array([[0.5, 0.5], [127.5, 0.5], [0.5, 127.5], [127.5, 127.5]])
dirs = pixel_ray_directions(cam, corners)
print(f"corner ray directions, all unit: "
      f"{np.allclose(np.linalg.norm(dirs, axis=-1), 1.0)}")

# A posed camera: position, yaw (about world y), pitch.  ndc maps points
# into the [-1, 1]^3 frustum cube the network consumes.
posed = camera_at(position=(2.0, 1.5, -1.0), yaw=0.3, pitch=-0.1)
world = posed.center + 3.0 * posed.rotation[2]  # 3 m along the look axis
coords = ndc(posed, world[None])
print(f"point 3m along the look axis: ndc = {np.round(coords[0], 4)}")
print(f"in_frustum: {in_frustum(posed, world[None], z_max=8.0)[0]}")

# The frustum test matches |ndc| <= 1 on random points.
rng = np.random.default_rng(0)
sample = rng.uniform(-6, 6, size=(2000, 3))
coords = ndc(posed, sample)
box = (np.abs(coords) <= 1.0).all(axis=-1)
assert np.array_equal(box, in_frustum(posed, sample, z_max=posed.far))
print(f"frustum membership agrees with the ndc box on {len(sample)} random points")
