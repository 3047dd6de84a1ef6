"""The directed ray distance function and surface decoding.

For a query point at distance z along a ray, the field value is s* - z
where s* is the ray intersection nearest to z.  The field is piecewise
linear with slope -1 and crosses zero exactly at surfaces, so decoding is
sign-change detection plus linear interpolation, with no thresholds to
tune.
"""

import os

import numpy as np

from drdf.camera import camera_at, ray_for_pixel
from drdf.datagen import SceneSpec, generate_scene
from drdf.field import (
    TransformParams,
    decode_frustum,
    decode_ray,
    drdf_values,
    mesh_drdf_evaluator,
    transform_log_trunc,
    uniform_depths,
)
from drdf.mesh import intersect_ray
from drdf.sceneio import save_ply

mesh = generate_scene(SceneSpec(seed=11))
lo, hi = mesh.bounds()
cam = camera_at((0.5 * (lo[0] + hi[0]), 1.5, lo[2] + 0.4), yaw=0.0, pitch=-0.05)

# Pick one image ray and look at its exact field.
ray = ray_for_pixel(cam, (70.5, 80.5))
surfaces = intersect_ray(mesh, ray, z_max=8.0)
print(f"ray through pixel (70.5, 80.5) crosses surfaces at {np.round(surfaces, 3)}")

z = uniform_depths(9, z_max=8.0)
d = drdf_values(surfaces, z)
print("depth z :", np.round(z, 2))
print("field   :", np.round(d, 3))
print("(positive before a surface, negative after, slope -1 in between)")

# The squashing transform keeps training targets in [-1, 1]: logarithmic
# near the surface, saturating at distance tau.
params = TransformParams(tau=1.0)
print("\ntransformed:", np.round(transform_log_trunc(d, params), 3))

# Decoding recovers surfaces from dense samples to machine precision,
# because interpolating a slope -1 line is exact.
z = uniform_depths(256, z_max=8.0)
recovered = decode_ray(z, drdf_values(surfaces, z))
err = np.abs(recovered - surfaces).max() if len(recovered) == len(surfaces) else float("inf")
print(f"\ndecoded {len(recovered)} of {len(surfaces)} surfaces, max error {err:.2e} m")

# A frustum decode runs a grid of rays and stacks the crossings into a
# point cloud, each point tagged with its source camera and a backward
# facing normal estimate.
evaluate = mesh_drdf_evaluator(mesh, z_max=8.0)
cloud = decode_frustum(cam, evaluate, g=64, n_pt=192)
print(f"frustum decode: {len(cloud)} surface points from {64 * 64} rays")

out = os.path.join(os.path.dirname(__file__), "out")
os.makedirs(out, exist_ok=True)
path = os.path.join(out, "gt_field_decode.ply")
save_ply(path, cloud)
print(f"wrote {path} (open in any point-cloud viewer)")
