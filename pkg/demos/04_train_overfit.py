"""Overfit the fusion model to one scene and watch the loss fall.

This is a miniature of the real training loop: two posed views of one
scene, random surface-hitting rays each step, depths concentrated near
surfaces, L1 loss on the squashed field.  Sizes are shrunk so the demo
finishes in about a minute; reconstruction quality needs the full-size
run driven by the command-line tool.
"""

import time

import numpy as np

from drdf.datagen import SceneSpec, generate_scene, render_view, sample_view_set
from drdf.field import decode_frustum
from drdf.metrics import ReconSet, evaluate_run, sample_mesh_cloud
from drdf.model import FusionModel, ModelConfig, frustum_evaluator
from drdf.sampling import SamplingConfig
from drdf.train import TrainConfig, TrainExample, train

rng = np.random.default_rng(5)
mesh = generate_scene(SceneSpec(extent=(5.0, 2.6, 5.0), n_objects=(3, 5), seed=101))
cams = sample_view_set(mesh, 2, np.random.default_rng(7), width=32, height=32)
views = [render_view(mesh, c) for c in cams]
example = TrainExample(mesh=mesh, cameras=cams, images=[v.channels() for v in views])
print(f"scene: {mesh.n_faces} tris; {len(cams)} views at 32x32")

model = FusionModel(ModelConfig(
    d_img=16, d_feat=32, pe_octaves=6, head_hidden=2,
    enc_channels=(8, 8, 16, 16), enc_strides=(1, 2, 1, 2), seed=0,
))
n_params = sum(p.value.size for p in model.params())
print(f"model: {n_params} parameters")

steps = 600
scfg = SamplingConfig(rays_per_image=16, points_per_ray=48, rng_seed=0)
tcfg = TrainConfig(steps=steps, base_lr=1e-3, log_every=100)
t0 = time.time()
result = train(model, [example], scfg, tcfg, rng,
               on_log=lambda s, lr, L: print(f"  step {s:4d}  lr {lr:.1e}  loss {L:.4f}"))
print(f"{steps} steps in {time.time() - t0:.1f}s")

# one curve row per log event: (step, lr, mean loss since the last log)
first, last = result.curve[0, 2], result.curve[-1, 2]
print(f"logged loss: {first:.4f} (step {int(result.curve[0, 0])}) -> "
      f"{last:.4f} (step {int(result.curve[-1, 0])})")

# Decode each camera frustum with the trained model and score the clouds.
grids = [model.encode(v.channels())[0] for v in views]
clouds = []
for i, cam in enumerate(cams):
    evaluate = frustum_evaluator(model, grids, cams, i, chunk_rays=64)
    clouds.append(decode_frustum(cam, evaluate, g=24, n_pt=128, source_camera=i))
gt = sample_mesh_cloud(mesh, 10000, np.random.default_rng(3), cameras=cams, z_max=8.0)
report = evaluate_run(ReconSet(clouds=clouds, cameras=cams), gt, mesh)
ti = list(report.thresholds).index(0.2)
print(f"\nafter {steps} steps (a fraction of a real run):")
for split in ("visible", "hidden", "all"):
    print(f"  F@0.2 {split:8s} {report.scores[(split, 'f')][ti]:6.2f}")
print(f"  consistency@0.2  {report.consistency[ti]:6.2f}")
