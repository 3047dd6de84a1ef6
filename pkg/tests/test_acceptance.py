"""End-to-end acceptance checks, one test per criterion (A1-A9).

Each test prints a single ``A<n> PASS``/``A<n> FAIL`` line with its
headline numbers (run with ``-s`` to see them live).  A1-A3 and A7-A8
are exact or statistical oracles and finish in seconds to minutes;
A4-A6 and A9 train desk-scale models and together take a few hours on
one core.  Deselect them with ``-m "not acceptance"``.
"""

import time

import numpy as np
import pytest

from drdf.camera import camera_at, pixel_ray_directions, ray_for_pixel
from drdf.datagen import SceneSpec, generate_scene, render_view, sample_view_set
from drdf.errors import SamplingFailureError
from drdf.field import (
    decode_frustum,
    decode_ray,
    drdf_values,
    mesh_drdf_evaluator,
    uniform_depths,
)
from drdf.mesh import TriangleMesh, cast_rays, cast_rays_brute, intersect_ray
from drdf.metrics import (
    PointCloud,
    ReconSet,
    consistency,
    evaluate_run,
    fscore,
    perturb_pose,
    sample_mesh_cloud,
    within_rho,
    within_rho_brute,
)
from drdf.model import FusionModel, ModelConfig, frustum_evaluator, gradient_check
from drdf.sampling import SamplingConfig
from drdf.train import TrainConfig, TrainExample, train

pytestmark = pytest.mark.acceptance

# Desk-scale experiment shape shared by A4-A6 and A9.  Chosen by probe
# sweeps on one core: a nonlinear head (head_hidden >= 1) is required for
# free-space precision, lr 3e-3 with the default milestone decay converges
# fastest at this size.
IMG = 48
DESK_MODEL = dict(
    d_img=32, d_feat=64, pe_octaves=6, head_hidden=1,
    enc_channels=(16, 16, 32, 32), enc_strides=(1, 2, 1, 2),
)
DESK_SAMPLING = dict(
    rays_per_image=32, points_per_ray=96,
    gaussian_sigma=0.15, gaussian_fraction=0.75, z_max=8.0,
)
DESK_LR = 3e-3
Z_MAX = 8.0
RHO = 0.2

A4_STEPS = 20000
A4_SEEDS = (0, 1, 2, 3, 4)
A4_DECODE = dict(g=32, n_pt=160)

BENCH_STEPS = 16000
BENCH_DECODE = dict(g=24, n_pt=128)
A6_STEPS = 5000
A6_SEEDS = (0, 1, 2)


def _announce(tag: str, ok: bool, detail: str) -> None:
    print(f"\n{tag} {'PASS' if ok else 'FAIL'}: {detail}", flush=True)


def _train_model(examples, seed: int, steps: int, sampling_overrides=None,
                 n_views=None, log_every=100):
    mcfg = ModelConfig(seed=seed, **DESK_MODEL)
    model = FusionModel(mcfg)
    skw = dict(DESK_SAMPLING)
    if sampling_overrides:
        skw.update(sampling_overrides)
    scfg = SamplingConfig(rng_seed=seed, **skw)
    tcfg = TrainConfig(steps=steps, base_lr=DESK_LR, log_every=log_every,
                       n_views=n_views)
    res = train(model, examples, scfg, tcfg, np.random.default_rng([seed, 17]))
    return model, res


def _decode_set(model, cams, views, g, n_pt, per_view=False):
    """Frustum clouds for one view set.  With per_view=True each camera's
    frustum sees only its own image (independent single-view prediction);
    otherwise every frustum fuses all views."""
    grids = [model.encode(v.channels())[0] for v in views]
    clouds = []
    for i, cam in enumerate(cams):
        if per_view:
            ev = frustum_evaluator(model, [grids[i]], [cam], 0, chunk_rays=64)
        else:
            ev = frustum_evaluator(model, grids, cams, i, chunk_rays=64)
        clouds.append(decode_frustum(cam, ev, g=g, n_pt=n_pt, source_camera=i))
    return clouds


# -- A1: BVH ray casting must equal brute force, bitwise ---------------------


def test_a1_bvh_equals_brute_force():
    t0 = time.monotonic()
    rng = np.random.default_rng(11)
    n_scenes, n_rays = 100, 1000
    checked = 0
    for s in range(n_scenes):
        mesh = generate_scene(SceneSpec(seed=1000 + s))
        lo, hi = mesh.bounds()
        origins = rng.uniform(lo - 1.0, hi + 1.0, size=(n_rays, 3))
        dirs = rng.normal(size=(n_rays, 3))
        dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
        a = cast_rays(mesh, origins, dirs)
        b = cast_rays_brute(mesh, origins, dirs)
        assert np.array_equal(a.offsets, b.offsets)
        assert np.array_equal(a.t, b.t)
        assert np.array_equal(a.face, b.face)
        checked += n_rays
    dt = time.monotonic() - t0
    ok = dt < 60.0
    _announce("A1", ok, f"BVH == brute force on {n_scenes} scenes x {n_rays} rays "
                        f"(exact hit sets, {dt:.1f}s)")
    assert ok


# -- A2: decoding the exact field recovers surfaces --------------------------


def test_a2_exact_field_decode_fidelity():
    t0 = time.monotonic()
    n_samples = 256
    z = uniform_depths(n_samples, Z_MAX)
    spacing = Z_MAX / (n_samples - 1)
    rng = np.random.default_rng(23)
    n_isolated = n_mid = 0
    worst_iso = worst_mid = 0.0
    for s in range(20):
        mesh = generate_scene(SceneSpec(seed=400 + s))
        cams = sample_view_set(mesh, 1, np.random.default_rng(s), width=IMG, height=IMG)
        view = render_view(mesh, cams[0])
        hit_px = np.argwhere(view.depth > 0)
        pick = hit_px[rng.choice(len(hit_px), size=50, replace=False)]
        for py, px in pick:
            ray = ray_for_pixel(cams[0], (px + 0.5, py + 0.5))
            surfaces = intersect_ray(mesh, ray, Z_MAX)
            if len(surfaces) == 0:
                continue
            decoded = decode_ray(z, drdf_values(surfaces, z))
            inside = surfaces[(surfaces > 0.0) & (surfaces < Z_MAX)]
            for si, s_true in enumerate(inside):
                gap = np.inf
                if len(inside) > 1:
                    others = np.delete(inside, si)
                    gap = np.abs(others - s_true).min()
                if gap < 2.0 * spacing:
                    continue
                err = np.abs(decoded - s_true).min() if len(decoded) else np.inf
                n_isolated += 1
                worst_iso = max(worst_iso, err)
                assert err < 0.016
                if s_true > spacing and s_true < Z_MAX - spacing:
                    n_mid += 1
                    worst_mid = max(worst_mid, err)
                    assert err < 1e-9
    dt = time.monotonic() - t0
    ok = n_isolated > 500 and n_mid > 500
    _announce("A2", ok, f"{n_isolated} isolated surfaces within 0.016 m "
                        f"(worst {worst_iso:.2e}), {n_mid} mid-segment within 1e-9 "
                        f"(worst {worst_mid:.2e}), {dt:.1f}s")
    assert ok


# -- A3: manual backward pass vs central differences -------------------------


def test_a3_gradient_check():
    t0 = time.monotonic()
    worst, per_param = gradient_check(seed=0)
    groups = {name.split(".")[0].rstrip("0123456789") for name in per_param}
    covered = {"enc", "joint", "attn_in", "attn_out", "head"} <= groups
    worst_ra, _ = gradient_check(
        ModelConfig(d_img=6, d_feat=8, pe_octaves=2, enc_channels=(4, 6),
                    enc_strides=(1, 2), head_hidden=1, ray_attention=True),
        seed=1,
    )
    dt = time.monotonic() - t0
    ok = worst < 1e-4 and worst_ra < 1e-4 and covered and dt < 300.0
    _announce("A3", ok, f"max relative gradient error {worst:.2e} "
                        f"(ray-attention variant {worst_ra:.2e}) over "
                        f"{len(per_param)} parameters, {dt:.1f}s")
    assert ok


# -- A4: two-view overfit reaches the F-score bars ---------------------------


@pytest.fixture(scope="module")
def a4_scene():
    mesh = generate_scene(SceneSpec(extent=(5.0, 2.6, 5.0), n_objects=(3, 5), seed=101))
    cams = sample_view_set(mesh, 2, np.random.default_rng(7), width=IMG, height=IMG)
    views = [render_view(mesh, c) for c in cams]
    gt = sample_mesh_cloud(mesh, 20000, np.random.default_rng(3), cameras=cams, z_max=Z_MAX)
    return mesh, cams, views, gt


def test_a4_two_view_overfit(a4_scene):
    mesh, cams, views, gt = a4_scene
    example = TrainExample(mesh=mesh, cameras=cams, images=[v.channels() for v in views])
    passes = []
    details = []
    for seed in A4_SEEDS:
        t0 = time.monotonic()
        model, res = _train_model([example], seed, A4_STEPS)
        clouds = _decode_set(model, cams, views, **A4_DECODE)
        rep = evaluate_run(ReconSet(clouds=clouds, cameras=cams), gt, mesh)
        dt = time.monotonic() - t0
        ti = int(np.searchsorted(rep.thresholds, RHO))
        f_all = rep.scores[("all", "f")][ti]
        f_vis = rep.scores[("visible", "f")][ti]
        first = res.curve[:3, 2].mean()
        last = res.curve[-3:, 2].mean()
        seed_ok = f_all >= 80.0 and f_vis >= 90.0 and dt < 7200.0
        passes.append(seed_ok)
        details.append(f"seed {seed}: all={f_all:.1f} vis={f_vis:.1f} "
                       f"loss {first:.3f}->{last:.3f} {dt/60:.1f}min")
        print(f"\n  A4 {details[-1]}", flush=True)
    n_pass = sum(passes)
    ok = n_pass >= 4
    _announce("A4", ok, f"{n_pass}/{len(A4_SEEDS)} seeds reached All F@0.2 >= 80 "
                        f"and Visible F@0.2 >= 90 ({'; '.join(details)})")
    assert ok


# -- shared 10-scene benchmark for A5, A6, A9 --------------------------------


@pytest.fixture(scope="module")
def benchmark():
    """Ten scenes, each with one 3-view and one 5-view set; scenes where
    view-set sampling fails are skipped deterministically."""
    scenes = []
    seed = 300
    while len(scenes) < 10 and seed < 400:
        spec = SceneSpec(extent=(5.0, 2.6, 5.0), n_objects=(3, 5), seed=seed)
        mesh = generate_scene(spec)
        try:
            cams3 = sample_view_set(mesh, 3, np.random.default_rng([seed, 3]),
                                    width=IMG, height=IMG)
            cams5 = sample_view_set(mesh, 5, np.random.default_rng([seed, 5]),
                                    width=IMG, height=IMG)
        except SamplingFailureError:
            seed += 1
            continue
        views3 = [render_view(mesh, c) for c in cams3]
        views5 = [render_view(mesh, c) for c in cams5]
        scenes.append(dict(mesh=mesh, cams3=cams3, views3=views3,
                           cams5=cams5, views5=views5, seed=seed))
        seed += 1
    assert len(scenes) == 10
    return scenes


@pytest.fixture(scope="module")
def bench_model(benchmark):
    """One fusion model trained on all ten 3-view sets."""
    examples = [
        TrainExample(mesh=s["mesh"], cameras=s["cams3"],
                     images=[v.channels() for v in s["views3"]])
        for s in benchmark
    ]
    t0 = time.monotonic()
    model, res = _train_model(examples, 0, BENCH_STEPS)
    print(f"\n  benchmark model: {BENCH_STEPS} steps in "
          f"{(time.monotonic() - t0)/60:.1f}min, final loss "
          f"{res.curve[-3:, 2].mean():.3f}", flush=True)
    return model


@pytest.fixture(scope="module")
def bench_consistency3(bench_model, benchmark):
    """Per-scene consistency@0.2 of fused vs independent-per-view decoding
    on the 3-view sets."""
    fused, solo = [], []
    for s in benchmark:
        clouds_f = _decode_set(bench_model, s["cams3"], s["views3"], **BENCH_DECODE)
        clouds_s = _decode_set(bench_model, s["cams3"], s["views3"],
                               per_view=True, **BENCH_DECODE)
        fused.append(consistency(ReconSet(clouds=clouds_f, cameras=s["cams3"]), RHO))
        solo.append(consistency(ReconSet(clouds=clouds_s, cameras=s["cams3"]), RHO))
        print(f"\n  scene {s['seed']}: fused={fused[-1]:.1f} per-view={solo[-1]:.1f}",
              flush=True)
    return np.array(fused), np.array(solo)


# -- A5: feature fusion beats independent per-view prediction ----------------


def test_a5_fusion_consistency_advantage(bench_consistency3):
    fused, solo = bench_consistency3
    gap = fused.mean() - solo.mean()
    ok = gap >= 3.0
    _announce("A5", ok, f"fused consistency@0.2 {fused.mean():.1f} vs per-view "
                        f"{solo.mean():.1f} over 10 scenes (gap {gap:+.1f}, need >= +3)")
    assert ok


# -- A6: Gaussian sampling near intersections helps hidden surfaces ----------


def test_a6_gaussian_sampling_ablation(benchmark):
    examples = [
        TrainExample(mesh=s["mesh"], cameras=s["cams3"],
                     images=[v.channels() for v in s["views3"]])
        for s in benchmark
    ]
    gts = [
        sample_mesh_cloud(s["mesh"], 20000, np.random.default_rng([s["seed"], 9]),
                          cameras=s["cams3"], z_max=Z_MAX)
        for s in benchmark
    ]
    means = {}
    for label, frac in (("gs_on", DESK_SAMPLING["gaussian_fraction"]), ("gs_off", 0.0)):
        per_seed = []
        for seed in A6_SEEDS:
            model, _ = _train_model(examples, seed, A6_STEPS,
                                    sampling_overrides={"gaussian_fraction": frac})
            f_hidden = []
            for s, gt in zip(benchmark, gts):
                clouds = _decode_set(model, s["cams3"], s["views3"], **BENCH_DECODE)
                rep = evaluate_run(ReconSet(clouds=clouds, cameras=s["cams3"]), gt,
                                   s["mesh"])
                ti = int(np.searchsorted(rep.thresholds, RHO))
                f_hidden.append(rep.scores[("hidden", "f")][ti])
            per_seed.append(float(np.mean(f_hidden)))
            print(f"\n  A6 {label} seed {seed}: hidden F@0.2 = {per_seed[-1]:.2f}",
                  flush=True)
        means[label] = float(np.mean(per_seed))
    ok = means["gs_off"] < means["gs_on"]
    _announce("A6", ok, f"hidden F@0.2 mean over {len(A6_SEEDS)} seeds: "
                        f"with Gaussian sampling {means['gs_on']:.2f}, "
                        f"without {means['gs_off']:.2f} (must be strictly lower)")
    assert ok


# -- A7: pose-noise percentiles match the chi(3) calibration -----------------


def test_a7_pose_noise_percentiles():
    t0 = time.monotonic()
    expected_deg = (3.20, 6.37, 9.55, 12.82, 15.97)
    expected_m = (0.28, 0.56, 0.84, 1.12, 1.40)
    sigmas_r = (0.02, 0.04, 0.06, 0.08, 0.10)
    sigmas_t = (0.1, 0.2, 0.3, 0.4, 0.5)
    cam = camera_at((0.5, 1.5, -1.0), yaw=0.3, pitch=-0.1)
    rng = np.random.default_rng(2024)
    n = 100_000
    rows = []
    ok = True
    for sr, st, ed, em in zip(sigmas_r, sigmas_t, expected_deg, expected_m):
        angles = np.empty(n)
        shifts = np.empty(n)
        for i in range(n):
            noisy = perturb_pose(cam, sr, st, rng)
            rel = noisy.rotation @ cam.rotation.T
            c = np.clip((np.trace(rel) - 1.0) / 2.0, -1.0, 1.0)
            angles[i] = np.degrees(np.arccos(c))
            shifts[i] = np.linalg.norm(noisy.center - cam.center)
        p_r = float(np.percentile(angles, 95.0))
        p_t = float(np.percentile(shifts, 95.0))
        ok &= abs(p_r - ed) / ed <= 0.015 and abs(p_t - em) / em <= 0.015
        rows.append(f"sr={sr:.2f}: {p_r:.2f}deg/{ed}; st={st:.1f}: {p_t:.3f}m/{em}")
    dt = time.monotonic() - t0
    _announce("A7", ok, f"95th-percentile rotation/translation at 1e5 draws within "
                        f"1.5% of ({', '.join(str(e) for e in expected_deg)}) deg and "
                        f"({', '.join(str(e) for e in expected_m)}) m, {dt:.0f}s")
    assert ok


# -- A8: cross-module invariant bundle ---------------------------------------


def test_a8_invariant_suite():
    failures = []

    tiny = ModelConfig(d_img=6, d_feat=8, pe_octaves=2, enc_channels=(4, 6),
                       enc_strides=(1, 2), head_hidden=1)
    model = FusionModel(tiny)
    rng = np.random.default_rng(5)
    H = W = 4 * tiny.stride
    cams = [camera_at((0.3 * i, 1.4, -0.2 * i), yaw=0.1 * i, pitch=-0.05,
                      width=W, height=H) for i in range(3)]
    grids = [model.encode(rng.normal(size=(H, W, 5)))[0] for _ in cams]
    pix = rng.uniform(2.0, W - 2.0, size=(16, 2))
    dirs = pixel_ray_directions(cams[0], pix)
    zq = rng.uniform(0.5, 3.0, size=16)
    x = cams[0].center + zq[:, None] * dirs
    src = np.zeros(16, np.int64)

    # 1: prediction is invariant to view order
    pred, w, _ = model.forward_batch(grids, cams, x, dirs, src)
    perm = [2, 0, 1]
    pred_p, w_p, _ = model.forward_batch([grids[i] for i in perm],
                                         [cams[i] for i in perm], x, dirs, src)
    if not (np.abs(pred - pred_p).max() < 1e-10 and
            np.abs(w[:, perm] - w_p).max() < 1e-10):
        failures.append("view permutation changed predictions")

    # 2: a single view equals fusion where only that view has evidence
    away = camera_at((0.0, 1.4, -10.0), yaw=np.pi, pitch=0.0, width=W, height=H)
    away_grid = model.encode(rng.normal(size=(H, W, 5)))[0]
    solo, _, _ = model.forward_batch(grids[:1], cams[:1], x, dirs, src)
    both, w2, _ = model.forward_batch([grids[0], away_grid], [cams[0], away],
                                      x, dirs, src)
    if not (np.abs(solo - both).max() < 1e-12 and np.abs(w2[:, 1]).max() == 0.0):
        failures.append("single-view equivalence / invalid-view masking broke")

    # 3: metric monotonicity in rho and pred/gt symmetry
    rng2 = np.random.default_rng(8)
    a = rng2.uniform(0, 3, size=(400, 3))
    b = a + rng2.normal(scale=0.08, size=a.shape)
    rhos = (0.05, 0.1, 0.2, 0.5)
    fs = [fscore(a, b, r)[2] for r in rhos]
    if not all(f1 <= f2 + 1e-12 for f1, f2 in zip(fs, fs[1:])):
        failures.append("F-score not monotone in rho")
    p1, r1, f1 = fscore(a, b, 0.1)
    p2, r2, f2 = fscore(b, a, 0.1)
    if not (abs(p1 - r2) < 1e-12 and abs(r1 - p2) < 1e-12 and abs(f1 - f2) < 1e-12):
        failures.append("F-score pred/gt swap asymmetric")

    # 4: grid neighbor search equals brute force up to 2000 points
    for nq, nr in ((2000, 1500), (1, 2000), (777, 3)):
        q = rng2.uniform(-2, 2, size=(nq, 3))
        r = rng2.uniform(-2, 2, size=(nr, 3))
        if not np.array_equal(within_rho(q, r, 0.15), within_rho_brute(q, r, 0.15)):
            failures.append(f"within_rho != brute force at ({nq}, {nr})")
            break

    # 5: ray-mesh intersections are invariant under rigid motion
    mesh = generate_scene(SceneSpec(seed=77))
    from scipy.spatial.transform import Rotation

    R = Rotation.from_rotvec([0.3, -0.2, 0.9]).as_matrix()
    t = np.array([1.5, -0.7, 2.2])
    moved = TriangleMesh((R @ mesh.vertices.T).T + t, mesh.faces)
    lo, hi = mesh.bounds()
    origins = rng2.uniform(lo, hi, size=(200, 3))
    dirs2 = rng2.normal(size=(200, 3))
    dirs2 /= np.linalg.norm(dirs2, axis=-1, keepdims=True)
    h1 = cast_rays(mesh, origins, dirs2)
    h2 = cast_rays(moved, (R @ origins.T).T + t, (R @ dirs2.T).T)
    if not (np.array_equal(h1.offsets, h2.offsets) and
            np.abs(h1.t - h2.t).max() < 1e-9 and np.array_equal(h1.face, h2.face)):
        failures.append("intersections not rigid-motion invariant")

    ok = not failures
    _announce("A8", ok, "7/7 invariants hold (permutation, single-view, masking, "
                        "rho-monotone, F symmetry, brute NN, rigid motion)"
                        if ok else "; ".join(failures))
    assert ok, failures


# -- A9: a 3-view model extends to 5-view sets -------------------------------


def test_a9_five_view_generalization(bench_model, benchmark, bench_consistency3):
    fused3, _ = bench_consistency3
    cons5 = []
    for s in benchmark:
        clouds = _decode_set(bench_model, s["cams5"], s["views5"], **BENCH_DECODE)
        for c in clouds:
            assert len(c) > 0 and np.isfinite(c.points).all()
        cons5.append(consistency(ReconSet(clouds=clouds, cameras=s["cams5"]), RHO))
        print(f"\n  scene {s['seed']}: 5-view consistency={cons5[-1]:.1f}", flush=True)
    m5, m3 = float(np.mean(cons5)), float(fused3.mean())
    ok = m5 >= m3 - 5.0
    _announce("A9", ok, f"5-view consistency@0.2 {m5:.1f} vs 3-view {m3:.1f} "
                        f"(allowed drop 5.0)")
    assert ok
