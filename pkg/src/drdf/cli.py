"""Pipeline entry points: gen | train | reconstruct | eval | ablate | gradcheck.

Every command is driven by one JSON config (see `config`); flags only
override config keys, so a run is reproducible from the frozen copy the
command leaves in its output directory.

Exit codes: 0 success, 2 configuration error, 3 data error (missing or
inconsistent inputs, unsatisfiable sampling), 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, replace

import numpy as np

from . import sceneio
from .camera import camera_at
from .config import (
    THREADS_ENV,
    RunConfig,
    apply_overrides,
    load_config,
    save_config,
)
from .datagen import generate_scene, render_view, sample_view_set
from .errors import (
    ConfigError,
    DegenerateSceneError,
    NoOverlapError,
    NoSurfaceError,
    NumericFailureError,
    SamplingFailureError,
    UndefinedOverlapError,
)
from .field import concat_clouds, decode_frustum, mesh_drdf_evaluator
from .metrics import (
    ReconSet,
    classify_visibility,
    evaluate_run,
    perturb_pose,
    report_csv,
    report_text,
    sample_mesh_cloud,
)
from .model import FusionModel, ModelConfig, frustum_evaluator, gradient_check
from .train import SgdMomentum, TrainExample, train

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

_DATA_ERRORS = (
    FileNotFoundError,
    NotADirectoryError,
    SamplingFailureError,
    DegenerateSceneError,
    UndefinedOverlapError,
    NoOverlapError,
    NoSurfaceError,
    ValueError,
)


def _ensure_dir(path: str) -> None:
    os.makedirs(path, exist_ok=True)


def _parallel_map(fn, items, threads: int):
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def _load_run_config(args) -> RunConfig:
    cfg = load_config(args.config)
    if args.set:
        cfg = apply_overrides(cfg, args.set)
    if getattr(args, "threads", None):
        cfg = replace(cfg, threads=args.threads)
    return cfg


def _freeze_config(cfg: RunConfig) -> None:
    """Keep a copy of the first effective config under the run directory."""
    _ensure_dir(cfg.out_dir)
    path = os.path.join(cfg.out_dir, "config.json")
    if not os.path.exists(path):
        save_config(path, cfg)


def _image_kwargs(ds) -> dict:
    return dict(
        width=ds.image_width, height=ds.image_height, fov_x=ds.fov_x, far=ds.far
    )


# ------------------------------------------------------------------- gen

def _frontal_camera(mesh, ds):
    lo, hi = mesh.bounds()
    pos = (0.5 * (lo[0] + hi[0]), lo[1] + 1.5, lo[2] + 0.4)
    return camera_at(pos, yaw=0.0, pitch=0.0, **_image_kwargs(ds))


def _generate_checked(ds, index: int):
    """Scene for slot ``index``; regenerated with a shifted seed until some
    surface point is hidden from a frontal camera."""
    for attempt in range(20):
        seed = ds.scene.seed + index + 100000 * attempt
        spec = replace(ds.scene, seed=seed)
        mesh = generate_scene(spec)
        cloud = sample_mesh_cloud(mesh, 2000, np.random.default_rng(seed))
        visible = classify_visibility(
            cloud, [_frontal_camera(mesh, ds)], mesh, z_max=ds.far
        )
        if (~visible).any():
            return mesh, seed
    raise SamplingFailureError(f"scene slot {index}: no occluded geometry after 20 seeds")


def _build_scene(job):
    cfg, index, scene_id = job
    ds = cfg.dataset
    root = cfg.dataset_root()
    mesh, seed = _generate_checked(ds, index)
    sceneio.save_scene(sceneio.scene_path(root, scene_id), mesh)
    sets = []
    for k, n_per in ds.set_specs:
        for j in range(n_per):
            set_id = f"{scene_id}-k{k}s{j}"
            rng = np.random.default_rng([ds.seed, index, k, j])
            try:
                cams = sample_view_set(
                    mesh, k, rng, max_tries=ds.max_tries, **_image_kwargs(ds)
                )
            except SamplingFailureError as exc:
                raise SamplingFailureError(f"set {set_id}: {exc}") from exc
            sceneio.save_cams(sceneio.set_path(root, set_id), cams)
            _ensure_dir(os.path.dirname(sceneio.view_path(root, set_id, 0)))
            for i, cam in enumerate(cams):
                sceneio.save_view(sceneio.view_path(root, set_id, i), render_view(mesh, cam))
            cloud = sample_mesh_cloud(
                mesh, 4000, np.random.default_rng([ds.seed, index, k, j, 1]),
                cameras=cams, z_max=ds.far,
            )
            visible = classify_visibility(cloud, cams, mesh, z_max=ds.far)
            hidden = float(1.0 - visible.mean()) if len(cloud) else 0.0
            sets.append(
                {"id": set_id, "scene": scene_id, "k": int(k), "hidden_fraction": hidden}
            )
    return {"scene": scene_id, "seed": seed, "sets": sets}


def cmd_gen(cfg: RunConfig) -> int:
    ds = cfg.dataset
    root = cfg.dataset_root()
    _freeze_config(cfg)
    for sub in ("scenes", "sets", "views"):
        _ensure_dir(os.path.join(root, sub))
    n_total = ds.n_train + ds.n_val + ds.n_test
    ids = [f"scene{idx:03d}" for idx in range(n_total)]
    jobs = [(cfg, idx, sid) for idx, sid in enumerate(ids)]
    results = _parallel_map(_build_scene, jobs, cfg.resolved_threads())

    splits = {
        "train": ids[: ds.n_train],
        "val": ids[ds.n_train : ds.n_train + ds.n_val],
        "test": ids[ds.n_train + ds.n_val :],
    }
    sets = [rec for r in results for rec in r["sets"]]
    manifest = {
        "format": sceneio.MANIFEST_FORMAT,
        "image": _image_kwargs(ds),
        "scene_spec": asdict(ds.scene),
        "set_specs": [list(s) for s in ds.set_specs],
        "splits": splits,
        "scene_seeds": {r["scene"]: r["seed"] for r in results},
        "sets": sets,
    }
    sceneio.save_manifest(root, manifest)
    fracs = np.array([s["hidden_fraction"] for s in sets])
    print(f"dataset: {n_total} scenes ({ds.n_train}/{ds.n_val}/{ds.n_test} train/val/test), {len(sets)} view sets")
    if len(fracs):
        print(
            "hidden-geometry fraction: mean %.3f, min %.3f, max %.3f"
            % (fracs.mean(), fracs.min(), fracs.max())
        )
    return EXIT_OK


# ----------------------------------------------------------------- train

def _load_examples(cfg: RunConfig, split: str = "train"):
    root = cfg.dataset_root()
    manifest = sceneio.load_manifest(root)
    wanted = set(manifest["splits"][split])
    meshes = {}
    examples = []
    for rec in manifest["sets"]:
        if rec["scene"] not in wanted:
            continue
        if rec["scene"] not in meshes:
            meshes[rec["scene"]] = sceneio.load_scene(sceneio.scene_path(root, rec["scene"]))
        cams = sceneio.load_cams(sceneio.set_path(root, rec["id"]))
        views = [sceneio.load_view(sceneio.view_path(root, rec["id"], i)) for i in range(rec["k"])]
        examples.append(
            TrainExample(
                mesh=meshes[rec["scene"]],
                cameras=cams,
                images=[v.channels() for v in views],
            )
        )
    if not examples:
        raise FileNotFoundError(f"dataset at {root} has no '{split}' sets")
    return examples, manifest


def cmd_train(cfg: RunConfig, resume: bool) -> int:
    _freeze_config(cfg)
    examples, _ = _load_examples(cfg)
    ckpt_path = os.path.join(cfg.out_dir, "checkpoint.ckpt")
    curve_path = os.path.join(cfg.out_dir, "loss.csv")
    if resume:
        model, optimizer, start_step, _ = sceneio.load_checkpoint(ckpt_path)
    else:
        model = FusionModel(cfg.model)
        optimizer = SgdMomentum(model.params(), momentum=cfg.train.momentum)
        start_step = 0
    s = cfg.sampling
    n_desc = str(cfg.train.n_views) if cfg.train.n_views else "1..3"
    print(
        f"batch composition: N={n_desc} views, {s.rays_per_image} rays/image, "
        f"{s.points_per_ray} points/ray ({len(examples)} view sets)"
    )
    rng = np.random.default_rng([s.rng_seed, start_step])

    def on_log(step, lr, loss):
        print(f"step {step:>7d}  lr {lr:.2e}  loss {loss:.5f}")

    try:
        result = train(
            model, examples, s, cfg.train, rng,
            transform=cfg.transform, start_step=start_step,
            optimizer=optimizer, on_log=on_log,
        )
    except NumericFailureError as exc:
        # model/optimizer were rolled back to the last good step
        sceneio.save_checkpoint(ckpt_path, model, optimizer, step=exc.good_step)
        sceneio.save_curve(curve_path, exc.partial_curve, append=resume)
        print(f"error: {exc}; checkpoint saved at step {exc.good_step}", file=sys.stderr)
        return EXIT_NUMERIC
    sceneio.save_checkpoint(ckpt_path, model, optimizer, step=result.final_step)
    sceneio.save_curve(curve_path, result.curve, append=resume)
    print(f"checkpoint at step {result.final_step} -> {ckpt_path}")
    return EXIT_OK


# ----------------------------------------------------------- reconstruct

def _find_set(manifest: dict, set_id: str) -> dict:
    for rec in manifest["sets"]:
        if rec["id"] == set_id:
            return rec
    raise FileNotFoundError(f"set '{set_id}' not in dataset manifest")


def _load_set(cfg: RunConfig, set_id: str):
    root = cfg.dataset_root()
    manifest = sceneio.load_manifest(root)
    rec = _find_set(manifest, set_id)
    mesh = sceneio.load_scene(sceneio.scene_path(root, rec["scene"]))
    cams = sceneio.load_cams(sceneio.set_path(root, set_id))
    views = [sceneio.load_view(sceneio.view_path(root, set_id, i)) for i in range(rec["k"])]
    return mesh, cams, views


def _decode_set(cfg: RunConfig, cams, evaluator_for):
    """One frustum decode per camera; ``evaluator_for(i)`` supplies the
    field evaluator observing from camera i."""

    def decode_one(i):
        return decode_frustum(
            cams[i], evaluator_for(i), g=cfg.decode.grid,
            n_pt=cfg.decode.samples, source_camera=i,
        )

    return _parallel_map(decode_one, range(len(cams)), cfg.resolved_threads())


def _model_clouds(cfg: RunConfig, model, views, cams):
    grids = [model.encode(v.channels())[0] for v in views]

    def evaluator_for(i):
        return frustum_evaluator(model, grids, cams, i, chunk_rays=cfg.decode.chunk_rays)

    return _decode_set(cfg, cams, evaluator_for)


def cmd_reconstruct(cfg: RunConfig, set_id: str, checkpoint: str | None, gt_field: bool) -> int:
    _freeze_config(cfg)
    mesh, cams, views = _load_set(cfg, set_id)
    if gt_field:
        clouds = _decode_set(
            cfg, cams, lambda i: mesh_drdf_evaluator(mesh, z_max=cams[i].far)
        )
        mode, step = "gt-field", None
    else:
        ckpt_path = checkpoint or os.path.join(cfg.out_dir, "checkpoint.ckpt")
        if not os.path.exists(ckpt_path):
            raise FileNotFoundError(f"checkpoint not found: {ckpt_path}")
        model, _, step, _ = sceneio.load_checkpoint(ckpt_path)
        clouds = _model_clouds(cfg, model, views, cams)
        mode = "model"
    out = os.path.join(cfg.out_dir, "recon", set_id)
    _ensure_dir(out)
    for i, cloud in enumerate(clouds):
        sceneio.save_ply(os.path.join(out, f"cam{i}.ply"), cloud)
        print(f"cam{i}: {len(cloud)} points")
    merged = concat_clouds(clouds)
    sceneio.save_ply(os.path.join(out, "merged.ply"), merged)
    provenance = {
        "set_id": set_id,
        "mode": mode,
        "checkpoint_step": step,
        "decode": {"grid": cfg.decode.grid, "samples": cfg.decode.samples},
        "cameras": len(cams),
    }
    with open(os.path.join(out, "provenance.json"), "w") as f:
        f.write(json.dumps(provenance, sort_keys=True, indent=1) + "\n")
    print(f"merged: {len(merged)} points -> {out}")
    return EXIT_OK


# ------------------------------------------------------------------ eval

def _gt_cloud_for(cfg: RunConfig, mesh, cams):
    return sample_mesh_cloud(
        mesh, cfg.eval.cloud_points, np.random.default_rng(cfg.eval.seed),
        cameras=cams, z_max=cfg.dataset.far,
    )


def _write_report(out_dir: str, report) -> None:
    _ensure_dir(out_dir)
    with open(os.path.join(out_dir, "report.csv"), "w") as f:
        f.write(report_csv(report))
    with open(os.path.join(out_dir, "report.txt"), "w") as f:
        f.write(report_text(report))


def cmd_eval(cfg: RunConfig, args) -> int:
    _freeze_config(cfg)
    set_id = args.set_id
    mesh, cams, views = _load_set(cfg, set_id)
    recon_dir = args.recon_dir or os.path.join(cfg.out_dir, "recon", set_id)
    prov_path = os.path.join(recon_dir, "provenance.json")
    if os.path.exists(prov_path):
        with open(prov_path) as f:
            prov = json.load(f)
        if prov.get("set_id") != set_id:
            raise ValueError(
                f"reconstruction at {recon_dir} belongs to set '{prov.get('set_id')}', not '{set_id}'"
            )
    clouds = []
    for i in range(len(cams)):
        ply = os.path.join(recon_dir, f"cam{i}.ply")
        if not os.path.exists(ply):
            raise FileNotFoundError(f"missing reconstruction {ply}")
        clouds.append(sceneio.load_ply(ply))
    recon = ReconSet(clouds=clouds, cameras=cams)
    gt_cloud = sceneio.load_ply(args.gt_cloud) if args.gt_cloud else _gt_cloud_for(cfg, mesh, cams)

    report = evaluate_run(recon, gt_cloud, mesh, thresholds=cfg.eval.thresholds)
    out = os.path.join(cfg.out_dir, "eval", set_id)
    _write_report(out, report)
    print(report_text(report))

    if not args.noise:
        return EXIT_OK

    sigma_r = args.sigma_r if args.sigma_r is not None else list(cfg.eval.noise_sigma_r)
    sigma_t = args.sigma_t if args.sigma_t is not None else list(cfg.eval.noise_sigma_t)
    if len(sigma_r) != len(sigma_t):
        raise ConfigError("noise sweeps need equally many sigma_r and sigma_t values")
    ckpt_path = args.checkpoint or os.path.join(cfg.out_dir, "checkpoint.ckpt")
    if not os.path.exists(ckpt_path):
        raise FileNotFoundError(f"noise sweep reconstructs with a model; missing {ckpt_path}")
    model, _, _, _ = sceneio.load_checkpoint(ckpt_path)
    grids = [model.encode(v.channels())[0] for v in views]

    t_idx = _headline_index(cfg.eval.thresholds)
    sweep_rows = []
    for i, (sr, st) in enumerate(zip(sigma_r, sigma_t)):
        rng = np.random.default_rng([cfg.eval.seed, 1000 + i])
        noisy = [cams[0]] + [perturb_pose(c, sr, st, rng) for c in cams[1:]]

        def evaluator_for(k):
            return frustum_evaluator(model, grids, noisy, k, chunk_rays=cfg.decode.chunk_rays)

        n_clouds = _decode_set(cfg, noisy, evaluator_for)
        rep = evaluate_run(
            ReconSet(clouds=n_clouds, cameras=noisy), gt_cloud, mesh,
            thresholds=cfg.eval.thresholds,
        )
        _write_report(os.path.join(out, f"noise_r{sr:g}_t{st:g}"), rep)
        cons = rep.consistency[t_idx] if rep.consistency is not None else float("nan")
        sweep_rows.append((sr, st, rep.scores[("all", "f")][t_idx], cons))
        print(f"noise sigma_r={sr:g} sigma_t={st:g}: all F={sweep_rows[-1][2]:.2f} consistency={cons:.2f}")
    with open(os.path.join(out, "noise_sweep.csv"), "w") as f:
        rho = cfg.eval.thresholds[t_idx]
        f.write(f"sigma_r,sigma_t,f_all@{rho:g},consistency@{rho:g}\n")
        for sr, st, fa, cons in sweep_rows:
            f.write(f"{sr:g},{st:g},{fa:.4f},{cons:.4f}\n")
    return EXIT_OK


def _headline_index(thresholds) -> int:
    """Index of the 0.2 threshold when present, else the middle one."""
    ts = list(thresholds)
    return ts.index(0.2) if 0.2 in ts else len(ts) // 2


# ---------------------------------------------------------------- ablate

def cmd_ablate(cfg: RunConfig, args) -> int:
    _freeze_config(cfg)
    which = args.which
    if which == "gs":
        variants = {"gs_on": [], "gs_off": ["sampling.gaussian_fraction=0.0"]}
    else:
        variants = {"base": [], "ray_attention": ["model.ray_attention=true"]}
    seeds = args.seeds
    examples, manifest = _load_examples(cfg)
    root = cfg.dataset_root()
    bench = [rec for rec in manifest["sets"]
             if rec["scene"] in manifest["splits"]["train"] and rec["k"] == args.k]
    if args.max_sets:
        bench = bench[: args.max_sets]
    if not bench:
        raise FileNotFoundError(f"no {args.k}-view sets in the train split")

    t_idx = _headline_index(cfg.eval.thresholds)
    rho = cfg.eval.thresholds[t_idx]
    rows = []
    for name, overrides in variants.items():
        vcfg = apply_overrides(cfg, overrides) if overrides else cfg
        for seed in seeds:
            scfg = apply_overrides(
                vcfg, [f"sampling.rng_seed={seed}", f"model.seed={seed}"]
            )
            model = FusionModel(scfg.model)
            rng = np.random.default_rng([seed, 0])
            train(model, examples, scfg.sampling, scfg.train, rng, transform=scfg.transform)
            for rec in bench:
                mesh, cams, views = _load_set(scfg, rec["id"])
                clouds = _model_clouds(scfg, model, views, cams)
                rep = evaluate_run(
                    ReconSet(clouds=clouds, cameras=cams),
                    _gt_cloud_for(scfg, mesh, cams), mesh,
                    thresholds=scfg.eval.thresholds,
                )
                cons = rep.consistency[t_idx] if rep.consistency is not None else float("nan")
                rows.append((
                    name, seed, rec["id"],
                    rep.scores[("visible", "f")][t_idx],
                    rep.scores[("hidden", "f")][t_idx],
                    rep.scores[("all", "f")][t_idx],
                    cons,
                ))
                print(f"{name} seed={seed} {rec['id']}: "
                      f"F_vis={rows[-1][3]:.2f} F_hid={rows[-1][4]:.2f} F_all={rows[-1][5]:.2f}")
    out = os.path.join(cfg.out_dir, "ablate")
    _ensure_dir(out)
    path = os.path.join(out, f"{which}.csv")
    with open(path, "w") as f:
        f.write(f"variant,seed,set,f_visible@{rho:g},f_hidden@{rho:g},f_all@{rho:g},consistency@{rho:g}\n")
        for r in rows:
            f.write("%s,%d,%s,%.4f,%.4f,%.4f,%.4f\n" % r)
    for name in variants:
        sub = np.array([[r[3], r[4], r[5]] for r in rows if r[0] == name])
        print(f"{name}: mean F_vis={sub[:,0].mean():.2f} F_hid={sub[:,1].mean():.2f} F_all={sub[:,2].mean():.2f}")
    print(f"table -> {path}")
    return EXIT_OK


# ------------------------------------------------------------- gradcheck

def cmd_gradcheck(args) -> int:
    cfg = ModelConfig(
        d_img=6, d_feat=args.d_feat, pe_octaves=args.octaves,
        enc_channels=(4, 6), enc_strides=(1, 2), head_hidden=1,
        ray_attention=args.ray_attention, seed=args.seed,
    )
    worst, per_param = gradient_check(cfg, h=args.step, seed=args.seed)
    for name in sorted(per_param):
        print(f"{name:>16s}  rel err {per_param[name]:.3e}")
    print(f"worst relative error: {worst:.3e} (tolerance {args.tol:g})")
    if worst < args.tol:
        print("gradient check PASSED")
        return EXIT_OK
    print("gradient check FAILED", file=sys.stderr)
    return EXIT_NUMERIC


# ------------------------------------------------------------------ main

def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", required=True, help="run config JSON")
    p.add_argument(
        "--set", action="append", default=[], metavar="KEY=VALUE",
        help="override a config key, e.g. train.steps=500 (repeatable)",
    )
    p.add_argument(
        "--threads", type=int, default=None,
        help=f"worker threads (default: config, else ${THREADS_ENV} or 1)",
    )


def _csv_floats(text: str):
    return [float(x) for x in text.split(",") if x.strip()]


def _csv_ints(text: str):
    return [int(x) for x in text.split(",") if x.strip()]


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="drdf",
        description="Few-image full-scene 3D reconstruction via directed ray distance fields.",
    )
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic dataset")
    _add_common(g)

    t = sub.add_parser("train", help="train the fusion model")
    _add_common(t)
    t.add_argument("--resume", action="store_true", help="continue from the run checkpoint")

    r = sub.add_parser("reconstruct", help="decode point clouds for one view set")
    _add_common(r)
    r.add_argument("--set-id", required=True)
    r.add_argument("--checkpoint", default=None, help="model checkpoint (default: run dir)")
    r.add_argument("--gt-field", action="store_true",
                   help="decode the exact mesh field instead of the model")

    e = sub.add_parser("eval", help="score a reconstruction")
    _add_common(e)
    e.add_argument("--set-id", required=True)
    e.add_argument("--recon-dir", default=None)
    e.add_argument("--gt-cloud", default=None, help="PLY to use as ground truth")
    e.add_argument("--noise", action="store_true", help="sweep pose noise with re-reconstruction")
    e.add_argument("--sigma-r", type=_csv_floats, default=None, metavar="CSV")
    e.add_argument("--sigma-t", type=_csv_floats, default=None, metavar="CSV")
    e.add_argument("--checkpoint", default=None)

    a = sub.add_parser("ablate", help="train and score ablation variants")
    _add_common(a)
    a.add_argument("--which", choices=("gs", "ray-attention"), required=True)
    a.add_argument("--seeds", type=_csv_ints, default=[0, 1, 2], metavar="CSV")
    a.add_argument("--k", type=int, default=3, help="benchmark view count")
    a.add_argument("--max-sets", type=int, default=0, help="cap benchmark sets (0 = all)")

    c = sub.add_parser("gradcheck", help="finite-difference check of the backward pass")
    c.add_argument("--d-feat", type=int, default=8)
    c.add_argument("--octaves", type=int, default=2)
    c.add_argument("--ray-attention", action="store_true")
    c.add_argument("--step", type=float, default=1e-4, help="finite-difference step")
    c.add_argument("--tol", type=float, default=1e-4)
    c.add_argument("--seed", type=int, default=0)

    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "gradcheck":
            return cmd_gradcheck(args)
        cfg = _load_run_config(args)
        if args.command == "gen":
            return cmd_gen(cfg)
        if args.command == "train":
            return cmd_train(cfg, resume=args.resume)
        if args.command == "reconstruct":
            return cmd_reconstruct(cfg, args.set_id, args.checkpoint, args.gt_field)
        if args.command == "eval":
            return cmd_eval(cfg, args)
        if args.command == "ablate":
            return cmd_ablate(cfg, args)
        raise ConfigError(f"unknown command {args.command}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except _DATA_ERRORS as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericFailureError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
