"""On-disk formats: scenes, camera sets, rendered views, point clouds,
checkpoints, loss curves, and the dataset directory layout.

All text formats are versioned by their first line and write floats with
%.17g, which round-trips IEEE doubles exactly.  Rendered-view channels are
stored as little-endian float32 planes behind a small text header; clouds
are ASCII PLY readable by standard viewers.

Dataset layout under a root directory:

    manifest.json
    scenes/<scene_id>.scene
    sets/<set_id>.cams
    views/<set_id>/<k>.view

The manifest records the generating spec, scene splits, and per-set
metadata (scene, view count, hidden-geometry fraction), serialized with
sorted keys so identical configs produce byte-identical files.
"""

from __future__ import annotations

import io
import json
import os

import numpy as np

from .camera import Camera
from .datagen import RenderedView
from .field import PointCloud
from .mesh import TriangleMesh

SCENE_MAGIC = "drdf-scene 1"
CAMS_MAGIC = "drdf-cams 1"
VIEW_MAGIC = "drdf-view 1"
CKPT_MAGIC = "DRDFCKPT 1"
MANIFEST_FORMAT = "drdf-dataset 1"

VIEW_CHANNELS = ("depth", "nx", "ny", "nz", "shading")


def _fmt(x: float) -> str:
    return "%.17g" % float(x)


def _expect(line: str, magic: str, path: str) -> None:
    if line.strip() != magic:
        raise ValueError(f"{path}: expected '{magic}', got '{line.strip()}'")


# ---------------------------------------------------------------- scenes

def save_scene(path: str, mesh: TriangleMesh) -> None:
    with open(path, "w") as f:
        f.write(SCENE_MAGIC + "\n")
        f.write(f"vertices {mesh.n_vertices}\n")
        f.write(f"faces {mesh.n_faces}\n")
        labeled = mesh.face_labels is not None
        f.write(f"labels {int(labeled)}\n")
        for v in mesh.vertices:
            f.write(f"v {_fmt(v[0])} {_fmt(v[1])} {_fmt(v[2])}\n")
        for i, tri in enumerate(mesh.faces):
            row = f"f {tri[0]} {tri[1]} {tri[2]}"
            if labeled:
                row += f" {mesh.face_labels[i]}"
            f.write(row + "\n")


def load_scene(path: str) -> TriangleMesh:
    with open(path) as f:
        _expect(f.readline(), SCENE_MAGIC, path)
        nv = int(f.readline().split()[1])
        nf = int(f.readline().split()[1])
        labeled = bool(int(f.readline().split()[1]))
        verts = np.empty((nv, 3))
        for i in range(nv):
            parts = f.readline().split()
            verts[i] = [float(parts[1]), float(parts[2]), float(parts[3])]
        faces = np.empty((nf, 3), dtype=np.int64)
        labels = np.empty(nf, dtype=np.int64) if labeled else None
        for i in range(nf):
            parts = f.readline().split()
            faces[i] = [int(parts[1]), int(parts[2]), int(parts[3])]
            if labeled:
                labels[i] = int(parts[4])
    return TriangleMesh(verts, faces, labels)


# --------------------------------------------------------------- cameras

def _write_cam_block(f, cam: Camera) -> None:
    f.write(f"cam {cam.width} {cam.height} {_fmt(cam.fov_x)} {_fmt(cam.near)} {_fmt(cam.far)}\n")
    for row in cam.rotation:
        f.write(f"R {_fmt(row[0])} {_fmt(row[1])} {_fmt(row[2])}\n")
    t = cam.translation
    f.write(f"t {_fmt(t[0])} {_fmt(t[1])} {_fmt(t[2])}\n")


def _read_cam_block(f) -> Camera:
    parts = f.readline().split()
    if parts[0] != "cam":
        raise ValueError("malformed camera block")
    width, height = int(parts[1]), int(parts[2])
    fov_x, near, far = float(parts[3]), float(parts[4]), float(parts[5])
    R = np.empty((3, 3))
    for i in range(3):
        row = f.readline().split()
        R[i] = [float(row[1]), float(row[2]), float(row[3])]
    row = f.readline().split()
    t = np.array([float(row[1]), float(row[2]), float(row[3])])
    return Camera(width=width, height=height, fov_x=fov_x, rotation=R, translation=t, near=near, far=far)


def save_cams(path: str, cams: list) -> None:
    with open(path, "w") as f:
        f.write(CAMS_MAGIC + "\n")
        f.write(f"count {len(cams)}\n")
        for cam in cams:
            _write_cam_block(f, cam)


def load_cams(path: str) -> list:
    with open(path) as f:
        _expect(f.readline(), CAMS_MAGIC, path)
        n = int(f.readline().split()[1])
        return [_read_cam_block(f) for _ in range(n)]


# ----------------------------------------------------------------- views

def save_view(path: str, view: RenderedView) -> None:
    """Text header followed by little-endian float32 planes, one per
    channel, each height*width row-major."""
    cam = view.camera
    header = io.StringIO()
    header.write(VIEW_MAGIC + "\n")
    header.write(f"size {cam.width} {cam.height}\n")
    header.write("channels " + " ".join(VIEW_CHANNELS) + "\n")
    _write_cam_block(header, cam)
    header.write("data le-f32\n")
    planes = [view.depth, view.normal[..., 0], view.normal[..., 1], view.normal[..., 2], view.shading]
    with open(path, "wb") as f:
        f.write(header.getvalue().encode())
        for plane in planes:
            f.write(np.ascontiguousarray(plane, dtype="<f4").tobytes())


def load_view(path: str) -> RenderedView:
    with open(path, "rb") as f:
        _expect(f.readline().decode(), VIEW_MAGIC, path)
        parts = f.readline().decode().split()
        width, height = int(parts[1]), int(parts[2])
        channels = f.readline().decode().split()[1:]
        if tuple(channels) != VIEW_CHANNELS:
            raise ValueError(f"{path}: unexpected channels {channels}")
        text = io.StringIO()
        for _ in range(5):  # cam line, three R rows, t
            text.write(f.readline().decode())
        text.seek(0)
        cam = _read_cam_block(text)
        if f.readline().decode().strip() != "data le-f32":
            raise ValueError(f"{path}: missing data marker")
        n = width * height
        raw = f.read(len(VIEW_CHANNELS) * n * 4)
        flat = np.frombuffer(raw, dtype="<f4").astype(np.float64)
    planes = flat.reshape(len(VIEW_CHANNELS), height, width)
    normal = np.stack([planes[1], planes[2], planes[3]], axis=-1)
    return RenderedView(camera=cam, depth=planes[0], normal=normal, shading=planes[4])


# ------------------------------------------------------------------- PLY

def save_ply(path: str, cloud: PointCloud) -> None:
    """ASCII PLY with x y z nx ny nz and, when any point carries a source
    camera, an int camera column."""
    with_cam = bool((cloud.camera >= 0).any()) if len(cloud) else False
    with open(path, "w") as f:
        f.write("ply\nformat ascii 1.0\n")
        f.write(f"element vertex {len(cloud)}\n")
        for name in ("x", "y", "z", "nx", "ny", "nz"):
            f.write(f"property double {name}\n")
        if with_cam:
            f.write("property int camera\n")
        f.write("end_header\n")
        for i in range(len(cloud)):
            p, n = cloud.points[i], cloud.normals[i]
            row = " ".join(_fmt(x) for x in (p[0], p[1], p[2], n[0], n[1], n[2]))
            if with_cam:
                row += f" {cloud.camera[i]}"
            f.write(row + "\n")


def load_ply(path: str) -> PointCloud:
    with open(path) as f:
        if f.readline().strip() != "ply":
            raise ValueError(f"{path}: not a PLY file")
        if f.readline().strip() != "format ascii 1.0":
            raise ValueError(f"{path}: only ascii 1.0 supported")
        n = 0
        props = []
        while True:
            line = f.readline()
            if not line:
                raise ValueError(f"{path}: truncated header")
            parts = line.split()
            if parts[0] == "element":
                if parts[1] != "vertex":
                    raise ValueError(f"{path}: unsupported element {parts[1]}")
                n = int(parts[2])
            elif parts[0] == "property":
                props.append(parts[2])
            elif parts[0] == "end_header":
                break
        want = ["x", "y", "z", "nx", "ny", "nz"]
        if props[: len(want)] != want:
            raise ValueError(f"{path}: unexpected properties {props}")
        with_cam = len(props) > 6 and props[6] == "camera"
        pts = np.zeros((n, 3))
        nrm = np.zeros((n, 3))
        cam = np.full(n, -1, dtype=np.int64)
        for i in range(n):
            parts = f.readline().split()
            pts[i] = [float(parts[0]), float(parts[1]), float(parts[2])]
            nrm[i] = [float(parts[3]), float(parts[4]), float(parts[5])]
            if with_cam:
                cam[i] = int(parts[6])
    return PointCloud(points=pts, normals=nrm, camera=cam)


# ----------------------------------------------------------- checkpoints

def save_checkpoint(path, model, optimizer, step: int, extra: dict | None = None) -> None:
    """Magic line, one-line JSON header, then raw little-endian float64
    blocks: model parameters in declaration order, then momentum buffers."""
    params = model.params()
    header = {
        "step": int(step),
        "model_config": model.config_dict(),
        "momentum": float(optimizer.momentum),
        "params": [{"name": p.name, "shape": list(p.value.shape)} for p in params],
        "extra": extra or {},
    }
    with open(path, "wb") as f:
        f.write((CKPT_MAGIC + "\n").encode())
        f.write((json.dumps(header, sort_keys=True) + "\n").encode())
        for p in params:
            f.write(np.ascontiguousarray(p.value, dtype="<f8").tobytes())
        for p in params:
            f.write(np.ascontiguousarray(optimizer.buffer(p.name), dtype="<f8").tobytes())


def load_checkpoint(path):
    """Returns (model, optimizer, step, extra) with parameters and momentum
    restored."""
    from .model import FusionModel, ModelConfig
    from .train import SgdMomentum

    with open(path, "rb") as f:
        _expect(f.readline().decode(), CKPT_MAGIC, path)
        header = json.loads(f.readline().decode())
        model = FusionModel(ModelConfig(**header["model_config"]))
        optimizer = SgdMomentum(model.params(), momentum=header["momentum"])
        by_name = {p.name: p for p in model.params()}
        if [p["name"] for p in header["params"]] != list(by_name):
            raise ValueError(f"{path}: parameter set does not match model config")
        for rec in header["params"]:
            shape = tuple(rec["shape"])
            n = int(np.prod(shape, dtype=np.int64)) if shape else 1
            arr = np.frombuffer(f.read(n * 8), dtype="<f8").reshape(shape)
            by_name[rec["name"]].value[...] = arr
        for rec in header["params"]:
            shape = tuple(rec["shape"])
            n = int(np.prod(shape, dtype=np.int64)) if shape else 1
            arr = np.frombuffer(f.read(n * 8), dtype="<f8").reshape(shape)
            optimizer.buffer(rec["name"])[...] = arr
    return model, optimizer, int(header["step"]), header["extra"]


# ----------------------------------------------------------- loss curves

def save_curve(path: str, curve: np.ndarray, append: bool = False) -> None:
    """CSV of (step, lr, loss) rows; ``append`` continues an existing file
    without repeating the header."""
    new = not (append and os.path.exists(path))
    with open(path, "w" if new else "a") as f:
        if new:
            f.write("step,lr,loss\n")
        for step, lr, loss in np.atleast_2d(curve) if len(curve) else []:
            f.write(f"{int(step)},{_fmt(lr)},{_fmt(loss)}\n")


def load_curve(path: str) -> np.ndarray:
    rows = []
    with open(path) as f:
        header = f.readline().strip()
        if header != "step,lr,loss":
            raise ValueError(f"{path}: not a loss curve file")
        for line in f:
            s, lr, loss = line.split(",")
            rows.append((float(s), float(lr), float(loss)))
    return np.array(rows).reshape(-1, 3)


# ---------------------------------------------------------------- layout

def scene_path(root: str, scene_id: str) -> str:
    return os.path.join(root, "scenes", scene_id + ".scene")


def set_path(root: str, set_id: str) -> str:
    return os.path.join(root, "sets", set_id + ".cams")


def view_path(root: str, set_id: str, k: int) -> str:
    return os.path.join(root, "views", set_id, f"{k}.view")


def manifest_path(root: str) -> str:
    return os.path.join(root, "manifest.json")


def save_manifest(root: str, manifest: dict) -> None:
    body = json.dumps(manifest, sort_keys=True, indent=1) + "\n"
    with open(manifest_path(root), "w") as f:
        f.write(body)


def load_manifest(root: str) -> dict:
    path = manifest_path(root)
    if not os.path.exists(path):
        raise FileNotFoundError(f"no dataset manifest at {path}")
    with open(path) as f:
        manifest = json.load(f)
    if manifest.get("format") != MANIFEST_FORMAT:
        raise ValueError(f"{path}: unsupported manifest format")
    return manifest
