"""Procedural indoor-like scenes, channel rendering, and view sampling.

World convention: y is up, the floor lies at y = 0, and the room occupies
[0, extent] in x/z.  Scenes are open meshes: a floor, 2-4 perimeter walls
(one with a doorway gap), one guaranteed free-standing partial wall (so
every scene has occluded geometry), and a sprinkling of boxes, panels, and
open shells.

Rendered views carry geometry channels instead of RGB: first-hit distance
along the pixel ray (0 where the ray escapes), the surface normal flipped
toward the camera, and headlight shading |n . d|.  Note the depth channel
is the ray distance, not camera-z; convert via `depth_to_cam_z` before
unprojecting.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .camera import Camera, camera_at, pixel_ray_directions, project, unproject
from .errors import SamplingFailureError, UndefinedOverlapError
from .mesh import TriangleMesh, first_hits, merge_meshes

EPS_DEPTH = 0.05  # meters; reprojected-depth agreement for co-visibility
WALL_HEIGHT = 2.6
CAMERA_HEIGHT = (1.2, 1.8)
_MARGIN = 0.35  # camera clearance from walls


@dataclass(frozen=True)
class SceneSpec:
    extent: tuple = (6.0, 2.6, 6.0)  # room size in x, y, z
    n_objects: tuple = (4, 9)
    kinds: tuple = ("box", "panel", "shell")
    tri_budget: int = 2000
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "extent", tuple(float(e) for e in self.extent))
        object.__setattr__(self, "n_objects", tuple(int(n) for n in self.n_objects))
        object.__setattr__(self, "kinds", tuple(self.kinds))
        if min(self.extent) <= 0.0:
            raise ValueError("extent must be positive")
        if self.n_objects[0] < 0 or self.n_objects[1] < self.n_objects[0]:
            raise ValueError("bad object count range")
        if not self.kinds:
            raise ValueError("need at least one object kind")
        if any(k not in ("box", "panel", "shell") for k in self.kinds):
            raise ValueError("kinds must be among box/panel/shell")


def _quad(corners, label):
    """Two triangles spanning four corners given in winding order."""
    v = np.asarray(corners, dtype=np.float64)
    return TriangleMesh(v, np.array([[0, 1, 2], [0, 2, 3]]), np.array([label, label]))


def _vertical_panel(cx, cz, width, height, yaw, label, y0=0.0):
    """A free-standing wall segment centered at (cx, z) with the given yaw."""
    dx, dz = 0.5 * width * np.cos(yaw), 0.5 * width * np.sin(yaw)
    a = (cx - dx, y0, cz - dz)
    b = (cx + dx, y0, cz + dz)
    return _quad([a, b, (b[0], y0 + height, b[2]), (a[0], y0 + height, a[2])], label)


def _box(cx, cz, sx, sy, sz, yaw, label, open_side=False):
    """Axis box of size (sx, sy, sz) sitting on the floor, rotated by yaw.
    With ``open_side`` one vertical face is omitted (an open shell)."""
    hx, hz = sx / 2.0, sz / 2.0
    base = np.array(
        [
            [-hx, 0, -hz], [hx, 0, -hz], [hx, 0, hz], [-hx, 0, hz],
            [-hx, sy, -hz], [hx, sy, -hz], [hx, sy, hz], [-hx, sy, hz],
        ]
    )
    c, s = np.cos(yaw), np.sin(yaw)
    rot = np.array([[c, 0, -s], [0, 1, 0], [s, 0, c]])
    verts = base @ rot.T + np.array([cx, 0.0, cz])
    quads = [
        (0, 1, 5, 4),  # -z side
        (2, 3, 7, 6),  # +z side
        (1, 2, 6, 5),  # +x side
        (3, 0, 4, 7),  # -x side
        (4, 5, 6, 7),  # top
        (3, 2, 1, 0),  # bottom
    ]
    if open_side:
        quads = quads[1:5]  # drop one wall and the bottom
    faces = []
    for a, b, cc, d in quads:
        faces.append([a, b, cc])
        faces.append([a, cc, d])
    f = np.array(faces)
    return TriangleMesh(verts, f, np.full(len(f), label))


def _wall_with_door(side, ex, ez, rng):
    """Perimeter wall on one side of the room, pierced by a doorway gap."""
    length = ex if side in (0, 1) else ez
    gap_w = rng.uniform(0.7, 1.1)
    gap_h = rng.uniform(1.8, 2.1)
    g0 = rng.uniform(0.2, length - gap_w - 0.2)
    g1 = g0 + gap_w

    def seg(a, b, y0, y1):
        if side == 0:
            c = [(a, y0, 0.0), (b, y0, 0.0), (b, y1, 0.0), (a, y1, 0.0)]
        elif side == 1:
            c = [(a, y0, ez), (b, y0, ez), (b, y1, ez), (a, y1, ez)]
        elif side == 2:
            c = [(0.0, y0, a), (0.0, y0, b), (0.0, y1, b), (0.0, y1, a)]
        else:
            c = [(ex, y0, a), (ex, y0, b), (ex, y1, b), (ex, y1, a)]
        return _quad(c, label=1)

    parts = []
    if g0 > 1e-6:
        parts.append(seg(0.0, g0, 0.0, WALL_HEIGHT))
    if g1 < length - 1e-6:
        parts.append(seg(g1, length, 0.0, WALL_HEIGHT))
    parts.append(seg(g0, g1, gap_h, WALL_HEIGHT))  # lintel above the gap
    return merge_meshes(parts)


def _plain_wall(side, ex, ez):
    if side == 0:
        c = [(0, 0, 0), (ex, 0, 0), (ex, WALL_HEIGHT, 0), (0, WALL_HEIGHT, 0)]
    elif side == 1:
        c = [(0, 0, ez), (ex, 0, ez), (ex, WALL_HEIGHT, ez), (0, WALL_HEIGHT, ez)]
    elif side == 2:
        c = [(0, 0, 0), (0, 0, ez), (0, WALL_HEIGHT, ez), (0, WALL_HEIGHT, 0)]
    else:
        c = [(ex, 0, 0), (ex, 0, ez), (ex, WALL_HEIGHT, ez), (ex, WALL_HEIGHT, 0)]
    return _quad(c, label=1)


def generate_scene(spec: SceneSpec, rng: np.random.Generator | None = None) -> TriangleMesh:
    """Deterministic (per seed) procedural room.  Labels: 0 floor, 1 walls,
    2 the guaranteed occluder, 3+ objects."""
    if rng is None:
        rng = np.random.default_rng(spec.seed)
    ex, ey, ez = spec.extent
    parts = [_quad([(0, 0, 0), (ex, 0, 0), (ex, 0, ez), (0, 0, ez)], label=0)]

    n_walls = int(rng.integers(2, 5))
    sides = rng.choice(4, size=n_walls, replace=False)
    door_side = sides[int(rng.integers(0, n_walls))]
    for side in sides:
        if side == door_side:
            parts.append(_wall_with_door(int(side), ex, ez, rng))
        else:
            parts.append(_plain_wall(int(side), ex, ez))

    # guaranteed occluder: a partial wall strictly inside the room
    occ_w = rng.uniform(1.2, 2.4)
    occ_h = rng.uniform(1.3, min(2.2, ey))
    cx = rng.uniform(0.25 * ex, 0.75 * ex)
    cz = rng.uniform(0.25 * ez, 0.75 * ez)
    parts.append(_vertical_panel(cx, cz, occ_w, occ_h, rng.uniform(0.0, np.pi), label=2))

    n_obj = int(rng.integers(spec.n_objects[0], spec.n_objects[1] + 1))
    for i in range(n_obj):
        kind = spec.kinds[int(rng.integers(0, len(spec.kinds)))]
        ox = rng.uniform(0.15 * ex, 0.85 * ex)
        oz = rng.uniform(0.15 * ez, 0.85 * ez)
        yaw = rng.uniform(0.0, np.pi)
        if kind == "box":
            parts.append(
                _box(ox, oz, rng.uniform(0.3, 1.1), rng.uniform(0.3, 1.4), rng.uniform(0.3, 1.1), yaw, label=3 + i)
            )
        elif kind == "shell":
            parts.append(
                _box(ox, oz, rng.uniform(0.5, 1.2), rng.uniform(0.5, 1.3), rng.uniform(0.5, 1.2), yaw, label=3 + i, open_side=True)
            )
        else:
            parts.append(
                _vertical_panel(ox, oz, rng.uniform(0.6, 1.6), rng.uniform(0.8, 1.8), yaw, label=3 + i)
            )
    mesh = merge_meshes(parts)
    if mesh.n_faces > spec.tri_budget:
        raise ValueError("scene exceeded its triangle budget")
    return mesh


@dataclass(frozen=True)
class RenderedView:
    """Geometry channels of one camera: ray-distance depth (0 = miss),
    camera-facing unit normals, and headlight shading in [0, 1]."""

    camera: Camera
    depth: np.ndarray  # (H, W)
    normal: np.ndarray  # (H, W, 3)
    shading: np.ndarray  # (H, W)

    def channels(self) -> np.ndarray:
        """(H, W, 5) stack fed to the image encoder."""
        return np.concatenate(
            [self.depth[..., None], self.normal, self.shading[..., None]], axis=-1
        )

    @property
    def hit_mask(self) -> np.ndarray:
        return self.depth > 0.0

    def hit_fraction(self) -> float:
        return float(self.hit_mask.mean())


def pixel_centers(cam: Camera) -> np.ndarray:
    """(H, W, 2) continuous coordinates of every pixel center."""
    u = np.arange(cam.width, dtype=np.float64) + 0.5
    v = np.arange(cam.height, dtype=np.float64) + 0.5
    uu, vv = np.meshgrid(u, v)
    return np.stack([uu, vv], axis=-1)


def render_view(mesh: TriangleMesh, cam: Camera) -> RenderedView:
    """First-hit render of all pixel-center rays."""
    pix = pixel_centers(cam).reshape(-1, 2)
    dirs = pixel_ray_directions(cam, pix)
    t, face, hit = first_hits(mesh, np.broadcast_to(cam.center, dirs.shape), dirs)
    H, W = cam.height, cam.width
    depth = np.zeros(H * W)
    normal = np.zeros((H * W, 3))
    shading = np.zeros(H * W)
    if hit.any():
        fn = mesh.face_normals()[face[hit]]
        d = dirs[hit]
        dot = (fn * d).sum(axis=-1)
        fn = np.where(dot[:, None] > 0.0, -fn, fn)  # flip toward the camera
        depth[hit] = t[hit]
        normal[hit] = fn
        shading[hit] = np.abs(dot)
    return RenderedView(
        camera=cam,
        depth=depth.reshape(H, W),
        normal=normal.reshape(H, W, 3),
        shading=shading.reshape(H, W),
    )


def depth_to_cam_z(cam: Camera, pixels: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Convert ray-distance depth to camera-z for given pixels."""
    pixels = np.asarray(pixels, dtype=np.float64)
    dx = (pixels[..., 0] - cam.cx) / cam.focal
    dy = (pixels[..., 1] - cam.cy) / cam.focal
    return np.asarray(t) / np.sqrt(1.0 + dx * dx + dy * dy)


def view_points(view: RenderedView) -> np.ndarray:
    """World points of all hit pixels (flattened in row-major pixel order)."""
    cam = view.camera
    pix = pixel_centers(cam).reshape(-1, 2)
    hit = view.hit_mask.ravel()
    t = view.depth.ravel()[hit]
    z = depth_to_cam_z(cam, pix[hit], t)
    return unproject(cam, pix[hit], z)


def view_overlap(view_a: RenderedView, view_b: RenderedView, cam_b: Camera) -> float:
    """Fraction of view_a's hit pixels that are co-visible in view_b: the
    3D point falls in cam_b's frustum and view_b's depth at the nearest
    pixel agrees within EPS_DEPTH."""
    hit_a = view_a.hit_mask.ravel()
    if not hit_a.any():
        raise UndefinedOverlapError("reference view hits nothing")
    pts = view_points(view_a)
    proj = project(cam_b, pts)
    ok = proj.in_frustum
    co_visible = np.zeros(len(pts), dtype=bool)
    if ok.any():
        up = np.floor(proj.pixel[ok, 0]).astype(np.int64)
        vp = np.floor(proj.pixel[ok, 1]).astype(np.int64)
        up = np.clip(up, 0, cam_b.width - 1)
        vp = np.clip(vp, 0, cam_b.height - 1)
        depth_b = view_b.depth[vp, up]
        dist_b = np.linalg.norm(pts[ok] - cam_b.center, axis=-1)
        co_visible[ok] = (depth_b > 0.0) & (np.abs(depth_b - dist_b) <= EPS_DEPTH)
    return float(co_visible.mean())


def _place(rng: np.random.Generator, a: float, b: float) -> float:
    # scenes narrower than the wall margin collapse to their midline
    if b <= a:
        return 0.5 * (a + b)
    return float(rng.uniform(a, b))


def sample_view_set(
    mesh: TriangleMesh,
    k: int,
    rng: np.random.Generator,
    max_tries: int = 300,
    max_overlap: float = 0.70,
    min_overlap: float = 0.30,
    min_hit_fraction: float = 0.30,
    width: int = 128,
    height: int = 128,
    fov_x: float = 63.4,
    far: float = 8.0,
):
    """k cameras at human heights with pitch <= 0 such that every pair
    overlaps at most ``max_overlap`` (both directions) and every camera
    has at least ``min_overlap`` co-visibility (both directions) with some
    other member.  Raises after ``max_tries`` rejected candidates."""
    if k < 1:
        raise ValueError("k must be >= 1")
    lo, hi = mesh.bounds()
    cams, views = [], []
    tries = 0
    stalled = 0
    while len(cams) < k:
        if tries >= max_tries:
            raise SamplingFailureError(
                f"view-set constraints unsatisfied after {max_tries} tries ({len(cams)}/{k} placed)"
            )
        if stalled >= 60 and cams:
            # the partial set may be unextendable; start over
            cams, views, stalled = [], [], 0
        tries += 1
        stalled += 1
        pos = np.array(
            [
                _place(rng, lo[0] + _MARGIN, hi[0] - _MARGIN),
                lo[1] + rng.uniform(*CAMERA_HEIGHT),
                _place(rng, lo[2] + _MARGIN, hi[2] - _MARGIN),
            ]
        )
        yaw = rng.uniform(0.0, 2.0 * np.pi)
        pitch = rng.uniform(-0.35, 0.0)
        cam = camera_at(pos, yaw, pitch, width=width, height=height, fov_x=fov_x, far=far)
        view = render_view(mesh, cam)
        if view.hit_fraction() < min_hit_fraction:
            continue
        if cams:
            overlaps = []
            ok = True
            for prev_cam, prev_view in zip(cams, views):
                o_ab = view_overlap(view, prev_view, prev_cam)
                o_ba = view_overlap(prev_view, view, cam)
                if max(o_ab, o_ba) > max_overlap:
                    ok = False
                    break
                overlaps.append(min(o_ab, o_ba))
            if not ok or max(overlaps) < min_overlap:
                continue
        cams.append(cam)
        views.append(view)
        stalled = 0
    return cams
