"""Point-cloud evaluation: scene F-score with a visible/hidden split,
bidirectional multiview consistency, and synthetic pose perturbation.

Nearest-neighbor thresholding uses a uniform voxel grid with cell size
equal to the threshold, so any neighbor within distance rho lies in one of
the 27 cells around a query point; a brute-force path exists for
validation.  Visibility of a point means: some camera sees it in-frustum
with no mesh hit strictly closer than the point (minus a small epsilon,
since ground-truth points lie exactly on the mesh).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .camera import Camera, project
from .errors import NoOverlapError
from .field import PointCloud, concat_clouds
from .mesh import TriangleMesh, first_hits

EPS_VIS = 1e-3  # meters; occlusion test tolerance for on-surface points
DEFAULT_THRESHOLDS = (0.05, 0.1, 0.2, 0.5)
SPLITS = ("visible", "hidden", "all")


def _points(cloud) -> np.ndarray:
    if isinstance(cloud, PointCloud):
        return cloud.points
    return np.asarray(cloud, dtype=np.float64).reshape(-1, 3)


def within_rho_brute(query, ref, rho: float) -> np.ndarray:
    """True per query point iff some ref point lies within rho (O(Q*G))."""
    q, r = _points(query), _points(ref)
    if len(q) == 0:
        return np.zeros(0, dtype=bool)
    if len(r) == 0:
        return np.zeros(len(q), dtype=bool)
    out = np.zeros(len(q), dtype=bool)
    rho2 = rho * rho
    for a in range(0, len(q), 512):
        b = min(a + 512, len(q))
        d2 = ((q[a:b, None, :] - r[None, :, :]) ** 2).sum(axis=-1)
        out[a:b] = (d2 <= rho2).any(axis=1)
    return out


def within_rho(query, ref, rho: float) -> np.ndarray:
    """Voxel-grid version of `within_rho_brute`; exact for the <= rho test."""
    q, r = _points(query), _points(ref)
    if rho <= 0.0:
        raise ValueError("rho must be positive")
    if len(q) == 0:
        return np.zeros(0, dtype=bool)
    if len(r) == 0:
        return np.zeros(len(q), dtype=bool)
    inv = 1.0 / rho
    ri = np.floor(r * inv).astype(np.int64)
    qi = np.floor(q * inv).astype(np.int64)
    origin = ri.min(axis=0) - 1
    dims = ri.max(axis=0) - origin + 3  # pad so query cells +-1 stay in range

    def pack(cells):
        return (cells[:, 0] * dims[1] + cells[:, 1]) * dims[2] + cells[:, 2]

    rkey = pack(ri - origin)
    order = np.argsort(rkey, kind="stable")
    rkey_sorted = rkey[order]
    r_sorted = r[order]

    found = np.zeros(len(q), dtype=bool)
    rho2 = rho * rho
    for dx in (-1, 0, 1):
        for dy in (-1, 0, 1):
            for dz in (-1, 0, 1):
                cells = qi + np.array([dx, dy, dz]) - origin
                ok = ((cells >= 0) & (cells < dims)).all(axis=1) & ~found
                if not ok.any():
                    continue
                keys = pack(cells[ok])
                lo = np.searchsorted(rkey_sorted, keys, side="left")
                hi = np.searchsorted(rkey_sorted, keys, side="right")
                cnt = hi - lo
                total = int(cnt.sum())
                if total == 0:
                    continue
                qidx = np.flatnonzero(ok)
                rep_q = np.repeat(qidx, cnt)
                within_run = np.arange(total, dtype=np.int64) - np.repeat(np.cumsum(cnt) - cnt, cnt)
                rep_r = np.repeat(lo, cnt) + within_run
                d2 = ((q[rep_q] - r_sorted[rep_r]) ** 2).sum(axis=-1)
                hit = d2 <= rho2
                found[rep_q[hit]] = True
    return found


def fscore(pred, gt, rho: float):
    """(accuracy %, completeness %, F %) of a predicted cloud against
    ground truth at threshold rho."""
    p, g = _points(pred), _points(gt)
    if len(g) == 0:
        raise ValueError("empty ground-truth cloud")
    acc = 100.0 * within_rho(p, g, rho).mean() if len(p) else 0.0
    comp = 100.0 * within_rho(g, p, rho).mean()
    f = 2.0 * acc * comp / (acc + comp) if (acc + comp) > 0.0 else 0.0
    return float(acc), float(comp), float(f)


def classify_visibility(points, cameras, mesh: TriangleMesh, z_max: float) -> np.ndarray:
    """True per point iff some camera sees it: in-frustum (depth <= z_max)
    and no surface strictly closer than the point along the sight ray."""
    pts = _points(points)
    visible = np.zeros(len(pts), dtype=bool)
    for cam in cameras:
        todo = ~visible
        if not todo.any():
            break
        idx = np.flatnonzero(todo)
        proj = project(cam, pts[idx])
        cand = proj.in_frustum & (proj.depth <= z_max)
        idx = idx[cand]
        if not len(idx):
            continue
        c = cam.center
        diff = pts[idx] - c
        dist = np.linalg.norm(diff, axis=-1)
        dirs = diff / dist[:, None]
        t_first, _, _ = first_hits(mesh, np.broadcast_to(c, dirs.shape), dirs)
        visible[idx] = ~(t_first < dist - EPS_VIS)
    return visible


@dataclass(frozen=True)
class ReconSet:
    """Per-camera decoded clouds plus their union."""

    clouds: list  # list[PointCloud], one per camera
    cameras: list  # list[Camera]

    def __post_init__(self):
        if len(self.clouds) != len(self.cameras):
            raise ValueError("one cloud per camera required")

    @property
    def merged(self) -> PointCloud:
        return concat_clouds(self.clouds)


def consistency(recon: ReconSet, rho: float, z_max: float | None = None) -> float:
    """Count-weighted mean over ordered camera pairs (i, j), i != j, of the
    fraction of P_j's points inside camera i's frustum that lie within rho
    of P_i."""
    n = len(recon.cameras)
    if n < 2:
        raise ValueError("consistency needs at least 2 cameras")
    total_cand = 0
    total_within = 0
    for i in range(n):
        cam_i = recon.cameras[i]
        zm = cam_i.far if z_max is None else z_max
        pts_i = recon.clouds[i].points
        for j in range(n):
            if i == j:
                continue
            pts_j = recon.clouds[j].points
            if not len(pts_j):
                continue
            proj = project(cam_i, pts_j)
            cand = pts_j[proj.in_frustum & (proj.depth <= zm)]
            if not len(cand):
                continue
            total_cand += len(cand)
            total_within += int(within_rho(cand, pts_i, rho).sum())
    if total_cand == 0:
        raise NoOverlapError("no camera pair shares in-frustum points")
    return 100.0 * total_within / total_cand


def so3_exp(omega: np.ndarray) -> np.ndarray:
    """Rodrigues' formula: matrix exponential of the cross-product matrix
    of omega."""
    omega = np.asarray(omega, dtype=np.float64).reshape(3)
    theta = np.linalg.norm(omega)
    K = np.array(
        [
            [0.0, -omega[2], omega[1]],
            [omega[2], 0.0, -omega[0]],
            [-omega[1], omega[0], 0.0],
        ]
    )
    if theta < 1e-12:
        return np.eye(3) + K
    return np.eye(3) + (np.sin(theta) / theta) * K + ((1.0 - np.cos(theta)) / theta**2) * (K @ K)


def perturb_pose(cam: Camera, sigma_r: float, sigma_t: float, rng: np.random.Generator) -> Camera:
    """Left-multiply the rotation by exp([omega]x), omega ~ N(0, sigma_r^2 I),
    and add N(0, sigma_t^2 I) to the translation."""
    if sigma_r < 0.0 or sigma_t < 0.0:
        raise ValueError("noise scales must be non-negative")
    omega = rng.normal(0.0, sigma_r, size=3) if sigma_r > 0.0 else np.zeros(3)
    delta = rng.normal(0.0, sigma_t, size=3) if sigma_t > 0.0 else np.zeros(3)
    R = so3_exp(omega) @ cam.rotation
    # re-orthonormalize: float error compounds under composition
    u, _, vt = np.linalg.svd(R)
    R = u @ vt
    if np.linalg.det(R) < 0.0:
        u[:, -1] = -u[:, -1]
        R = u @ vt
    return Camera(
        width=cam.width,
        height=cam.height,
        fov_x=cam.fov_x,
        rotation=R,
        translation=cam.translation + delta,
        near=cam.near,
        far=cam.far,
    )


def sample_mesh_cloud(
    mesh: TriangleMesh,
    n: int,
    rng: np.random.Generator,
    cameras=None,
    z_max: float | None = None,
    max_rounds: int = 50,
) -> PointCloud:
    """Uniform area-weighted surface samples with face normals, optionally
    restricted to the union of the cameras' frustums."""
    v0, v1, v2 = mesh.triangle_corners()
    area = 0.5 * np.linalg.norm(np.cross(v1 - v0, v2 - v0), axis=-1)
    prob = area / area.sum()
    normals = mesh.face_normals()
    pts_parts, nrm_parts = [], []
    have = 0
    for _ in range(max_rounds):
        if have >= n:
            break
        k = max(n, 2 * (n - have))
        face = rng.choice(len(prob), size=k, p=prob)
        r1 = np.sqrt(rng.uniform(size=k))
        r2 = rng.uniform(size=k)
        p = (
            (1.0 - r1)[:, None] * v0[face]
            + (r1 * (1.0 - r2))[:, None] * v1[face]
            + (r1 * r2)[:, None] * v2[face]
        )
        nrm = normals[face]
        if cameras:
            keep = np.zeros(k, dtype=bool)
            for cam in cameras:
                zm = cam.far if z_max is None else z_max
                proj = project(cam, p)
                keep |= proj.in_frustum & (proj.depth <= zm)
            p, nrm = p[keep], nrm[keep]
        pts_parts.append(p)
        nrm_parts.append(nrm)
        have += len(p)
        if not cameras:
            break
    pts = np.concatenate(pts_parts)[:n]
    nrm = np.concatenate(nrm_parts)[:n]
    return PointCloud(points=pts, normals=nrm, camera=np.full(len(pts), -1, dtype=np.int64))


@dataclass(frozen=True)
class MetricReport:
    """Per-threshold accuracy/completeness/F for each visibility split,
    plus consistency when two or more cameras are present."""

    thresholds: np.ndarray  # (T,) ascending
    scores: dict  # (split, metric) -> (T,) array; metric in ("p", "r", "f")
    consistency: np.ndarray | None  # (T,) or None for single-camera sets


def evaluate_run(
    recon: ReconSet,
    gt_cloud: PointCloud,
    mesh: TriangleMesh,
    thresholds=DEFAULT_THRESHOLDS,
    z_max: float | None = None,
) -> MetricReport:
    """F-score on visible / hidden / all splits (both clouds split by the
    same visibility test) and consistency across the reconstruction."""
    cams = recon.cameras
    zm = cams[0].far if z_max is None else z_max
    thresholds = np.sort(np.asarray(thresholds, dtype=np.float64))
    merged = recon.merged
    gt_vis = classify_visibility(gt_cloud, cams, mesh, zm)
    pred_vis = classify_visibility(merged, cams, mesh, zm)
    subsets = {
        "visible": (merged.points[pred_vis], gt_cloud.points[gt_vis]),
        "hidden": (merged.points[~pred_vis], gt_cloud.points[~gt_vis]),
        "all": (merged.points, gt_cloud.points),
    }
    scores = {}
    for split in SPLITS:
        p_arr, r_arr, f_arr = [], [], []
        pred_pts, gt_pts = subsets[split]
        for rho in thresholds:
            if len(gt_pts) == 0:
                p, r, f = 0.0, 0.0, 0.0
            else:
                p, r, f = fscore(pred_pts, gt_pts, float(rho))
            p_arr.append(p)
            r_arr.append(r)
            f_arr.append(f)
        scores[(split, "p")] = np.array(p_arr)
        scores[(split, "r")] = np.array(r_arr)
        scores[(split, "f")] = np.array(f_arr)
    cons = None
    if len(cams) >= 2:
        cons = np.array([consistency(recon, float(rho), zm) for rho in thresholds])
    return MetricReport(thresholds=thresholds, scores=scores, consistency=cons)


def report_csv(report: MetricReport) -> str:
    cols = ["threshold"]
    for split in SPLITS:
        for metric in ("p", "r", "f"):
            cols.append(f"{metric}_{split}")
    if report.consistency is not None:
        cols.append("consistency")
    lines = [",".join(cols)]
    for i, rho in enumerate(report.thresholds):
        row = [f"{rho:g}"]
        for split in SPLITS:
            for metric in ("p", "r", "f"):
                row.append(f"{report.scores[(split, metric)][i]:.4f}")
        if report.consistency is not None:
            row.append(f"{report.consistency[i]:.4f}")
        lines.append(",".join(row))
    return "\n".join(lines) + "\n"


def report_text(report: MetricReport) -> str:
    lines = []
    for i, rho in enumerate(report.thresholds):
        parts = [f"rho={rho:g}"]
        for split in SPLITS:
            f = report.scores[(split, "f")][i]
            parts.append(f"f@{split}={f:.2f}")
        if report.consistency is not None:
            parts.append(f"consistency={report.consistency[i]:.2f}")
        lines.append("  ".join(parts))
    return "\n".join(lines) + "\n"
