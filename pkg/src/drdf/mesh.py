"""Triangle meshes and exact ray casting.

Rays are cast with the Moller-Trumbore test using inclusive barycentric
bounds, so a ray through a shared edge or vertex reports a hit on every
incident triangle; the duplicate distances are merged afterwards.  Hits
closer than ``RAY_EPS`` are discarded, which keeps rays from re-hitting the
surface they originate on.

The accelerated path (a median-split BVH walked breadth-first over a
stream of ray/node pairs) evaluates the exact same intersection kernel on
the same (ray, triangle) pairs as the brute-force path, so the two agree
bit for bit.  `cast_rays_brute` stays around as the reference.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DET_EPS = 1e-12  # |det| below this counts as ray parallel to triangle
RAY_EPS = 1e-6  # minimum hit distance; guards against self-hits at t ~ 0
DEDUP_EPS = 1e-6  # hits within this of the last kept hit are merged
_AABB_PAD = 1e-9  # absorbs rounding when a hit lies on a box face
_LEAF_SIZE = 8


_MIN_AREA = 1e-12  # square meters; smaller triangles are degenerate


@dataclass(frozen=True)
class TriangleMesh:
    """Indexed triangle soup: ``vertices`` (V, 3) float64, ``faces`` (F, 3)
    integer indices into the vertex array, optional integer ``face_labels``.

    Degenerate faces (area <= 1e-12 m^2) are rejected.  The mesh may be
    open / non-watertight; nothing here assumes closedness.
    """

    vertices: np.ndarray
    faces: np.ndarray
    face_labels: np.ndarray | None = None

    def __post_init__(self):
        v = np.ascontiguousarray(np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3))
        f = np.ascontiguousarray(np.asarray(self.faces, dtype=np.int64).reshape(-1, 3))
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)
        if self.face_labels is not None:
            lab = np.asarray(self.face_labels, dtype=np.int64).reshape(-1)
            if len(lab) != len(f):
                raise ValueError("face_labels length must match faces")
            object.__setattr__(self, "face_labels", lab)
        if f.size and (f.min() < 0 or f.max() >= len(v)):
            raise ValueError("face index out of range")
        if f.size:
            tri = v[f]
            area = 0.5 * np.linalg.norm(
                np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=-1
            )
            if (area <= _MIN_AREA).any():
                raise ValueError("mesh contains degenerate triangles")

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def triangle_corners(self):
        """(F, 3) arrays v0, v1, v2 of triangle corner positions."""
        tri = self.vertices[self.faces]
        return tri[:, 0], tri[:, 1], tri[:, 2]

    def face_normals(self) -> np.ndarray:
        """(F, 3) unit normals with right-hand winding; zero for degenerate
        triangles."""
        v0, v1, v2 = self.triangle_corners()
        n = np.cross(v1 - v0, v2 - v0)
        ln = np.linalg.norm(n, axis=-1, keepdims=True)
        return np.where(ln > 0.0, n / np.where(ln == 0.0, 1.0, ln), 0.0)

    def bounds(self):
        """(min_xyz, max_xyz) over all vertices."""
        if not len(self.vertices):
            raise ValueError("empty mesh has no bounds")
        return self.vertices.min(axis=0), self.vertices.max(axis=0)


def merge_meshes(meshes) -> TriangleMesh:
    """Concatenate meshes, offsetting face indices.  Labels survive only if
    every input carries them."""
    verts, faces, labels, base = [], [], [], 0
    for m in meshes:
        verts.append(m.vertices)
        faces.append(m.faces + base)
        labels.append(m.face_labels)
        base += m.n_vertices
    if not verts:
        raise ValueError("nothing to merge")
    lab = np.concatenate(labels) if all(l is not None for l in labels) else None
    return TriangleMesh(np.concatenate(verts), np.concatenate(faces), lab)


def transform_mesh(mesh: TriangleMesh, Q: np.ndarray, u: np.ndarray) -> TriangleMesh:
    """Rigidly move a mesh: x' = Q x + u."""
    Q = np.asarray(Q, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    return TriangleMesh(mesh.vertices @ Q.T + u, mesh.faces, mesh.face_labels)


# --- intersection kernel ----------------------------------------------------

def _mt_kernel(orig, direc, v0, v1, v2):
    """Moller-Trumbore on broadcastable (..., 3) arrays.

    Returns (t, valid).  The arithmetic is written with fixed elementwise
    component order so results are IEEE-identical no matter how the pairs
    are batched.  Bounds are inclusive: u >= 0, v >= 0, u + v <= 1.
    """

    def dot(a, b):
        return a[..., 0] * b[..., 0] + a[..., 1] * b[..., 1] + a[..., 2] * b[..., 2]

    def cross(a, b):
        return np.stack(
            [
                a[..., 1] * b[..., 2] - a[..., 2] * b[..., 1],
                a[..., 2] * b[..., 0] - a[..., 0] * b[..., 2],
                a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0],
            ],
            axis=-1,
        )

    e1 = v1 - v0
    e2 = v2 - v0
    pvec = cross(direc, e2)
    det = dot(e1, pvec)
    near_parallel = np.abs(det) < DET_EPS
    inv_det = 1.0 / np.where(near_parallel, 1.0, det)
    tvec = orig - v0
    u = dot(tvec, pvec) * inv_det
    qvec = cross(tvec, e1)
    v = dot(direc, qvec) * inv_det
    t = dot(e2, qvec) * inv_det
    valid = (
        ~near_parallel
        & (u >= 0.0)
        & (v >= 0.0)
        & (u + v <= 1.0)
        & (t >= RAY_EPS)
    )
    return t, valid


def _dedup_sorted(ray_id, t, face):
    """Greedy merge of ascending hits per ray: a hit within DEDUP_EPS of the
    last *kept* hit on the same ray is dropped.  Inputs must be sorted by
    (ray, t, face)."""
    n = len(t)
    keep = np.ones(n, dtype=bool)
    if n == 0:
        return keep
    same_ray = np.empty(n, dtype=bool)
    same_ray[0] = False
    same_ray[1:] = ray_id[1:] == ray_id[:-1]
    close = np.empty(n, dtype=bool)
    close[0] = False
    close[1:] = (t[1:] - t[:-1]) <= DEDUP_EPS
    suspect = same_ray & close
    if not suspect.any():
        return keep
    # Greedy chains are data dependent; walk only the affected runs.
    idx = np.flatnonzero(suspect)
    run_starts = idx[np.concatenate(([True], np.diff(idx) > 1))]
    for s in run_starts:
        last_kept = t[s - 1]
        j = s
        while j < n and ray_id[j] == ray_id[s - 1]:
            if t[j] - last_kept <= DEDUP_EPS:
                keep[j] = False
            else:
                if not suspect[j]:
                    break  # beyond this run; later runs handled separately
                last_kept = t[j]
            j += 1
    return keep


@dataclass(frozen=True)
class RayHits:
    """All surface hits for a batch of rays, CSR style: ray ``i`` owns
    ``t[offsets[i]:offsets[i+1]]`` (ascending, deduped) and the matching
    ``face`` indices."""

    offsets: np.ndarray  # (R + 1,) int64
    t: np.ndarray  # (H,) float64
    face: np.ndarray  # (H,) int64

    @property
    def n_rays(self) -> int:
        return len(self.offsets) - 1

    def counts(self) -> np.ndarray:
        return np.diff(self.offsets)

    def for_ray(self, i: int):
        s, e = self.offsets[i], self.offsets[i + 1]
        return self.t[s:e], self.face[s:e]

    def first(self):
        """(t, face, hit) of the nearest hit per ray; t = inf, face = -1
        where the ray misses everything."""
        counts = self.counts()
        hit = counts > 0
        t = np.full(self.n_rays, np.inf)
        face = np.full(self.n_rays, -1, dtype=np.int64)
        s = self.offsets[:-1][hit]
        t[hit] = self.t[s]
        face[hit] = self.face[s]
        return t, face, hit


def _assemble(n_rays, ray_id, t, face) -> RayHits:
    order = np.lexsort((face, t, ray_id))
    ray_id, t, face = ray_id[order], t[order], face[order]
    keep = _dedup_sorted(ray_id, t, face)
    ray_id, t, face = ray_id[keep], t[keep], face[keep]
    counts = np.bincount(ray_id, minlength=n_rays)
    offsets = np.zeros(n_rays + 1, dtype=np.int64)
    np.cumsum(counts, out=offsets[1:])
    return RayHits(offsets=offsets, t=t, face=face)


def cast_rays_brute(mesh: TriangleMesh, origins, directions, chunk: int = 256) -> RayHits:
    """Reference path: every ray against every triangle."""
    origins = np.atleast_2d(np.asarray(origins, dtype=np.float64))
    directions = np.atleast_2d(np.asarray(directions, dtype=np.float64))
    n = len(origins)
    v0, v1, v2 = mesh.triangle_corners()
    rid_parts, t_parts, f_parts = [], [], []
    for s in range(0, n, chunk):
        o = origins[s : s + chunk, None, :]
        d = directions[s : s + chunk, None, :]
        t, valid = _mt_kernel(o, d, v0[None], v1[None], v2[None])
        r, f = np.nonzero(valid)
        rid_parts.append(r + s)
        t_parts.append(t[valid])
        f_parts.append(f)
    if n:
        ray_id = np.concatenate(rid_parts).astype(np.int64)
        t_all = np.concatenate(t_parts)
        f_all = np.concatenate(f_parts).astype(np.int64)
    else:
        ray_id = np.empty(0, dtype=np.int64)
        t_all = np.empty(0)
        f_all = np.empty(0, dtype=np.int64)
    return _assemble(n, ray_id, t_all, f_all)


# --- BVH --------------------------------------------------------------------

class Bvh:
    """Median-split BVH over triangle AABBs, stored as flat arrays.

    Internal node ``i`` has children ``left[i]`` and ``right[i]``; leaves set
    ``left[i] = -1`` and own ``prim_order[start[i] : start[i] + count[i]]``.
    Splits take the median along the longest axis of the centroid bounds.
    """

    def __init__(self, mesh: TriangleMesh):
        v0, v1, v2 = mesh.triangle_corners()
        lo = np.minimum(np.minimum(v0, v1), v2) - _AABB_PAD
        hi = np.maximum(np.maximum(v0, v1), v2) + _AABB_PAD
        cent = (v0 + v1 + v2) / 3.0
        n = len(v0)
        order = np.arange(n, dtype=np.int64)

        bmin, bmax, left, right, start, count = [], [], [], [], [], []

        def build(lo_i, hi_i):
            node = len(bmin)
            seg = order[lo_i:hi_i]
            bmin.append(lo[seg].min(axis=0))
            bmax.append(hi[seg].max(axis=0))
            left.append(-1)
            right.append(-1)
            start.append(lo_i)
            count.append(hi_i - lo_i)
            if hi_i - lo_i <= _LEAF_SIZE:
                return node
            c = cent[seg]
            axis = int(np.argmax(c.max(axis=0) - c.min(axis=0)))
            mid = (hi_i - lo_i) // 2
            part = np.argpartition(c[:, axis], mid)
            order[lo_i:hi_i] = seg[part]
            left[node] = build(lo_i, lo_i + mid)
            right[node] = build(lo_i + mid, hi_i)
            return node

        if n:
            build(0, n)
        else:
            bmin.append(np.zeros(3))
            bmax.append(np.zeros(3))
            left.append(-1)
            right.append(-1)
            start.append(0)
            count.append(0)
        self.bmin = np.asarray(bmin)
        self.bmax = np.asarray(bmax)
        self.left = np.asarray(left, dtype=np.int64)
        self.right = np.asarray(right, dtype=np.int64)
        self.start = np.asarray(start, dtype=np.int64)
        self.count = np.asarray(count, dtype=np.int64)
        self.prim_order = order


def bvh_for(mesh: TriangleMesh) -> Bvh:
    """Build (or fetch) the BVH of a mesh.  Meshes are immutable, so the
    tree is cached on the mesh itself; its lifetime then tracks the mesh
    and concurrent builders at worst duplicate identical work."""
    bvh = getattr(mesh, "_bvh", None)
    if bvh is None:
        bvh = Bvh(mesh)
        object.__setattr__(mesh, "_bvh", bvh)
    return bvh


def _slab_hits(bvh, nodes, orig, inv_d):
    """Robust slab test of rays against node boxes; NaNs from 0 * inf fall
    out via fmin/fmax.  True where the box overlaps t >= 0."""
    lo = (bvh.bmin[nodes] - orig) * inv_d
    hi = (bvh.bmax[nodes] - orig) * inv_d
    tmin = np.fmax(np.fmax(np.fmin(lo[:, 0], hi[:, 0]), np.fmin(lo[:, 1], hi[:, 1])), np.fmin(lo[:, 2], hi[:, 2]))
    tmax = np.fmin(np.fmin(np.fmax(lo[:, 0], hi[:, 0]), np.fmax(lo[:, 1], hi[:, 1])), np.fmax(lo[:, 2], hi[:, 2]))
    return (tmax >= tmin) & (tmax >= 0.0)


def cast_rays(mesh: TriangleMesh, origins, directions) -> RayHits:
    """All hits for each ray: ascending t, duplicates within DEDUP_EPS of
    the last kept hit merged, nothing closer than RAY_EPS."""
    origins = np.atleast_2d(np.asarray(origins, dtype=np.float64))
    directions = np.atleast_2d(np.asarray(directions, dtype=np.float64))
    n = len(origins)
    if n == 0 or mesh.n_faces == 0:
        return _assemble(n, np.empty(0, np.int64), np.empty(0), np.empty(0, np.int64))
    bvh = bvh_for(mesh)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv_d = 1.0 / directions

    ray = np.arange(n, dtype=np.int64)
    node = np.zeros(n, dtype=np.int64)
    cand_ray, cand_prim = [], []
    while len(ray):
        ok = _slab_hits(bvh, node, origins[ray], inv_d[ray])
        ray, node = ray[ok], node[ok]
        is_leaf = bvh.left[node] < 0
        if is_leaf.any():
            lray, lnode = ray[is_leaf], node[is_leaf]
            cnt = bvh.count[lnode]
            total = int(cnt.sum())
            # flat leaf slots: start repeated per slot + within-leaf offset
            within = np.arange(total, dtype=np.int64) - np.repeat(np.cumsum(cnt) - cnt, cnt)
            flat = np.repeat(bvh.start[lnode], cnt) + within
            cand_ray.append(np.repeat(lray, cnt))
            cand_prim.append(bvh.prim_order[flat])
        ray, node = ray[~is_leaf], node[~is_leaf]
        ray = np.concatenate([ray, ray])
        node = np.concatenate([bvh.left[node], bvh.right[node]])

    if cand_ray:
        cr = np.concatenate(cand_ray)
        cp = np.concatenate(cand_prim)
    else:
        cr = np.empty(0, np.int64)
        cp = np.empty(0, np.int64)
    v0, v1, v2 = mesh.triangle_corners()
    t, valid = _mt_kernel(origins[cr], directions[cr], v0[cp], v1[cp], v2[cp])
    return _assemble(n, cr[valid], t[valid], cp[valid])


def first_hits(mesh: TriangleMesh, origins, directions):
    """(t, face, hit_mask) of the nearest hit per ray."""
    return cast_rays(mesh, origins, directions).first()


def intersect_ray(mesh: TriangleMesh, ray, z_max: float) -> np.ndarray:
    """All intersection distances of one query ray, ascending, capped at
    z_max.  An empty array means the ray hits nothing."""
    if z_max <= 0.0:
        raise ValueError("z_max must be positive")
    hits = cast_rays(mesh, ray.origin[None], ray.direction[None])
    t, _ = hits.for_ray(0)
    return t[t <= z_max].copy()
