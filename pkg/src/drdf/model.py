"""Multi-view fusion predictor for directed ray distances.

Pipeline per query point x with query ray direction r_q and N input views:

  1. each view's rendered channels pass through a small strided conv
     encoder once, giving a feature grid at 1/4 image resolution;
  2. x projects into every view; bilinear interpolation fetches a
     pixel-aligned feature (zeroed, and masked, when the projection falls
     outside the frustum);
  3. a per-view geometric query code [r_q - e_i, r_q . e_i, ndc_i(x)]
     (e_i = unit vector from camera i's center to x) expands through a
     sinusoidal positional encoding;
  4. concat(query, feature) -> linear joint vector per view; a single-head
     scaled dot-product self-attention block over the N view tokens emits
     one logit per view; masked softmax turns logits into fusion weights;
  5. the weighted sum of joint vectors feeds the head, whose final linear
     plus tanh yields a value in (-1, 1).

All arithmetic is float64 and every stage has a hand-written adjoint; the
tests verify the whole composite against finite differences.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .camera import Camera, camera_at, pixel_ray_directions
from .camera import ndc as camera_ndc
from .errors import NoEvidenceError, NumericFailureError
from .net import (
    Conv2d,
    Linear,
    bilinear_backward,
    bilinear_forward,
    gelu,
    gelu_backward,
    masked_softmax,
    masked_softmax_backward,
    positional_encoding,
)

_CENTER_EPS = 1e-9  # query distance below which a view sees its own center
_CENTER_NUDGE = 1e-6  # meters along the query ray to restore a defined code
_TINY_Z = 1e-12


@dataclass(frozen=True)
class ModelConfig:
    d_img: int = 64
    d_feat: int = 128
    pe_octaves: int = 6
    in_channels: int = 5  # depth + normal xyz + shading
    enc_channels: tuple = (32, 32, 64, 64)
    enc_strides: tuple = (1, 2, 1, 2)
    head_hidden: int = 0  # extra Linear+GELU blocks before the final linear
    # optional self-attention among samples of the same ray before the head.
    # Off by default: paired with concentrated train-time sampling it lets
    # the network infer surfaces from query density, a shortcut that breaks
    # under the uniform inference grid.  Kept for ablation runs.
    ray_attention: bool = False
    seed: int = 0

    def __post_init__(self):
        # tolerate lists (e.g. from a JSON round trip)
        object.__setattr__(self, "enc_channels", tuple(self.enc_channels))
        object.__setattr__(self, "enc_strides", tuple(self.enc_strides))
        if self.enc_channels[-1] != self.d_img:
            raise ValueError("last encoder channel count must equal d_img")
        if len(self.enc_channels) != len(self.enc_strides):
            raise ValueError("encoder channels/strides length mismatch")
        if self.pe_octaves < 1 or self.d_feat < 1 or self.d_img < 1:
            raise ValueError("dimensions must be positive")

    @property
    def d_query(self) -> int:
        return 7 * 2 * self.pe_octaves

    @property
    def stride(self) -> int:
        return int(np.prod(self.enc_strides))


@dataclass(frozen=True)
class FeatureGrid:
    """Per-view encoder output, spatially aligned so feature (u', v')
    corresponds to image pixel (u' * stride, v' * stride)."""

    grid: np.ndarray  # (Hf, Wf, d_img)
    source_camera: int
    stride: int
    image_hw: tuple  # (H, W) of the encoded image


@dataclass(frozen=True)
class QueryEncoding:
    """Geometric code of (x, r_q) relative to one camera."""

    delta_r: np.ndarray  # (4,) = [r_q - e, r_q . e]
    ndc: np.ndarray  # (3,)
    encoded: np.ndarray  # (14 * octaves,) positional encoding of the 7 raw


class FusionModel:
    def __init__(self, cfg: ModelConfig = ModelConfig()):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        self.convs = []
        c_prev = cfg.in_channels
        for i, (c, s) in enumerate(zip(cfg.enc_channels, cfg.enc_strides)):
            self.convs.append(Conv2d(c_prev, c, s, rng, f"enc{i}"))
            c_prev = c
        self.joint = Linear(cfg.d_query + cfg.d_img, cfg.d_feat, rng, "joint")
        self.attn_in = Linear(cfg.d_feat, cfg.d_feat, rng, "attn_in")
        self.attn_out = Linear(cfg.d_feat, 1, rng, "attn_out")
        self.ray_attn = Linear(cfg.d_feat, cfg.d_feat, rng, "ray_attn") if cfg.ray_attention else None
        self.head = []
        for i in range(cfg.head_hidden):
            self.head.append(Linear(cfg.d_feat, cfg.d_feat, rng, f"head{i}"))
        self.head.append(Linear(cfg.d_feat, 1, rng, f"head{cfg.head_hidden}"))

    # -- parameters ----------------------------------------------------------

    def params(self):
        layers = [*self.convs, self.joint, self.attn_in, self.attn_out]
        if self.ray_attn is not None:
            layers.append(self.ray_attn)
        layers.extend(self.head)
        out = []
        for layer in layers:
            out.extend(layer.params())
        return out

    def param_dict(self):
        return {p.name: p for p in self.params()}

    def config_dict(self):
        """JSON-safe copy of the configuration."""
        d = asdict(self.cfg)
        d["enc_channels"] = list(d["enc_channels"])
        d["enc_strides"] = list(d["enc_strides"])
        return d

    def zero_grads(self):
        for p in self.params():
            p.zero_grad()

    # -- image encoder -------------------------------------------------------

    def encode(self, image: np.ndarray):
        """Forward the encoder on one (H, W, C) view; returns the feature
        grid and the layer caches needed for backward."""
        image = np.asarray(image, dtype=np.float64)
        if not np.isfinite(image).all():
            raise ValueError("encoder input contains non-finite values")
        h = image
        ctxs = []
        for conv in self.convs:
            h, c_ctx = conv.forward(h)
            h, g_ctx = gelu(h)
            ctxs.append((c_ctx, g_ctx))
        if not np.isfinite(h).all():
            raise NumericFailureError("non-finite activation in image encoder")
        return h, ctxs

    def encode_backward(self, dgrid: np.ndarray, ctxs):
        d = dgrid
        for conv, (c_ctx, g_ctx) in zip(reversed(self.convs), reversed(ctxs)):
            d = gelu_backward(d, g_ctx)
            d = conv.backward(d, c_ctx)
        return d

    def encode_image(self, image: np.ndarray, camera_index: int = 0) -> FeatureGrid:
        grid, _ = self.encode(image)
        H, W = np.asarray(image).shape[:2]
        return FeatureGrid(grid=grid, source_camera=camera_index, stride=self.cfg.stride, image_hw=(H, W))

    # -- query path ----------------------------------------------------------

    def _view_inputs(self, grid: np.ndarray, cam: Camera, x: np.ndarray):
        """Per-view raw query components, pixel-aligned features, and the
        validity mask for a batch of points.  Returns the bilinear cache so
        backward can push feature gradients into the grid."""
        diff = x - cam.center
        dist = np.linalg.norm(diff, axis=-1)
        x_cam = cam.world_to_cam(x)
        z = x_cam[..., 2]
        safe_z = np.where(np.abs(z) < _TINY_Z, _TINY_Z, z)
        u = cam.focal * x_cam[..., 0] / safe_z + cam.cx
        v = cam.focal * x_cam[..., 1] / safe_z + cam.cy
        valid = (
            (z > 0.0)
            & (z >= cam.near)
            & (z <= cam.far)
            & (u >= 0.0)
            & (u < cam.width)
            & (v >= 0.0)
            & (v < cam.height)
            & (dist > _CENTER_EPS)
        )
        e = diff / np.maximum(dist, _CENTER_EPS)[..., None]
        ndc = np.stack(
            [
                2.0 * u / cam.width - 1.0,
                2.0 * v / cam.height - 1.0,
                2.0 * (z - cam.near) / (cam.far - cam.near) - 1.0,
            ],
            axis=-1,
        )
        feats, bl_ctx = bilinear_forward(grid, u / self.cfg.stride, v / self.cfg.stride)
        feats = feats * valid[:, None]
        return e, ndc, feats, valid, bl_ctx

    def _ray_attn_forward(self, fused: np.ndarray, ray_group: int):
        """Self-attention among the samples of each ray, residual on the
        fused feature.  ``fused`` is (M, d_feat) with rays contiguous in
        blocks of ``ray_group`` samples."""
        M = len(fused)
        if ray_group < 1 or M % ray_group:
            raise ValueError("batch is not divisible into whole rays")
        f3 = fused.reshape(M // ray_group, ray_group, -1)
        h, ctx = self.ray_attn.forward(f3)
        scale = 1.0 / math.sqrt(self.cfg.d_feat)
        scores = (h @ h.transpose(0, 2, 1)) * scale
        ones = np.ones((len(f3), 1, ray_group), dtype=bool)
        A, A_ctx = masked_softmax(scores, ones)
        out = f3 + A @ h
        return out.reshape(M, -1), dict(h=h, ctx=ctx, A=A, A_ctx=A_ctx, scale=scale, group=ray_group)

    def _ray_attn_backward(self, dfused: np.ndarray, ra):
        M = len(dfused)
        dout = dfused.reshape(M // ra["group"], ra["group"], -1)
        h, A = ra["h"], ra["A"]
        dA = dout @ h.transpose(0, 2, 1)
        dh = A.transpose(0, 2, 1) @ dout
        dscores = masked_softmax_backward(dA, ra["A_ctx"])
        dh = dh + (dscores @ h + dscores.transpose(0, 2, 1) @ h) * ra["scale"]
        df3 = dout + self.ray_attn.backward(dh, ra["ctx"])
        return df3.reshape(M, -1)

    def _fuse_forward(self, joint_in: np.ndarray, valid: np.ndarray, ray_group=None):
        """Attention fusion + head on (M, N, d_query + d_img) inputs."""
        d_feat = self.cfg.d_feat
        j, j_ctx = self.joint.forward(joint_in)
        h, hi_ctx = self.attn_in.forward(j)
        scale = 1.0 / math.sqrt(d_feat)
        scores = (h @ h.transpose(0, 2, 1)) * scale
        A, A_ctx = masked_softmax(scores, valid[:, None, :])
        att = A @ h
        logits, lo_ctx = self.attn_out.forward(att)
        logits = logits[..., 0]
        w, w_ctx = masked_softmax(logits, valid)
        fused = (w[..., None] * j).sum(axis=1)
        ra = None
        if self.ray_attn is not None:
            if ray_group is None:
                raise ValueError("model has ray attention; pass the samples-per-ray group size")
            fused, ra = self._ray_attn_forward(fused, ray_group)
        hcur = fused
        head_ctxs = []
        for lin in self.head[:-1]:
            hcur, l_ctx = lin.forward(hcur)
            hcur, g_ctx = gelu(hcur)
            head_ctxs.append((l_ctx, g_ctx))
        out, out_ctx = self.head[-1].forward(hcur)
        pred = np.tanh(out[..., 0])
        if not np.isfinite(pred).all():
            raise NumericFailureError("non-finite activation in fusion head")
        cache = dict(
            j=j, j_ctx=j_ctx, h=h, hi_ctx=hi_ctx, scale=scale, A=A, A_ctx=A_ctx,
            att=att, lo_ctx=lo_ctx, w=w, w_ctx=w_ctx, head_ctxs=head_ctxs,
            out_ctx=out_ctx, pred=pred, valid=valid, ra=ra,
        )
        return pred, w, cache

    def _fuse_backward(self, dpred: np.ndarray, cache):
        """Adjoint of `_fuse_forward`; returns gradient w.r.t. joint_in."""
        dout = (dpred * (1.0 - cache["pred"] ** 2))[..., None]
        dh = self.head[-1].backward(dout, cache["out_ctx"])
        for lin, (l_ctx, g_ctx) in zip(reversed(self.head[:-1]), reversed(cache["head_ctxs"])):
            dh = gelu_backward(dh, g_ctx)
            dh = lin.backward(dh, l_ctx)
        dfused = dh
        if cache["ra"] is not None:
            dfused = self._ray_attn_backward(dfused, cache["ra"])
        j, w, A, h = cache["j"], cache["w"], cache["A"], cache["h"]
        dw = (dfused[:, None, :] * j).sum(axis=-1)
        dj = w[..., None] * dfused[:, None, :]
        dlogits = masked_softmax_backward(dw, cache["w_ctx"])
        datt = self.attn_out.backward(dlogits[..., None], cache["lo_ctx"])
        dA = datt @ h.transpose(0, 2, 1)
        dh_att = A.transpose(0, 2, 1) @ datt
        dscores = masked_softmax_backward(dA, cache["A_ctx"])
        dh_att = dh_att + (dscores @ h + dscores.transpose(0, 2, 1) @ h) * cache["scale"]
        dj = dj + self.attn_in.backward(dh_att, cache["hi_ctx"])
        return self.joint.backward(dj, cache["j_ctx"])

    def forward_batch(self, grids, cams, x, r_q, source, ray_group=None):
        """Predict transformed distances for M query points against N views.

        grids: list of N (Hf, Wf, d_img) encoder outputs; cams: matching
        cameras; x: (M, 3); r_q: (M, 3) unit; source: (M,) local view index
        of each query ray.  ``ray_group`` is the samples-per-ray block size,
        required only by ray-attention models.  Returns (pred (M,),
        weights (M, N), cache).
        """
        x = np.asarray(x, dtype=np.float64)
        r_q = np.asarray(r_q, dtype=np.float64)
        source = np.asarray(source, dtype=np.int64)
        centers = np.stack([c.center for c in cams])
        # a sample exactly at its own camera center has no defined direction
        # code; nudge it forward along its ray (the z -> 0 limit).
        own = np.linalg.norm(x - centers[source], axis=-1) < _CENTER_EPS
        if own.any():
            x = np.where(own[:, None], x + _CENTER_NUDGE * r_q, x)

        M, N = len(x), len(cams)
        pes, feats, valids, bl_ctxs = [], [], [], []
        for grid, cam in zip(grids, cams):
            e, ndc, f, val, bl_ctx = self._view_inputs(grid, cam, x)
            raw = np.concatenate([r_q - e, (r_q * e).sum(axis=-1, keepdims=True), ndc], axis=-1)
            pes.append(positional_encoding(raw, self.cfg.pe_octaves))
            feats.append(f)
            valids.append(val)
            bl_ctxs.append(bl_ctx)
        valid = np.stack(valids, axis=1)
        if not valid.any(axis=1).all():
            raise NoEvidenceError("some query points are invalid in every view")
        joint_in = np.concatenate(
            [np.stack(pes, axis=1), np.stack(feats, axis=1)], axis=-1
        )
        pred, w, cache = self._fuse_forward(joint_in, valid, ray_group=ray_group)
        cache["bl_ctxs"] = bl_ctxs
        cache["n_views"] = N
        return pred, w, cache

    def backward_batch(self, dpred: np.ndarray, cache):
        """Accumulate parameter gradients; returns per-view feature-grid
        gradients for the encoder backward passes."""
        djoint_in = self._fuse_backward(dpred, cache)
        dfeat = djoint_in[..., self.cfg.d_query :]
        dfeat = dfeat * cache["valid"][..., None]
        dgrids = []
        for i, bl_ctx in enumerate(cache["bl_ctxs"]):
            dgrids.append(bilinear_backward(dfeat[:, i, :], bl_ctx))
        return dgrids


# -- public single-point operations -------------------------------------------

def pixel_aligned_feature(fgrid: FeatureGrid, pixel):
    """Bilinear feature at a continuous pixel; zero vector with
    validity=False when the pixel lies outside the image."""
    u, v = float(pixel[0]), float(pixel[1])
    H, W = fgrid.image_hw
    if not (0.0 <= u < W and 0.0 <= v < H):
        return np.zeros(fgrid.grid.shape[-1]), False
    vals, _ = bilinear_forward(
        fgrid.grid, np.array([u / fgrid.stride]), np.array([v / fgrid.stride])
    )
    return vals[0], True


def query_encode(x, r_q, cam: Camera, octaves: int = 6) -> QueryEncoding:
    """Geometric query code of point x and unit direction r_q w.r.t. one
    camera.  Raises ValueError at the camera center (direction undefined)."""
    x = np.asarray(x, dtype=np.float64).reshape(3)
    r_q = np.asarray(r_q, dtype=np.float64).reshape(3)
    if abs(np.linalg.norm(r_q) - 1.0) > 1e-6:
        raise ValueError("r_q must be a unit vector")
    diff = x - cam.center
    dist = np.linalg.norm(diff)
    if dist < _CENTER_EPS:
        raise ValueError("query point coincides with the camera center")
    e = diff / dist
    delta_r = np.concatenate([r_q - e, [float(r_q @ e)]])
    nd = camera_ndc(cam, x)
    raw = np.concatenate([delta_r, nd])
    return QueryEncoding(delta_r=delta_r, ndc=nd, encoded=positional_encoding(raw, octaves))


def fuse_and_predict(model: FusionModel, joints):
    """Fuse explicit per-view (feature, encoded query, validity) triples for
    one query point.  Returns (prediction, per-view weights)."""
    if not joints:
        raise ValueError("need at least one view")
    valid = np.array([[bool(v) for _, _, v in joints]])
    if not valid.any():
        raise NoEvidenceError("every view is invalid for this query")
    feat = np.stack([np.asarray(f, dtype=np.float64) for f, _, _ in joints])[None]
    quer = np.stack([np.asarray(q, dtype=np.float64) for _, q, _ in joints])[None]
    feat = feat * valid[..., None]
    joint_in = np.concatenate([quer, feat], axis=-1)
    pred, w, _ = model._fuse_forward(joint_in, valid, ray_group=1)
    return float(pred[0]), w[0]


def loss_l1(pred, target) -> float:
    """Mean absolute error."""
    loss, _ = loss_l1_with_grad(pred, target)
    return loss


def loss_l1_with_grad(pred, target):
    """Mean absolute error and its gradient w.r.t. pred (subgradient 0 at
    exact equality)."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError("pred/target length mismatch")
    diff = pred - target
    loss = float(np.abs(diff).mean()) if diff.size else 0.0
    grad = np.sign(diff) / max(diff.size, 1)
    return loss, grad


def frustum_evaluator(model: FusionModel, grids, cams, source_camera: int, chunk_rays: int = 128):
    """Adapter for `field.decode_frustum`: evaluates the model along ray
    batches, chunked to bound peak memory."""

    def evaluate(origins, directions, z):
        origins = np.atleast_2d(origins)
        directions = np.atleast_2d(directions)
        R, P = len(directions), len(z)
        out = np.empty((R, P))
        for a in range(0, R, chunk_rays):
            b = min(a + chunk_rays, R)
            k = b - a
            x = origins[a:b, None, :] + z[None, :, None] * directions[a:b, None, :]
            r_q = np.broadcast_to(directions[a:b, None, :], (k, P, 3))
            src = np.full(k * P, source_camera, dtype=np.int64)
            pred, _, _ = model.forward_batch(
                grids, cams, x.reshape(-1, 3), r_q.reshape(-1, 3), src, ray_group=P
            )
            out[a:b] = pred.reshape(k, P)
        return out

    return evaluate


def gradient_check(
    cfg: ModelConfig | None = None,
    n_views: int = 2,
    n_rays: int = 3,
    pts_per_ray: int = 3,
    probes_per_param: int = 6,
    h: float = 1e-4,
    seed: int = 0,
):
    """Finite-difference validation of the full manual backward pass.

    Builds a small model on random images and pixel rays, compares every
    parameter's analytic gradient against central differences at a few
    probe entries, and returns (worst relative error, {param: worst}).
    The relative error uses max(|fd|, |analytic|, 1e-8) as denominator.
    """
    if cfg is None:
        cfg = ModelConfig(
            d_img=6, d_feat=8, pe_octaves=2, enc_channels=(4, 6), enc_strides=(1, 2),
            head_hidden=1, seed=seed,
        )
    model = FusionModel(cfg)
    rng = np.random.default_rng(seed)
    H = W = 4 * cfg.stride
    images = [rng.normal(size=(H, W, cfg.in_channels)) for _ in range(n_views)]
    cams = [
        camera_at(
            (0.1 + 0.3 * i, 1.4 + 0.1 * i, 0.2 + 0.05 * i),
            yaw=0.1 - 0.05 * i, pitch=-0.05 * i, width=W, height=H,
        )
        for i in range(n_views)
    ]
    pix = np.stack(
        [rng.uniform(1.0, W - 1.0, size=n_rays), rng.uniform(1.0, H - 1.0, size=n_rays)],
        axis=-1,
    )
    dirs = pixel_ray_directions(cams[0], pix)
    z = np.linspace(0.4, 2.5, pts_per_ray)
    x = (cams[0].center[None, None] + z[None, :, None] * dirs[:, None, :]).reshape(-1, 3)
    r_q = np.repeat(dirs, pts_per_ray, axis=0)
    src = np.zeros(len(x), dtype=np.int64)
    target = rng.uniform(-1.0, 1.0, size=len(x))

    def loss_value():
        grids = [model.encode(im)[0] for im in images]
        pred, _, _ = model.forward_batch(grids, cams, x, r_q, src, ray_group=pts_per_ray)
        return loss_l1_with_grad(pred, target)[0]

    model.zero_grads()
    grids, ctxs = [], []
    for im in images:
        g, c = model.encode(im)
        grids.append(g)
        ctxs.append(c)
    pred, _, cache = model.forward_batch(grids, cams, x, r_q, src, ray_group=pts_per_ray)
    _, dpred = loss_l1_with_grad(pred, target)
    dgrids = model.backward_batch(dpred, cache)
    for dg, c in zip(dgrids, ctxs):
        model.encode_backward(dg, c)

    worst = 0.0
    per_param = {}
    for p in model.params():
        n = min(probes_per_param, p.value.size)
        flat = rng.choice(p.value.size, size=n, replace=False)
        local = 0.0
        for fi in flat:
            ix = np.unravel_index(fi, p.value.shape)
            old = p.value[ix]
            p.value[ix] = old + h
            lp = loss_value()
            p.value[ix] = old - h
            lm = loss_value()
            p.value[ix] = old
            fd = (lp - lm) / (2.0 * h)
            g = p.grad[ix]
            rel = abs(fd - g) / max(abs(fd), abs(g), 1e-8)
            local = max(local, rel)
        per_param[p.name] = local
        worst = max(worst, local)
    return worst, per_param
