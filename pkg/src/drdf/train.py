"""Training loop: SGD with momentum, multi-step learning-rate decay, and a
last-finite-state guard.

Each step samples one training example (a scene with its cameras and
rendered views), builds a fresh supervision batch, runs the model forward
and backward, and applies ``v <- momentum * v + g;  w <- w - lr * v``.
The learning rate drops by ``lr_decay`` at fractional milestones of the
total step budget.  If the loss ever goes non-finite the loop restores the
parameters and momentum of the last step with finite loss and raises, so
callers can checkpoint a usable state.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NumericFailureError
from .field import TransformParams
from .model import FusionModel, loss_l1_with_grad
from .sampling import SamplingConfig, build_training_batch


@dataclass(frozen=True)
class TrainConfig:
    steps: int
    base_lr: float = 0.001
    momentum: float = 0.9
    lr_decay: float = 0.1
    milestone_fracs: tuple = (2.0 / 3.0, 5.0 / 6.0)
    log_every: int = 50
    n_views: int | None = None  # None draws N in 1..3 per step

    def __post_init__(self):
        object.__setattr__(self, "milestone_fracs", tuple(self.milestone_fracs))
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.base_lr <= 0.0 or not (0.0 <= self.momentum < 1.0):
            raise ValueError("bad optimizer hyperparameters")
        if sorted(self.milestone_fracs) != list(self.milestone_fracs):
            raise ValueError("milestone fractions must be ascending")
        if self.n_views is not None and self.n_views < 1:
            raise ValueError("n_views must be >= 1 when set")

    def lr_at(self, step: int) -> float:
        """Learning rate used for (1-based) step ``step`` of the budget."""
        passed = sum(1 for f in self.milestone_fracs if step > f * self.steps)
        return self.base_lr * (self.lr_decay**passed)


class SgdMomentum:
    """v <- momentum * v + g;  w <- w - lr * v, per parameter."""

    def __init__(self, params, momentum: float = 0.9):
        self.momentum = momentum
        self.buffers = {p.name: np.zeros_like(p.value) for p in params}

    def step(self, params, lr: float):
        for p in params:
            v = self.buffers[p.name]
            v *= self.momentum
            v += p.grad
            p.value -= lr * v

    def buffer(self, name: str) -> np.ndarray:
        return self.buffers[name]

    def state_copy(self):
        return {k: v.copy() for k, v in self.buffers.items()}

    def load_state(self, state):
        for k, v in self.buffers.items():
            v[...] = state[k]


@dataclass
class TrainExample:
    """One scene with its view set: mesh + cameras + rendered channel
    stacks (one (H, W, C) array per camera)."""

    mesh: object
    cameras: list
    images: list


@dataclass
class TrainResult:
    curve: np.ndarray  # (rows, 3): step, lr, loss
    final_step: int
    optimizer: SgdMomentum


def train_step(
    model: FusionModel,
    example: TrainExample,
    sampling_cfg: SamplingConfig,
    rng: np.random.Generator,
    transform: TransformParams = TransformParams(),
    n_views: int | None = None,
) -> float:
    """One full forward/backward over a freshly sampled batch; gradients
    are left accumulated on the model parameters."""
    batch = build_training_batch(
        example.mesh, example.cameras, sampling_cfg, rng, transform=transform, n_views=n_views
    )
    sel = batch.view_indices
    grids, ctxs, cams = [], [], []
    for vi in sel:
        g, c = model.encode(example.images[vi])
        grids.append(g)
        ctxs.append(c)
        cams.append(example.cameras[vi])
    pred, _, cache = model.forward_batch(
        grids, cams, batch.x, batch.r_q, batch.source, ray_group=sampling_cfg.points_per_ray
    )
    loss, dpred = loss_l1_with_grad(pred, batch.target)
    dgrids = model.backward_batch(dpred, cache)
    for dg, ctx in zip(dgrids, ctxs):
        model.encode_backward(dg, ctx)
    return loss


def train(
    model: FusionModel,
    examples,
    sampling_cfg: SamplingConfig,
    cfg: TrainConfig,
    rng: np.random.Generator,
    transform: TransformParams = TransformParams(),
    start_step: int = 0,
    optimizer: SgdMomentum | None = None,
    on_log=None,
) -> TrainResult:
    """Run (steps - start_step) updates; returns the loss curve with rows
    (step, lr, loss) every ``log_every`` steps plus the final step."""
    examples = list(examples)
    if not examples:
        raise ValueError("need at least one training example")
    params = model.params()
    if optimizer is None:
        optimizer = SgdMomentum(params, momentum=cfg.momentum)
    good_params = {p.name: p.value.copy() for p in params}
    good_opt = optimizer.state_copy()
    good_step = start_step

    curve = []

    def restore(step):
        for p in params:
            p.value[...] = good_params[p.name]
        optimizer.load_state(good_opt)
        exc = NumericFailureError(
            f"non-finite value at step {step}; restored state from step {good_step}"
        )
        # let callers checkpoint the rolled-back state
        exc.partial_curve = np.array(curve, dtype=np.float64).reshape(-1, 3)
        exc.good_step = good_step
        raise exc

    for step in range(start_step + 1, cfg.steps + 1):
        example = examples[rng.integers(0, len(examples))] if len(examples) > 1 else examples[0]
        model.zero_grads()
        try:
            loss = train_step(
                model, example, sampling_cfg, rng, transform=transform, n_views=cfg.n_views
            )
        except NumericFailureError:
            restore(step)
        if not np.isfinite(loss):
            restore(step)
        lr = cfg.lr_at(step)
        optimizer.step(params, lr)
        for p in params:
            good_params[p.name][...] = p.value
        for k, v in optimizer.buffers.items():
            good_opt[k][...] = v
        good_step = step
        if step % cfg.log_every == 0 or step == cfg.steps:
            curve.append((step, lr, loss))
            if on_log is not None:
                on_log(step, lr, loss)
    rows = np.array(curve, dtype=np.float64).reshape(-1, 3)
    return TrainResult(curve=rows, final_step=max(cfg.steps, start_step), optimizer=optimizer)
