"""Optimizer arithmetic, the milestone schedule, and the training loop's
rollback on numeric failure."""

import numpy as np
import pytest
from conftest import make_quad

import importlib

train_mod = importlib.import_module("drdf.train")
from drdf.camera import camera_at
from drdf.datagen import render_view
from drdf.errors import NumericFailureError
from drdf.model import FusionModel, ModelConfig
from drdf.net import Param
from drdf.sampling import SamplingConfig
from drdf.train import SgdMomentum, TrainConfig, TrainExample, train, train_step

TINY = ModelConfig(
    d_img=6, d_feat=8, pe_octaves=2, enc_channels=(4, 6), enc_strides=(1, 2), head_hidden=0
)


def quad_example(img=8):
    mesh = make_quad(3.0, half=8.0)
    cam = camera_at((0.0, 0.0, 0.0), 0.0, 0.0, width=img, height=img)
    view = render_view(mesh, cam)
    return TrainExample(mesh=mesh, cameras=[cam], images=[view.channels()])


def test_momentum_frozen_example():
    # w = 1, gradient g = w, lr = 0.1, momentum 0.9: w goes 1 -> 0.9 -> 0.72
    p = Param("w", np.array([1.0]))
    opt = SgdMomentum([p], momentum=0.9)
    for expect in (0.9, 0.72):
        p.grad[...] = p.value
        opt.step([p], lr=0.1)
        assert p.value[0] == pytest.approx(expect, abs=1e-12)
        p.zero_grad()


def test_momentum_buffer_access_and_state():
    p = Param("w", np.array([2.0]))
    opt = SgdMomentum([p])
    p.grad[...] = 1.0
    opt.step([p], lr=0.5)
    assert opt.buffer("w")[0] == pytest.approx(1.0)
    state = opt.state_copy()
    opt.buffers["w"][...] = 99.0
    opt.load_state(state)
    assert opt.buffer("w")[0] == pytest.approx(1.0)


def test_lr_milestone_schedule():
    cfg = TrainConfig(steps=300, base_lr=1e-3)
    # milestones at 2/3 and 5/6 of the budget: steps 200 and 250
    assert cfg.lr_at(1) == pytest.approx(1e-3)
    assert cfg.lr_at(200) == pytest.approx(1e-3)
    assert cfg.lr_at(201) == pytest.approx(1e-4)
    assert cfg.lr_at(250) == pytest.approx(1e-4)
    assert cfg.lr_at(251) == pytest.approx(1e-5)
    assert cfg.lr_at(300) == pytest.approx(1e-5)


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(steps=-1)
    with pytest.raises(ValueError):
        TrainConfig(steps=10, base_lr=0.0)
    with pytest.raises(ValueError):
        TrainConfig(steps=10, milestone_fracs=(0.9, 0.5))
    with pytest.raises(ValueError):
        TrainConfig(steps=10, n_views=0)


def test_train_step_accumulates_gradients():
    model = FusionModel(TINY)
    ex = quad_example()
    scfg = SamplingConfig(rays_per_image=3, points_per_ray=8, rng_seed=0)
    model.zero_grads()
    loss = train_step(model, ex, scfg, np.random.default_rng(0), n_views=1)
    assert np.isfinite(loss) and loss > 0.0
    assert any(np.abs(p.grad).max() > 0 for p in model.params())


def test_train_loss_decreases_on_overfit():
    model = FusionModel(TINY)
    ex = quad_example()
    scfg = SamplingConfig(rays_per_image=6, points_per_ray=24, rng_seed=0)
    cfg = TrainConfig(steps=60, base_lr=3e-3, log_every=10, n_views=1)
    res = train(model, [ex], scfg, cfg, np.random.default_rng(0))
    assert res.curve.shape == (6, 3)
    assert np.array_equal(res.curve[:, 0], [10, 20, 30, 40, 50, 60])
    first, last = res.curve[0, 2], res.curve[-1, 2]
    assert last < first
    assert res.final_step == 60


def test_train_is_deterministic():
    scfg = SamplingConfig(rays_per_image=3, points_per_ray=8, rng_seed=0)
    cfg = TrainConfig(steps=8, log_every=4, n_views=1)
    curves = []
    for _ in range(2):
        model = FusionModel(TINY)
        res = train(model, [quad_example()], scfg, cfg, np.random.default_rng(7))
        curves.append(res.curve)
    assert np.array_equal(curves[0], curves[1])


def test_train_restores_on_numeric_failure(monkeypatch):
    model = FusionModel(TINY)
    ex = quad_example()
    scfg = SamplingConfig(rays_per_image=3, points_per_ray=8, rng_seed=0)
    calls = {"n": 0}
    real_step = train_mod.train_step

    def flaky(*args, **kwargs):
        calls["n"] += 1
        if calls["n"] == 5:
            return float("nan")
        return real_step(*args, **kwargs)

    monkeypatch.setattr(train_mod, "train_step", flaky)
    before = {p.name: p.value.copy() for p in model.params()}
    cfg = TrainConfig(steps=20, log_every=1, n_views=1)
    with pytest.raises(NumericFailureError) as exc_info:
        train(model, [ex], scfg, cfg, np.random.default_rng(0))
    exc = exc_info.value
    assert exc.good_step == 4
    assert exc.partial_curve.shape == (4, 3)
    assert np.array_equal(exc.partial_curve[:, 0], [1, 2, 3, 4])
    # parameters rolled back to the last good step, not the initial state
    changed = any(
        np.abs(p.value - before[p.name]).max() > 0 for p in model.params()
    )
    assert changed


def test_train_zero_steps_is_a_no_op():
    model = FusionModel(TINY)
    scfg = SamplingConfig(rays_per_image=3, points_per_ray=8)
    res = train(model, [quad_example()], scfg, TrainConfig(steps=0), np.random.default_rng(0))
    assert res.curve.shape == (0, 3)
    assert res.final_step == 0


def test_train_resume_continues_schedule():
    # running 0 -> 10 in one go equals 0 -> 5 then resume 5 -> 10 when the
    # caller replays the rng stream position via start_step bookkeeping
    scfg = SamplingConfig(rays_per_image=3, points_per_ray=8, rng_seed=0)
    model_a = FusionModel(TINY)
    full = train(
        model_a, [quad_example()], scfg, TrainConfig(steps=10, log_every=5, n_views=1),
        np.random.default_rng(0),
    )
    assert np.array_equal(full.curve[:, 0], [5, 10])
    model_b = FusionModel(TINY)
    opt = None
    res1 = train(
        model_b, [quad_example()], scfg, TrainConfig(steps=5, log_every=5, n_views=1),
        np.random.default_rng(0),
    )
    res2 = train(
        model_b, [quad_example()], scfg, TrainConfig(steps=10, log_every=5, n_views=1),
        np.random.default_rng([0, 5]), start_step=5, optimizer=res1.optimizer,
    )
    assert np.array_equal(res2.curve[:, 0], [10])
    # both models end close; they see different step-6..10 batches (fresh
    # rng stream on resume) so exact equality is not required here
    pa = {p.name: p.value for p in model_a.params()}
    for p in model_b.params():
        assert np.isfinite(p.value).all()
        assert p.value.shape == pa[p.name].shape
