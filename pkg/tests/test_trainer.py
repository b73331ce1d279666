import json

import numpy as np
import pytest
import torch

from cycle_vfi.exceptions import ConfigurationError
from cycle_vfi.losses import IdentityFeatures
from cycle_vfi.model import ModelConfig, parameters_bytes
from cycle_vfi.trainer import (Objective, TrainConfig, Trainer, cycle_pass, finetune,
                               frozen_copy, init_model, lr_schedule, make_optimizer,
                               sample_time, to_tensor, train, train_step)

TINY = ModelConfig(base_width=4, depth=3, max_width=8, convs_per_level=1)


def linear_stub(a, b, s):
    s = torch.as_tensor(s, dtype=a.dtype).reshape(-1, 1, 1, 1)
    return (1 - s) * a + s * b


@pytest.fixture
def triplets():
    rng = np.random.default_rng(0)
    base = rng.uniform(0.2, 0.8, size=(6, 1, 16, 16, 3)).astype(np.float32)
    return np.concatenate([np.roll(base, k, axis=3) for k in range(3)], axis=1)


def test_sample_time_contract():
    a = sample_time(np.random.default_rng(7), 10_000)
    b = sample_time(np.random.default_rng(7), 10_000)
    assert np.array_equal(a, b)
    assert abs(a.mean() - 0.5) < 0.02
    assert a.min() > 0 and a.max() < 1
    assert (a >= 1e-3).all() and (a <= 1 - 1e-3).all()


def test_lr_schedule_full_length():
    cfg = TrainConfig.full_schedule()
    assert lr_schedule(100, cfg) == pytest.approx(1e-4)
    assert lr_schedule(250, cfg) == pytest.approx(1e-4)
    assert lr_schedule(300, cfg) == pytest.approx(1e-5)
    assert lr_schedule(480, cfg) == pytest.approx(1e-6)
    rates = [lr_schedule(e, cfg) for e in range(1, 501)]
    assert sum(1 for x, y in zip(rates, rates[1:]) if y != x) == 2


def test_config_validation():
    with pytest.raises(ConfigurationError):
        TrainConfig(epochs=0)
    with pytest.raises(ConfigurationError):
        TrainConfig(lr_decay_epochs=(30, 20))
    with pytest.raises(ConfigurationError):
        TrainConfig(epochs=10, lr_decay_epochs=(5, 10))
    with pytest.raises(ConfigurationError):
        TrainConfig(mode="bogus")
    with pytest.raises(ConfigurationError):
        TrainConfig.from_dict({"nonsense": 1})
    cfg = TrainConfig.from_dict({"lambda_rp": 0.1, "epochs": 5, "lr_decay_epochs": [2, 4]})
    assert cfg.loss_weights.lambda_rp == 0.1
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


def test_cycle_pass_linear_stub_recovers_middle(gen):
    i0 = torch.rand(2, 3, 8, 8, generator=gen, dtype=torch.float64)
    d = torch.rand(2, 3, 8, 8, generator=gen, dtype=torch.float64) * 0.1
    i1, i2 = i0 + d, i0 + 2 * d
    for t in (0.1, 0.37, 0.8):
        res = cycle_pass(linear_stub, i0, i1, i2, t)
        assert torch.allclose(res.i_hat_1, i1, atol=1e-12)


def test_cycle_pass_copy_stub_degenerates(gen):
    i0, i1, i2 = torch.rand(3, 1, 3, 8, 8, generator=gen)
    res = cycle_pass(lambda a, b, s: a, i0, i1, i2, 0.4)
    assert torch.equal(res.i_hat_1, i0)
    loss = (res.i_hat_1 - i1).abs().mean()
    assert loss.item() == pytest.approx((i0 - i1).abs().mean().item())


def test_cycle_pass_static_triplet_has_zero_loss():
    torch.manual_seed(0)
    model = init_model(TINY)
    img = torch.full((1, 3, 16, 16), 0.42)
    cfg = TrainConfig(epochs=1, lr_decay_epochs=(), intensity_scale=1.0)
    losses = Objective(cfg)(model, torch.stack([img] * 3, dim=1), 0.3, cfg.loss_weights)
    assert losses.rc.item() == pytest.approx(0.0, abs=1e-6)


def test_gradients_reach_all_three_applications(gen):
    model = init_model(TINY)
    i0, i1, i2 = torch.rand(3, 1, 3, 16, 16, generator=gen)
    res = cycle_pass(model, i0, i1, i2, 0.3)
    # the reconstruction depends on the hidden frames through the third pass
    assert res.i_hat_1.grad_fn is not None
    grads = torch.autograd.grad((res.i_hat_1 - i1).abs().mean(), [res.i_hat_t, res.i_hat_t1])
    assert all(g.abs().sum() > 0 for g in grads)


def test_one_reconstruction_per_triplet(triplets):
    model = init_model(TINY)
    cfg = TrainConfig(epochs=1, lr_decay_epochs=(), batch_size=4, crop_size=None)
    trainer = Trainer(model, cfg, feature_extractor=IdentityFeatures())
    trainer.run_epoch(triplets)
    assert trainer.objective.cycle_reconstructions == len(triplets)


def test_intensity_scale_multiplies_image_terms(triplets):
    model = init_model(TINY)
    batch = to_tensor(triplets[:2])
    out = {}
    for k in (1.0, 255.0):
        cfg = TrainConfig(epochs=1, lr_decay_epochs=(), intensity_scale=k)
        torch.manual_seed(0)
        out[k] = Objective(cfg, feature_extractor=IdentityFeatures())(model, batch, 0.4, cfg.loss_weights)
    for name in ("rc", "w"):
        assert getattr(out[255.0], name).item() == pytest.approx(255 * getattr(out[1.0], name).item(), rel=1e-5)
    for name in ("p", "s"):
        assert getattr(out[255.0], name).item() == pytest.approx(getattr(out[1.0], name).item(), rel=1e-5)
    with pytest.raises(ConfigurationError):
        TrainConfig(intensity_scale=0.0)


def test_weight_decay_is_zero():
    opt = make_optimizer(init_model(TINY), TrainConfig())
    for group in opt.param_groups:
        assert group["weight_decay"] == 0
        assert group["betas"] == (0.9, 0.999)


def test_cc_only_excludes_rp(triplets):
    model = init_model(TINY)
    cfg = TrainConfig(epochs=1, lr_decay_epochs=(), mode="cc_only")
    losses = Objective(cfg, teacher=frozen_copy(model))(model, to_tensor(triplets[:2]), 0.5,
                                                        cfg.loss_weights)
    assert losses.rp.item() == 0
    assert losses.rp.grad_fn is None


def test_teacher_modes_require_teacher():
    with pytest.raises(ConfigurationError, match="teacher"):
        Objective(TrainConfig(mode="cc_plus_ps"))


def test_step_zero_pseudo_loss_is_exactly_zero(triplets):
    model = init_model(TINY)
    cfg = TrainConfig(epochs=1, lr_decay_epochs=(), mode="cc_plus_ps")
    obj = Objective(cfg, teacher=frozen_copy(model), feature_extractor=IdentityFeatures())
    losses = obj(model, to_tensor(triplets[:3]), np.array([0.2, 0.5, 0.9]), cfg.loss_weights)
    assert losses.rp.item() == 0.0


def test_teacher_bitwise_frozen_and_student_moves(triplets):
    model = init_model(TINY)
    cfg = TrainConfig(epochs=2, lr_decay_epochs=(), mode="cc_plus_ps", batch_size=3,
                      crop_size=None, lr_initial=1e-3)
    trainer = finetune(model, triplets, cfg, feature_extractor=IdentityFeatures())
    assert parameters_bytes(trainer.teacher) == parameters_bytes(model)
    x = to_tensor(triplets[:2])
    with torch.no_grad():
        gap = (trainer.model(x[:, 0], x[:, 1], 0.5) - trainer.teacher(x[:, 0], x[:, 1], 0.5)).abs().mean()
    assert gap > 0


def test_finetune_rejects_architecture_mismatch(tmp_path, triplets):
    from cycle_vfi.model import save_checkpoint
    path = tmp_path / "m.pt"
    save_checkpoint(path, init_model(TINY))
    with pytest.raises(ConfigurationError):
        finetune(path, triplets, TrainConfig(epochs=1, lr_decay_epochs=(), mode="cc_plus_ps"),
                 expected=ModelConfig())


def test_ps_only_pulls_student_to_teacher(triplets):
    teacher = init_model(TINY, seed=1)
    student = init_model(TINY, seed=2)
    cfg = TrainConfig(epochs=1, lr_decay_epochs=(), mode="ps_only")
    obj = Objective(cfg, teacher=frozen_copy(teacher), feature_extractor=IdentityFeatures())
    opt = make_optimizer(student, TrainConfig(lr_initial=1e-3))
    batch = to_tensor(triplets)
    first = last = None
    for _ in range(30):
        losses = train_step(student, opt, obj, batch, 0.5, cfg.loss_weights)
        first = first if first is not None else losses.rp.item()
        last = losses.rp.item()
    assert obj.cycle_reconstructions == 0
    assert last < first


def test_identical_seeds_give_identical_trajectories(triplets):
    cfg = TrainConfig(epochs=2, lr_decay_epochs=(), batch_size=3, crop_size=12, seed=5)
    runs = []
    for _ in range(2):
        tr = train(init_model(TINY, seed=0), triplets, cfg, feature_extractor=IdentityFeatures())
        runs.append([r["total"] for r in tr.state.history])
    assert runs[0] == runs[1]


def test_resume_matches_uninterrupted_run(tmp_path, triplets):
    cfg = TrainConfig(epochs=4, lr_decay_epochs=(2,), batch_size=3, crop_size=12, seed=3)
    full = train(init_model(TINY), triplets, cfg, out_dir=tmp_path / "full",
                 feature_extractor=IdentityFeatures())
    part = Trainer(init_model(TINY), cfg, out_dir=tmp_path / "part",
                   feature_extractor=IdentityFeatures())
    part.fit(triplets, epochs=2)
    resumed = train(init_model(TINY, seed=99), triplets, cfg, out_dir=tmp_path / "part",
                    resume=True, feature_extractor=IdentityFeatures())
    a = [r["total"] for r in full.state.history]
    b = [r["total"] for r in resumed.state.history]
    assert len(a) == len(b) == 4
    assert np.allclose(a, b, atol=1e-6, rtol=0)
    lines = (tmp_path / "part" / "metrics.jsonl").read_text().splitlines()
    assert [json.loads(x)["epoch"] for x in lines] == [1, 2, 3, 4]
    assert (tmp_path / "part" / "checkpoints" / "epoch_0004.pt").exists()


def test_supervised_mode_fits_ground_truth_windows():
    from cycle_vfi.data import MotionSpec, make_eval_clips, synthetic_motion_dataset, windows_to_array
    spec = MotionSpec(speed=(1.0, 2.0))
    clips = synthetic_motion_dataset(3, 8, 16, spec, length=5)
    windows = windows_to_array([w for c in clips for w in make_eval_clips(c, 3)])
    cfg = TrainConfig(epochs=20, lr_decay_epochs=(), mode="supervised", batch_size=2,
                      crop_size=None, lr_initial=2e-3)
    tr = train(init_model(TINY), windows, cfg, feature_extractor=IdentityFeatures())
    # the target frame index is drawn from the interior of each window
    assert tr.objective.cycle_reconstructions == 0
    rc = [r["rc"] for r in tr.state.history]
    assert np.mean(rc[-5:]) < np.mean(rc[:5])


def test_non_finite_loss_aborts(triplets):
    from cycle_vfi.exceptions import NumericalError
    model = init_model(TINY)
    bad = triplets.copy()
    bad[0, 1, 0, 0, 0] = np.nan
    cfg = TrainConfig(epochs=1, lr_decay_epochs=(), batch_size=6, crop_size=None)
    with pytest.raises((NumericalError, ValueError)):
        train(model, bad, cfg, feature_extractor=IdentityFeatures())
