import numpy as np
import pytest

from nestssl.data import ShapesConfig, generate_shapes
from nestssl.trainer import (
    CheckpointError,
    ConfigError,
    TrainConfig,
    TrainState,
    cosine_schedule,
    ema_update,
    format_train_config,
    init_train_state,
    linear_warmup,
    load_checkpoint,
    metrics_header,
    metrics_row,
    parse_train_config,
    save_checkpoint,
    train_step,
)
from nestssl.tensor import Tensor


def small_cfg(**kw) -> TrainConfig:
    base = dict(
        steps=6,
        batch_size=2,
        warmup_steps=0,
        lr=1e-3,
        image_size=16,
        patch_size=4,
        embed_dim=16,
        depth=1,
        num_heads=2,
        dims=(4, 16),
        base_prototypes=16,
        local_crops=2,
        local_size=8,
        seed=0,
    )
    base.update(kw)
    return TrainConfig(**base)


def small_data(seed=0, count=8, beta=0.0, canvas=16, patch=4):
    return generate_shapes(
        ShapesConfig(canvas=canvas, patch=patch, position_bias=beta, seed=seed), count
    ).images


def run_steps(cfg, images, steps):
    rng = np.random.default_rng(cfg.seed)
    state = init_train_state(cfg, rng)
    records = []
    for _ in range(steps):
        idx = rng.choice(len(images), size=cfg.batch_size, replace=False)
        records.append(train_step(state, images[idx], cfg, rng))
    return state, records


# ---------------------------------------------------------------------------
# schedules


def test_cosine_schedule_endpoints_and_midpoint():
    assert cosine_schedule(10, 100, 0.5, 0.1, warmup=10) == pytest.approx(0.5)
    assert cosine_schedule(100, 100, 0.5, 0.1, warmup=10) == pytest.approx(0.1)
    # midpoint of the cosine span: cos(pi/2) = 0 -> (start + end) / 2
    assert cosine_schedule(55, 100, 0.5, 0.1, warmup=10) == pytest.approx(0.3)


def test_cosine_schedule_warmup_is_linear():
    assert cosine_schedule(0, 100, 0.8, 0.0, warmup=10) == 0.0
    assert cosine_schedule(5, 100, 0.8, 0.0, warmup=10) == pytest.approx(0.4)


def test_linear_warmup_ramp():
    assert linear_warmup(0, 10, 0.04, 0.07) == pytest.approx(0.04)
    assert linear_warmup(5, 10, 0.04, 0.07) == pytest.approx(0.055)
    assert linear_warmup(25, 10, 0.04, 0.07) == pytest.approx(0.07)


def test_cosine_schedule_rejects_out_of_range():
    with pytest.raises(ValueError):
        cosine_schedule(101, 100, 1.0, 0.0)


# ---------------------------------------------------------------------------
# EMA


def test_ema_momentum_one_keeps_teacher_bitwise():
    t = {"w": Tensor(np.array([1.0, -0.5], dtype=np.float32))}
    s = {"w": Tensor(np.array([9.0, 9.0], dtype=np.float32))}
    before = t["w"].data.copy()
    ema_update(t, s, 1.0)
    assert np.array_equal(t["w"].data, before)


def test_ema_momentum_zero_copies_student():
    t = {"w": Tensor(np.array([1.0], dtype=np.float32))}
    s = {"w": Tensor(np.array([3.0], dtype=np.float32))}
    with pytest.raises(ValueError):
        ema_update(t, s, 0.0)  # momentum must stay in (0, 1]
    ema_update(t, s, 1e-9)
    np.testing.assert_allclose(t["w"].data, [3.0], atol=1e-6)


def test_ema_hand_arithmetic():
    t = {"w": Tensor(np.array([1.0], dtype=np.float64))}
    s = {"w": Tensor(np.array([0.0], dtype=np.float64))}
    ema_update(t, s, 0.9)
    np.testing.assert_allclose(t["w"].data, [0.9])


# ---------------------------------------------------------------------------
# train_step contracts


def test_frozen_teacher_with_momentum_one():
    cfg = small_cfg(momentum_start=1.0, momentum_end=1.0)
    images = small_data()
    rng = np.random.default_rng(0)
    state = init_train_state(cfg, rng)
    before = {n: t.data.copy() for n, t in state.teacher.items()}
    for _ in range(3):
        train_step(state, images[:2], cfg, rng)
    for name, t in state.teacher.items():
        assert np.array_equal(before[name], t.data), name


def test_zero_lr_leaves_student_unchanged():
    cfg = small_cfg(lr=0.0, lr_end=0.0)
    images = small_data()
    rng = np.random.default_rng(0)
    state = init_train_state(cfg, rng)
    before = {n: t.data.copy() for n, t in state.student.items()}
    record = train_step(state, images[:2], cfg, rng)
    assert np.isfinite(record["total_loss"])
    for name, t in state.student.items():
        assert np.array_equal(before[name], t.data), name


def test_teacher_never_receives_gradient():
    cfg = small_cfg()
    images = small_data()
    rng = np.random.default_rng(0)
    state = init_train_state(cfg, rng)
    train_step(state, images[:2], cfg, rng)
    assert all(t.grad is None for t in state.teacher.values())
    assert all(not t.requires_grad for t in state.teacher.values())


def test_ten_step_run_bit_reproducible():
    cfg = small_cfg(steps=10)
    images = small_data()

    def run():
        state, records = run_steps(cfg, images, 10)
        return [r["total_loss"] for r in records], {
            n: t.data.copy() for n, t in state.student.items()
        }

    losses_a, params_a = run()
    losses_b, params_b = run()
    assert losses_a == losses_b
    for name in params_a:
        assert np.array_equal(params_a[name], params_b[name]), name


def test_per_level_losses_nonnegative_and_sum_exactly():
    cfg = small_cfg()
    images = small_data()
    _, records = run_steps(cfg, images, 3)
    for r in records:
        assert all(v >= 0 for v in r["per_level"])
        assert r["total_loss"] == pytest.approx(sum(r["per_level"]), rel=1e-5)


def test_single_level_config_total_equals_only_level():
    cfg = small_cfg(dims=(16,))
    images = small_data()
    _, records = run_steps(cfg, images, 4)
    for r in records:
        assert len(r["per_level"]) == 1
        assert r["total_loss"] == pytest.approx(r["per_level"][0], rel=1e-6)


def test_prototypes_stay_unit_norm_through_training():
    cfg = small_cfg()
    images = small_data()
    state, _ = run_steps(cfg, images, 4)
    for name, t in state.student.items():
        if name.endswith(".proto"):
            np.testing.assert_allclose(np.linalg.norm(t.data, axis=1), 1.0, atol=1e-6)


def test_empty_batch_rejected():
    cfg = small_cfg()
    state = init_train_state(cfg, np.random.default_rng(0))
    with pytest.raises(ValueError, match="empty batch"):
        train_step(state, np.empty((0, 3, 16, 16), dtype=np.float32), cfg,
                   np.random.default_rng(0))


# ---------------------------------------------------------------------------
# config file


def test_config_roundtrip(tmp_path):
    cfg = small_cfg(lr=0.005, dims=(4, 16))
    path = tmp_path / "train.cfg"
    path.write_text(format_train_config(cfg), encoding="utf-8")
    back = parse_train_config(path)
    assert back == cfg


def test_config_comments_and_unknown_keys(tmp_path):
    path = tmp_path / "train.cfg"
    path.write_text(
        "# comment\nsteps = 12\nwarmup_steps = 2\nbatch_size = 4 # inline\n",
        encoding="utf-8",
    )
    cfg = parse_train_config(path)
    assert cfg.steps == 12 and cfg.batch_size == 4 and cfg.warmup_steps == 2
    path.write_text("stepz = 12\n", encoding="utf-8")
    with pytest.raises(ConfigError, match="unknown config key"):
        parse_train_config(path)


def test_config_invariants_enforced():
    with pytest.raises(ConfigError, match="warmup"):
        small_cfg(warmup_steps=99, steps=5)
    with pytest.raises(ConfigError, match="momentum"):
        small_cfg(momentum_start=0.0)
    with pytest.raises(ConfigError, match="embed dim"):
        small_cfg(dims=(4, 8))


# ---------------------------------------------------------------------------
# metrics format


def test_metrics_row_matches_header():
    record = {
        "step": 3,
        "total_loss": 1.5,
        "per_level": [0.5, 1.0],
        "lr": 1e-3,
        "ema_momentum": 0.992,
        "teacher_temp": 0.04,
    }
    header = metrics_header(2)
    row = metrics_row(record)
    assert header == "step,total_loss,loss_level_0,loss_level_1,lr,ema_momentum,teacher_temp"
    assert row.split(",")[0] == "3"
    assert len(row.split(",")) == len(header.split(","))


# ---------------------------------------------------------------------------
# checkpoints


def test_checkpoint_roundtrip_bit_identical(tmp_path):
    cfg = small_cfg()
    images = small_data()
    state, _ = run_steps(cfg, images, 3)
    path = tmp_path / "ck.frck"
    save_checkpoint(path, state)
    restored = load_checkpoint(path, cfg)
    assert restored.step == state.step
    assert restored.opt.step == state.opt.step
    for name in state.student:
        assert np.array_equal(state.student[name].data, restored.student[name].data)
        assert np.array_equal(state.teacher[name].data, restored.teacher[name].data)
    for name in state.opt.m:
        assert np.array_equal(state.opt.m[name], restored.opt.m[name])
        assert np.array_equal(state.opt.v[name], restored.opt.v[name])


def test_checkpoint_resume_continues_identically(tmp_path):
    cfg = small_cfg(steps=10)
    images = small_data()
    rng_a = np.random.default_rng(123)
    state_a = init_train_state(cfg, np.random.default_rng(cfg.seed))
    for _ in range(3):
        idx = rng_a.choice(len(images), size=2, replace=False)
        train_step(state_a, images[idx], cfg, rng_a)
    path = tmp_path / "ck.frck"
    save_checkpoint(path, state_a)
    state_b = load_checkpoint(path, cfg)
    rng_b = np.random.default_rng(77)
    batch = images[:2]
    rec_a = train_step(state_a, batch, cfg, np.random.default_rng(5))
    rec_b = train_step(state_b, batch, cfg, np.random.default_rng(5))
    assert rec_a["total_loss"] == rec_b["total_loss"]


def test_checkpoint_renamed_tensor_rejected(tmp_path):
    from nestssl.fileio import load_checkpoint_tensors, save_checkpoint_tensors

    cfg = small_cfg()
    state = init_train_state(cfg, np.random.default_rng(0))
    path = tmp_path / "ck.frck"
    save_checkpoint(path, state)
    tensors = load_checkpoint_tensors(path)
    tensors["student.enc.patch.weight"] = tensors.pop("student.enc.patch.w")
    bad = tmp_path / "bad.frck"
    save_checkpoint_tensors(bad, tensors)
    with pytest.raises(CheckpointError, match="student.enc.patch.w"):
        load_checkpoint(bad, cfg)


def test_checkpoint_architecture_mismatch_rejected(tmp_path):
    cfg = small_cfg()
    state = init_train_state(cfg, np.random.default_rng(0))
    path = tmp_path / "ck.frck"
    save_checkpoint(path, state)
    other = small_cfg(depth=2)
    with pytest.raises(CheckpointError):
        load_checkpoint(path, other)
