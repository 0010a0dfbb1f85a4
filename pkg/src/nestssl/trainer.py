"""Self-distillation training loop with an EMA teacher.

Per step: the teacher encodes the global crops unmasked; the student
encodes the same crops under a cyclic mask plus the local crops
unmasked. Teacher logits become balanced targets per nesting level, the
per-level losses are summed with equal weights, and the student takes
one AdamW step before the teacher absorbs it by exponential moving
average.
"""

from __future__ import annotations

import dataclasses
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import CropConfig, multi_crop
from .encoder import EncoderConfig, encode, init_encoder_params
from .fileio import load_checkpoint_tensors, save_checkpoint_tensors
from .heads import (
    BankConfig,
    bank_forward,
    init_bank_params,
    patch_head_levels,
    renormalize_prototypes,
    total_loss,
)
from .masking import make_mask
from .sinkhorn import SKConfig, sk_targets
from .tensor import AdamWState, ShapeError, Tape, Tensor, adamw_step


class ConfigError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    """Raised when the loss goes non-finite; message carries per-level values."""


@dataclass
class TrainConfig:
    steps: int = 500
    batch_size: int = 8
    lr: float = 1e-3
    lr_end: float = 1e-5
    warmup_steps: int = 50
    weight_decay: float = 0.04
    student_temp: float = 0.1
    teacher_temp_start: float = 0.04
    teacher_temp_end: float = 0.07
    momentum_start: float = 0.992
    momentum_end: float = 1.0
    sk_iterations: int = 3
    mask_strategy: str = "cyclic"  # cyclic | inverse | block | random | none
    mask_ratio_min: float = 0.1
    mask_ratio_max: float = 0.5
    dims: tuple[int, ...] = (4, 8, 16, 32, 64)
    base_prototypes: int = 256
    patch_nesting: bool = True
    patch_loss_weight: float = 1.0
    seed: int = 0
    # encoder
    image_size: int = 64
    patch_size: int = 8
    embed_dim: int = 64
    depth: int = 2
    num_heads: int = 4
    mlp_ratio: float = 4.0
    drop_path: float = 0.0
    # crops
    global_crops: int = 2
    local_crops: int = 4
    local_size: int = 32

    def __post_init__(self):
        if self.warmup_steps > self.steps:
            raise ConfigError(
                f"warmup ({self.warmup_steps}) exceeds total steps ({self.steps})"
            )
        if not 0 < self.momentum_start <= 1 or not 0 < self.momentum_end <= 1:
            raise ConfigError("EMA momentum must lie in (0, 1]")
        if self.dims[-1] != self.embed_dim:
            raise ConfigError(
                f"last nesting dim {self.dims[-1]} must equal embed dim {self.embed_dim}"
            )
        if not 0 <= self.mask_ratio_min <= self.mask_ratio_max <= 1:
            raise ConfigError("mask ratio range must satisfy 0 <= lo <= hi <= 1")

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(
            image_sizes=(self.image_size, self.local_size),
            patch_size=self.patch_size,
            embed_dim=self.embed_dim,
            depth=self.depth,
            num_heads=self.num_heads,
            mlp_ratio=self.mlp_ratio,
            drop_path=self.drop_path,
        )

    def bank_config(self) -> BankConfig:
        return BankConfig(
            dims=tuple(self.dims),
            base_prototypes=self.base_prototypes,
            patch_nesting=self.patch_nesting,
        )

    def crop_config(self) -> CropConfig:
        return CropConfig(
            global_crops=self.global_crops,
            global_size=self.image_size,
            local_crops=self.local_crops,
            local_size=self.local_size,
        )


# ---------------------------------------------------------------------------
# config file: "key = value" lines, '#' comments, unknown keys rejected

_TUPLE_FIELDS = {"dims"}
_BOOL_FIELDS = {"patch_nesting"}


def parse_train_config(path, overrides: dict | None = None) -> TrainConfig:
    values: dict = {}
    fields = {f.name: f for f in dataclasses.fields(TrainConfig)}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            if key not in fields:
                raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
            values[key] = _parse_value(key, value, fields[key].type)
    if overrides:
        for key, value in overrides.items():
            if key not in fields:
                raise ConfigError(f"unknown config key {key!r}")
            if value is not None:
                values[key] = value
    try:
        return TrainConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def _parse_value(key: str, value: str, annotation: str):
    if key in _TUPLE_FIELDS:
        return tuple(int(part) for part in value.split(",") if part.strip())
    if key in _BOOL_FIELDS:
        lowered = value.lower()
        if lowered in ("true", "1", "yes"):
            return True
        if lowered in ("false", "0", "no"):
            return False
        raise ConfigError(f"cannot parse boolean from {value!r} for {key}")
    if "int" in str(annotation):
        return int(value)
    if "float" in str(annotation):
        return float(value)
    return value


def format_train_config(cfg: TrainConfig) -> str:
    lines = []
    for f in dataclasses.fields(TrainConfig):
        value = getattr(cfg, f.name)
        if isinstance(value, tuple):
            value = ",".join(str(v) for v in value)
        lines.append(f"{f.name} = {value}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# schedules


def cosine_schedule(step: int, total: int, start: float, end: float,
                    warmup: int = 0) -> float:
    """Linear warmup to ``start`` then a half-cosine decay to ``end``."""
    if not 0 <= step <= total:
        raise ValueError(f"step {step} outside [0, {total}]")
    if warmup and step < warmup:
        return start * step / warmup
    span = max(total - warmup, 1)
    t = (step - warmup) / span
    return end + (start - end) * 0.5 * (1.0 + np.cos(np.pi * t))


def linear_warmup(step: int, warmup: int, start: float, end: float) -> float:
    """Linear ramp from start to end over ``warmup`` steps, then constant."""
    if warmup <= 0 or step >= warmup:
        return end
    return start + (end - start) * step / warmup


# ---------------------------------------------------------------------------
# state


@dataclass
class TrainState:
    student: dict[str, Tensor]
    teacher: dict[str, Tensor]
    opt: AdamWState
    step: int = 0
    loss_history: deque = field(default_factory=lambda: deque(maxlen=200))


def init_train_state(cfg: TrainConfig, rng: np.random.Generator | None = None) -> TrainState:
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    student = init_encoder_params(cfg.encoder_config(), rng)
    student.update(init_bank_params(cfg.bank_config(), rng))
    teacher = {
        name: Tensor(t.data.copy(), requires_grad=False) for name, t in student.items()
    }
    return TrainState(student=student, teacher=teacher, opt=AdamWState())


def ema_update(teacher: dict[str, Tensor], student: dict[str, Tensor],
               momentum: float) -> None:
    """teacher <- m * teacher + (1 - m) * student, per parameter."""
    if not 0.0 < momentum <= 1.0:
        raise ValueError(f"EMA momentum must lie in (0, 1], got {momentum}")
    if momentum == 1.0:
        return  # frozen teacher, bit-identical by construction
    for name, t in teacher.items():
        s = student[name]
        if s.shape != t.shape:
            raise ShapeError(f"EMA shape mismatch for {name}: {t.shape} vs {s.shape}")
        t.data *= momentum
        t.data += (1.0 - momentum) * s.data


# ---------------------------------------------------------------------------
# one training step


def _batch_crops(images: np.ndarray, cfg: TrainConfig, rng: np.random.Generator):
    """View-major crop batches: globals (g*B, ...), locals (l*B, ...)."""
    crop_cfg = cfg.crop_config()
    per_image = [multi_crop(img, crop_cfg, rng) for img in images]
    g = cfg.global_crops
    globals_ = np.concatenate(
        [np.stack([cs.globals_[v] for cs in per_image]) for v in range(g)]
    )
    if cfg.local_crops:
        locals_ = np.concatenate(
            [np.stack([cs.locals_[v] for cs in per_image]) for v in range(cfg.local_crops)]
        )
    else:
        locals_ = None
    return globals_, locals_


def _batch_masks(batch: int, grid: tuple[int, int], cfg: TrainConfig,
                 rng: np.random.Generator) -> np.ndarray | None:
    if cfg.mask_strategy == "none":
        return None
    ratio = float(rng.uniform(cfg.mask_ratio_min, cfg.mask_ratio_max))
    bits = np.stack(
        [make_mask(cfg.mask_strategy, grid[0], grid[1], ratio, rng).bits
         for _ in range(batch)]
    )
    return bits


def train_step(
    state: TrainState,
    images: np.ndarray,
    cfg: TrainConfig,
    rng: np.random.Generator,
) -> dict:
    """Run one optimization step over a batch of raw images.

    Returns a record with the total loss, per-level losses, and the
    schedule values used at this step.
    """
    if len(images) == 0:
        raise ValueError("empty batch")
    enc_cfg = cfg.encoder_config()
    bank_cfg = cfg.bank_config()
    b = len(images)
    g = cfg.global_crops
    grid = enc_cfg.grid(cfg.image_size)
    n = grid[0] * grid[1]

    globals_, locals_ = _batch_crops(images, cfg, rng)
    masks = _batch_masks(b * g, grid, cfg, rng)

    step = state.step
    lr = cosine_schedule(step, cfg.steps, cfg.lr, cfg.lr_end, cfg.warmup_steps)
    teacher_temp = linear_warmup(
        step, cfg.warmup_steps, cfg.teacher_temp_start, cfg.teacher_temp_end
    )
    momentum = cosine_schedule(step, cfg.steps, cfg.momentum_start, cfg.momentum_end)
    sk_cfg = SKConfig(iterations=cfg.sk_iterations, teacher_temp=teacher_temp)

    masked_rows = (
        np.nonzero(masks.reshape(-1))[0] if masks is not None else np.empty(0, np.int64)
    )

    # teacher forward: no tape, raw cosine logits (temperature 1); the
    # sharpening happens inside the balanced-assignment step. The patch
    # stream only ever feeds masked positions, so gather those first.
    t_out = encode(state.teacher, enc_cfg, globals_)
    t_levels = bank_forward(state.teacher, bank_cfg, t_out.cls, None, 1.0)
    t_patch_logits: list[Tensor | None] = [None] * len(bank_cfg.dims)
    if masked_rows.size:
        t_rows = Tensor(
            t_out.patches.data.reshape(b * g * n, cfg.embed_dim)[masked_rows]
        )
        t_patch_logits = patch_head_levels(state.teacher, bank_cfg, t_rows, 1.0)

    cls_targets: list[list[np.ndarray]] = []
    patch_targets: list[np.ndarray | None] = []
    view_of_row = masked_rows // (b * n)
    for lvl, patch_logits in zip(t_levels, t_patch_logits):
        cls_targets.append(
            [sk_targets(lvl.cls.data[v * b : (v + 1) * b], sk_cfg) for v in range(g)]
        )
        if patch_logits is not None and masked_rows.size:
            # balance each view's masked rows separately, then restack
            rows = patch_logits.data
            stacked = np.empty_like(rows)
            for v in range(g):
                sel = view_of_row == v
                if sel.any():
                    stacked[sel] = sk_targets(rows[sel], sk_cfg)
            patch_targets.append(stacked)
        else:
            patch_targets.append(None)

    # student forward on tape
    with Tape() as tape:
        s_global = encode(state.student, enc_cfg, globals_, masks=masks, rng=rng)
        s_levels_g = bank_forward(
            state.student, bank_cfg, s_global.cls, None, cfg.student_temp
        )
        s_patch_logits: list[Tensor | None] = [None] * len(bank_cfg.dims)
        if masked_rows.size:
            s_rows = T.gather_rows(
                T.reshape(s_global.patches, (b * g * n, cfg.embed_dim)), masked_rows
            )
            s_patch_logits = patch_head_levels(
                state.student, bank_cfg, s_rows, cfg.student_temp
            )
        s_levels_l = None
        if locals_ is not None:
            s_local = encode(state.student, enc_cfg, locals_, rng=rng)
            s_levels_l = bank_forward(
                state.student, bank_cfg, s_local.cls, None, cfg.student_temp
            )
        student_cls: list[list[Tensor]] = []
        student_patch: list[Tensor | None] = []
        for i, lvl in enumerate(s_levels_g):
            crops = [
                T.gather_rows(lvl.cls, np.arange(v * b, (v + 1) * b)) for v in range(g)
            ]
            if s_levels_l is not None:
                lcl = s_levels_l[i].cls
                crops.extend(
                    T.gather_rows(lcl, np.arange(v * b, (v + 1) * b))
                    for v in range(cfg.local_crops)
                )
            student_cls.append(crops)
            if s_patch_logits[i] is not None and patch_targets[i] is not None:
                student_patch.append(s_patch_logits[i])
            else:
                student_patch.append(None)
        loss, per_level = total_loss(
            student_cls,
            cls_targets,
            student_patch,
            patch_targets,
            n_global=g,
            patch_weight=cfg.patch_loss_weight,
        )

    level_values = [lvl.item() for lvl in per_level]
    total_value = loss.item()
    if not np.isfinite(total_value):
        detail = ", ".join(f"level {i}: {v:.6g}" for i, v in enumerate(level_values))
        raise TrainingDiverged(f"non-finite loss at step {step} ({detail})")

    tape.backward(loss)
    for name, t in state.teacher.items():
        assert t.grad is None, f"teacher parameter {name} received gradient"
    if lr > 0:  # warmup step 0 and lr-disabled runs are null updates
        adamw_step(
            {name: t.data for name, t in state.student.items()},
            {name: t.grad for name, t in state.student.items()},
            state.opt,
            lr,
            weight_decay=cfg.weight_decay,
        )
        renormalize_prototypes(state.student)
    ema_update(state.teacher, state.student, momentum)
    state.step += 1
    state.loss_history.append(total_value)
    return {
        "step": step,
        "total_loss": total_value,
        "per_level": level_values,
        "lr": lr,
        "ema_momentum": momentum,
        "teacher_temp": teacher_temp,
    }


def metrics_header(levels: int) -> str:
    level_cols = ",".join(f"loss_level_{i}" for i in range(levels))
    return f"step,total_loss,{level_cols},lr,ema_momentum,teacher_temp"


def metrics_row(record: dict) -> str:
    levels = ",".join(f"{v:.8g}" for v in record["per_level"])
    return (
        f"{record['step']},{record['total_loss']:.8g},{levels},"
        f"{record['lr']:.8g},{record['ema_momentum']:.8g},{record['teacher_temp']:.8g}"
    )


def run_training(
    cfg: TrainConfig,
    images: np.ndarray,
    metrics_path=None,
    checkpoint_path=None,
    log_every: int = 0,
) -> TrainState:
    """Train for cfg.steps over ``images``, sampling batches with the run seed."""
    rng = np.random.default_rng(cfg.seed)
    state = init_train_state(cfg, rng)
    lines = [metrics_header(len(cfg.dims))]
    for _ in range(cfg.steps):
        idx = rng.choice(len(images), size=min(cfg.batch_size, len(images)),
                         replace=len(images) < cfg.batch_size)
        record = train_step(state, images[idx], cfg, rng)
        lines.append(metrics_row(record))
        if log_every and record["step"] % log_every == 0:
            print(lines[-1], flush=True)
    if metrics_path is not None:
        Path(metrics_path).write_text("\n".join(lines) + "\n", encoding="utf-8")
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, state)
    return state


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, state: TrainState) -> None:
    tensors: dict[str, np.ndarray] = {}
    for name, t in state.student.items():
        tensors[f"student.{name}"] = t.data
    for name, t in state.teacher.items():
        tensors[f"teacher.{name}"] = t.data
    for name, buf in state.opt.m.items():
        tensors[f"opt.m.{name}"] = buf
    for name, buf in state.opt.v.items():
        tensors[f"opt.v.{name}"] = buf
    tensors["meta.step"] = np.array([state.step], dtype=np.float32)
    tensors["meta.adam_step"] = np.array([state.opt.step], dtype=np.float32)
    save_checkpoint_tensors(path, tensors)


def load_checkpoint(path, cfg: TrainConfig) -> TrainState:
    """Rebuild a TrainState; every tensor must match the cfg-derived skeleton."""
    stored = load_checkpoint_tensors(path)
    state = init_train_state(cfg, np.random.default_rng(cfg.seed))

    def take(name: str) -> np.ndarray:
        if name not in stored:
            raise CheckpointError(f"checkpoint {path} is missing tensor {name!r}")
        return stored.pop(name)

    for name, t in state.student.items():
        arr = take(f"student.{name}")
        if arr.shape != t.shape:
            raise CheckpointError(
                f"tensor student.{name} has shape {arr.shape}, expected {t.shape}"
            )
        t.data = arr.astype(t.data.dtype)
    for name, t in state.teacher.items():
        arr = take(f"teacher.{name}")
        if arr.shape != t.shape:
            raise CheckpointError(
                f"tensor teacher.{name} has shape {arr.shape}, expected {t.shape}"
            )
        t.data = arr.astype(t.data.dtype)
    state.step = int(take("meta.step")[0])
    state.opt.step = int(take("meta.adam_step")[0])
    for name in list(stored):
        if name.startswith("opt.m."):
            state.opt.m[name[len("opt.m."):]] = stored.pop(name)
        elif name.startswith("opt.v."):
            state.opt.v[name[len("opt.v."):]] = stored.pop(name)
    for extra in state.opt.m:
        if extra not in state.student:
            raise CheckpointError(f"optimizer state for unknown tensor {extra!r}")
    if stored:
        raise CheckpointError(
            f"checkpoint {path} holds unexpected tensors: {sorted(stored)[:5]}"
        )
    return state
