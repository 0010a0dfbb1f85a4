"""Projection heads over nested embedding prefixes.

Each nesting level owns an independent 3-layer MLP head and prototype
bank for the classification stream and (by default) the patch stream.
Level i consumes only the first m_i feature coordinates, and its
prototype count shrinks proportionally with m_i, so coarse levels
cluster coarsely. Logits are cosine similarities against unit-norm
prototype rows, divided by a temperature.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor


@dataclass(frozen=True)
class BankConfig:
    dims: tuple[int, ...] = (4, 8, 16, 32, 64)  # ascending; last is the full width
    base_prototypes: int = 256  # prototype count at the full width
    hidden_mult: int = 4
    bottleneck_div: int = 2
    patch_nesting: bool = True  # False: single full-width patch head

    def __post_init__(self):
        if not self.dims or list(self.dims) != sorted(set(self.dims)):
            raise ValueError(f"dims must be strictly ascending, got {self.dims}")
        for m in self.dims:
            if m < 2:
                raise ValueError(f"level width {m} too small")
            if self.prototypes(m) < 2:
                raise ValueError(
                    f"level width {m} yields fewer than 2 prototypes "
                    f"(base {self.base_prototypes})"
                )

    @property
    def embed_dim(self) -> int:
        return self.dims[-1]

    @property
    def levels(self) -> int:
        return len(self.dims)

    def prototypes(self, m: int) -> int:
        c = self.base_prototypes * m / self.embed_dim
        if abs(c - round(c)) > 1e-9:
            raise ValueError(
                f"prototype count {self.base_prototypes}*{m}/{self.embed_dim} "
                "is not an integer"
            )
        return int(round(c))

    def patch_dims(self) -> tuple[int, ...]:
        return self.dims if self.patch_nesting else (self.embed_dim,)

    def bottleneck(self, m: int) -> int:
        return max(2, m // self.bottleneck_div)


@dataclass
class LevelLogits:
    dim: int
    cls: Tensor  # (B, c_i)
    patch: Tensor | None  # (B, n, c_i) when the stream has a head at this level


def _init_head(prefix: str, m: int, cfg: BankConfig, rng: np.random.Generator,
               dtype) -> dict[str, np.ndarray]:
    hidden = cfg.hidden_mult * m
    bneck = cfg.bottleneck(m)
    c = cfg.prototypes(m)

    def normal(*shape, scale=0.02):
        return (rng.standard_normal(shape) * scale).astype(dtype)

    proto = rng.standard_normal((c, bneck)).astype(dtype)
    proto /= np.linalg.norm(proto, axis=1, keepdims=True)
    return {
        f"{prefix}.w1": normal(m, hidden),
        f"{prefix}.b1": np.zeros(hidden, dtype=dtype),
        f"{prefix}.w2": normal(hidden, hidden),
        f"{prefix}.b2": np.zeros(hidden, dtype=dtype),
        f"{prefix}.w3": normal(hidden, bneck),
        f"{prefix}.b3": np.zeros(bneck, dtype=dtype),
        f"{prefix}.proto": proto,
    }


def init_bank_params(cfg: BankConfig, rng: np.random.Generator,
                     dtype=np.float32) -> dict[str, Tensor]:
    arrays: dict[str, np.ndarray] = {}
    for i, m in enumerate(cfg.dims):
        arrays.update(_init_head(f"head.cls.{i}", m, cfg, rng, dtype))
    for i, m in enumerate(cfg.patch_dims()):
        arrays.update(_init_head(f"head.patch.{i}", m, cfg, rng, dtype))
    return {name: Tensor(arr, requires_grad=True) for name, arr in arrays.items()}


def head_forward(params: dict[str, Tensor], prefix: str, x: Tensor,
                 temperature: float) -> Tensor:
    """3-layer MLP -> unit-norm bottleneck -> cosine prototype logits / temp."""
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    h = T.gelu(T.add(T.matmul(x, params[f"{prefix}.w1"]), params[f"{prefix}.b1"]))
    h = T.gelu(T.add(T.matmul(h, params[f"{prefix}.w2"]), params[f"{prefix}.b2"]))
    z = T.add(T.matmul(h, params[f"{prefix}.w3"]), params[f"{prefix}.b3"])
    z = T.l2_normalize(z, axis=-1)
    proto = params[f"{prefix}.proto"]
    logits = T.matmul(z, T.transpose(proto, (1, 0)))
    return T.mul(logits, 1.0 / temperature)


def slice_embedding(z: Tensor, width: int, cfg: BankConfig) -> Tensor:
    """First ``width`` feature coordinates; width must be a configured level."""
    if width not in cfg.dims:
        raise ShapeError(f"slice width {width} is not a configured level {cfg.dims}")
    return T.slice_cols(z, width)


def bank_forward(
    params: dict[str, Tensor],
    cfg: BankConfig,
    cls: Tensor,
    patches: Tensor | None,
    temperature: float,
) -> list[LevelLogits]:
    """Per-level logits for both streams, ascending in level width."""
    if cls.shape[-1] != cfg.embed_dim:
        raise ShapeError(
            f"bank expects width {cfg.embed_dim}, got cls width {cls.shape[-1]}"
        )
    flat_patches = None
    patch_shape = None
    if patches is not None:
        if patches.shape[-1] != cfg.embed_dim:
            raise ShapeError(
                f"bank expects width {cfg.embed_dim}, got patch width {patches.shape[-1]}"
            )
        patch_shape = patches.shape
        flat_patches = T.reshape(patches, (-1, cfg.embed_dim))
    patch_dims = cfg.patch_dims()
    out: list[LevelLogits] = []
    for i, m in enumerate(cfg.dims):
        cls_logits = head_forward(
            params, f"head.cls.{i}", slice_embedding(cls, m, cfg), temperature
        )
        patch_logits = None
        if flat_patches is not None and m in patch_dims:
            j = patch_dims.index(m)
            flat = head_forward(
                params, f"head.patch.{j}", slice_embedding(flat_patches, m, cfg),
                temperature,
            )
            c = flat.shape[-1]
            patch_logits = T.reshape(flat, (patch_shape[0], patch_shape[1], c))
        out.append(LevelLogits(dim=m, cls=cls_logits, patch=patch_logits))
    return out


def patch_head_levels(
    params: dict[str, Tensor], cfg: BankConfig, rows: Tensor, temperature: float
) -> list[Tensor | None]:
    """Per-level patch-head logits for pre-gathered full-width rows.

    Lets callers run the patch stream on masked positions only instead of
    the whole grid; entries are None at levels without a patch head.
    """
    if rows.shape[-1] != cfg.embed_dim:
        raise ShapeError(
            f"bank expects width {cfg.embed_dim}, got patch width {rows.shape[-1]}"
        )
    patch_dims = cfg.patch_dims()
    out: list[Tensor | None] = []
    for m in cfg.dims:
        if m in patch_dims:
            j = patch_dims.index(m)
            out.append(
                head_forward(
                    params, f"head.patch.{j}", slice_embedding(rows, m, cfg), temperature
                )
            )
        else:
            out.append(None)
    return out


def renormalize_prototypes(params: dict[str, Tensor]) -> None:
    """Rescale prototype rows to unit norm; call after every optimizer step."""
    for name, t in params.items():
        if name.endswith(".proto"):
            norms = np.linalg.norm(t.data, axis=1, keepdims=True)
            np.divide(t.data, np.maximum(norms, 1e-12), out=t.data)


def total_loss(
    student_cls: list[list[Tensor]],
    teacher_cls_targets: list[list[np.ndarray]],
    student_patch: list[Tensor | None],
    teacher_patch_targets: list[np.ndarray | None],
    n_global: int,
    patch_weight: float = 1.0,
) -> tuple[Tensor, list[Tensor]]:
    """Equal-weight sum of per-level losses.

    ``student_cls[i][v]`` holds level-i logits for student crop v (global
    crops first); ``teacher_cls_targets[i][t]`` the balanced targets for
    teacher global crop t. The classification term averages
    cross-entropy over all (teacher crop, student crop) pairs except the
    identical view. Patch rows are pre-gathered masked positions aligned
    between student logits and teacher targets.
    """
    k = len(student_cls)
    if (
        len(teacher_cls_targets) != k
        or len(student_patch) != k
        or len(teacher_patch_targets) != k
    ):
        raise ShapeError(
            f"level count mismatch: student {k}, targets {len(teacher_cls_targets)}, "
            f"patch {len(student_patch)}/{len(teacher_patch_targets)}"
        )
    per_level: list[Tensor] = []
    for i in range(k):
        crops = student_cls[i]
        targets = teacher_cls_targets[i]
        if len(targets) != n_global:
            raise ShapeError(
                f"level {i}: expected {n_global} teacher views, got {len(targets)}"
            )
        pair_losses = []
        for t_view in range(n_global):
            for s_view in range(len(crops)):
                if s_view == t_view:
                    continue  # identical global view pairs carry no signal
                pair_losses.append(T.cross_entropy(crops[s_view], targets[t_view]))
        level = pair_losses[0]
        for pl in pair_losses[1:]:
            level = T.add(level, pl)
        level = T.mul(level, 1.0 / len(pair_losses))
        if student_patch[i] is not None:
            if teacher_patch_targets[i] is None:
                raise ShapeError(f"level {i}: student patch logits without targets")
            patch_term = T.cross_entropy(student_patch[i], teacher_patch_targets[i])
            level = T.add(level, T.mul(patch_term, patch_weight))
        per_level.append(level)
    total = per_level[0]
    for lvl in per_level[1:]:
        total = T.add(total, lvl)
    return total, per_level
