"""A small patch transformer shared by student and teacher.

Produces one classification embedding plus one embedding per patch.
Masked patch slots are swapped for a learned mask token before the
blocks; positional tables are learned per crop resolution (no
interpolation at desk scale). The network ends in a bias-free linear
projection so post-training linear feature edits can be folded into the
weights without architecture changes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor


@dataclass(frozen=True)
class EncoderConfig:
    image_sizes: tuple[int, ...] = (64, 32)  # first entry is the global crop size
    patch_size: int = 8
    embed_dim: int = 64
    depth: int = 2
    num_heads: int = 4
    mlp_ratio: float = 4.0
    channels: int = 3
    # stochastic depth is configurable but off at desk scale
    drop_path: float = 0.0
    ln_eps: float = 1e-5

    def __post_init__(self):
        for s in self.image_sizes:
            if s % self.patch_size:
                raise ValueError(
                    f"image size {s} not divisible by patch size {self.patch_size}"
                )
        if self.embed_dim % self.num_heads:
            raise ValueError(
                f"embed dim {self.embed_dim} not divisible by {self.num_heads} heads"
            )
        if not 0.0 <= self.drop_path < 1.0:
            raise ValueError(f"drop_path must lie in [0, 1), got {self.drop_path}")

    def grid(self, image_size: int) -> tuple[int, int]:
        g = image_size // self.patch_size
        return g, g

    def num_patches(self, image_size: int) -> int:
        g, _ = self.grid(image_size)
        return g * g


@dataclass
class EncoderOutput:
    cls: Tensor  # (B, d)
    patches: Tensor  # (B, n, d)
    grid: tuple[int, int]


def patchify(images: np.ndarray, patch_size: int) -> np.ndarray:
    """(B, C, H, W) -> (B, n, C*p*p) in raster order (top-left first)."""
    b, c, h, w = images.shape
    p = patch_size
    if h % p or w % p:
        raise ShapeError(f"image {h}x{w} not divisible by patch size {p}")
    gh, gw = h // p, w // p
    x = images.reshape(b, c, gh, p, gw, p)
    x = x.transpose(0, 2, 4, 1, 3, 5)
    return np.ascontiguousarray(x.reshape(b, gh * gw, c * p * p))


def unpatchify(patches: np.ndarray, patch_size: int, grid: tuple[int, int],
               channels: int) -> np.ndarray:
    """Inverse of patchify: (B, n, C*p*p) -> (B, C, H, W)."""
    b, n, _ = patches.shape
    gh, gw = grid
    p = patch_size
    if n != gh * gw:
        raise ShapeError(f"{n} patches do not fill a {gh}x{gw} grid")
    x = patches.reshape(b, gh, gw, channels, p, p)
    x = x.transpose(0, 3, 1, 4, 2, 5)
    return np.ascontiguousarray(x.reshape(b, channels, gh * p, gw * p))


def init_encoder_params(
    cfg: EncoderConfig, rng: np.random.Generator, dtype=np.float32
) -> dict[str, Tensor]:
    d = cfg.embed_dim
    params: dict[str, np.ndarray] = {}

    def normal(*shape, scale=0.02):
        return (rng.standard_normal(shape) * scale).astype(dtype)

    params["enc.patch.w"] = normal(cfg.channels * cfg.patch_size**2, d)
    params["enc.patch.b"] = np.zeros(d, dtype=dtype)
    params["enc.cls"] = normal(d)
    params["enc.mask"] = normal(d)
    for size in cfg.image_sizes:
        params[f"enc.pos.{size}"] = normal(cfg.num_patches(size) + 1, d)
    hidden = int(d * cfg.mlp_ratio)
    for i in range(cfg.depth):
        pre = f"enc.b{i}"
        params[f"{pre}.ln1.g"] = np.ones(d, dtype=dtype)
        params[f"{pre}.ln1.b"] = np.zeros(d, dtype=dtype)
        for name in ("wq", "wk", "wv", "wo"):
            params[f"{pre}.attn.{name}"] = normal(d, d)
        for name in ("bq", "bk", "bv", "bo"):
            params[f"{pre}.attn.{name}"] = np.zeros(d, dtype=dtype)
        params[f"{pre}.ln2.g"] = np.ones(d, dtype=dtype)
        params[f"{pre}.ln2.b"] = np.zeros(d, dtype=dtype)
        params[f"{pre}.mlp.w1"] = normal(d, hidden)
        params[f"{pre}.mlp.b1"] = np.zeros(hidden, dtype=dtype)
        params[f"{pre}.mlp.w2"] = normal(hidden, d)
        params[f"{pre}.mlp.b2"] = np.zeros(d, dtype=dtype)
    params["enc.out.w"] = np.eye(d, dtype=dtype)
    return {name: Tensor(arr, requires_grad=True) for name, arr in params.items()}


def _attention(x: Tensor, params: dict[str, Tensor], prefix: str, cfg: EncoderConfig,
               b: int, s: int) -> Tensor:
    d = cfg.embed_dim
    heads = cfg.num_heads
    dh = d // heads

    def split_heads(t: Tensor) -> Tensor:
        return T.transpose(T.reshape(t, (b, s, heads, dh)), (0, 2, 1, 3))

    q = split_heads(T.add(T.matmul(x, params[f"{prefix}.wq"]), params[f"{prefix}.bq"]))
    k = split_heads(T.add(T.matmul(x, params[f"{prefix}.wk"]), params[f"{prefix}.bk"]))
    v = split_heads(T.add(T.matmul(x, params[f"{prefix}.wv"]), params[f"{prefix}.bv"]))
    scores = T.matmul(q, T.transpose(k, (0, 1, 3, 2)))
    # 1/sqrt(dh) scaling expressed as a softmax temperature
    attn = T.softmax_t(scores, temperature=math.sqrt(dh), axis=-1)
    ctx = T.matmul(attn, v)
    ctx = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (b, s, d))
    return T.add(T.matmul(ctx, params[f"{prefix}.wo"]), params[f"{prefix}.bo"])


def _drop_path_gate(branch: Tensor, rate: float, b: int, s: int, d: int,
                    rng: np.random.Generator | None) -> Tensor:
    if rate <= 0.0 or rng is None:
        return branch
    keep = (rng.uniform(size=(b, 1, 1)) >= rate).astype(branch.data.dtype) / (1.0 - rate)
    gate = np.broadcast_to(keep, (b, s, d)).copy()
    return T.mul(branch, Tensor(gate, dtype=branch.data.dtype))


def encode(
    params: dict[str, Tensor],
    cfg: EncoderConfig,
    images: np.ndarray,
    masks: np.ndarray | None = None,
    rng: np.random.Generator | None = None,
) -> EncoderOutput:
    """Forward pass over a batch of crops of one resolution.

    ``masks`` is an optional (B, gh, gw) boolean array; True slots are
    replaced by the learned mask token before the blocks. Pass ``rng``
    only when stochastic depth is enabled.
    """
    b, c, h, w = images.shape
    if h != w or h not in cfg.image_sizes:
        raise ShapeError(
            f"no positional table for {h}x{w} inputs; configured sizes {cfg.image_sizes}"
        )
    grid = cfg.grid(h)
    n = grid[0] * grid[1]
    d = cfg.embed_dim
    dtype = params["enc.patch.w"].data.dtype

    flat = patchify(images.astype(dtype, copy=False), cfg.patch_size)
    x = T.matmul(Tensor(flat.reshape(b * n, -1), dtype=dtype), params["enc.patch.w"])
    x = T.add(x, params["enc.patch.b"])  # (B*n, d)

    if masks is not None:
        if masks.shape != (b, *grid):
            raise ShapeError(
                f"mask shape {masks.shape} does not match batch grid {(b, *grid)}"
            )
        m = masks.reshape(b * n, 1).astype(dtype)
        m = Tensor(np.broadcast_to(m, (b * n, d)).copy(), dtype=dtype)
        token_rows = T.broadcast_batch(params["enc.mask"], b * n)
        x = T.add(T.mul(x, T.add(T.mul(m, -1.0), 1.0)), T.mul(token_rows, m))

    x = T.reshape(x, (b, n, d))
    cls_rows = T.reshape(T.broadcast_batch(params["enc.cls"], b), (b, 1, d))
    x = T.concat([cls_rows, x], axis=1)  # (B, n+1, d), slot 0 is [CLS]
    pos = T.broadcast_batch(params[f"enc.pos.{h}"], b)
    x = T.add(x, pos)

    s = n + 1
    for i in range(cfg.depth):
        pre = f"enc.b{i}"
        normed = T.layer_norm(x, params[f"{pre}.ln1.g"], params[f"{pre}.ln1.b"], cfg.ln_eps)
        attended = _attention(normed, params, f"{pre}.attn", cfg, b, s)
        x = T.add(x, _drop_path_gate(attended, cfg.drop_path, b, s, d, rng))
        normed = T.layer_norm(x, params[f"{pre}.ln2.g"], params[f"{pre}.ln2.b"], cfg.ln_eps)
        hidden = T.gelu(T.add(T.matmul(normed, params[f"{pre}.mlp.w1"]), params[f"{pre}.mlp.b1"]))
        mlp_out = T.add(T.matmul(hidden, params[f"{pre}.mlp.w2"]), params[f"{pre}.mlp.b2"])
        x = T.add(x, _drop_path_gate(mlp_out, cfg.drop_path, b, s, d, rng))

    x = T.matmul(x, params["enc.out.w"])
    flat_out = T.reshape(x, (b * s, d))
    cls_idx = np.arange(b) * s
    patch_idx = np.concatenate([np.arange(1, s) + img * s for img in range(b)])
    cls_out = T.gather_rows(flat_out, cls_idx)
    patches_out = T.reshape(T.gather_rows(flat_out, patch_idx), (b, n, d))
    return EncoderOutput(cls=cls_out, patches=patches_out, grid=grid)


def patch_coordinates(grid: tuple[int, int], dtype=np.float32) -> np.ndarray:
    """Normalized (row, col) centers of each patch in raster order, in (0, 1)."""
    gh, gw = grid
    rows = (np.arange(gh) + 0.5) / gh
    cols = (np.arange(gw) + 0.5) / gw
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    return np.stack([rr.reshape(-1), cc.reshape(-1)], axis=1).astype(dtype)
