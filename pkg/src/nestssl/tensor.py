"""Dense tensors with reverse-mode differentiation over an explicit tape.

The op set covers exactly what the patch encoder, the nested clustering
heads, and the positional de-biasing stage need: affine maps, batched
matmuls for attention, normalizations, and the two losses. There is no
general broadcasting engine: binary ops accept equal shapes, a trailing
bias vector, or a python scalar, and reject everything else loudly.

Training runs in float32; ``precision("float64")`` switches the default
dtype so finite-difference gradient checks stay tight.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes (or dtypes) are incompatible for the requested op."""


class TapeError(RuntimeError):
    """Misuse of the differentiation tape."""


class GradCheckError(RuntimeError):
    """Analytic gradients disagree with finite differences."""


_DEFAULT_DTYPE = np.float32


def default_dtype():
    return _DEFAULT_DTYPE


@contextmanager
def precision(dtype):
    """Temporarily change the default floating dtype ("float32"/"float64")."""
    global _DEFAULT_DTYPE
    previous = _DEFAULT_DTYPE
    _DEFAULT_DTYPE = np.dtype(dtype).type
    try:
        yield
    finally:
        _DEFAULT_DTYPE = previous


class Tensor:
    """A contiguous row-major array, optionally tracked on the active tape.

    Tensors are immutable after construction except for gradient buffers;
    ``grad`` is (over)written by ``Tape.backward``. A tensor created with
    ``requires_grad=False`` and never produced by a recorded op is a
    constant: it never receives a gradient.
    """

    __slots__ = ("data", "grad", "requires_grad", "_node", "_tape")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            raise TypeError("wrap raw array data, not another Tensor")
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not (isinstance(data, np.ndarray) and arr.dtype in (np.float32, np.float64)):
            arr = arr.astype(_DEFAULT_DTYPE)
        self.data = np.ascontiguousarray(arr)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._node: int | None = None
        self._tape: "Tape | None" = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a scalar, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        """A constant copy cut off from any tape; it never receives gradient."""
        return Tensor(self.data.copy(), requires_grad=False)

    def __repr__(self) -> str:
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}{flag})"

    # operator sugar over the module-level ops
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


@dataclass
class _Record:
    out: int
    inputs: tuple[int, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


_TAPE_STACK: list["Tape"] = []


def active_tape() -> "Tape | None":
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class Tape:
    """Ordered record of operations; ops register in topological order.

    A tape is confined to one thread of execution. ``backward`` replays
    the records exactly once in reverse; calling it twice recomputes the
    same (bit-identical) gradients from scratch.
    """

    def __init__(self):
        self._records: list[_Record] = []
        self._tensors: dict[int, Tensor] = {}
        self._next_id = 0

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        if not _TAPE_STACK or _TAPE_STACK[-1] is not self:
            raise TapeError("tape context exited out of order")
        _TAPE_STACK.pop()
        return False

    def __len__(self) -> int:
        return len(self._records)

    def node_of(self, t: Tensor) -> int:
        """Register ``t`` on this tape (idempotent) and return its node id."""
        if t._tape is not self:
            t._tape = self
            t._node = self._next_id
            self._next_id += 1
            self._tensors[t._node] = t
        return t._node  # type: ignore[return-value]

    def record(self, out: Tensor, inputs: Sequence[Tensor], backward) -> None:
        in_ids = tuple(self.node_of(t) for t in inputs)
        self._records.append(_Record(self.node_of(out), in_ids, backward))

    def backward(self, loss: Tensor) -> None:
        """Populate ``grad`` on every tracked tensor with dLoss/dTensor.

        Tensors registered on the tape but unused by ``loss`` get zeros.
        """
        if loss._tape is not self or loss._node is None:
            raise TapeError("loss tensor was not recorded on this tape")
        if loss.data.size != 1:
            raise TapeError(f"loss must be scalar, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {loss._node: np.ones_like(loss.data)}
        for rec in reversed(self._records):
            g_out = grads.get(rec.out)
            if g_out is None:
                continue
            for node, g_in in zip(rec.inputs, rec.backward(g_out)):
                if g_in is None:
                    continue
                held = grads.get(node)
                grads[node] = g_in if held is None else held + g_in
        for node, t in self._tensors.items():
            if t.requires_grad:
                g = grads.get(node)
                t.grad = np.zeros_like(t.data) if g is None else np.ascontiguousarray(g)


def backward(tape: Tape, loss: Tensor) -> None:
    tape.backward(loss)


# ---------------------------------------------------------------------------
# op plumbing


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_dtypes(op: str, *tensors: Tensor) -> None:
    dtypes = {t.data.dtype for t in tensors}
    if len(dtypes) > 1:
        raise ShapeError(f"{op}: mixed dtypes {sorted(d.name for d in dtypes)}")


def _emit(data, inputs: Sequence[Tensor], backward_rule) -> Tensor:
    """Create the output tensor, recording the op if a tape is listening."""
    out = Tensor(data, dtype=data.dtype)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(out, inputs, backward_rule)
    return out


def _sum_to_vector(g: np.ndarray) -> np.ndarray:
    """Collapse all leading axes, leaving the trailing feature axis."""
    return g.reshape(-1, g.shape[-1]).sum(axis=0)


# ---------------------------------------------------------------------------
# arithmetic


def add(a, b):
    """Elementwise sum; also matrix + trailing bias vector, or + scalar."""
    a = as_tensor(a)
    if isinstance(b, (int, float)):
        s = float(b)

        def back_scalar(g):
            return (g,)

        return _emit(a.data + np.asarray(s, dtype=a.data.dtype), (a,), back_scalar)
    b = as_tensor(b)
    _check_dtypes("add", a, b)
    if a.shape == b.shape:

        def back_same(g):
            return (g if a.requires_grad else None, g if b.requires_grad else None)

        return _emit(a.data + b.data, (a, b), back_same)
    if b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]:

        def back_bias(g):
            return (
                g if a.requires_grad else None,
                _sum_to_vector(g) if b.requires_grad else None,
            )

        return _emit(a.data + b.data, (a, b), back_bias)
    raise ShapeError(f"add shape mismatch: {a.shape} + {b.shape}")


def sub(a, b):
    a = as_tensor(a)
    if isinstance(b, (int, float)):
        return add(a, -float(b))
    b = as_tensor(b)
    _check_dtypes("sub", a, b)
    if a.shape != b.shape:
        raise ShapeError(f"sub shape mismatch: {a.shape} - {b.shape}")

    def back(g):
        return (g if a.requires_grad else None, -g if b.requires_grad else None)

    return _emit(a.data - b.data, (a, b), back)


def mul(a, b):
    """Elementwise product of equal shapes, or tensor * python scalar."""
    a = as_tensor(a)
    if isinstance(b, (int, float)):
        s = np.asarray(float(b), dtype=a.data.dtype)

        def back_scalar(g):
            return (g * s,)

        return _emit(a.data * s, (a,), back_scalar)
    b = as_tensor(b)
    _check_dtypes("mul", a, b)
    if a.shape != b.shape:
        raise ShapeError(f"mul shape mismatch: {a.shape} * {b.shape}")

    def back(g):
        return (
            g * b.data if a.requires_grad else None,
            g * a.data if b.requires_grad else None,
        )

    return _emit(a.data * b.data, (a, b), back)


def matmul(a, b):
    """Matrix product; supports stacked leading batch dims on either rule.

    Accepts ``(..., M, K) @ (K, N)`` (shared weight on the right) and
    ``(..., M, K) @ (..., K, N)`` with identical leading dims (attention).
    """
    a, b = as_tensor(a), as_tensor(b)
    _check_dtypes("matmul", a, b)
    A, B = a.data, b.data
    if A.ndim < 2 or B.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands: {A.shape} @ {B.shape}")
    if A.shape[-1] != B.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {A.shape} @ {B.shape}")
    if B.ndim > 2 and A.shape[:-2] != B.shape[:-2]:
        raise ShapeError(f"matmul shape mismatch: {A.shape} @ {B.shape}")

    def back(g):
        if b.ndim == 2:
            ga = g @ B.T if a.requires_grad else None
            gb = (
                A.reshape(-1, A.shape[-1]).T @ g.reshape(-1, g.shape[-1])
                if b.requires_grad
                else None
            )
        else:
            ga = g @ np.swapaxes(B, -1, -2) if a.requires_grad else None
            gb = np.swapaxes(A, -1, -2) @ g if b.requires_grad else None
        return (ga, gb)

    return _emit(A @ B, (a, b), back)


# ---------------------------------------------------------------------------
# structure


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(int(s) for s in shape)
    new = a.data.reshape(shape)

    def back(g):
        return (g.reshape(a.shape),)

    return _emit(new, (a,), back)


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    axes = tuple(int(x) for x in axes)
    inverse = tuple(int(i) for i in np.argsort(axes))

    def back(g):
        return (g.transpose(inverse),)

    return _emit(np.ascontiguousarray(a.data.transpose(axes)), (a,), back)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat of an empty sequence")
    _check_dtypes("concat", *ts)
    sizes = [t.shape[axis] for t in ts]
    offsets = np.cumsum(sizes)[:-1]

    def back(g):
        pieces = np.split(g, offsets, axis=axis)
        return tuple(p if t.requires_grad else None for p, t in zip(pieces, ts))

    return _emit(np.concatenate([t.data for t in ts], axis=axis), ts, back)


def slice_cols(a, width: int) -> Tensor:
    """First ``width`` coordinates of the trailing axis; grads route back
    to those coordinates only."""
    a = as_tensor(a)
    if not 0 < width <= a.shape[-1]:
        raise ShapeError(f"slice_cols width {width} out of range for shape {a.shape}")

    def back(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        full[..., :width] = g
        return (full,)

    return _emit(np.ascontiguousarray(a.data[..., :width]), (a,), back)


def gather_rows(a, index) -> Tensor:
    """Select rows of a 2-d tensor; backward scatter-adds into place."""
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"gather_rows needs a 2-d tensor, got {a.shape}")
    idx = np.asarray(index, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError(f"gather_rows index must be 1-d, got {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise ShapeError(f"gather_rows index out of range for {a.shape[0]} rows")

    def back(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        np.add.at(full, idx, g)
        return (full,)

    return _emit(a.data[idx].copy(), (a,), back)


def broadcast_batch(a, n: int) -> Tensor:
    """Stack ``n`` copies along a new leading axis; backward sums them."""
    a = as_tensor(a)
    if n < 1:
        raise ShapeError(f"broadcast_batch needs n >= 1, got {n}")
    out = np.broadcast_to(a.data, (n,) + a.shape).copy()

    def back(g):
        return (g.sum(axis=0),)

    return _emit(out, (a,), back)


def reduce_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)

    def back(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.shape).copy(),)

    return _emit(a.data.sum(axis=axis, keepdims=keepdims), (a,), back)


def reduce_mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.size if axis is None else a.shape[axis]

    def back(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy() / count,)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.shape).copy() / count,)

    return _emit(a.data.mean(axis=axis, keepdims=keepdims), (a,), back)


# ---------------------------------------------------------------------------
# nonlinearities and normalizations

_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a) -> Tensor:
    """Tanh-form gelu: 0.5x(1 + tanh(sqrt(2/pi)(x + 0.044715 x^3)))."""
    a = as_tensor(a)
    x = a.data
    xx = x * x
    t = np.tanh(_GELU_C * (x + 0.044715 * (xx * x)))

    def back(g):
        dinner = _GELU_C * (1.0 + (3 * 0.044715) * xx)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _emit(0.5 * x * (1.0 + t), (a,), back)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    s = np.empty_like(x)
    pos = x >= 0
    s[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    s[~pos] = ex / (1.0 + ex)

    def back(g):
        return (g * s * (1.0 - s),)

    return _emit(s.copy(), (a,), back)


def softmax_t(a, temperature: float, axis: int = -1) -> Tensor:
    """exp((x - max)/T) normalized along ``axis``; stable by construction."""
    if temperature <= 0:
        raise ValueError(f"softmax temperature must be positive, got {temperature}")
    a = as_tensor(a)
    z = a.data / temperature
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        dot = (g * s).sum(axis=axis, keepdims=True)
        return (s * (g - dot) / temperature,)

    return _emit(s.copy(), (a,), back)


def layer_norm(a, gain, bias, eps: float = 1e-5) -> Tensor:
    """Zero-mean unit-variance over the trailing axis, then affine."""
    if eps < 0:
        raise ValueError(f"layer_norm eps must be non-negative, got {eps}")
    a, gain, bias = as_tensor(a), as_tensor(gain), as_tensor(bias)
    _check_dtypes("layer_norm", a, gain, bias)
    dim = a.shape[-1]
    if gain.shape != (dim,) or bias.shape != (dim,):
        raise ShapeError(
            f"layer_norm affine shapes {gain.shape}/{bias.shape} do not match "
            f"trailing dim {dim}"
        )
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv

    def back(g):
        ga = None
        if a.requires_grad:
            gx = g * gain.data
            m1 = gx.mean(axis=-1, keepdims=True)
            m2 = (gx * xhat).mean(axis=-1, keepdims=True)
            ga = (gx - m1 - xhat * m2) * inv
        gg = _sum_to_vector(g * xhat) if gain.requires_grad else None
        gb = _sum_to_vector(g) if bias.requires_grad else None
        return (ga, gg, gb)

    return _emit(xhat * gain.data + bias.data, (a, gain, bias), back)


def l2_normalize(a, axis: int = -1) -> Tensor:
    """Scale slices along ``axis`` to unit norm; an all-zero slice passes
    through unchanged (no division) and gets zero gradient."""
    a = as_tensor(a)
    x = a.data
    norm = np.sqrt((x * x).sum(axis=axis, keepdims=True))
    tiny = np.finfo(x.dtype).tiny
    inv = np.where(norm > tiny, 1.0 / np.maximum(norm, tiny), 0.0)
    y = x * inv

    def back(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return ((g - y * dot) * inv,)

    return _emit(y, (a,), back)


# ---------------------------------------------------------------------------
# losses


def cross_entropy(logits, targets, weights=None) -> Tensor:
    """Mean over rows of -sum(targets * log_softmax(logits)).

    ``targets`` are probability rows and are treated as constants; pass
    ``weights`` (one non-negative scalar per row) to reweight rows, e.g.
    restricting the loss to masked positions. Reduction divides by the
    total weight.
    """
    logits = as_tensor(logits)
    if isinstance(targets, Tensor):
        if targets.requires_grad:
            raise TapeError("cross_entropy targets must be constants")
        targets = targets.data
    t = np.asarray(targets, dtype=logits.data.dtype)
    if logits.ndim != 2 or t.shape != logits.shape:
        raise ShapeError(
            f"cross_entropy expects matching 2-d shapes, got {logits.shape} vs {t.shape}"
        )
    if not np.isfinite(t).all():
        raise ValueError("cross_entropy targets contain non-finite values")
    rows = logits.shape[0]
    if weights is None:
        w = np.ones(rows, dtype=logits.data.dtype)
    else:
        w = np.asarray(weights, dtype=logits.data.dtype)
        if w.shape != (rows,):
            raise ShapeError(f"weights shape {w.shape} does not match {rows} rows")
        if (w < 0).any():
            raise ValueError("cross_entropy weights must be non-negative")
    total_w = w.sum()
    if total_w <= 0:
        raise ValueError("cross_entropy weights sum to zero")
    x = logits.data
    m = x.max(axis=1, keepdims=True)
    lse = m + np.log(np.exp(x - m).sum(axis=1, keepdims=True))
    logp = x - lse
    per_row = -(t * logp).sum(axis=1)
    loss = (w * per_row).sum() / total_w

    def back(g):
        p = np.exp(logp)
        return ((g * w[:, None] / total_w) * (p - t),)

    return _emit(np.asarray(loss, dtype=x.dtype), (logits,), back)


def mse(pred, target) -> Tensor:
    """Mean squared error over all elements; ``target`` is a constant."""
    pred = as_tensor(pred)
    if isinstance(target, Tensor):
        if target.requires_grad:
            raise TapeError("mse target must be a constant")
        target = target.data
    t = np.asarray(target, dtype=pred.data.dtype)
    if t.shape != pred.shape:
        raise ShapeError(f"mse shape mismatch: {pred.shape} vs {t.shape}")
    diff = pred.data - t
    n = pred.size

    def back(g):
        return (g * 2.0 * diff / n,)

    return _emit(np.asarray((diff * diff).mean(), dtype=pred.data.dtype), (pred,), back)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamWState:
    """First/second moment buffers keyed like the param dict."""

    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(
    params: dict,
    grads: dict,
    state: AdamWState,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> None:
    """Decoupled-weight-decay Adam update, in place, with bias correction.

    ``params`` and ``grads`` map names to same-shape ndarrays; a missing
    or None gradient counts as zero. Moment buffers are zero-initialized
    on first use.
    """
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    b1, b2 = betas
    state.step += 1
    t = state.step
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        if g.shape != p.shape:
            raise ShapeError(f"grad shape {g.shape} != param shape {p.shape} for {name}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + eps)
        if weight_decay:
            update = update + weight_decay * p
        p -= lr * update


class AdamW:
    """Convenience wrapper applying ``adamw_step`` to a dict of Tensors."""

    def __init__(self, params: dict[str, Tensor], betas=(0.9, 0.999), eps=1e-8,
                 weight_decay: float = 0.0):
        self.params = params
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.state = AdamWState()

    def step(self, lr: float) -> None:
        adamw_step(
            {n: t.data for n, t in self.params.items()},
            {n: t.grad for n, t in self.params.items()},
            self.state,
            lr,
            betas=self.betas,
            eps=self.eps,
            weight_decay=self.weight_decay,
        )


# ---------------------------------------------------------------------------
# gradient checking


def grad_check(
    f: Callable[[], Tensor],
    tensors,
    h: float = 1e-4,
    tol: float | None = None,
) -> float:
    """Max relative error between taped gradients and central differences.

    ``f`` rebuilds the scalar loss from the given float64 leaf tensors on
    every call; it must be deterministic. Coordinates where both the
    analytic and numeric gradient vanish are skipped. With ``tol`` set,
    exceeding it raises and names the worst-offending coordinate.
    """
    if isinstance(tensors, dict):
        named = list(tensors.items())
    else:
        named = [(f"t{i}", t) for i, t in enumerate(tensors)]
    for name, t in named:
        if t.data.dtype != np.float64:
            raise GradCheckError(f"grad_check requires float64 tensors ({name} is "
                                 f"{t.data.dtype.name})")
        if not t.requires_grad:
            raise GradCheckError(f"grad_check tensor {name} does not track gradients")
    with Tape() as tape:
        loss = f()
    tape.backward(loss)
    analytic = {name: t.grad.copy() for name, t in named}

    worst = 0.0
    worst_loc = ""
    for name, t in named:
        flat = t.data.reshape(-1)
        g = analytic[name].reshape(-1)
        for i in range(flat.size):
            saved = flat[i]
            flat[i] = saved + h
            f_plus = f().item()
            flat[i] = saved - h
            f_minus = f().item()
            flat[i] = saved
            fd = (f_plus - f_minus) / (2.0 * h)
            denom = max(abs(g[i]), abs(fd))
            if denom < 1e-8:
                continue
            err = abs(g[i] - fd) / denom
            if err > worst:
                worst = err
                worst_loc = f"{name}[{i}] analytic={g[i]:.6e} numeric={fd:.6e}"
    if tol is not None and worst > tol:
        raise GradCheckError(f"max relative error {worst:.3e} > {tol:.1e} at {worst_loc}")
    return worst
