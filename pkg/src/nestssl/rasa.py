"""Removal of linear positional structure from patch features.

Alternates fitting a linear position probe on patch features with
subtracting the orthonormalized plane its weight rows span. The probe
predicts normalized (row, col) grid centers through a sigmoid and is
trained by MSE; probe weights start at zero so the learned directions
stay inside the current feature subspace, keeping successive planes
mutually orthogonal. The composed projector is a plain matrix and folds
into the encoder's final linear layer.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import AdamWState, ShapeError, Tape, Tensor, adamw_step


class DegenerateFeaturesError(ValueError):
    """Position fitting cannot proceed (constant features, parallel plane)."""


@dataclass
class PositionHead:
    weight: np.ndarray  # (2, D); sigmoid(features @ weight.T) predicts (row, col)
    final_loss: float

    def predict(self, features: np.ndarray) -> np.ndarray:
        return _sigmoid(features @ self.weight.T)


@dataclass
class RASAState:
    planes: list[tuple[np.ndarray, np.ndarray]] = field(default_factory=list)
    transform: np.ndarray | None = None  # (D, D) ordered product of projectors
    losses: list[float] = field(default_factory=list)  # fitted L_pos per iteration
    residuals: list[float] = field(default_factory=list)  # orthonormality defect

    @property
    def iterations(self) -> int:
        return len(self.planes)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def best_constant_loss(coords: np.ndarray) -> float:
    """MSE of predicting the coordinate mean: the no-information floor."""
    mean = coords.mean(axis=0, keepdims=True)
    return float(((coords - mean) ** 2).mean())


def fit_position_head(
    features: np.ndarray,
    coords: np.ndarray,
    epochs: int = 300,
    lr: float = 0.05,
) -> PositionHead:
    """Train W (2 x D) by full-batch AdamW on MSE(sigmoid(F W^T), coords).

    W starts at zero, so predictions begin at 0.5 and the loss starts at
    the untrained baseline; gradients confine W's rows to the row space
    of ``features``.
    """
    feats = np.asarray(features, dtype=np.float64)
    target = np.asarray(coords, dtype=np.float64)
    if feats.ndim != 2 or target.shape != (feats.shape[0], 2):
        raise ShapeError(
            f"expected (N, D) features with (N, 2) coords, got {feats.shape} / {target.shape}"
        )
    spread = np.abs(feats - feats[0]).max() if len(feats) else 0.0
    if spread < 1e-9:
        raise DegenerateFeaturesError(
            "all feature rows are identical; position fitting is ill-posed"
        )
    w = Tensor(np.zeros((2, feats.shape[1]), dtype=np.float64), requires_grad=True)
    opt_state = AdamWState()
    for _ in range(epochs):
        with Tape() as tape:
            pred = T.sigmoid(T.matmul(Tensor(feats), T.transpose(w, (1, 0))))
            loss = T.mse(pred, target)
        tape.backward(loss)
        adamw_step({"w": w.data}, {"w": w.grad}, opt_state, lr, weight_decay=0.0)
    final = _evaluate_loss(feats, target, w.data)
    return PositionHead(weight=w.data.copy(), final_loss=final)


def _evaluate_loss(feats: np.ndarray, coords: np.ndarray, w: np.ndarray) -> float:
    pred = _sigmoid(feats @ w.T)
    return float(((pred - coords) ** 2).mean())


def gram_schmidt_pair(w_r: np.ndarray, w_c: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Orthonormalize (w_r, w_c) into (u_r, u_c) spanning the same plane."""
    w_r = np.asarray(w_r, dtype=np.float64)
    w_c = np.asarray(w_c, dtype=np.float64)
    norm_r = np.linalg.norm(w_r)
    if norm_r < 1e-12:
        raise DegenerateFeaturesError("first direction vector is zero")
    u_r = w_r / norm_r
    residual = w_c - (w_c @ u_r) * u_r
    norm_c = np.linalg.norm(residual)
    if norm_c < 1e-9 * max(np.linalg.norm(w_c), 1e-30):
        raise DegenerateFeaturesError("direction vectors are parallel; plane is degenerate")
    return u_r, residual / norm_c


def _check_plane(u_r: np.ndarray, u_c: np.ndarray) -> None:
    if (
        abs(np.linalg.norm(u_r) - 1.0) > 1e-6
        or abs(np.linalg.norm(u_c) - 1.0) > 1e-6
        or abs(float(u_r @ u_c)) > 1e-6
    ):
        raise ShapeError("plane is not orthonormal")


def remove_plane(z: np.ndarray, u_r: np.ndarray, u_c: np.ndarray) -> np.ndarray:
    """Subtract the projection onto span{u_r, u_c}: Z - <Z,u_r>u_r - <Z,u_c>u_c."""
    _check_plane(u_r, u_c)
    z = np.asarray(z)
    return z - np.outer(z @ u_r, u_r) - np.outer(z @ u_c, u_c)


def plane_projector(u_r: np.ndarray, u_c: np.ndarray) -> np.ndarray:
    """I - u_r u_r^T - u_c u_c^T, the rank-(D-2) orthogonal projector."""
    _check_plane(u_r, u_c)
    d = u_r.shape[0]
    return np.eye(d) - np.outer(u_r, u_r) - np.outer(u_c, u_c)


def plane_residual(u_r: np.ndarray, u_c: np.ndarray) -> float:
    """Max deviation from orthonormality; diagnostics for the report."""
    return float(
        max(
            abs(np.linalg.norm(u_r) - 1.0),
            abs(np.linalg.norm(u_c) - 1.0),
            abs(float(u_r @ u_c)),
        )
    )


def rasa_iterate(
    features: np.ndarray,
    coords: np.ndarray,
    t_max: int = 9,
    patience: float = 0.01,
    epochs: int = 300,
    lr: float = 0.05,
) -> RASAState:
    """Fit-remove-refit until the positional loss stops improving.

    Each round fits a fresh probe on the current features. If its loss
    fails to beat the previous round's (the best-constant floor before
    round one) by the relative ``patience`` margin, the round's plane is
    judged uninformative and discarded; otherwise the plane is removed
    and iteration continues, up to ``t_max`` planes. A degenerate plane
    ends iteration with the state accumulated so far.
    """
    if t_max < 1:
        raise ValueError(f"t_max must be >= 1, got {t_max}")
    feats = np.asarray(features, dtype=np.float64).copy()
    state = RASAState()
    previous = best_constant_loss(np.asarray(coords, dtype=np.float64))
    for _ in range(t_max):
        head = fit_position_head(feats, coords, epochs=epochs, lr=lr)
        state.losses.append(head.final_loss)
        if head.final_loss >= (1.0 - patience) * previous:
            break
        try:
            u_r, u_c = gram_schmidt_pair(head.weight[0], head.weight[1])
        except DegenerateFeaturesError:
            break
        state.planes.append((u_r, u_c))
        state.residuals.append(plane_residual(u_r, u_c))
        feats = remove_plane(feats, u_r, u_c)
        previous = head.final_loss
    state.transform = compose_transform(state, feats.shape[1])
    return state


def compose_transform(state: RASAState, dim: int) -> np.ndarray:
    """Ordered product of the per-iteration projectors (identity when empty)."""
    transform = np.eye(dim)
    for u_r, u_c in state.planes:
        transform = transform @ plane_projector(u_r, u_c)
    return transform


def apply_iterative(z: np.ndarray, state: RASAState) -> np.ndarray:
    """Apply the recorded removals one by one (the non-folded path)."""
    out = np.asarray(z, dtype=np.float64)
    for u_r, u_c in state.planes:
        out = remove_plane(out, u_r, u_c)
    return out


def fold_into_linear(weights: np.ndarray, state: RASAState) -> np.ndarray:
    """Right-multiply the final layer by the composed projector.

    For an encoder ending in ``out = H @ W`` this makes the folded
    encoder emit exactly the iteratively-cleaned features.
    """
    w = np.asarray(weights)
    if state.transform is None:
        raise ValueError("state.transform not composed; run rasa_iterate first")
    if w.shape[1] != state.transform.shape[0]:
        raise ShapeError(
            f"final-layer output width {w.shape[1]} does not match transform "
            f"{state.transform.shape}"
        )
    return (w.astype(np.float64) @ state.transform).astype(w.dtype)


def write_rasa_report(path, state: RASAState) -> None:
    lines = ["iteration,L_pos,plane_norm_residual"]
    for i, loss in enumerate(state.losses, start=1):
        residual = state.residuals[i - 1] if i - 1 < len(state.residuals) else float("nan")
        lines.append(f"{i},{loss:.8g},{residual:.8g}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
