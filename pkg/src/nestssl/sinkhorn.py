"""Balanced soft cluster targets via alternating row/column scaling.

Teacher logits become assignment targets whose columns (prototypes) each
carry B/K of the batch mass and whose rows are probability
distributions; ending on the row step keeps rows valid cross-entropy
targets.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_FLOOR = 1e-30  # keeps zero columns divisible


@dataclass(frozen=True)
class SKConfig:
    iterations: int = 3
    teacher_temp: float = 0.05

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError(f"iterations must be >= 1, got {self.iterations}")
        if self.teacher_temp <= 0:
            raise ValueError(f"teacher temperature must be positive, got {self.teacher_temp}")


def sk_targets(logits: np.ndarray, cfg: SKConfig) -> np.ndarray:
    """Alternate column scaling (sums B/K) and row scaling (sums 1).

    Starts from exp(logits / temp) after a per-row max shift, which makes
    the result exactly invariant to per-row constants and avoids
    overflow. Each round is column-then-row, so output rows always sum
    to one.
    """
    q = np.asarray(logits)
    if q.ndim != 2:
        raise ValueError(f"expected a 2-d logit matrix, got shape {q.shape}")
    b, k = q.shape
    if b < 1 or k < 2:
        raise ValueError(f"need B >= 1 and K >= 2, got shape {q.shape}")
    if not np.isfinite(q).all():
        raise ValueError("non-finite logits passed to sk_targets")
    q = q / cfg.teacher_temp
    q = np.exp(q - q.max(axis=1, keepdims=True))
    col_target = b / k
    for _ in range(cfg.iterations):
        q = np.maximum(q, _FLOOR)
        q = q * (col_target / q.sum(axis=0, keepdims=True))
        q = np.maximum(q, _FLOOR)
        q = q / q.sum(axis=1, keepdims=True)
    return q


def sk_oracle(logits: np.ndarray, cfg: SKConfig) -> np.ndarray:
    """Scalar-loop alternating-scaling reference; independent of sk_targets.

    Kept deliberately naive (per-element Python loops, float64) so tests
    can compare the vectorized path against it.
    """
    src = np.asarray(logits, dtype=np.float64)
    b, k = src.shape
    shifted = [[src[i][j] / cfg.teacher_temp for j in range(k)] for i in range(b)]
    for i in range(b):
        row_max = max(shifted[i])
        for j in range(k):
            shifted[i][j] = float(np.exp(shifted[i][j] - row_max))
    for _ in range(cfg.iterations):
        for j in range(k):
            col = sum(max(shifted[i][j], _FLOOR) for i in range(b))
            for i in range(b):
                shifted[i][j] = max(shifted[i][j], _FLOOR) * (b / k) / col
        for i in range(b):
            row = sum(max(shifted[i][j], _FLOOR) for j in range(k))
            for j in range(k):
                shifted[i][j] = max(shifted[i][j], _FLOOR) / row
    return np.array(shifted)
