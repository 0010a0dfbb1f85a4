"""Patch-level mask generators: random, block, inverse-block, and cyclic.

The cyclic strategy wraps the centered inverse-block mask by a random
toroidal shift on both axes, which equalizes per-cell visibility while
keeping the visible region contiguous (modulo wraparound).

All generators are pure functions of (parameters, rng); callers own the
RNG stream.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

STRATEGIES = ("random", "block", "inverse", "cyclic")


@dataclass(frozen=True)
class MaskGrid:
    """Boolean patch mask for one crop; True means the patch is masked."""

    bits: np.ndarray  # (rows, cols) bool

    @property
    def rows(self) -> int:
        return self.bits.shape[0]

    @property
    def cols(self) -> int:
        return self.bits.shape[1]

    @property
    def mask_ratio(self) -> float:
        return float(self.bits.sum()) / self.bits.size

    def flat(self) -> np.ndarray:
        """Raster-order view matching patchify's patch ordering."""
        return self.bits.reshape(-1)


def _check_ratio(ratio: float) -> None:
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"mask ratio must lie in [0, 1], got {ratio}")


def random_mask(rows: int, cols: int, ratio: float, rng: np.random.Generator) -> MaskGrid:
    """Exactly round(ratio * cells) cells masked, uniformly without replacement."""
    _check_ratio(ratio)
    cells = rows * cols
    k = int(round(ratio * cells))
    bits = np.zeros(cells, dtype=bool)
    if k:
        bits[rng.choice(cells, size=k, replace=False)] = True
    return MaskGrid(bits.reshape(rows, cols))


def _visible_rectangle(rows: int, cols: int, ratio: float) -> tuple[int, int]:
    """Squarest (h, w) whose area is closest to (1 - ratio) * cells.

    Ties on area prefer the squarest shape, then wider-than-tall.
    """
    target = (1.0 - ratio) * rows * cols
    best = None
    for h in range(rows + 1):
        for w in range(cols + 1):
            area = h * w
            key = (abs(area - target), abs(h - w), -w)
            if best is None or key < best[0]:
                best = (key, (h, w))
    return best[1]


def inverse_block_mask(
    rows: int, cols: int, ratio: float, rng: np.random.Generator
) -> MaskGrid:
    """Everything masked except a centered visible rectangle."""
    _check_ratio(ratio)
    h, w = _visible_rectangle(rows, cols, ratio)
    bits = np.ones((rows, cols), dtype=bool)
    top = (rows - h) // 2
    left = (cols - w) // 2
    bits[top : top + h, left : left + w] = False
    return MaskGrid(bits)


def cyclic_mask(
    rows: int,
    cols: int,
    ratio: float,
    rng: np.random.Generator,
    shift: tuple[int, int] | None = None,
) -> MaskGrid:
    """Inverse-block mask shifted toroidally by a uniform (dr, dc).

    The shift preserves the masked-cell count exactly; pass ``shift`` to
    pin the offsets (used by the exhaustive-enumeration tests).
    """
    base = inverse_block_mask(rows, cols, ratio, rng)
    if shift is None:
        dr = int(rng.integers(rows))
        dc = int(rng.integers(cols))
    else:
        dr, dc = int(shift[0]) % rows, int(shift[1]) % cols
    return MaskGrid(np.roll(base.bits, (dr, dc), axis=(0, 1)))


def block_mask(rows: int, cols: int, ratio: float, rng: np.random.Generator) -> MaskGrid:
    """A contiguous masked rectangle of area ~ratio placed uniformly (no wrap)."""
    _check_ratio(ratio)
    # reuse the rectangle rule with the complementary area
    h, w = _visible_rectangle(rows, cols, 1.0 - ratio)
    bits = np.zeros((rows, cols), dtype=bool)
    if h and w:
        top = int(rng.integers(rows - h + 1))
        left = int(rng.integers(cols - w + 1))
        bits[top : top + h, left : left + w] = True
    return MaskGrid(bits)


_GENERATORS = {
    "random": random_mask,
    "block": block_mask,
    "inverse": inverse_block_mask,
    "cyclic": cyclic_mask,
}


def make_mask(
    strategy: str, rows: int, cols: int, ratio: float, rng: np.random.Generator
) -> MaskGrid:
    if strategy not in _GENERATORS:
        raise ValueError(f"unknown masking strategy {strategy!r}; choose from {STRATEGIES}")
    return _GENERATORS[strategy](rows, cols, ratio, rng)


def coverage_stats(
    strategy: str,
    rows: int,
    cols: int,
    ratio: float,
    samples: int,
    rng: np.random.Generator,
) -> tuple[np.ndarray, float]:
    """Empirical per-cell visible frequency and its max deviation from 1 - ratio."""
    if samples < 1:
        raise ValueError(f"samples must be >= 1, got {samples}")
    visible = np.zeros((rows, cols), dtype=np.int64)
    for _ in range(samples):
        visible += ~make_mask(strategy, rows, cols, ratio, rng).bits
    freq = visible / samples
    deviation = float(np.abs(freq - (1.0 - ratio)).max())
    return freq, deviation


def write_coverage_csv(path, freq: np.ndarray) -> None:
    rows, cols = freq.shape
    lines = ["row,col,visible_freq"]
    for r in range(rows):
        for c in range(cols):
            lines.append(f"{r},{c},{freq[r, c]:.8g}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
