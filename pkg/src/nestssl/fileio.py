"""On-disk formats: feature files, checkpoints, and PPM images.

Both binary containers are little-endian and hold row-major 32-bit
floats, so save/load round-trips are bit-exact for float32 data.

FeatureFile (single tensor):
    magic "FRNK", version u32, ndims u32, dims u32 * ndims, payload f32.

Checkpoint (named tensor manifest, read until EOF):
    magic "FRCK", version u32, then per tensor: name length u16, name
    bytes (utf-8), ndims u32, dims u32 * ndims, payload f32.
"""

from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

FEATURE_MAGIC = b"FRNK"
CHECKPOINT_MAGIC = b"FRCK"
FORMAT_VERSION = 1


class FileFormatError(ValueError):
    """Malformed or truncated container file."""


def _read_exact(fh, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise FileFormatError(f"truncated file while reading {what}")
    return buf


def _write_array(fh, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr, dtype="<f4")
    fh.write(struct.pack("<I", arr.ndim))
    for d in arr.shape:
        fh.write(struct.pack("<I", d))
    fh.write(arr.tobytes())


def _read_array(fh, what: str) -> np.ndarray:
    (ndims,) = struct.unpack("<I", _read_exact(fh, 4, f"{what} ndims"))
    if ndims > 16:
        raise FileFormatError(f"implausible ndims {ndims} for {what}")
    dims = [
        struct.unpack("<I", _read_exact(fh, 4, f"{what} dims"))[0] for _ in range(ndims)
    ]
    count = int(np.prod(dims, dtype=np.int64)) if dims else 1
    payload = _read_exact(fh, 4 * count, f"{what} payload")
    return np.frombuffer(payload, dtype="<f4").reshape(dims).copy()


def _atomic_write(path, writer) -> None:
    """Write to a temp sibling then rename, so readers never see partial files."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        writer(fh)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# FeatureFile


def save_feature_file(path, array: np.ndarray) -> None:
    def writer(fh):
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        _write_array(fh, np.asarray(array))

    _atomic_write(path, writer)


def load_feature_file(path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4, "magic")
        if magic != FEATURE_MAGIC:
            raise FileFormatError(f"bad feature-file magic {magic!r} in {path}")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != FORMAT_VERSION:
            raise FileFormatError(f"unsupported feature-file version {version}")
        arr = _read_array(fh, "tensor")
        if fh.read(1):
            raise FileFormatError(f"trailing bytes after tensor payload in {path}")
        return arr


# ---------------------------------------------------------------------------
# Checkpoint


def save_checkpoint_tensors(path, tensors: dict[str, np.ndarray]) -> None:
    def writer(fh):
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        for name, arr in tensors.items():
            encoded = name.encode("utf-8")
            if len(encoded) > 0xFFFF:
                raise FileFormatError(f"tensor name too long: {name[:40]}...")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            _write_array(fh, np.asarray(arr))

    _atomic_write(path, writer)


def load_checkpoint_tensors(path) -> dict[str, np.ndarray]:
    tensors: dict[str, np.ndarray] = {}
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4, "magic")
        if magic != CHECKPOINT_MAGIC:
            raise FileFormatError(f"bad checkpoint magic {magic!r} in {path}")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != FORMAT_VERSION:
            raise FileFormatError(f"unsupported checkpoint version {version}")
        while True:
            head = fh.read(2)
            if not head:
                break
            if len(head) != 2:
                raise FileFormatError("truncated file while reading name length")
            (name_len,) = struct.unpack("<H", head)
            name = _read_exact(fh, name_len, "tensor name").decode("utf-8")
            if name in tensors:
                raise FileFormatError(f"duplicate tensor name {name!r}")
            tensors[name] = _read_array(fh, name)
    return tensors


# ---------------------------------------------------------------------------
# PPM (binary P6, 8-bit)


def save_ppm(path, image: np.ndarray) -> None:
    """Write an (H, W, 3) float array in [0, 1] or uint8 as binary P6."""
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) image, got {img.shape}")
    if img.dtype != np.uint8:
        img = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    h, w = img.shape[:2]

    def writer(fh):
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())

    _atomic_write(path, writer)


def _next_token(fh) -> bytes:
    """PPM header token reader: skips whitespace and '#' comment lines."""
    token = b""
    while True:
        ch = fh.read(1)
        if not ch:
            raise FileFormatError("truncated PPM header")
        if ch == b"#":
            while ch not in (b"\n", b""):
                ch = fh.read(1)
            continue
        if ch.isspace():
            if token:
                return token
            continue
        token += ch


def load_ppm(path) -> np.ndarray:
    """Read a binary P6 file into a float32 (3, H, W) tensor scaled to [0, 1]."""
    with open(path, "rb") as fh:
        magic = fh.read(2)
        if magic != b"P6":
            raise FileFormatError(
                f"unsupported PPM format {magic!r} in {path} (only binary P6)"
            )
        width = int(_next_token(fh))
        height = int(_next_token(fh))
        maxval = int(_next_token(fh))
        if maxval != 255:
            raise FileFormatError(f"unsupported PPM maxval {maxval} in {path}")
        payload = _read_exact(fh, width * height * 3, "pixel data")
    pixels = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, 3)
    return (pixels.astype(np.float32) / 255.0).transpose(2, 0, 1)
