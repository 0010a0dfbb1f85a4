import numpy as np
import pytest

from nestssl.fileio import (
    FileFormatError,
    load_checkpoint_tensors,
    load_feature_file,
    load_ppm,
    save_checkpoint_tensors,
    save_feature_file,
    save_ppm,
)


def test_feature_file_roundtrip_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    arr = rng.normal(size=(3, 4, 5)).astype(np.float32)
    path = tmp_path / "x.feat"
    save_feature_file(path, arr)
    back = load_feature_file(path)
    assert back.dtype == np.float32
    assert np.array_equal(arr, back)


def test_feature_file_magic_and_layout(tmp_path):
    path = tmp_path / "x.feat"
    save_feature_file(path, np.arange(6, dtype=np.float32).reshape(2, 3))
    raw = path.read_bytes()
    assert raw[:4] == b"FRNK"
    assert raw[4:8] == (1).to_bytes(4, "little")  # version
    assert raw[8:12] == (2).to_bytes(4, "little")  # ndims
    assert raw[12:16] == (2).to_bytes(4, "little")
    assert raw[16:20] == (3).to_bytes(4, "little")
    assert np.array_equal(np.frombuffer(raw[20:], dtype="<f4"), np.arange(6))


def test_feature_file_bad_magic(tmp_path):
    path = tmp_path / "bad.feat"
    path.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(FileFormatError, match="magic"):
        load_feature_file(path)


def test_feature_file_truncation(tmp_path):
    path = tmp_path / "x.feat"
    save_feature_file(path, np.ones((4, 4), dtype=np.float32))
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(FileFormatError, match="truncated"):
        load_feature_file(path)


def test_checkpoint_roundtrip_and_order(tmp_path):
    rng = np.random.default_rng(1)
    tensors = {
        "enc.w": rng.normal(size=(4, 4)).astype(np.float32),
        "enc.b": rng.normal(size=4).astype(np.float32),
        "meta.step": np.array([17.0], dtype=np.float32),
    }
    path = tmp_path / "ck.frck"
    save_checkpoint_tensors(path, tensors)
    back = load_checkpoint_tensors(path)
    assert list(back) == list(tensors)
    for name in tensors:
        assert np.array_equal(tensors[name], back[name])


def test_checkpoint_corrupted_magic(tmp_path):
    path = tmp_path / "ck.frck"
    save_checkpoint_tensors(path, {"w": np.zeros(2, dtype=np.float32)})
    raw = bytearray(path.read_bytes())
    raw[0] = ord("X")
    path.write_bytes(bytes(raw))
    with pytest.raises(FileFormatError, match="magic"):
        load_checkpoint_tensors(path)


def test_checkpoint_truncated_payload(tmp_path):
    path = tmp_path / "ck.frck"
    save_checkpoint_tensors(path, {"w": np.zeros(64, dtype=np.float32)})
    path.write_bytes(path.read_bytes()[:-10])
    with pytest.raises(FileFormatError, match="truncated"):
        load_checkpoint_tensors(path)


def test_ppm_roundtrip_known_bytes(tmp_path):
    # hand-written 2x2 P6 payload: R G / B W
    payload = bytes([255, 0, 0, 0, 255, 0, 0, 0, 255, 255, 255, 255])
    path = tmp_path / "img.ppm"
    path.write_bytes(b"P6\n2 2\n255\n" + payload)
    img = load_ppm(path)
    assert img.shape == (3, 2, 2)
    np.testing.assert_allclose(img[:, 0, 0], [1.0, 0.0, 0.0])
    np.testing.assert_allclose(img[:, 0, 1], [0.0, 1.0, 0.0])
    np.testing.assert_allclose(img[:, 1, 0], [0.0, 0.0, 1.0])
    np.testing.assert_allclose(img[:, 1, 1], [1.0, 1.0, 1.0])


def test_ppm_write_then_read(tmp_path):
    rng = np.random.default_rng(2)
    hw3 = rng.uniform(size=(5, 7, 3)).astype(np.float32)
    path = tmp_path / "img.ppm"
    save_ppm(path, hw3)
    back = load_ppm(path)
    # quantized to 8 bits on the way out
    np.testing.assert_allclose(back.transpose(1, 2, 0), hw3, atol=1 / 255 + 1e-6)


def test_ppm_header_comments_allowed(tmp_path):
    payload = bytes(range(12))
    path = tmp_path / "img.ppm"
    path.write_bytes(b"P6\n# a comment\n2 2\n# more\n255\n" + payload)
    assert load_ppm(path).shape == (3, 2, 2)


def test_ppm_rejects_ascii_p3(tmp_path):
    path = tmp_path / "img.ppm"
    path.write_bytes(b"P3\n2 2\n255\n0 0 0\n")
    with pytest.raises(FileFormatError, match="P6"):
        load_ppm(path)


def test_ppm_rejects_wrong_maxval(tmp_path):
    path = tmp_path / "img.ppm"
    path.write_bytes(b"P6\n1 1\n65535\n\x00\x00\x00\x00\x00\x00")
    with pytest.raises(FileFormatError, match="maxval"):
        load_ppm(path)
