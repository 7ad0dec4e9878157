import struct

import numpy as np
import pytest

from msfusion.errors import FormatError
from msfusion.io import MAGIC, decode_tensor, encode_tensor, read_tensor, write_tensor


@pytest.mark.parametrize("arr", [
    np.arange(24, dtype=np.float32).reshape(2, 3, 4),
    np.arange(6, dtype=np.uint16).reshape(3, 2),
    np.array([0, 7, 2 ** 32 - 1], dtype=np.uint32),
    np.zeros((0, 3), dtype=np.float32),
])
def test_roundtrip(tmp_path, arr):
    write_tensor(tmp_path / "t.msf", arr, {"role": "x", "n": 1})
    back, meta = read_tensor(tmp_path / "t.msf")
    assert back.shape == arr.shape and back.dtype == arr.dtype
    assert np.array_equal(back, arr)
    assert meta == {"n": 1, "role": "x"}


def test_header_layout():
    blob = encode_tensor(np.array([[1.5, -2.0]]), {"a": 1})
    assert blob[:4] == MAGIC
    code, ndim = struct.unpack_from("<BB", blob, 4)
    assert (code, ndim) == (0, 2)
    assert struct.unpack_from("<2I", blob, 6) == (1, 2)
    (mlen,) = struct.unpack_from("<I", blob, 14)
    assert blob[18:18 + mlen] == b'{"a":1}'
    assert np.frombuffer(blob[18 + mlen:], "<f4").tolist() == [1.5, -2.0]


def test_float64_is_stored_as_f32():
    x = np.array([0.1, 1e-3])
    back, _ = decode_tensor(encode_tensor(x))
    assert back.dtype == np.float32
    np.testing.assert_allclose(back, x, rtol=1e-7)


def test_encoding_is_deterministic():
    x = np.arange(12.0).reshape(3, 4)
    assert encode_tensor(x, {"b": 2, "a": 1}) == encode_tensor(x.copy(), {"a": 1, "b": 2})


def test_truncated_and_bad_magic():
    blob = encode_tensor(np.ones((2, 2)))
    with pytest.raises(FormatError, match="size mismatch"):
        decode_tensor(blob[:-1])
    with pytest.raises(FormatError, match="truncated"):
        decode_tensor(blob[:8])
    with pytest.raises(FormatError, match="magic"):
        decode_tensor(b"XXXX" + blob[4:])
    with pytest.raises(FormatError, match="size mismatch"):
        decode_tensor(blob + b"\0")


def test_negative_ints_rejected():
    with pytest.raises(FormatError):
        encode_tensor(np.array([-1, 2]))


def test_missing_file(tmp_path):
    with pytest.raises(OSError, match="nope.msf"):
        read_tensor(tmp_path / "nope.msf")
