import struct

import numpy as np
import pytest

from msa2net.errors import FormatError
from msa2net.formats import (decode_msat, decode_pgm, encode_msat, encode_pgm, read_json, read_msat,
                             read_pgm, to_uint8, write_json, write_msat, write_pgm)


def test_msat_header_layout():
    buf = encode_msat(np.zeros((2, 3, 4, 5), dtype=np.float32))
    assert buf[:7] == bytes([0x4D, 0x53, 0x41, 0x54, 1, 1, 4])
    assert struct.unpack("<4I", buf[7:23]) == (2, 3, 4, 5)
    assert len(buf) == 23 + 4 * 120


def test_msat_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    a = rng.standard_normal((2, 3, 5, 7)).astype(np.float32)
    a[0, 0, 0, :3] = (np.float32(-0.0), np.float32(np.finfo(np.float32).tiny), np.float32(3.4e38))
    write_msat(tmp_path / "a.msat", a)
    b = read_msat(tmp_path / "a.msat")
    assert b.dtype == np.float32 and b.shape == a.shape
    assert a.tobytes() == b.tobytes()


def test_msat_pads_lower_rank():
    assert decode_msat(encode_msat(np.arange(6.0))).shape == (6, 1, 1, 1)
    assert decode_msat(encode_msat(np.ones((2, 3)))).shape == (2, 3, 1, 1)


@pytest.mark.parametrize("pos,value,offset", [(0, b"X", 0), (4, b"\x02", 4), (5, b"\x02", 5), (6, b"\x03", 6)])
def test_msat_rejects_bad_header(pos, value, offset):
    buf = bytearray(encode_msat(np.zeros((1, 1, 2, 2))))
    buf[pos:pos + 1] = value
    with pytest.raises(FormatError) as exc:
        decode_msat(bytes(buf), "t.msat")
    assert exc.value.offset == offset
    assert f"byte offset {offset}" in str(exc.value)


def test_msat_rejects_length_mismatch():
    buf = encode_msat(np.zeros((1, 1, 2, 2)))
    with pytest.raises(FormatError):
        decode_msat(buf[:-1])
    with pytest.raises(FormatError):
        decode_msat(buf + b"\0")
    with pytest.raises(FormatError):
        decode_msat(buf[:10])


def test_pgm_round_trip_bit_exact(tmp_path):
    img = np.random.default_rng(1).integers(0, 256, (7, 9)).astype(np.uint8)
    write_pgm(tmp_path / "a.pgm", img)
    assert read_pgm(tmp_path / "a.pgm").tobytes() == img.tobytes()
    assert (tmp_path / "a.pgm").read_bytes().startswith(b"P5\n9 7\n255\n")


def test_pgm_comments_and_whitespace():
    raster = bytes(range(6))
    buf = b"P5 # a comment\n3\n# another\n 2 255\n" + raster
    np.testing.assert_array_equal(decode_pgm(buf), np.arange(6).reshape(2, 3))


@pytest.mark.parametrize("buf", [b"P2\n1 1\n255\n\0", b"P5\n2 2\n65535\n" + b"\0" * 8,
                                 b"P5\n2 2\n255\n\0\0", b"P5\n2 x\n255\n\0\0\0\0", b"P5\n2"])
def test_pgm_rejects_malformed(buf):
    with pytest.raises(FormatError):
        decode_pgm(buf)


def test_pgm_encode_checks():
    with pytest.raises(ValueError):
        encode_pgm(np.zeros((2, 2), dtype=np.float32))
    with pytest.raises(ValueError):
        encode_pgm(np.zeros((2, 2, 2), dtype=np.uint8))


def test_to_uint8():
    np.testing.assert_array_equal(to_uint8([-1.0, 0.0, 0.5, 1.0, 2.0]), [0, 0, 128, 255, 255])


def test_json_round_trip(tmp_path):
    obj = {"b": [1, 2.5, None], "a": {"x": "y"}}
    write_json(tmp_path / "o.json", obj)
    assert read_json(tmp_path / "o.json") == obj
    (tmp_path / "bad.json").write_text('{"a": ')
    with pytest.raises(FormatError):
        read_json(tmp_path / "bad.json")
