import struct

import numpy as np
import pytest

from dubm3d.imageio import (
    PHANTOM_KINDS,
    Image,
    MalformedHeaderError,
    TruncatedPayloadError,
    UnsupportedFormatError,
    make_phantom,
    read_image,
    read_tensor,
    write_image,
    write_tensor,
)
from dubm3d.rng import SplitMix64


def test_p5_all_255(tmp_path):
    p = tmp_path / "a.pgm"
    p.write_bytes(b"P5\n3 2\n255\n" + bytes([255] * 6))
    img = read_image(p)
    assert img.shape == (2, 3)
    np.testing.assert_array_equal(img.pixels, 1.0)


def test_p2_16bit(tmp_path):
    p = tmp_path / "a.pgm"
    p.write_text("P2\n# comment\n2 1\n65535\n65535 0\n")
    np.testing.assert_array_equal(read_image(p).pixels, [[1.0, 0.0]])


def test_p5_16bit_big_endian(tmp_path):
    p = tmp_path / "a.pgm"
    p.write_bytes(b"P5 1 1 65535\n" + struct.pack(">H", 32768))
    assert read_image(p).pixels[0, 0] == np.float32(32768 / 65535)


@pytest.mark.parametrize("fmt, maxval", [("pgm8", 255), ("pgm16", 65535)])
def test_pgm_roundtrip_error_bound(tmp_path, fmt, maxval):
    x = SplitMix64(3).uniform((17, 23)).astype(np.float32)
    write_image(Image(x), tmp_path / "x.pgm", fmt)
    back = read_image(tmp_path / "x.pgm").pixels
    assert np.abs(back.astype(np.float64) - x).max() <= 1 / (2 * maxval) + 1e-7


def test_f32raw_roundtrip_bit_exact(tmp_path):
    x = (SplitMix64(4).normal((9, 5)) * 1e3).astype(np.float32)
    write_image(Image(x, range=(-1e4, 1e4)), tmp_path / "x.f32", "f32raw")
    assert read_image(tmp_path / "x.f32").pixels.tobytes() == x.tobytes()


def test_pgm8_quantization_rules(tmp_path):
    write_image(Image(np.array([[0.5, 1.5, -0.2]])), tmp_path / "q.pgm", "pgm8")
    raw = (tmp_path / "q.pgm").read_bytes()
    assert list(raw[-3:]) == [128, 255, 0]


def test_dub1_layout(tmp_path):
    write_tensor(tmp_path / "t.f32", np.arange(6, dtype=np.float32).reshape(2, 3))
    raw = (tmp_path / "t.f32").read_bytes()
    assert raw[:4] == b"DUB1"
    assert struct.unpack("<III", raw[4:16]) == (2, 2, 3)
    assert np.frombuffer(raw[16:], "<f4").tolist() == [0, 1, 2, 3, 4, 5]


def test_dub1_higher_rank_roundtrip(tmp_path):
    x = SplitMix64(1).normal((2, 3, 4)).astype(np.float32)
    write_tensor(tmp_path / "t.f32", x)
    assert read_tensor(tmp_path / "t.f32").tobytes() == x.tobytes()


@pytest.mark.parametrize(
    "payload, error",
    [
        (b"P5\n3 2\n255\n" + bytes(4), TruncatedPayloadError),
        (b"P5\n3 x\n255\n", MalformedHeaderError),
        (b"P5\n3 2\n", MalformedHeaderError),
        (b"P5\n1 1\n100\n\x00", UnsupportedFormatError),
        (b"GIF89a", UnsupportedFormatError),
        (b"DUB1" + struct.pack("<III", 2, 2, 2) + bytes(8), TruncatedPayloadError),
        (b"DUB1\x01", TruncatedPayloadError),
    ],
)
def test_distinct_read_errors(tmp_path, payload, error):
    p = tmp_path / "bad"
    p.write_bytes(payload)
    with pytest.raises(error):
        read_image(p)


def test_write_unknown_format(tmp_path):
    with pytest.raises(ValueError):
        write_image(Image(np.zeros((2, 2))), tmp_path / "x", "png")


def test_write_unwritable_path(tmp_path):
    with pytest.raises(OSError):
        write_image(Image(np.zeros((2, 2))), tmp_path / "missing" / "x.pgm", "pgm8")


def test_image_rejects_nonfinite():
    with pytest.raises(ValueError):
        Image(np.array([[np.nan]]))


@pytest.mark.parametrize("kind", PHANTOM_KINDS)
def test_phantom_deterministic_and_in_range(kind):
    a = make_phantom(kind, 40, 48, 7)
    b = make_phantom(kind, 40, 48, 7)
    assert a.pixels.tobytes() == b.pixels.tobytes()
    assert a.shape == (40, 48)
    assert a.pixels.min() >= 0 and a.pixels.max() <= 1
    assert make_phantom(kind, 40, 48, 8).pixels.tobytes() != a.pixels.tobytes()


def test_disks_has_several_gray_levels():
    hist = np.unique(make_phantom("disks", 64, 64, 7).pixels)
    assert len(hist) >= 2


def test_unknown_phantom():
    with pytest.raises(ValueError):
        make_phantom("bananas", 8, 8, 0)
