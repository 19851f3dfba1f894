import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from patchsim import imagecore as ic
from patchsim.errors import ConfigurationError, DecodeError, RangeError

RNG_GOLDEN_32 = "a3c952488f745a84ba55b269ae8a0d2f9b0a7e34c2807c3624a3fb20ae8ac035"
RNG_GOLDEN_DERIVED = "fed74f0aca963c50616563cf7e612503"


def _random_image(rng, h=7, w=5):
    return ic.ImageBuffer((rng.random((h, w, 3)) * 255).astype(np.uint8))


# ---------------------------------------------------------------------------
# PPM
# ---------------------------------------------------------------------------

def test_ppm_1x1_red():
    img = ic.decode_image(b"P6\n1 1\n255\n\xff\x00\x00")
    assert img.width == 1 and img.height == 1
    assert img.pixels.tolist() == [[[255, 0, 0]]]


def test_ppm_round_trip_identity(rng_np):
    img = _random_image(rng_np)
    data = ic.encode_image(img, "ppm")
    assert ic.encode_image(ic.decode_image(data), "ppm") == data


def test_ppm_header_comments():
    img = ic.decode_image(b"P6\n# a comment\n2 1\n255\n" + bytes(6))
    assert img.width == 2


def test_ppm_truncated_payload_names_offset():
    with pytest.raises(DecodeError, match="byte offset"):
        ic.decode_image(b"P6\n2 2\n255\n\x00\x00\x00")


def test_ppm_bad_maxval():
    with pytest.raises(DecodeError):
        ic.decode_image(b"P6\n1 1\n65535\n\x00\x00")


# ---------------------------------------------------------------------------
# PNG
# ---------------------------------------------------------------------------

def test_png_round_trip(rng_np):
    img = _random_image(rng_np, 6, 9)
    back = ic.decode_image(ic.encode_image(img, "png"))
    assert (back.pixels == img.pixels).all()


def test_png_decodes_reference_tool_output(rng_np):
    PIL = pytest.importorskip("PIL.Image")
    rgb = (rng_np.random((2, 2, 3)) * 255).astype(np.uint8)
    buf = io.BytesIO()
    PIL.fromarray(rgb, "RGB").save(buf, "PNG")
    assert (ic.decode_image(buf.getvalue()).pixels == rgb).all()


def test_png_reference_tool_reads_our_output(rng_np):
    PIL = pytest.importorskip("PIL.Image")
    img = _random_image(rng_np, 11, 4)
    back = np.asarray(PIL.open(io.BytesIO(ic.encode_image(img, "png"))).convert("RGB"))
    assert (back == img.pixels).all()


def test_png_decodes_all_filter_types(rng_np):
    # Pillow with optimize exercises non-zero row filters
    PIL = pytest.importorskip("PIL.Image")
    rgb = (rng_np.random((64, 64, 3)) * 255).astype(np.uint8)
    rgb[:32] = np.linspace(0, 255, 32 * 64 * 3).reshape(32, 64, 3).astype(np.uint8)
    buf = io.BytesIO()
    PIL.fromarray(rgb, "RGB").save(buf, "PNG", optimize=True)
    assert (ic.decode_image(buf.getvalue()).pixels == rgb).all()


def test_bad_magic_names_offset_zero():
    with pytest.raises(DecodeError, match="offset 0"):
        ic.decode_image(b"GIF89a....")


def test_png_crc_error_names_offset(rng_np):
    data = bytearray(ic.encode_image(_random_image(rng_np), "png"))
    data[20] ^= 0xFF  # corrupt inside IHDR body
    with pytest.raises(DecodeError, match="CRC"):
        ic.decode_image(bytes(data))


def test_png_rejects_rgba():
    PIL = pytest.importorskip("PIL.Image")
    rgba = np.zeros((2, 2, 4), dtype=np.uint8)
    buf = io.BytesIO()
    PIL.fromarray(rgba, "RGBA").save(buf, "PNG")
    with pytest.raises(DecodeError, match="color type"):
        ic.decode_image(buf.getvalue())


# ---------------------------------------------------------------------------
# tensors
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("raw,expect", [(255, 1.0), (0, 0.0), (128, 128 / 255)])
def test_to_tensor_values(raw, expect):
    img = ic.ImageBuffer(np.full((1, 1, 3), raw, dtype=np.uint8))
    assert ic.to_tensor(img)[0, 0, 0] == pytest.approx(expect, abs=0)


def test_tensor_round_trip_on_quantized_values(rng_np):
    img = _random_image(rng_np)
    t = ic.to_tensor(img)
    assert (ic.from_tensor(t).pixels == img.pixels).all()


def test_patch_constructor_rejects_out_of_range():
    with pytest.raises(ConfigurationError):
        ic.as_patch(np.full((3, 2, 2), 1.5))
    with pytest.raises(ConfigurationError):
        ic.as_patch(np.full((3, 2, 2), np.nan))


def test_extract_patch_whole_image(rng_np):
    img = _random_image(rng_np, 8, 8)
    t = ic.extract_patch(img, 0, 0, 8)
    assert (t == ic.to_tensor(img)).all()


def test_extract_patch_sub_block():
    ramp = np.arange(4 * 4 * 3, dtype=np.uint8).reshape(4, 4, 3)
    t = ic.extract_patch(ic.ImageBuffer(ramp), 1, 1, 2)
    expect = ic.to_tensor(ic.ImageBuffer(np.ascontiguousarray(ramp[1:3, 1:3])))
    assert (t == expect).all()


def test_extract_patch_seeded_coordinates_repeat(rng_np):
    img = _random_image(rng_np, 40, 40)
    a = ic.extract_patch(img, size=16, rng=ic.Rng(5))
    b = ic.extract_patch(img, size=16, rng=ic.Rng(5))
    assert (a == b).all()


def test_extract_patch_out_of_bounds(rng_np):
    img = _random_image(rng_np, 8, 8)
    with pytest.raises(RangeError):
        ic.extract_patch(img, 5, 5, 8)


# ---------------------------------------------------------------------------
# HSL
# ---------------------------------------------------------------------------

def test_hsl_pure_red():
    hsl = ic.rgb_to_hsl(np.array([1.0, 0.0, 0.0]).reshape(3, 1, 1))
    assert hsl[:, 0, 0] == pytest.approx([0.0, 1.0, 0.5])


def test_hsl_gray():
    g = 0.37
    hsl = ic.rgb_to_hsl(np.full((3, 2, 2), g))
    assert np.allclose(hsl[1], 0.0) and np.allclose(hsl[2], g)


def test_hsl_round_trip_1000_samples():
    rng = np.random.default_rng(17)
    rgb = rng.random((3, 25, 40))
    back = ic.hsl_to_rgb(ic.rgb_to_hsl(rgb))
    assert np.abs(back - rgb).max() <= 1e-5


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0.0, 1.0, allow_nan=False), min_size=3, max_size=3))
def test_hsl_round_trip_property(rgb):
    t = np.array(rgb).reshape(3, 1, 1)
    assert np.abs(ic.hsl_to_rgb(ic.rgb_to_hsl(t)) - t).max() <= 1e-5


def test_hue_range_is_half_open(rng_np):
    h = ic.rgb_to_hsl(rng_np.random((3, 30, 30)))[0]
    assert h.min() >= 0.0 and h.max() < 1.0


# ---------------------------------------------------------------------------
# RNG
# ---------------------------------------------------------------------------

def test_rng_golden_byte_stream():
    assert ic.Rng(123).bytes(32).hex() == RNG_GOLDEN_32
    assert ic.Rng(123).derive(7).bytes(16).hex() == RNG_GOLDEN_DERIVED


def test_rng_same_seed_same_sequence():
    a, b = ic.Rng(9), ic.Rng(9)
    assert a.bytes(64) == b.bytes(64)
    assert (a.normal(size=10) == b.normal(size=10)).all()


def test_rng_derive_independent_streams():
    base = ic.Rng(9)
    assert base.derive(0).bytes(16) != base.derive(1).bytes(16)
    # derivation is stateless: order of use does not matter
    x = ic.Rng(9).derive(3).random(4)
    ic.Rng(9).derive(2).random(100)
    y = ic.Rng(9).derive(3).random(4)
    assert (x == y).all()
