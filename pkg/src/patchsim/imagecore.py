"""Image and tensor primitives: PNG/PPM codecs, patch extraction, HSL, seeded RNG.

Pixel currency is fixed here once: images are 8-bit RGB, tensors are
channel-major float arrays in [0, 1] with v = raw / 255. Backbone-specific
normalization (mean/std shifts) is *not* applied here.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, DecodeError, RangeError

DEFAULT_PATCH = 64

_PNG_SIG = b"\x89PNG\r\n\x1a\n"
_MASK64 = (1 << 64) - 1


# ---------------------------------------------------------------------------
# buffers and tensors
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ImageBuffer:
    """8-bit RGB image; ``pixels`` is a row-major (height, width, 3) uint8 array."""

    pixels: np.ndarray

    def __post_init__(self):
        p = self.pixels
        if not isinstance(p, np.ndarray) or p.dtype != np.uint8:
            raise ConfigurationError("ImageBuffer pixels must be a uint8 array")
        if p.ndim != 3 or p.shape[2] != 3:
            raise ConfigurationError(f"ImageBuffer expects (H, W, 3) pixels, got {p.shape}")
        if p.shape[0] < 1 or p.shape[1] < 1:
            raise ConfigurationError("image must be at least 1x1")

    @property
    def height(self) -> int:
        return int(self.pixels.shape[0])

    @property
    def width(self) -> int:
        return int(self.pixels.shape[1])


def as_patch(values) -> np.ndarray:
    """Validate and return a (C, H, W) float64 patch tensor with values in [0, 1]."""
    t = np.asarray(values, dtype=np.float64)
    if t.ndim != 3:
        raise ConfigurationError(f"patch tensor must be (C, H, W), got shape {t.shape}")
    if __debug__:
        if not np.isfinite(t).all():
            raise ConfigurationError("patch tensor contains non-finite values")
        if t.size and (t.min() < 0.0 or t.max() > 1.0):
            raise ConfigurationError("patch tensor values must lie in [0, 1]")
    return t


def to_tensor(img: ImageBuffer) -> np.ndarray:
    """Channel-major float tensor with v[c, y, x] = img[y, x, c] / 255."""
    return np.ascontiguousarray(img.pixels.transpose(2, 0, 1)).astype(np.float64) / 255.0


def from_tensor(t: np.ndarray) -> ImageBuffer:
    """Quantize a patch tensor back to 8-bit RGB (round half away handled by rint)."""
    t = as_patch(t)
    if t.shape[0] != 3:
        raise ConfigurationError("from_tensor expects a 3-channel tensor")
    q = np.rint(np.clip(t, 0.0, 1.0) * 255.0).astype(np.uint8)
    return ImageBuffer(np.ascontiguousarray(q.transpose(1, 2, 0)))


def extract_patch(img: ImageBuffer, x: int | None = None, y: int | None = None,
                  size: int = DEFAULT_PATCH, rng: "Rng | None" = None) -> np.ndarray:
    """Crop a size x size patch. Coordinates come either from (x, y) or from rng."""
    if size < 1:
        raise RangeError(f"patch size must be >= 1, got {size}")
    if img.width < size or img.height < size:
        raise RangeError(f"{size}x{size} patch does not fit in {img.width}x{img.height} image")
    if x is None or y is None:
        if rng is None:
            raise ConfigurationError("extract_patch needs explicit coordinates or an rng")
        x = int(rng.integers(0, img.width - size + 1))
        y = int(rng.integers(0, img.height - size + 1))
    if x < 0 or y < 0 or x + size > img.width or y + size > img.height:
        raise RangeError(f"crop ({x}, {y}, {size}) out of bounds for {img.width}x{img.height}")
    return to_tensor(ImageBuffer(np.ascontiguousarray(img.pixels[y:y + size, x:x + size])))


# ---------------------------------------------------------------------------
# HSL conversion
# ---------------------------------------------------------------------------

def rgb_to_hsl(p: np.ndarray) -> np.ndarray:
    """RGB -> HSL, all channels in [0, 1], hue in [0, 1)."""
    p = as_patch(p)
    if p.shape[0] != 3:
        raise ConfigurationError("rgb_to_hsl expects a 3-channel tensor")
    r, g, b = p[0], p[1], p[2]
    cmax = p.max(axis=0)
    cmin = p.min(axis=0)
    delta = cmax - cmin
    l = (cmax + cmin) / 2.0

    s = np.zeros_like(l)
    nz = delta > 0
    s[nz] = delta[nz] / (1.0 - np.abs(2.0 * l[nz] - 1.0))

    h6 = np.zeros_like(l)
    with np.errstate(invalid="ignore", divide="ignore"):
        is_r = nz & (cmax == r)
        is_g = nz & ~is_r & (cmax == g)
        is_b = nz & ~is_r & ~is_g
        h6[is_r] = np.mod((g[is_r] - b[is_r]) / delta[is_r], 6.0)
        h6[is_g] = (b[is_g] - r[is_g]) / delta[is_g] + 2.0
        h6[is_b] = (r[is_b] - g[is_b]) / delta[is_b] + 4.0
    h = np.mod(h6 / 6.0, 1.0)
    return np.stack([h, np.clip(s, 0.0, 1.0), l])


def hsl_to_rgb(p: np.ndarray) -> np.ndarray:
    """Inverse of rgb_to_hsl; round-trip error stays below 1e-5 per sample."""
    p = as_patch(p)
    if p.shape[0] != 3:
        raise ConfigurationError("hsl_to_rgb expects a 3-channel tensor")
    h, s, l = p[0], p[1], p[2]
    c = (1.0 - np.abs(2.0 * l - 1.0)) * s
    h6 = np.mod(h, 1.0) * 6.0
    x = c * (1.0 - np.abs(np.mod(h6, 2.0) - 1.0))
    sector = np.floor(h6).astype(np.int64) % 6
    zeros = np.zeros_like(c)
    rp = np.select([sector == 0, sector == 1, sector == 2, sector == 3, sector == 4],
                   [c, x, zeros, zeros, x], default=c)
    gp = np.select([sector == 0, sector == 1, sector == 2, sector == 3, sector == 4],
                   [x, c, c, x, zeros], default=zeros)
    bp = np.select([sector == 0, sector == 1, sector == 2, sector == 3, sector == 4],
                   [zeros, zeros, x, c, c], default=x)
    m = l - c / 2.0
    rgb = np.stack([rp + m, gp + m, bp + m])
    return np.clip(rgb, 0.0, 1.0)


# ---------------------------------------------------------------------------
# PPM (P6) codec: the hand-writable golden fixture format
# ---------------------------------------------------------------------------

def _ppm_token(data: bytes, pos: int) -> tuple[bytes, int]:
    n = len(data)
    while pos < n:
        c = data[pos:pos + 1]
        if c == b"#":
            while pos < n and data[pos] not in b"\r\n":
                pos += 1
        elif c.isspace():
            pos += 1
        else:
            break
    if pos >= n:
        raise DecodeError("truncated PPM header", offset=pos)
    start = pos
    while pos < n and not data[pos:pos + 1].isspace():
        pos += 1
    return data[start:pos], pos


def _decode_ppm(data: bytes) -> ImageBuffer:
    if data[:2] != b"P6":
        raise DecodeError("not a P6 PPM stream", offset=0)
    pos = 2
    fields = []
    for _ in range(3):
        tok, pos = _ppm_token(data, pos)
        if not tok.isdigit():
            raise DecodeError(f"bad PPM header token {tok!r}", offset=pos - len(tok))
        fields.append(int(tok))
    width, height, maxval = fields
    if width < 1 or height < 1:
        raise DecodeError("PPM dimensions must be >= 1", offset=2)
    if maxval != 255:
        raise DecodeError(f"only maxval 255 PPM supported, got {maxval}", offset=pos)
    pos += 1  # single whitespace byte after maxval
    need = width * height * 3
    raw = data[pos:pos + need]
    if len(raw) != need:
        raise DecodeError(f"PPM payload truncated, need {need} bytes", offset=pos + len(raw))
    pixels = np.frombuffer(raw, dtype=np.uint8).reshape(height, width, 3)
    return ImageBuffer(pixels.copy())


def _encode_ppm(img: ImageBuffer) -> bytes:
    header = f"P6\n{img.width} {img.height}\n255\n".encode("ascii")
    return header + img.pixels.tobytes()


# ---------------------------------------------------------------------------
# PNG codec (RGB8 only, no interlace); stdlib zlib does the heavy lifting
# ---------------------------------------------------------------------------

def _png_chunks(data: bytes):
    pos = len(_PNG_SIG)
    n = len(data)
    while pos < n:
        if pos + 8 > n:
            raise DecodeError("truncated PNG chunk header", offset=pos)
        (length,) = struct.unpack(">I", data[pos:pos + 4])
        ctype = data[pos + 4:pos + 8]
        body = data[pos + 8:pos + 8 + length]
        if len(body) != length or pos + 12 + length > n:
            raise DecodeError(f"truncated {ctype!r} chunk", offset=pos)
        (crc,) = struct.unpack(">I", data[pos + 8 + length:pos + 12 + length])
        if zlib.crc32(ctype + body) & 0xFFFFFFFF != crc:
            raise DecodeError(f"CRC mismatch in {ctype!r} chunk", offset=pos)
        yield ctype, body, pos
        pos += 12 + length


def _unfilter_rows(raw: bytes, height: int, width: int) -> np.ndarray:
    stride = width * 3
    if len(raw) != height * (stride + 1):
        raise DecodeError(f"PNG scanline data has wrong length {len(raw)}", offset=0)
    out = np.zeros((height, stride), dtype=np.uint8)
    pos = 0
    for y in range(height):
        ftype = raw[pos]
        pos += 1
        row = np.frombuffer(raw, dtype=np.uint8, count=stride, offset=pos)
        pos += stride
        prev = out[y - 1] if y > 0 else np.zeros(stride, dtype=np.uint8)
        if ftype == 0:
            out[y] = row
        elif ftype == 1:  # Sub: cumulative per byte lane, mod 256
            lanes = row.reshape(width, 3).astype(np.uint64)
            out[y] = (np.cumsum(lanes, axis=0) % 256).astype(np.uint8).reshape(stride)
        elif ftype == 2:  # Up
            out[y] = row + prev  # uint8 wraparound is the mod-256 add
        elif ftype == 3:  # Average
            rec = out[y]
            for i in range(stride):
                left = int(rec[i - 3]) if i >= 3 else 0
                rec[i] = (int(row[i]) + (left + int(prev[i])) // 2) % 256
        elif ftype == 4:  # Paeth
            rec = out[y]
            for i in range(stride):
                a = int(rec[i - 3]) if i >= 3 else 0
                b = int(prev[i])
                c = int(prev[i - 3]) if i >= 3 else 0
                p = a + b - c
                pa, pb, pc = abs(p - a), abs(p - b), abs(p - c)
                if pa <= pb and pa <= pc:
                    pred = a
                elif pb <= pc:
                    pred = b
                else:
                    pred = c
                rec[i] = (int(row[i]) + pred) % 256
        else:
            raise DecodeError(f"unknown PNG filter type {ftype}", offset=0)
    return out.reshape(height, width, 3)


def _decode_png(data: bytes) -> ImageBuffer:
    width = height = None
    idat = bytearray()
    idat_offset = None
    seen_end = False
    for ctype, body, pos in _png_chunks(data):
        if ctype == b"IHDR":
            if len(body) != 13:
                raise DecodeError("IHDR must be 13 bytes", offset=pos)
            width, height, depth, color, comp, filt, interlace = struct.unpack(">IIBBBBB", body)
            if depth != 8:
                raise DecodeError(f"only 8-bit PNG supported, got depth {depth}", offset=pos)
            if color != 2:
                raise DecodeError(f"only RGB (color type 2) PNG supported, got {color}", offset=pos)
            if comp != 0 or filt != 0:
                raise DecodeError("unsupported PNG compression/filter method", offset=pos)
            if interlace != 0:
                raise DecodeError("interlaced PNG not supported", offset=pos)
        elif ctype == b"IDAT":
            if width is None:
                raise DecodeError("IDAT before IHDR", offset=pos)
            if idat_offset is None:
                idat_offset = pos
            idat.extend(body)
        elif ctype == b"IEND":
            seen_end = True
            break
    if width is None:
        raise DecodeError("missing IHDR chunk", offset=len(_PNG_SIG))
    if not seen_end:
        raise DecodeError("missing IEND chunk", offset=len(data))
    if not idat:
        raise DecodeError("missing IDAT data", offset=len(_PNG_SIG))
    try:
        raw = zlib.decompress(bytes(idat))
    except zlib.error as e:
        raise DecodeError(f"IDAT inflate failed: {e}", offset=idat_offset) from e
    return ImageBuffer(_unfilter_rows(raw, height, width))


def _png_chunk(ctype: bytes, body: bytes) -> bytes:
    return (struct.pack(">I", len(body)) + ctype + body
            + struct.pack(">I", zlib.crc32(ctype + body) & 0xFFFFFFFF))


def _encode_png(img: ImageBuffer) -> bytes:
    ihdr = struct.pack(">IIBBBBB", img.width, img.height, 8, 2, 0, 0, 0)
    rows = img.pixels.reshape(img.height, img.width * 3)
    scan = bytearray()
    for y in range(img.height):
        scan.append(0)  # filter type None on every row keeps encoding deterministic
        scan.extend(rows[y].tobytes())
    idat = zlib.compress(bytes(scan), 6)
    return (_PNG_SIG + _png_chunk(b"IHDR", ihdr) + _png_chunk(b"IDAT", idat)
            + _png_chunk(b"IEND", b""))


# ---------------------------------------------------------------------------
# public codec entry points
# ---------------------------------------------------------------------------

def decode_image(data: bytes) -> ImageBuffer:
    """Decode a PNG (RGB8) or binary PPM (P6) stream."""
    if data[:8] == _PNG_SIG:
        return _decode_png(data)
    if data[:2] == b"P6":
        return _decode_ppm(data)
    raise DecodeError("stream is neither PNG nor P6 PPM", offset=0)


def encode_image(img: ImageBuffer, format: str = "ppm") -> bytes:
    """Encode to `ppm` (bit-exact round-trip) or `png`."""
    if format == "ppm":
        return _encode_ppm(img)
    if format == "png":
        return _encode_png(img)
    raise ConfigurationError(f"unknown image format {format!r}")


def load_image(path) -> ImageBuffer:
    return decode_image(Path(path).read_bytes())


def save_image(path, img: ImageBuffer) -> None:
    path = Path(path)
    fmt = "png" if path.suffix.lower() == ".png" else "ppm"
    path.write_bytes(encode_image(img, fmt))


# ---------------------------------------------------------------------------
# counter-based RNG
# ---------------------------------------------------------------------------

def _mix64(a: int, b: int) -> int:
    """splitmix64-style finalizer combining two 64-bit words."""
    x = (a * 0x9E3779B97F4A7C15 + b + 0x632BE59BD9B4E019) & _MASK64
    x ^= x >> 30
    x = (x * 0xBF58476D1CE4E5B9) & _MASK64
    x ^= x >> 27
    x = (x * 0x94D049BB133111EB) & _MASK64
    x ^= x >> 31
    return x


class Rng:
    """Seedable counter-based generator (Philox): (seed, stream) fully
    determines the sample sequence, so dataset builds can address item i
    as ``Rng(seed).derive(i)`` without any sequential state.
    """

    __slots__ = ("seed", "stream", "_gen")

    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed) & _MASK64
        self.stream = int(stream) & _MASK64
        self._gen = None

    def derive(self, index: int) -> "Rng":
        """Independent child stream for item `index`."""
        return Rng(self.seed, _mix64(self.stream, int(index) & _MASK64))

    @property
    def generator(self) -> np.random.Generator:
        if self._gen is None:
            key = np.array([self.seed, self.stream], dtype=np.uint64)
            self._gen = np.random.Generator(np.random.Philox(key=key))
        return self._gen

    # thin delegation; one persistent generator per Rng value
    def random(self, size=None):
        return self.generator.random(size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.generator.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.generator.normal(loc, scale, size)

    def integers(self, low, high=None, size=None):
        return self.generator.integers(low, high, size)

    def bytes(self, n: int) -> bytes:
        return self.generator.bytes(n)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)

    def choice(self, n, size=None, replace=True):
        return self.generator.choice(n, size=size, replace=replace)

    def shuffle(self, seq: list) -> None:
        self.generator.shuffle(seq)


# ---------------------------------------------------------------------------
# synthetic corpus for demos and desk-scale experiments
# ---------------------------------------------------------------------------

def synthesize_image(seed: int, height: int = 256, width: int = 256) -> ImageBuffer:
    """Colorful smooth random field: a handful of oriented cosine gratings per
    channel plus mild broadband noise. Gives distortions visible structure to
    destroy without needing any external image corpus.
    """
    rng = Rng(seed, stream=0x5EED_1A6E)
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    yy /= height
    xx /= width
    img = np.zeros((3, height, width))
    for c in range(3):
        acc = np.zeros((height, width))
        for _ in range(5):
            fx = rng.uniform(-6.0, 6.0)
            fy = rng.uniform(-6.0, 6.0)
            phase = rng.uniform(0.0, 2.0 * np.pi)
            amp = rng.uniform(0.3, 1.0)
            acc += amp * np.cos(2.0 * np.pi * (fx * xx + fy * yy) + phase)
        acc += 0.35 * rng.normal(0.0, 1.0, (height, width))
        lo, hi = acc.min(), acc.max()
        img[c] = (acc - lo) / (hi - lo) if hi > lo else 0.5
    return from_tensor(img)


def synthesize_corpus(out_dir, count: int = 5, height: int = 256, width: int = 256,
                      seed: int = 0) -> list[Path]:
    """Write `count` synthetic PNG images into out_dir; returns sorted paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for i in range(count):
        p = out_dir / f"synth{i:03d}.png"
        save_image(p, synthesize_image(_mix64(seed, i), height, width))
        paths.append(p)
    return paths
