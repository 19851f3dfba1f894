"""Parameterized traditional distortions and their sequential composition.

A single scalar severity in [0, 1] maps to kind-specific parameters through
the frozen table below. Severity 0 is a bit-exact identity for every kind.
Everything is deterministic given (spec, input): randomness comes only from
the spec's own seed through the counter-based generator.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

from .errors import ConfigurationError, GenerationError, RangeError
from .imagecore import Rng, hsl_to_rgb, rgb_to_hsl

KINDS = (
    "gaussian_noise", "uniform_noise", "impulse_noise",
    "gaussian_blur", "box_blur",
    "brightness", "contrast", "saturation", "hue_shift",
    "translate", "block_shuffle", "block_zero", "quantize_dct",
)

# severity -> parameter mapping, frozen as a stable contract; the hash of this
# table is embedded in dataset metadata for provenance.
SEVERITY_TABLE = {
    "gaussian_noise": "additive Gaussian noise, sigma = 0.3 * s",
    "uniform_noise": "additive uniform noise on [-0.3*s, 0.3*s]",
    "impulse_noise": "salt & pepper on a fraction 0.2 * s of pixels",
    "gaussian_blur": "Gaussian blur, sigma = 5 * s, radius ceil(3*sigma), reflect padding",
    "box_blur": "box blur, radius round(6 * s), reflect padding",
    "brightness": "offset of +/- 0.4 * s (sign from seed)",
    "contrast": "scale 1 +/- 0.8 * s about mean 0.5 (sign from seed)",
    "saturation": "HSL saturation scale drawn from [1 - s, 1 + s]",
    "hue_shift": "hue rotation by +/- 0.25 * s of the circle (sign from seed)",
    "translate": "shift by round(12 * s) px in a seeded direction, reflect fill",
    "block_shuffle": "cyclic shuffle of max(2, round(0.3 * s * n)) 8x8 blocks",
    "block_zero": "zero out max(1, round(0.3 * s * n)) 8x8 blocks",
    "quantize_dct": "8x8 DCT coefficients quantized with step 0.02 + 0.5 * s",
}

SEVERITY_GRID = tuple((i + 1) / 8.0 for i in range(8))

JND_MIN_SEVERITY = 0.05
BLOCK = 8


def severity_table_hash() -> str:
    blob = json.dumps(SEVERITY_TABLE, sort_keys=True).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


@dataclass(frozen=True)
class DistortionSpec:
    kind: str
    severity: float
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigurationError(f"unknown distortion kind {self.kind!r}")
        if not 0.0 <= self.severity <= 1.0:
            raise ConfigurationError(f"severity must be in [0, 1], got {self.severity}")

    def to_json(self) -> dict:
        return {"kind": self.kind, "severity": self.severity, "seed": self.seed}

    @classmethod
    def from_json(cls, d: dict) -> "DistortionSpec":
        return cls(kind=d["kind"], severity=d["severity"], seed=d["seed"])


@dataclass(frozen=True)
class ComposedDistortion:
    """Two distortions applied strictly in order (first, then second)."""

    first: DistortionSpec
    second: DistortionSpec

    def to_json(self) -> dict:
        return {"first": self.first.to_json(), "second": self.second.to_json()}

    @classmethod
    def from_json(cls, d: dict) -> "ComposedDistortion":
        return cls(DistortionSpec.from_json(d["first"]), DistortionSpec.from_json(d["second"]))


def spec_from_json(d: dict):
    return ComposedDistortion.from_json(d) if "first" in d else DistortionSpec.from_json(d)


def spec_kind_label(spec) -> str:
    """Distortion-type label used for per-type evaluation grouping."""
    if isinstance(spec, ComposedDistortion):
        return f"{spec.first.kind}>{spec.second.kind}"
    return spec.kind


def effective_severity(spec) -> float:
    if isinstance(spec, ComposedDistortion):
        return max(spec.first.severity, spec.second.severity)
    return spec.severity


# ---------------------------------------------------------------------------
# kind implementations: (x, severity, rng) -> distorted tensor
# ---------------------------------------------------------------------------

def _gaussian_noise(x, s, rng):
    return x + rng.normal(0.0, 0.3 * s, x.shape)


def _uniform_noise(x, s, rng):
    return x + rng.uniform(-0.3 * s, 0.3 * s, x.shape)


def _impulse_noise(x, s, rng):
    h, w = x.shape[1], x.shape[2]
    hit = rng.random((h, w)) < 0.2 * s
    salt = rng.random((h, w)) < 0.5
    y = x.copy()
    y[:, hit & salt] = 1.0
    y[:, hit & ~salt] = 0.0
    return y


def _separable_blur(x, k):
    y = correlate1d(x, k, axis=1, mode="reflect")
    return correlate1d(y, k, axis=2, mode="reflect")


def _gaussian_blur(x, s, rng):
    sigma = 5.0 * s
    radius = math.ceil(3.0 * sigma)
    if radius == 0:
        return x.copy()
    t = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-(t * t) / (2.0 * sigma * sigma))
    k /= k.sum()
    return _separable_blur(x, k)


def _box_blur(x, s, rng):
    radius = int(round(6.0 * s))
    if radius == 0:
        return x.copy()
    k = np.full(2 * radius + 1, 1.0 / (2 * radius + 1))
    return _separable_blur(x, k)


def _brightness(x, s, rng):
    sign = 1.0 if rng.random() < 0.5 else -1.0
    return x + sign * 0.4 * s


def _contrast(x, s, rng):
    sign = 1.0 if rng.random() < 0.5 else -1.0
    scale = 1.0 + sign * 0.8 * s
    return 0.5 + scale * (x - 0.5)


def _saturation(x, s, rng):
    scale = rng.uniform(1.0 - s, 1.0 + s)
    hsl = rgb_to_hsl(np.clip(x, 0.0, 1.0))
    hsl[1] = np.clip(hsl[1] * scale, 0.0, 1.0)
    return hsl_to_rgb(hsl)


def _hue_shift(x, s, rng):
    sign = 1.0 if rng.random() < 0.5 else -1.0
    hsl = rgb_to_hsl(np.clip(x, 0.0, 1.0))
    hsl[0] = np.mod(hsl[0] + sign * 0.25 * s, 1.0)
    return hsl_to_rgb(hsl)


def _translate(x, s, rng):
    t = int(round(12.0 * s))
    if t == 0:
        return x.copy()
    angle = rng.uniform(0.0, 2.0 * math.pi)
    dx = int(round(t * math.cos(angle)))
    dy = int(round(t * math.sin(angle)))
    pad = max(abs(dx), abs(dy))
    if pad == 0:
        return x.copy()
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)), mode="symmetric")
    h, w = x.shape[1], x.shape[2]
    return xp[:, pad - dy:pad - dy + h, pad - dx:pad - dx + w].copy()


def _block_grid(x):
    h, w = x.shape[1], x.shape[2]
    return h // BLOCK, w // BLOCK


def _block_shuffle(x, s, rng):
    nby, nbx = _block_grid(x)
    n = nby * nbx
    if n < 2:
        return x.copy()
    k = max(2, int(round(0.3 * s * n)))  # at least one visible swap for s > 0
    k = min(k, n)
    chosen = np.sort(rng.choice(n, size=k, replace=False))
    y = x.copy()
    blocks = []
    for b in chosen:
        by, bx = divmod(int(b), nbx)
        blocks.append(x[:, by * BLOCK:(by + 1) * BLOCK, bx * BLOCK:(bx + 1) * BLOCK].copy())
    for i, b in enumerate(chosen):
        by, bx = divmod(int(b), nbx)
        y[:, by * BLOCK:(by + 1) * BLOCK, bx * BLOCK:(bx + 1) * BLOCK] = blocks[(i + 1) % k]
    return y


def _block_zero(x, s, rng):
    nby, nbx = _block_grid(x)
    n = nby * nbx
    if n < 1:
        return x.copy()
    k = min(max(1, int(round(0.3 * s * n))), n)
    chosen = rng.choice(n, size=k, replace=False)
    y = x.copy()
    for b in chosen:
        by, bx = divmod(int(b), nbx)
        y[:, by * BLOCK:(by + 1) * BLOCK, bx * BLOCK:(bx + 1) * BLOCK] = 0.0
    return y


def _dct_matrix() -> np.ndarray:
    n = BLOCK
    d = np.zeros((n, n))
    for k in range(n):
        c = math.sqrt(1.0 / n) if k == 0 else math.sqrt(2.0 / n)
        for i in range(n):
            d[k, i] = c * math.cos(math.pi * (2 * i + 1) * k / (2 * n))
    return d


_DCT = _dct_matrix()


def _quantize_dct(x, s, rng):
    step = 0.02 + 0.5 * s
    h, w = x.shape[1], x.shape[2]
    ph = (-h) % BLOCK
    pw = (-w) % BLOCK
    xp = np.pad(x, ((0, 0), (0, ph), (0, pw)), mode="edge")
    c, hh, ww = xp.shape
    blocks = xp.reshape(c, hh // BLOCK, BLOCK, ww // BLOCK, BLOCK).transpose(0, 1, 3, 2, 4)
    coeff = np.einsum("ij,cbkjl,ml->cbkim", _DCT, blocks, _DCT, optimize=True)
    coeff = np.round(coeff / step) * step
    rec = np.einsum("ji,cbkjl,lm->cbkim", _DCT, coeff, _DCT, optimize=True)
    out = rec.transpose(0, 1, 3, 2, 4).reshape(c, hh, ww)
    return out[:, :h, :w]


_HANDLERS = {
    "gaussian_noise": _gaussian_noise,
    "uniform_noise": _uniform_noise,
    "impulse_noise": _impulse_noise,
    "gaussian_blur": _gaussian_blur,
    "box_blur": _box_blur,
    "brightness": _brightness,
    "contrast": _contrast,
    "saturation": _saturation,
    "hue_shift": _hue_shift,
    "translate": _translate,
    "block_shuffle": _block_shuffle,
    "block_zero": _block_zero,
    "quantize_dct": _quantize_dct,
}


def apply(spec, x: np.ndarray) -> np.ndarray:
    """Apply a distortion (or ordered composition). Output is clamped to [0, 1]."""
    if isinstance(spec, ComposedDistortion):
        return apply(spec.second, apply(spec.first, x))
    if x.ndim != 3 or x.shape[0] != 3:
        raise ConfigurationError(f"distortions expect a 3-channel patch, got {x.shape}")
    if spec.severity == 0.0:
        return x.copy()
    rng = Rng(spec.seed, stream=0xD15707)
    y = _HANDLERS[spec.kind](np.asarray(x, dtype=np.float64), spec.severity, rng)
    return np.clip(y, 0.0, 1.0)


# ---------------------------------------------------------------------------
# triplets, JND pairs, banks
# ---------------------------------------------------------------------------

def make_triplet(x: np.ndarray, d0, d1):
    """(x, apply(d0, x), apply(d1, x)); the two specs must differ by value."""
    if d0 == d1:
        raise GenerationError("degenerate triplet: both distortions are identical")
    return x, apply(d0, x), apply(d1, x)


def make_jnd_pair(x: np.ndarray, spec, same: bool):
    """(ref, probe): probe is bit-identical to ref when `same`, else distorted.

    Different-pairs enforce a severity floor so the probe genuinely differs.
    """
    ref = np.asarray(x, dtype=np.float64).copy()
    if same:
        return ref, ref.copy()
    if effective_severity(spec) < JND_MIN_SEVERITY:
        raise GenerationError(
            f"JND different-pair severity below the {JND_MIN_SEVERITY} floor")
    return ref, apply(spec, x)


def sample_distortion_bank(count_base: int, count_composed: int, rng: Rng) -> list:
    """Deterministic bank: base specs drawn from the kinds x severity grid,
    composed specs as distinct ordered pairs of distinct base specs.
    """
    if count_base < 0 or count_composed < 0:
        raise RangeError("bank counts must be >= 0")
    combos = [(kind, sev) for kind in KINDS for sev in SEVERITY_GRID]
    if count_base > len(combos):
        raise RangeError(f"at most {len(combos)} distinct base specs available")
    base: list[DistortionSpec] = []
    if count_base:
        picks = rng.choice(len(combos), size=count_base, replace=False)
        for p in picks:
            kind, sev = combos[int(p)]
            base.append(DistortionSpec(kind, sev, seed=int(rng.integers(0, 2 ** 63))))
    max_pairs = count_base * (count_base - 1)
    if count_composed > max_pairs:
        raise RangeError(
            f"requested {count_composed} composed specs, only {max_pairs} ordered pairs exist")
    composed: list[ComposedDistortion] = []
    if count_composed:
        picks = rng.choice(max_pairs, size=count_composed, replace=False)
        for p in picks:
            i, r = divmod(int(p), count_base - 1)
            j = r + 1 if r >= i else r
            composed.append(ComposedDistortion(base[i], base[j]))
    return base + composed
