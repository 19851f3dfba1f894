"""Distance functions over feature stacks and raw patches.

The learned-feature distance unit-normalizes each spatial position in the
channel dimension, applies a non-negative per-channel weight to the squared
differences, averages spatially, and sums over tap layers. With all weights
at 1 it reduces to an average cosine distance. L2/PSNR and SSIM baselines
operate directly on patch tensors.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import correlate1d

from . import backbone as bb
from .errors import ConfigurationError

NORM_EPS = 1e-10

SSIM_WINDOW_RADIUS = 5  # 11x11 window
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


# ---------------------------------------------------------------------------
# channel weights
# ---------------------------------------------------------------------------

class ChannelWeights:
    """Per-tap-layer weight vectors; every component must be >= 0.

    The non-negativity is load-bearing: training projects onto this set after
    every step, and the constructor is the enforcement point.
    """

    __slots__ = ("layers",)

    def __init__(self, layers):
        vecs = []
        for i, v in enumerate(layers):
            a = np.asarray(v, dtype=np.float64)
            if a.ndim != 1:
                raise ConfigurationError(f"weight layer {i} must be a vector, got shape {a.shape}")
            if not np.isfinite(a).all():
                raise ConfigurationError(f"weight layer {i} has non-finite components")
            if a.size and a.min() < 0.0:
                raise ConfigurationError(f"weight layer {i} has negative components")
            vecs.append(a)
        self.layers = tuple(vecs)

    @classmethod
    def ones(cls, channels) -> "ChannelWeights":
        return cls([np.ones(int(c)) for c in channels])

    def channel_counts(self) -> list[int]:
        return [int(v.size) for v in self.layers]

    @property
    def n_params(self) -> int:
        return sum(self.channel_counts())

    def as_flat(self) -> np.ndarray:
        return np.concatenate([v for v in self.layers]) if self.layers else np.zeros(0)

    def replace_flat(self, flat: np.ndarray) -> "ChannelWeights":
        out, pos = [], 0
        for v in self.layers:
            out.append(flat[pos:pos + v.size])
            pos += v.size
        return ChannelWeights(out)

    def copy(self) -> "ChannelWeights":
        return ChannelWeights([v.copy() for v in self.layers])

    def min(self) -> float:
        return float(min(v.min() for v in self.layers))


def linear_parameter_count(channels) -> int:
    """Number of learned linear weights for a list of tap channel counts."""
    return int(sum(int(c) for c in channels))


def save_calibration(w: ChannelWeights, path, extra: dict[str, np.ndarray] | None = None) -> None:
    """Persist channel weights (plus optional extra tensors) in the LPW1 container."""
    store = bb.WeightStore()
    for i, v in enumerate(w.layers):
        store[f"w.{i}"] = v
    for name, arr in (extra or {}).items():
        store[name] = arr
    bb.save_weights(store, path)


def load_calibration(path) -> tuple[ChannelWeights, dict[str, np.ndarray]]:
    store = bb.load_weights(path)
    layers = []
    i = 0
    while f"w.{i}" in store:
        layers.append(store[f"w.{i}"])
        i += 1
    if not layers:
        raise ConfigurationError(f"{path} holds no channel weight tensors (w.0, w.1, ...)")
    extra = {name: store[name] for name in store.names() if not name.startswith("w.")}
    return ChannelWeights(layers), extra


# ---------------------------------------------------------------------------
# feature-stack distance
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DistanceReport:
    total: float
    per_layer: tuple[float, ...]


def normalize_channels(stack: list[np.ndarray], eps: float = NORM_EPS) -> list[np.ndarray]:
    """Unit-normalize each (h, w) position's channel vector: y / (||y|| + eps).

    Zero vectors map to zero; informative channels keep norms within 1e-6 of 1.
    """
    out = []
    for layer in stack:
        norm = np.sqrt(np.sum(layer * layer, axis=0, keepdims=True))
        out.append(layer / (norm + eps))
    return out


def normalize_channels_backward(stack: list[np.ndarray], grad_normed: list[np.ndarray],
                                eps: float = NORM_EPS) -> list[np.ndarray]:
    """Chain gradients from normalized space back to the raw feature stack."""
    out = []
    for y, g in zip(stack, grad_normed):
        n = np.sqrt(np.sum(y * y, axis=0, keepdims=True))
        a = n + eps
        dot = np.sum(y * g, axis=0, keepdims=True)
        safe_n = np.where(n > 0, n, 1.0)  # at the origin only the direct term survives
        out.append(g / a - np.where(n > 0, dot * y / (safe_n * a * a), 0.0))
    return out


def _check_pair(s0, s1, w: ChannelWeights | None):
    if len(s0) != len(s1):
        raise ConfigurationError(f"stacks have {len(s0)} vs {len(s1)} layers")
    for i, (a, b) in enumerate(zip(s0, s1)):
        if a.shape != b.shape:
            raise ConfigurationError(f"layer {i} shape mismatch: {a.shape} vs {b.shape}")
    if w is not None:
        if len(w.layers) != len(s0):
            raise ConfigurationError(f"weights cover {len(w.layers)} layers, stacks have {len(s0)}")
        for i, (v, a) in enumerate(zip(w.layers, s0)):
            if v.size != a.shape[0]:
                raise ConfigurationError(
                    f"layer {i}: {v.size} weights for {a.shape[0]} channels")


def channel_mean_sq_diff(s0: list[np.ndarray], s1: list[np.ndarray]) -> list[np.ndarray]:
    """Per layer: spatial mean of squared channel differences, one value per channel.

    The weighted distance is then the dot product with the weight vectors, which
    is what makes frozen-backbone training cheap.
    """
    _check_pair(s0, s1, None)
    out = []
    for a, b in zip(s0, s1):
        d = a - b
        out.append(np.mean(d * d, axis=(1, 2), dtype=np.float64))
    return out


def lpips_distance(s0: list[np.ndarray], s1: list[np.ndarray],
                   w: ChannelWeights) -> DistanceReport:
    """Layered distance over channel-normalized stacks.

    per_layer_l = mean_{h,w} sum_c w[l,c] * (s0 - s1)^2; total sums the layers.
    Weights scale the squared differences directly, so the non-negativity
    projection used in training is meaningful.
    """
    _check_pair(s0, s1, w)
    per = []
    for v, m in zip(w.layers, channel_mean_sq_diff(s0, s1)):
        per.append(float(np.sum(v * m, dtype=np.float64)))
    return DistanceReport(total=float(np.sum(per, dtype=np.float64)), per_layer=tuple(per))


def lpips_backward(s0: list[np.ndarray], s1: list[np.ndarray], w: ChannelWeights,
                   upstream: float = 1.0):
    """Gradients of the total distance w.r.t. w and both (normalized) stacks."""
    _check_pair(s0, s1, w)
    grad_w, grad_s0, grad_s1 = [], [], []
    for v, a, b in zip(w.layers, s0, s1):
        hw = a.shape[1] * a.shape[2]
        d = a - b
        grad_w.append(upstream * np.mean(d * d, axis=(1, 2), dtype=np.float64))
        g = upstream * 2.0 * v[:, None, None] * d / hw
        grad_s0.append(g)
        grad_s1.append(-g)
    return grad_w, grad_s0, grad_s1


def lpips(spec: bb.BackboneSpec, weights: bb.WeightStore, w: ChannelWeights,
          a: np.ndarray, b: np.ndarray) -> DistanceReport:
    """Convenience: forward both patches, normalize, and take the distance."""
    s0 = normalize_channels(bb.forward(spec, weights, a))
    s1 = normalize_channels(bb.forward(spec, weights, b))
    return lpips_distance(s0, s1, w)


# ---------------------------------------------------------------------------
# pixel-space baselines
# ---------------------------------------------------------------------------

def l2_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Mean squared error over all samples of same-shaped patch tensors."""
    if a.shape != b.shape:
        raise ConfigurationError(f"shape mismatch {a.shape} vs {b.shape}")
    d = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    return float(np.mean(d * d, dtype=np.float64))


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """10*log10(1 / MSE) with MAX = 1.0; identical inputs give +inf."""
    mse = l2_distance(a, b)
    if mse == 0.0:
        return float("inf")
    return float(10.0 * np.log10(1.0 / mse))


def _local_weighted(img: np.ndarray, k: np.ndarray) -> np.ndarray:
    tmp = correlate1d(img, k, axis=0, mode="constant", cval=0.0)
    return correlate1d(tmp, k, axis=1, mode="constant", cval=0.0)


def _ssim_channel(a: np.ndarray, b: np.ndarray, k: np.ndarray, mass: np.ndarray) -> float:
    mu_a = _local_weighted(a, k) / mass
    mu_b = _local_weighted(b, k) / mass
    e_aa = _local_weighted(a * a, k) / mass
    e_bb = _local_weighted(b * b, k) / mass
    e_ab = _local_weighted(a * b, k) / mass
    var_a = e_aa - mu_a * mu_a
    var_b = e_bb - mu_b * mu_b
    cov = e_ab - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + SSIM_C1) * (2.0 * cov + SSIM_C2)
    den = (mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return float(np.mean(num / den, dtype=np.float64))


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean local SSIM, 11x11 Gaussian window (sigma 1.5), C1=0.01^2, C2=0.03^2.

    Computed per channel and averaged. A window is centered on every pixel;
    at borders (or on inputs smaller than 11x11) it is truncated and its
    Gaussian weights renormalized.
    """
    if a.shape != b.shape:
        raise ConfigurationError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.ndim != 3:
        raise ConfigurationError("ssim expects (C, H, W) tensors")
    t = np.arange(-SSIM_WINDOW_RADIUS, SSIM_WINDOW_RADIUS + 1, dtype=np.float64)
    k = np.exp(-(t * t) / (2.0 * SSIM_SIGMA ** 2))
    k /= k.sum()
    mass = _local_weighted(np.ones(a.shape[1:], dtype=np.float64), k)
    vals = [_ssim_channel(np.asarray(a[c], dtype=np.float64),
                          np.asarray(b[c], dtype=np.float64), k, mass)
            for c in range(a.shape[0])]
    return float(np.mean(vals, dtype=np.float64))
