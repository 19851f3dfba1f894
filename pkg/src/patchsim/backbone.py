"""Configurable convolutional feature extractor with tap layers.

Forward and reverse-mode passes are plain numpy (im2col + GEMM), pure
functions over immutable spec/weights. The reference "TinyConv" architecture
gives a 5-tap feature stack at desk scale. Weights travel in a small binary
container (magic ``LPW1``) with a JSON tensor directory.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigurationError, DecodeError
from .imagecore import Rng

LPW_MAGIC = b"LPW1"
_ALIGN = 16


# ---------------------------------------------------------------------------
# architecture spec
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ConvSpec:
    in_ch: int
    out_ch: int
    kernel: int
    stride: int = 1
    pad: int = 0


@dataclass(frozen=True)
class PoolSpec:
    kernel: int
    stride: int


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # conv | relu | maxpool
    conv: ConvSpec | None = None
    pool: PoolSpec | None = None


@dataclass(frozen=True)
class BackboneSpec:
    """Ordered layer list plus the indices whose outputs form the feature stack."""

    layers: tuple[LayerSpec, ...]
    taps: tuple[int, ...]
    input_shift: tuple[float, float, float] = (0.0, 0.0, 0.0)
    input_scale: tuple[float, float, float] = (1.0, 1.0, 1.0)
    in_channels: int = 3

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not self.layers:
            raise ConfigurationError("backbone needs at least one layer")
        if not self.taps:
            raise ConfigurationError("backbone needs at least one tap layer")
        ch = self.in_channels
        for i, layer in enumerate(self.layers):
            if layer.kind == "conv":
                c = layer.conv
                if c is None:
                    raise ConfigurationError(f"layer {i}: conv layer missing conv params")
                if c.in_ch != ch:
                    raise ConfigurationError(
                        f"layer {i}: expects {c.in_ch} input channels, upstream provides {ch}")
                if c.kernel < 1 or c.stride < 1 or c.pad < 0:
                    raise ConfigurationError(f"layer {i}: invalid conv geometry")
                ch = c.out_ch
            elif layer.kind == "maxpool":
                p = layer.pool
                if p is None or p.kernel < 1 or p.stride < 1:
                    raise ConfigurationError(f"layer {i}: invalid pool geometry")
            elif layer.kind != "relu":
                raise ConfigurationError(f"layer {i}: unknown kind {layer.kind!r}")
        for t in self.taps:
            if t < 0 or t >= len(self.layers):
                raise ConfigurationError(f"tap index {t} out of range")
            if self.layers[t].kind not in ("conv", "relu"):
                raise ConfigurationError(f"tap {t} must point at a conv or relu layer")

    def tap_channels(self) -> list[int]:
        """Channel count of each tap output, in tap order."""
        counts = []
        ch = self.in_channels
        per_layer = []
        for layer in self.layers:
            if layer.kind == "conv":
                ch = layer.conv.out_ch
            per_layer.append(ch)
        for t in self.taps:
            counts.append(per_layer[t])
        return counts

    def output_shapes(self, height: int, width: int) -> list[tuple[int, int, int]]:
        """Tap output shapes (C, H, W); raises if any layer collapses to zero size."""
        h, w = height, width
        ch = self.in_channels
        per_layer = []
        for i, layer in enumerate(self.layers):
            if layer.kind == "conv":
                c = layer.conv
                h = (h + 2 * c.pad - c.kernel) // c.stride + 1
                w = (w + 2 * c.pad - c.kernel) // c.stride + 1
                ch = c.out_ch
            elif layer.kind == "maxpool":
                p = layer.pool
                h = (h - p.kernel) // p.stride + 1
                w = (w - p.kernel) // p.stride + 1
            if h < 1 or w < 1:
                raise ConfigurationError(f"layer {i} output collapses to {h}x{w}")
            per_layer.append((ch, h, w))
        return [per_layer[t] for t in self.taps]

    def to_json(self) -> str:
        layers = []
        for layer in self.layers:
            d: dict = {"kind": layer.kind}
            if layer.conv is not None:
                d["conv"] = {"in_ch": layer.conv.in_ch, "out_ch": layer.conv.out_ch,
                             "kernel": layer.conv.kernel, "stride": layer.conv.stride,
                             "pad": layer.conv.pad}
            if layer.pool is not None:
                d["pool"] = {"kernel": layer.pool.kernel, "stride": layer.pool.stride}
            layers.append(d)
        obj = {"layers": layers, "taps": list(self.taps),
               "input_norm": {"shift": list(self.input_shift), "scale": list(self.input_scale)},
               "in_channels": self.in_channels}
        return json.dumps(obj, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "BackboneSpec":
        obj = json.loads(text)
        layers = []
        for d in obj["layers"]:
            conv = pool = None
            if "conv" in d:
                conv = ConvSpec(**d["conv"])
            if "pool" in d:
                pool = PoolSpec(**d["pool"])
            layers.append(LayerSpec(kind=d["kind"], conv=conv, pool=pool))
        norm = obj.get("input_norm", {})
        return cls(layers=tuple(layers), taps=tuple(obj["taps"]),
                   input_shift=tuple(norm.get("shift", (0.0, 0.0, 0.0))),
                   input_scale=tuple(norm.get("scale", (1.0, 1.0, 1.0))),
                   in_channels=obj.get("in_channels", 3))


def tinyconv(blocks: int = 5) -> BackboneSpec:
    """Reference desk-scale backbone: `blocks` conv3x3+relu stages with channels
    [16, 32, 64, 64, 64], 2x2/2 maxpool after all but the last stage, taps after
    every relu. Full depth needs inputs of at least 16x16.
    """
    if not 1 <= blocks <= 5:
        raise ConfigurationError("tinyconv supports 1..5 blocks")
    channels = [16, 32, 64, 64, 64][:blocks]
    layers: list[LayerSpec] = []
    taps = []
    in_ch = 3
    for b, out_ch in enumerate(channels):
        layers.append(LayerSpec("conv", conv=ConvSpec(in_ch, out_ch, 3, 1, 1)))
        layers.append(LayerSpec("relu"))
        taps.append(len(layers) - 1)
        if b < blocks - 1:
            layers.append(LayerSpec("maxpool", pool=PoolSpec(2, 2)))
        in_ch = out_ch
    return BackboneSpec(layers=tuple(layers), taps=tuple(taps))


# ---------------------------------------------------------------------------
# weight store + LPW1 container
# ---------------------------------------------------------------------------

class WeightStore:
    """Named tensor map. Insertion order is preserved and serialized."""

    def __init__(self, tensors: dict[str, np.ndarray] | None = None):
        self._tensors: dict[str, np.ndarray] = {}
        if tensors:
            for name, arr in tensors.items():
                self[name] = arr

    def __getitem__(self, name: str) -> np.ndarray:
        try:
            return self._tensors[name]
        except KeyError:
            raise ConfigurationError(f"missing weight tensor {name!r}") from None

    def __setitem__(self, name: str, arr) -> None:
        self._tensors[name] = np.asarray(arr, dtype=np.float64)

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __len__(self) -> int:
        return len(self._tensors)

    def names(self) -> list[str]:
        return list(self._tensors)

    def items(self):
        return self._tensors.items()

    def copy(self) -> "WeightStore":
        return WeightStore({k: v.copy() for k, v in self._tensors.items()})


def weights_to_bytes(store: WeightStore) -> bytes:
    entries = []
    payload = bytearray()
    for name, arr in store.items():
        if len(payload) % _ALIGN:
            payload.extend(b"\x00" * (_ALIGN - len(payload) % _ALIGN))
        a = np.ascontiguousarray(arr, dtype="<f4")
        entries.append({"name": name, "shape": list(a.shape), "dtype": "f32",
                        "offset": len(payload), "length": int(a.nbytes)})
        payload.extend(a.tobytes())
    header = json.dumps(entries, separators=(",", ":")).encode("utf-8")
    return LPW_MAGIC + struct.pack("<I", len(header)) + header + bytes(payload)


def weights_from_bytes(data: bytes) -> WeightStore:
    if data[:4] != LPW_MAGIC:
        raise DecodeError("bad weight file magic", offset=0)
    if len(data) < 8:
        raise DecodeError("truncated weight file header", offset=4)
    (hlen,) = struct.unpack("<I", data[4:8])
    if 8 + hlen > len(data):
        raise DecodeError("weight file header overruns file", offset=8)
    try:
        entries = json.loads(data[8:8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise DecodeError(f"weight header is not valid JSON: {e}", offset=8) from e
    payload = data[8 + hlen:]
    store = WeightStore()
    for e in entries:
        if e.get("dtype") != "f32":
            raise DecodeError(f"tensor {e.get('name')!r} has unsupported dtype", offset=8)
        off, length = int(e["offset"]), int(e["length"])
        if off % _ALIGN:
            raise DecodeError(f"tensor {e['name']!r} not 16-byte aligned", offset=8 + hlen + off)
        if off + length > len(payload):
            raise DecodeError(f"tensor {e['name']!r} overruns payload", offset=8 + hlen + off)
        flat = np.frombuffer(payload, dtype="<f4", count=length // 4, offset=off)
        store[e["name"]] = flat.reshape(e["shape"]).astype(np.float64)
    return store


def save_weights(store: WeightStore, path) -> None:
    Path(path).write_bytes(weights_to_bytes(store))


def load_weights(path) -> WeightStore:
    return weights_from_bytes(Path(path).read_bytes())


def init_scratch(spec: BackboneSpec, rng: Rng) -> WeightStore:
    """He-style init: kernels ~ N(0, sqrt(2 / fan_in)), biases zero.

    Values are quantized to f32 at creation so a save/load round trip is
    bit-exact from the start.
    """
    store = WeightStore()
    for i, layer in enumerate(spec.layers):
        if layer.kind != "conv":
            continue
        c = layer.conv
        fan_in = c.in_ch * c.kernel * c.kernel
        sigma = float(np.sqrt(2.0 / fan_in))
        kernel = rng.normal(0.0, sigma, (c.out_ch, c.in_ch, c.kernel, c.kernel))
        store[f"layer{i}.kernel"] = kernel.astype(np.float32).astype(np.float64)
        store[f"layer{i}.bias"] = np.zeros(c.out_ch)
    return store


def _check_weights(spec: BackboneSpec, weights: WeightStore) -> None:
    for i, layer in enumerate(spec.layers):
        if layer.kind != "conv":
            continue
        c = layer.conv
        k = weights[f"layer{i}.kernel"]
        b = weights[f"layer{i}.bias"]
        if k.shape != (c.out_ch, c.in_ch, c.kernel, c.kernel):
            raise ConfigurationError(
                f"layer{i}.kernel has shape {k.shape}, spec wants "
                f"{(c.out_ch, c.in_ch, c.kernel, c.kernel)}")
        if b.shape != (c.out_ch,):
            raise ConfigurationError(f"layer{i}.bias has shape {b.shape}, want ({c.out_ch},)")


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def conv2d_forward(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray,
                   stride: int = 1, pad: int = 0) -> np.ndarray:
    """out[o, y, x] = bias[o] + sum_{i,ky,kx} kernel[o,i,ky,kx] * in[i, y*s-p+ky, x*s-p+kx]."""
    if x.ndim != 3 or kernel.ndim != 4 or kernel.shape[1] != x.shape[0]:
        raise ConfigurationError(
            f"conv2d shape mismatch: input {x.shape}, kernel {kernel.shape}")
    if bias.shape != (kernel.shape[0],):
        raise ConfigurationError(f"bias shape {bias.shape} does not match {kernel.shape[0]} filters")
    if stride < 1 or pad < 0:
        raise ConfigurationError("conv2d needs stride >= 1 and pad >= 0")
    out, _ = _conv2d_forward_cached(x, kernel, bias, stride, pad)
    return out


def _conv2d_forward_cached(x, kernel, bias, stride, pad):
    o_ch, i_ch, kh, kw = kernel.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad))) if pad else x
    h_out = (xp.shape[1] - kh) // stride + 1
    w_out = (xp.shape[2] - kw) // stride + 1
    if h_out < 1 or w_out < 1:
        raise ConfigurationError(
            f"conv2d output collapses: input {x.shape}, kernel {kh}x{kw}, stride {stride}, pad {pad}")
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    cols = win.transpose(1, 2, 0, 3, 4).reshape(h_out * w_out, i_ch * kh * kw)
    out = cols @ kernel.reshape(o_ch, -1).T + bias
    return np.ascontiguousarray(out.T.reshape(o_ch, h_out, w_out)), cols


def conv2d_backward(x: np.ndarray, kernel: np.ndarray, stride: int, pad: int,
                    grad_out: np.ndarray, cols: np.ndarray | None = None):
    """Exact reverse-mode gradients; returns (grad_kernel, grad_bias, grad_input)."""
    o_ch, i_ch, kh, kw = kernel.shape
    if cols is None:
        _, cols = _conv2d_forward_cached(x, kernel, np.zeros(o_ch), stride, pad)
    h_out, w_out = grad_out.shape[1], grad_out.shape[2]
    g2 = grad_out.reshape(o_ch, -1)
    grad_bias = g2.sum(axis=1)
    grad_kernel = (g2 @ cols).reshape(kernel.shape)
    gcols = g2.T @ kernel.reshape(o_ch, -1)
    gwin = gcols.reshape(h_out, w_out, i_ch, kh, kw).transpose(2, 0, 1, 3, 4)
    hp, wp = x.shape[1] + 2 * pad, x.shape[2] + 2 * pad
    gxp = np.zeros((i_ch, hp, wp))
    for ky in range(kh):
        for kx in range(kw):
            gxp[:, ky:ky + (h_out - 1) * stride + 1:stride,
                kx:kx + (w_out - 1) * stride + 1:stride] += gwin[:, :, :, ky, kx]
    grad_x = gxp[:, pad:pad + x.shape[1], pad:pad + x.shape[2]] if pad else gxp
    return grad_kernel, grad_bias, grad_x


def _maxpool_forward(x, kernel, stride):
    c = x.shape[0]
    win = sliding_window_view(x, (kernel, kernel), axis=(1, 2))[:, ::stride, ::stride]
    h_out, w_out = win.shape[1], win.shape[2]
    if h_out < 1 or w_out < 1:
        raise ConfigurationError(f"maxpool output collapses on input {x.shape}")
    flat = win.reshape(c, h_out, w_out, kernel * kernel)
    idx = flat.argmax(axis=3)  # first max in row-major window scan breaks ties
    out = np.take_along_axis(flat, idx[..., None], axis=3)[..., 0]
    return np.ascontiguousarray(out), idx


def _maxpool_backward(x_shape, kernel, stride, idx, grad_out):
    c, h_out, w_out = grad_out.shape
    gx = np.zeros(x_shape)
    ky, kx = idx // kernel, idx % kernel
    oy, ox = np.meshgrid(np.arange(h_out), np.arange(w_out), indexing="ij")
    for ci in range(c):
        np.add.at(gx[ci], (oy * stride + ky[ci], ox * stride + kx[ci]), grad_out[ci])
    return gx


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


# ---------------------------------------------------------------------------
# forward / backward over a full spec
# ---------------------------------------------------------------------------

def _run_forward(spec: BackboneSpec, weights: WeightStore, x: np.ndarray, keep_cache: bool):
    if x.ndim != 3 or x.shape[0] != spec.in_channels:
        raise ConfigurationError(f"input shape {x.shape} does not match backbone input")
    _check_weights(spec, weights)
    shift = np.asarray(spec.input_shift, dtype=np.float64).reshape(-1, 1, 1)
    scale = np.asarray(spec.input_scale, dtype=np.float64).reshape(-1, 1, 1)
    cur = (np.asarray(x, dtype=np.float64) - shift) / scale
    taps = {t: None for t in spec.taps}
    cache = [] if keep_cache else None
    for i, layer in enumerate(spec.layers):
        if layer.kind == "conv":
            c = layer.conv
            out, cols = _conv2d_forward_cached(
                cur, weights[f"layer{i}.kernel"], weights[f"layer{i}.bias"], c.stride, c.pad)
            if keep_cache:
                cache.append(("conv", cur, cols, out.shape))
            cur = out
        elif layer.kind == "relu":
            out = relu(cur)
            if keep_cache:
                cache.append(("relu", cur, None, out.shape))
            cur = out
        else:
            p = layer.pool
            out, idx = _maxpool_forward(cur, p.kernel, p.stride)
            if keep_cache:
                cache.append(("maxpool", cur.shape, idx, out.shape))
            cur = out
        if i in taps:
            taps[i] = cur
    stack = [taps[t] for t in spec.taps]
    return stack, cache, scale


def forward(spec: BackboneSpec, weights: WeightStore, x: np.ndarray) -> list[np.ndarray]:
    """Feature stack: tap outputs (post-activation) in spec tap order."""
    stack, _, _ = _run_forward(spec, weights, x, keep_cache=False)
    return stack


def backward(spec: BackboneSpec, weights: WeightStore, x: np.ndarray,
             upstream: list[np.ndarray]):
    """Reverse-mode gradients of the forward map.

    `upstream` holds d(loss)/d(tap) per tap, in tap order. Returns
    (grad_weights: WeightStore, grad_input).
    """
    stack, cache, scale = _run_forward(spec, weights, x, keep_cache=True)
    if len(upstream) != len(spec.taps):
        raise ConfigurationError(
            f"got {len(upstream)} upstream gradients for {len(spec.taps)} taps")
    for g, s in zip(upstream, stack):
        if g.shape != s.shape:
            raise ConfigurationError(f"upstream gradient shape {g.shape} != tap shape {s.shape}")
    tap_grad = {t: np.asarray(g, dtype=np.float64) for t, g in zip(spec.taps, upstream)}

    grads = WeightStore()
    g = None
    # walk layers in reverse, injecting tap gradients where taps were captured
    for i in range(len(spec.layers) - 1, -1, -1):
        layer = spec.layers[i]
        kind, a, b, out_shape = cache[i]
        if g is None:
            g = np.zeros(out_shape)
        if i in tap_grad:
            g = g + tap_grad[i]
        if kind == "conv":
            c = layer.conv
            gk, gb, g = conv2d_backward(a, weights[f"layer{i}.kernel"], c.stride, c.pad, g, cols=b)
            grads[f"layer{i}.kernel"] = gk
            grads[f"layer{i}.bias"] = gb
        elif kind == "relu":
            g = g * (a > 0)  # gradient at exactly 0 is defined as 0
        else:
            p = layer.pool
            g = _maxpool_backward(a, p.kernel, p.stride, b, g)
    grad_input = g / scale
    return grads, grad_input
