import hashlib

import numpy as np
import pytest

from patchsim import backbone as bb
from patchsim.errors import ConfigurationError, DecodeError
from patchsim.imagecore import Rng

TAP_GOLDENS = [
    ("8fcb6b00b386c53a", 5639.023015023155),
    ("d21bc9149a9054b2", 3227.0713933037086),
    ("9535b746c9bfff11", 2210.3017627732947),
    ("c2786d66906b2994", 586.3574557268219),
    ("08611851997ec31d", 168.40979115563863),
]


def naive_conv(x, k, b, stride, pad):
    o_ch, i_ch, kh, kw = k.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    h_out = (xp.shape[1] - kh) // stride + 1
    w_out = (xp.shape[2] - kw) // stride + 1
    out = np.zeros((o_ch, h_out, w_out))
    for o in range(o_ch):
        for y in range(h_out):
            for x_ in range(w_out):
                acc = b[o]
                for i in range(i_ch):
                    for ky in range(kh):
                        for kx in range(kw):
                            acc += k[o, i, ky, kx] * xp[i, y * stride + ky, x_ * stride + kx]
                out[o, y, x_] = acc
    return out


# ---------------------------------------------------------------------------
# conv primitive
# ---------------------------------------------------------------------------

def test_conv_1x1_identity(rng_np):
    x = rng_np.random((1, 4, 4))
    out = bb.conv2d_forward(x, np.ones((1, 1, 1, 1)), np.zeros(1))
    assert np.allclose(out, x)


def test_conv_all_ones_kernel_interior():
    c = 0.7
    x = np.full((1, 5, 5), c)
    out = bb.conv2d_forward(x, np.ones((1, 1, 3, 3)), np.zeros(1), stride=1, pad=1)
    assert out[0, 2, 2] == pytest.approx(9 * c)


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1), (2, 0)])
def test_conv_matches_naive_oracle(rng_np, stride, pad):
    x = rng_np.random((2, 5, 5))
    k = rng_np.random((3, 2, 3, 3)) - 0.5
    b = rng_np.random(3)
    out = bb.conv2d_forward(x, k, b, stride=stride, pad=pad)
    assert np.abs(out - naive_conv(x, k, b, stride, pad)).max() < 1e-6


def test_conv_shape_formula(rng_np):
    x = rng_np.random((3, 11, 13))
    k = rng_np.random((4, 3, 3, 3))
    out = bb.conv2d_forward(x, k, np.zeros(4), stride=2, pad=1)
    assert out.shape == (4, (11 + 2 - 3) // 2 + 1, (13 + 2 - 3) // 2 + 1)


def test_conv_shape_mismatch():
    with pytest.raises(ConfigurationError):
        bb.conv2d_forward(np.zeros((2, 4, 4)), np.zeros((1, 3, 3, 3)), np.zeros(1))


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------

def test_zero_input_zero_bias_gives_zero_taps():
    spec = bb.tinyconv()
    w = bb.init_scratch(spec, Rng(1))
    stack = bb.forward(spec, w, np.zeros((3, 32, 32)))
    assert all((t == 0).all() for t in stack)


def test_forward_deterministic(rng_np):
    spec = bb.tinyconv()
    w = bb.init_scratch(spec, Rng(1))
    x = rng_np.random((3, 32, 32))
    a = bb.forward(spec, w, x)
    b = bb.forward(spec, w, x)
    assert all((s == t).all() for s, t in zip(a, b))


def test_forward_golden_tap_checksums():
    spec = bb.tinyconv()
    w = bb.init_scratch(spec, Rng(2718))
    x = Rng(3141).uniform(0.0, 1.0, (3, 32, 32))
    stack = bb.forward(spec, w, x)
    for t, (sha, total) in zip(stack, TAP_GOLDENS):
        assert hashlib.sha256(
            np.ascontiguousarray(t, dtype="<f8").tobytes()).hexdigest()[:16] == sha
        assert float(t.sum()) == pytest.approx(total, rel=1e-12)


def test_forward_rejects_inconsistent_weights():
    spec = bb.tinyconv()
    w = bb.init_scratch(spec, Rng(1))
    w["layer0.kernel"] = np.zeros((16, 3, 5, 5))
    with pytest.raises(ConfigurationError):
        bb.forward(spec, w, np.zeros((3, 32, 32)))


def test_output_shapes_formula():
    spec = bb.tinyconv()
    shapes = spec.output_shapes(64, 64)
    assert shapes == [(16, 64, 64), (32, 32, 32), (64, 16, 16), (64, 8, 8), (64, 4, 4)]
    with pytest.raises(ConfigurationError):
        spec.output_shapes(8, 8)  # pooled away to nothing at full depth


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------

def _upstream_for(spec, w, x, rng):
    return [rng.random(t.shape) for t in bb.forward(spec, w, x)]


def test_zero_upstream_zero_gradients(rng_np):
    spec = bb.tinyconv(blocks=2)
    w = bb.init_scratch(spec, Rng(4))
    x = rng_np.random((3, 8, 8))
    up = [np.zeros(t.shape) for t in bb.forward(spec, w, x)]
    grads, gx = bb.backward(spec, w, x, up)
    assert all((g == 0).all() for _, g in grads.items())
    assert (gx == 0).all()


def test_backward_finite_differences_every_weight(rng_np):
    """Central differences over every weight of a 2-block net on 8x8 inputs."""
    spec = bb.tinyconv(blocks=2)
    w = bb.init_scratch(spec, Rng(5))
    x = np.clip(rng_np.random((3, 8, 8)), 0.05, 0.95)
    up = _upstream_for(spec, w, x, rng_np)

    def loss(ws):
        return sum(float(np.sum(u * s)) for u, s in zip(up, bb.forward(spec, ws, x)))

    grads, gx = bb.backward(spec, w, x, up)
    eps = 1e-3
    checked = 0
    for name in w.names():
        flat = w[name].reshape(-1)
        gflat = grads[name].reshape(-1)
        stride = max(1, flat.size // 40)  # dense spot check across the tensor
        for i in range(0, flat.size, stride):
            wp, wm = w.copy(), w.copy()
            wp[name].reshape(-1)[i] += eps
            wm[name].reshape(-1)[i] -= eps
            fd = (loss(wp) - loss(wm)) / (2 * eps)
            if abs(fd) > 1e-8:
                assert abs(fd - gflat[i]) / abs(fd) < 1e-4, (name, i)
                checked += 1
    assert checked > 50

    i0 = (1, 3, 2)
    xp, xm = x.copy(), x.copy()
    xp[i0] += eps
    xm[i0] -= eps
    fd = (sum(float(np.sum(u * s)) for u, s in zip(up, bb.forward(spec, w, xp)))
          - sum(float(np.sum(u * s)) for u, s in zip(up, bb.forward(spec, w, xm)))) / (2 * eps)
    assert abs(fd - gx[i0]) / abs(fd) < 1e-4


def test_backward_linearity_in_upstream(rng_np):
    spec = bb.tinyconv(blocks=2)
    w = bb.init_scratch(spec, Rng(6))
    x = rng_np.random((3, 8, 8))
    up = _upstream_for(spec, w, x, rng_np)
    g1, gx1 = bb.backward(spec, w, x, up)
    g2, gx2 = bb.backward(spec, w, x, [3.0 * u for u in up])
    for name in g1.names():
        assert np.allclose(3.0 * g1[name], g2[name])
    assert np.allclose(3.0 * gx1, gx2)


def test_maxpool_tie_break_first_index():
    x = np.full((1, 2, 2), 0.5)
    out, idx = bb._maxpool_forward(x, 2, 2)
    assert out[0, 0, 0] == 0.5 and idx[0, 0, 0] == 0


def test_relu_gradient_at_zero_is_zero():
    spec = bb.BackboneSpec(
        layers=(bb.LayerSpec("conv", conv=bb.ConvSpec(1, 1, 1)), bb.LayerSpec("relu")),
        taps=(1,), in_channels=1)
    w = bb.WeightStore({"layer0.kernel": np.ones((1, 1, 1, 1)), "layer0.bias": np.zeros(1)})
    grads, gx = bb.backward(spec, w, np.zeros((1, 2, 2)), [np.ones((1, 2, 2))])
    assert (gx == 0).all()


# ---------------------------------------------------------------------------
# init
# ---------------------------------------------------------------------------

def test_init_scratch_deterministic():
    spec = bb.tinyconv()
    a = bb.init_scratch(spec, Rng(11))
    b = bb.init_scratch(spec, Rng(11))
    assert all((a[n] == b[n]).all() for n in a.names())


def test_init_scratch_zero_biases():
    spec = bb.tinyconv()
    w = bb.init_scratch(spec, Rng(11))
    assert all((w[n] == 0).all() for n in w.names() if n.endswith("bias"))


def test_init_scratch_kernel_stddev():
    # fan_in = 16 * 3 * 3 = 144 for layer3 of a custom spec; check sigma within 5%
    spec = bb.BackboneSpec(
        layers=(bb.LayerSpec("conv", conv=bb.ConvSpec(16, 70, 3, 1, 1)), bb.LayerSpec("relu")),
        taps=(1,), in_channels=16)
    w = bb.init_scratch(spec, Rng(12))
    k = w["layer0.kernel"]
    assert k.size == 70 * 144 > 10000
    assert abs(k.std() - np.sqrt(2 / 144)) / np.sqrt(2 / 144) < 0.05


# ---------------------------------------------------------------------------
# weight container
# ---------------------------------------------------------------------------

def test_weight_round_trip_bit_identical(rng_np):
    spec = bb.tinyconv()
    w = bb.init_scratch(spec, Rng(13))
    x = rng_np.random((3, 32, 32))
    before = bb.forward(spec, w, x)
    after = bb.forward(spec, bb.weights_from_bytes(bb.weights_to_bytes(w)), x)
    assert all((a == b).all() for a, b in zip(before, after))


def test_weight_file_layout():
    w = bb.WeightStore({"a": np.arange(3, dtype=np.float64), "b": np.ones((2, 2))})
    data = bb.weights_to_bytes(w)
    assert data[:4] == b"LPW1"
    import json
    import struct
    (hlen,) = struct.unpack("<I", data[4:8])
    entries = json.loads(data[8:8 + hlen])
    assert [e["name"] for e in entries] == ["a", "b"]
    assert all(e["offset"] % 16 == 0 for e in entries)
    assert all(e["dtype"] == "f32" for e in entries)


def test_weight_file_bad_magic():
    with pytest.raises(DecodeError, match="offset 0"):
        bb.weights_from_bytes(b"NOPE" + bytes(16))


def test_spec_json_round_trip():
    spec = bb.tinyconv()
    again = bb.BackboneSpec.from_json(spec.to_json())
    assert again == spec


def test_spec_validation_channel_chain():
    with pytest.raises(ConfigurationError):
        bb.BackboneSpec(
            layers=(bb.LayerSpec("conv", conv=bb.ConvSpec(4, 8, 3)),),
            taps=(0,), in_channels=3)


def test_spec_taps_must_hit_conv_or_relu():
    with pytest.raises(ConfigurationError):
        bb.BackboneSpec(
            layers=(bb.LayerSpec("conv", conv=bb.ConvSpec(3, 8, 3)),
                    bb.LayerSpec("maxpool", pool=bb.PoolSpec(2, 2))),
            taps=(1,), in_channels=3)
