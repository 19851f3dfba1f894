import hashlib

import numpy as np
import pytest

from patchsim import distort as dt
from patchsim.errors import ConfigurationError, GenerationError, RangeError
from patchsim.imagecore import Rng

X0_GOLDEN = "701977892dd47746"
X1_GOLDEN = "d322289064029e1c"


def _sha(t):
    return hashlib.sha256(np.ascontiguousarray(t, dtype="<f8").tobytes()).hexdigest()[:16]


@pytest.fixture(scope="module")
def patch():
    return Rng(999).uniform(0.0, 1.0, (3, 64, 64))


# ---------------------------------------------------------------------------
# apply
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("kind", dt.KINDS)
def test_severity_zero_identity(kind, patch):
    out = dt.apply(dt.DistortionSpec(kind, 0.0, seed=5), patch)
    assert (out == patch).all()


@pytest.mark.parametrize("kind", dt.KINDS)
@pytest.mark.parametrize("severity", [0.05, 0.5, 1.0])
def test_output_range_and_determinism(kind, severity, patch):
    spec = dt.DistortionSpec(kind, severity, seed=77)
    y1 = dt.apply(spec, patch)
    y2 = dt.apply(spec, patch)
    assert (y1 == y2).all()
    assert np.isfinite(y1).all()
    assert y1.min() >= 0.0 and y1.max() <= 1.0


def test_severity_out_of_range_rejected():
    with pytest.raises(ConfigurationError):
        dt.DistortionSpec("gaussian_noise", 1.5)
    with pytest.raises(ConfigurationError):
        dt.DistortionSpec("made_up_kind", 0.5)


def test_gaussian_blur_of_impulse_is_normalized_kernel():
    x = np.zeros((3, 33, 33))
    x[:, 16, 16] = 1.0
    out = dt.apply(dt.DistortionSpec("gaussian_blur", 0.2, seed=1), x)
    assert out.sum(axis=(1, 2)) == pytest.approx([1.0, 1.0, 1.0], abs=1e-6)
    assert out[0, 16, 16] == out[0].max()


@pytest.mark.parametrize("kind", ["gaussian_blur", "box_blur"])
def test_blur_preserves_constant(kind):
    c = np.full((3, 40, 40), 0.437)
    out = dt.apply(dt.DistortionSpec(kind, 0.61, seed=1), c)
    assert np.abs(out - 0.437).max() < 1e-6


def test_gaussian_noise_statistics():
    base = np.full((3, 64, 64), 0.5)
    out = dt.apply(dt.DistortionSpec("gaussian_noise", 0.5, seed=3), base)
    n = out.size
    sigma = 0.3 * 0.5
    assert abs(out.mean() - 0.5) < 3 * sigma / np.sqrt(n)
    assert abs(out.std() - sigma) / sigma < 0.05


def test_impulse_fraction():
    base = np.full((3, 64, 64), 0.5)
    out = dt.apply(dt.DistortionSpec("impulse_noise", 1.0, seed=9), base)
    changed = (out != base).any(axis=0).mean()
    assert abs(changed - 0.2) < 0.03  # fraction 0.2 * s at s = 1


def test_translate_moves_content(patch):
    out = dt.apply(dt.DistortionSpec("translate", 1.0, seed=4), patch)
    assert not (out == patch).all()
    assert sorted(np.unique(out)).__len__() <= len(np.unique(patch)) + 1


def test_block_zero_zeroes_blocks(patch):
    out = dt.apply(dt.DistortionSpec("block_zero", 1.0, seed=5), patch)
    zero_blocks = 0
    for by in range(8):
        for bx in range(8):
            blk = out[:, by * 8:(by + 1) * 8, bx * 8:(bx + 1) * 8]
            if (blk == 0).all():
                zero_blocks += 1
    assert zero_blocks >= 15  # 0.3 * 64 = 19 expected, some may hit dark blocks


def test_hue_shift_preserves_lightness(patch):
    from patchsim.imagecore import rgb_to_hsl
    out = dt.apply(dt.DistortionSpec("hue_shift", 0.8, seed=6), patch)
    l_in = rgb_to_hsl(patch)[2]
    l_out = rgb_to_hsl(out)[2]
    assert np.abs(l_in - l_out).max() < 1e-4


def test_quantize_dct_severity_monotone(patch):
    errs = [np.abs(dt.apply(dt.DistortionSpec("quantize_dct", s, seed=7), patch)
                   - patch).mean() for s in (0.1, 0.5, 1.0)]
    assert errs[0] < errs[1] < errs[2]


# ---------------------------------------------------------------------------
# triplets / JND pairs
# ---------------------------------------------------------------------------

def test_make_triplet_severity_zero_side(patch):
    d0 = dt.DistortionSpec("gaussian_noise", 0.0, seed=1)
    d1 = dt.DistortionSpec("gaussian_noise", 0.6, seed=2)
    x, x0, x1 = dt.make_triplet(patch, d0, d1)
    assert (x0 == patch).all()
    assert not (x1 == patch).all()


def test_make_triplet_swap_symmetry(patch):
    d0 = dt.DistortionSpec("gaussian_noise", 0.3, seed=1)
    d1 = dt.DistortionSpec("box_blur", 0.6, seed=2)
    _, a0, a1 = dt.make_triplet(patch, d0, d1)
    _, b0, b1 = dt.make_triplet(patch, d1, d0)
    assert (a0 == b1).all() and (a1 == b0).all()


def test_make_triplet_rejects_identical_specs(patch):
    d = dt.DistortionSpec("gaussian_noise", 0.3, seed=1)
    with pytest.raises(GenerationError):
        dt.make_triplet(patch, d, dt.DistortionSpec("gaussian_noise", 0.3, seed=1))


def test_triplet_golden_checksums(patch):
    d0 = dt.DistortionSpec("gaussian_blur", 0.5, seed=11)
    d1 = dt.DistortionSpec("gaussian_noise", 0.375, seed=22)
    _, x0, x1 = dt.make_triplet(patch, d0, d1)
    assert _sha(x0) == X0_GOLDEN
    assert _sha(x1) == X1_GOLDEN


def test_jnd_pair_same_is_bit_exact(patch):
    ref, probe = dt.make_jnd_pair(patch, None, True)
    assert (ref == probe).all()


def test_jnd_pair_severity_floor(patch):
    with pytest.raises(GenerationError):
        dt.make_jnd_pair(patch, dt.DistortionSpec("gaussian_noise", 0.01, seed=1), False)


def test_jnd_sentinel_severity_is_full():
    spec = dt.DistortionSpec("gaussian_noise", 1.0, seed=1)
    assert spec.severity == 1.0  # heavy-noise sentinels use the top of the scale


# ---------------------------------------------------------------------------
# bank
# ---------------------------------------------------------------------------

def test_bank_paper_counts():
    bank = dt.sample_distortion_bank(20, 308, Rng(42))
    assert len(bank) == 328
    assert len(set(map(repr, bank))) == 328
    base = [s for s in bank if isinstance(s, dt.DistortionSpec)]
    comp = [s for s in bank if isinstance(s, dt.ComposedDistortion)]
    assert len(base) == 20 and len(comp) == 308


def test_bank_base_only():
    bank = dt.sample_distortion_bank(5, 0, Rng(1))
    assert len(bank) == 5
    assert all(isinstance(s, dt.DistortionSpec) for s in bank)


def test_bank_deterministic():
    a = dt.sample_distortion_bank(10, 30, Rng(7))
    b = dt.sample_distortion_bank(10, 30, Rng(7))
    assert list(map(repr, a)) == list(map(repr, b))


def test_bank_composed_limit():
    with pytest.raises(RangeError):
        dt.sample_distortion_bank(3, 7, Rng(1))  # 3*2 = 6 ordered pairs


def test_bank_severities_on_grid():
    bank = dt.sample_distortion_bank(20, 0, Rng(3))
    assert all(s.severity in dt.SEVERITY_GRID for s in bank)


def test_composed_order_matters(patch):
    a = dt.DistortionSpec("gaussian_blur", 0.5, seed=1)
    b = dt.DistortionSpec("impulse_noise", 0.5, seed=2)
    ab = dt.apply(dt.ComposedDistortion(a, b), patch)
    ba = dt.apply(dt.ComposedDistortion(b, a), patch)
    assert not (ab == ba).all()


def test_spec_json_round_trip():
    spec = dt.ComposedDistortion(dt.DistortionSpec("contrast", 0.25, seed=5),
                                 dt.DistortionSpec("translate", 0.5, seed=6))
    assert dt.spec_from_json(spec.to_json()) == spec
