"""Tests for the composed degradation pipeline and the perturbed pair."""

import numpy as np
import pytest

from noiselab import (
    CameraProfile,
    Domain,
    ImagePlane,
    NoiseMode,
    NoiseParams,
    RejectedInputError,
    bundled_profiles,
    forward_isp,
    inverse_isp,
    make_stream,
    perturb_lowlight,
    sample_profile,
    synthesize_attack,
)

IDENTITY = CameraProfile(ccm=np.eye(3), ccm_inv=np.eye(3), wb_gains=np.ones(3))


def srgb_const(value, side=8) -> ImagePlane:
    data = np.broadcast_to(np.asarray(value, dtype=np.float64), (side, side, 3))
    return ImagePlane(data, Domain.SRGB_NONLINEAR)


def smooth_chart(side=64) -> ImagePlane:
    y, x = np.mgrid[0:side, 0:side] / (side - 1.0)
    img = np.empty((side, side, 3))
    img[..., 0] = 0.35 + 0.25 * np.sin(2 * np.pi * 0.7 * x) + 0.2 * y
    img[..., 1] = 0.40 + 0.25 * np.cos(2 * np.pi * 0.5 * y) * np.sin(2 * np.pi * 0.3 * x)
    img[..., 2] = 0.45 + 0.20 * np.cos(2 * np.pi * 0.4 * (x + y))
    return ImagePlane(np.clip(img, 0.05, 0.95), Domain.SRGB_NONLINEAR)


# ---------------------------------------------------------------- inverse ISP

def test_inverse_isp_identity_profile_gray():
    raw = inverse_isp(srgb_const(0.6), IDENTITY)
    assert raw.data == pytest.approx(0.6 ** 2.2, rel=1e-12)


def test_inverse_isp_constant_white_any_profile():
    prof = bundled_profiles()[0]
    raw = inverse_isp(srgb_const(1.0, side=4), prof)
    # (ccm_inv . 1) / g, taken at each channel's Bayer sites
    cam = prof.ccm_inv @ np.ones(3) / prof.wb_gains
    assert raw.data[0::2, 0::2] == pytest.approx(cam[0], rel=1e-12)
    assert raw.data[0::2, 1::2] == pytest.approx(cam[1], rel=1e-12)
    assert raw.data[1::2, 0::2] == pytest.approx(cam[1], rel=1e-12)
    assert raw.data[1::2, 1::2] == pytest.approx(cam[2], rel=1e-12)


def test_inverse_isp_pure_red_r_sites():
    img = srgb_const([1.0, 0.0, 0.0])
    raw = inverse_isp(img, IDENTITY)
    assert (raw.data[0::2, 0::2] == 1.0).all()
    assert (raw.data[0::2, 1::2] == 0.0).all()


# ---------------------------------------------------------------- forward ISP

def test_round_trip_constant_exact():
    for level in (0.25, 0.5, 0.75):
        prof = bundled_profiles()[1]
        img = srgb_const(level)
        back = forward_isp(inverse_isp(img, prof), prof)
        assert np.abs(back.data - img.data).max() < 1e-12


def test_round_trip_smooth_chart_psnr():
    img = smooth_chart()
    for prof in bundled_profiles():
        back = forward_isp(inverse_isp(img, prof), prof)
        mse = np.mean((back.data - img.data) ** 2)
        psnr = 10.0 * np.log10(1.0 / mse)
        assert psnr >= 45.0


def test_forward_isp_zero_raw():
    from noiselab import BayerPlane
    out = forward_isp(BayerPlane(np.zeros((8, 8))), bundled_profiles()[2])
    assert (out.data == 0.0).all()
    assert out.domain is Domain.SRGB_NONLINEAR


# ----------------------------------------------------------- synthesize_attack

def test_attack_zero_params_is_pure_round_trip():
    img = smooth_chart(32)
    prof = bundled_profiles()[0]
    sample = synthesize_attack(img, prof, NoiseParams(k=0.0, sigma=0.0),
                               make_stream(3), seed=3)
    ref = forward_isp(inverse_isp(img, prof), prof)
    assert (sample.image.data == ref.data).all()
    assert sample.attack.k == 0.0 and sample.attack.sigma == 0.0
    assert sample.seed == 3


def test_attack_variance_ordering():
    img = srgb_const(0.5, side=64)
    big = synthesize_attack(img, IDENTITY, NoiseParams(k=0.01, sigma=0.005),
                            make_stream(7))
    small = synthesize_attack(img, IDENTITY, NoiseParams(k=1e-3, sigma=1e-4),
                              make_stream(7))
    var_big = np.var(big.image.data - img.data)
    var_small = np.var(small.image.data - img.data)
    assert var_big > var_small


def test_attack_determinism_and_regeneration():
    img = smooth_chart(32)
    prof = bundled_profiles()[1]
    params = NoiseParams(k=4e-3, sigma=1e-3)
    a = synthesize_attack(img, prof, params, make_stream(11, index=2), seed=11)
    b = synthesize_attack(img, prof, params, make_stream(11, index=2), seed=11)
    assert (a.image.data == b.image.data).all()


def test_attack_random_draws_record_recipe():
    img = smooth_chart(16)
    sample = synthesize_attack(img, None, None, make_stream(13), seed=13,
                               mode=NoiseMode.EXACT_PG)
    assert sample.mode is NoiseMode.EXACT_PG
    assert 1e-3 <= sample.attack.k <= 1e-2
    assert 1e-4 <= sample.attack.sigma <= 5e-3
    assert sample.profile.wb_gains[1] == 1.0


def test_attack_rejects_linear_input():
    linear = ImagePlane(np.full((8, 8, 3), 0.5), Domain.LINEAR_SRGB)
    with pytest.raises(RejectedInputError):
        synthesize_attack(linear, IDENTITY, NoiseParams(k=0.0, sigma=0.0),
                          make_stream(1))


def test_sample_profile_gain_ranges():
    rng = make_stream(17)
    pool = bundled_profiles()
    for _ in range(32):
        prof = sample_profile(rng, pool)
        assert 1.2 <= prof.wb_gains[0] <= 2.4
        assert prof.wb_gains[1] == 1.0
        assert 1.2 <= prof.wb_gains[2] <= 2.4


# ------------------------------------------------------------ perturbed pairs

def test_perturb_raw_referred_variance():
    img = srgb_const(0.2, side=256)
    pair = perturb_lowlight(img, 4e-3, IDENTITY, make_stream(19))
    raw_orig = inverse_isp(pair.original, IDENTITY)
    raw_pert = inverse_isp(pair.perturbed, IDENTITY)
    var = np.var(raw_pert.data - raw_orig.data)
    # Injected read noise has variance (4e-3)^2 = 1.6e-5.
    assert abs(var / 1.6e-5 - 1.0) < 0.05
    assert pair.k_per == 0.0
    assert pair.sigma_per == 4e-3


def test_perturb_small_sigma_limit():
    img = smooth_chart(32)
    prof = bundled_profiles()[0]
    pair = perturb_lowlight(img, 1e-9, prof, make_stream(23))
    round_trip = forward_isp(inverse_isp(img, prof), prof)
    bound = np.abs(round_trip.data - img.data).max() + 1e-6
    assert np.abs(pair.perturbed.data - img.data).max() <= bound


def test_perturb_determinism():
    img = srgb_const(0.3, side=16)
    a = perturb_lowlight(img, None, IDENTITY, make_stream(29), seed=29)
    b = perturb_lowlight(img, None, IDENTITY, make_stream(29), seed=29)
    assert a.sigma_per == b.sigma_per
    assert (a.perturbed.data == b.perturbed.data).all()
    assert 1e-3 <= a.sigma_per <= 5e-3


def test_perturb_rejects_nonpositive_sigma():
    img = srgb_const(0.3)
    with pytest.raises(RejectedInputError):
        perturb_lowlight(img, 0.0, IDENTITY, make_stream(1))
    with pytest.raises(RejectedInputError):
        perturb_lowlight(img, -1e-3, IDENTITY, make_stream(1))


def test_odd_input_center_cropped_with_warning():
    data = np.full((9, 8, 3), 0.4)
    img = ImagePlane(data, Domain.SRGB_NONLINEAR)
    with pytest.warns(UserWarning, match="center-cropped"):
        pair = perturb_lowlight(img, 2e-3, IDENTITY, make_stream(31))
    assert pair.original.data.shape == (8, 8, 3)
    assert pair.perturbed.data.shape == (8, 8, 3)
