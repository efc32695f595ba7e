"""Frozen-oracle tests for the invertible ISP stages."""

import numpy as np
import pytest

from noiselab import (
    BayerPlane,
    CameraProfile,
    Domain,
    DomainMismatchError,
    GammaDirection,
    ImagePlane,
    InvalidProfileError,
    RejectedInputError,
    ShapeError,
    TransformDirection,
    bundled_profiles,
    color_correct,
    demosaic_bilinear,
    gamma_transfer,
    load_profile,
    mosaic_rggb,
    white_balance,
)


def identity_profile() -> CameraProfile:
    return CameraProfile(ccm=np.eye(3), ccm_inv=np.eye(3), wb_gains=np.ones(3))


def srgb(data) -> ImagePlane:
    return ImagePlane(np.asarray(data, dtype=np.float64), Domain.SRGB_NONLINEAR)


def linear_cam(data) -> ImagePlane:
    return ImagePlane(np.asarray(data, dtype=np.float64), Domain.LINEAR_CAMERA_RGB)


# ------------------------------------------------------------- gamma transfer

def test_gamma_expand_mid_gray_oracle():
    img = srgb(np.full((2, 2, 3), 0.5))
    out = gamma_transfer(img, 2.2, GammaDirection.EXPAND)
    # 0.5 ** 2.2, evaluated by hand
    assert out.data == pytest.approx(0.21763764082403103, rel=1e-12)
    assert out.domain is Domain.LINEAR_SRGB


def test_gamma_compress_is_inverse():
    rng = np.random.default_rng(3)
    img = srgb(rng.random((6, 6, 3)))
    linear = gamma_transfer(img, 2.2, GammaDirection.EXPAND)
    back = gamma_transfer(linear, 2.2, GammaDirection.COMPRESS)
    assert back.domain is Domain.SRGB_NONLINEAR
    assert np.abs(back.data - img.data).max() < 1e-12


def test_gamma_endpoints_exact():
    img = srgb([[[0.0, 1.0, 0.0]]])
    out = gamma_transfer(img, 2.2, GammaDirection.EXPAND)
    assert out.data[0, 0, 0] == 0.0
    assert out.data[0, 0, 1] == 1.0


def test_gamma_domain_gates():
    linear = ImagePlane(np.full((2, 2, 3), 0.5), Domain.LINEAR_SRGB)
    with pytest.raises(DomainMismatchError):
        gamma_transfer(linear, 2.2, GammaDirection.EXPAND)
    with pytest.raises(DomainMismatchError):
        gamma_transfer(srgb(np.full((2, 2, 3), 0.5)), 2.2, GammaDirection.COMPRESS)


def test_gamma_rejects_bad_inputs():
    with pytest.raises(RejectedInputError):
        gamma_transfer(srgb(np.full((2, 2, 3), 1.5)), 2.2, GammaDirection.EXPAND)
    with pytest.raises(RejectedInputError):
        gamma_transfer(srgb(np.full((2, 2, 3), 0.5)), 0.0, GammaDirection.EXPAND)


# -------------------------------------------------------------- white balance

def test_white_balance_invert_oracle():
    prof = CameraProfile(ccm=np.eye(3), ccm_inv=np.eye(3),
                         wb_gains=np.array([2.0, 1.0, 1.6]))
    img = ImagePlane(np.full((2, 2, 3), 0.2), Domain.LINEAR_SRGB)
    out = white_balance(img, prof, TransformDirection.INVERT)
    # 0.2 / (2.0, 1.0, 1.6) = (0.1, 0.2, 0.125); the divisions are exact
    # binary scalings, so equality is bitwise.
    assert (out.data[0, 0] == np.array([0.1, 0.2, 0.125])).all()


def test_white_balance_round_trip_and_no_clamp():
    prof = CameraProfile(ccm=np.eye(3), ccm_inv=np.eye(3),
                         wb_gains=np.array([2.0, 1.0, 1.6]))
    img = ImagePlane(np.full((2, 2, 3), 0.8), Domain.LINEAR_SRGB)
    up = white_balance(img, prof, TransformDirection.APPLY)
    assert up.data[0, 0, 0] == 1.6  # gains never clamp
    back = white_balance(up, prof, TransformDirection.INVERT)
    assert np.abs(back.data - img.data).max() < 1e-15


def test_white_balance_gates():
    prof = identity_profile()
    with pytest.raises(DomainMismatchError):
        white_balance(srgb(np.full((2, 2, 3), 0.5)), prof, TransformDirection.APPLY)
    gray = ImagePlane(np.full((2, 2, 1), 0.5), Domain.LINEAR_SRGB)
    with pytest.raises(ShapeError):
        white_balance(gray, prof, TransformDirection.APPLY)


# ----------------------------------------------------------- color correction

def spec_ccm_profile() -> CameraProfile:
    # Rows sum to 1, determinant 3.75.
    ccm = np.array([[2.0, -1.0, 0.0], [-0.5, 1.5, 0.0], [0.0, -0.5, 1.5]])
    return CameraProfile.from_ccm(ccm, np.ones(3))


def test_color_correct_apply_clamps():
    prof = spec_ccm_profile()
    img = linear_cam([[[1.0, 0.0, 0.0]]])
    out = color_correct(img, prof, TransformDirection.APPLY)
    # Pre-clamp product is (2.0, -0.5, 0.0); APPLY clamps into [0, 1].
    assert (out.data[0, 0] == np.array([1.0, 0.0, 0.0])).all()
    assert out.domain is Domain.LINEAR_SRGB


def test_color_correct_gray_fixed_point():
    prof = spec_ccm_profile()
    img = linear_cam(np.full((2, 2, 3), 0.4))
    out = color_correct(img, prof, TransformDirection.APPLY)
    # Unit row sums map gray to itself.
    assert out.data == pytest.approx(0.4, rel=1e-15)


def test_color_correct_invert_unclamped():
    prof = CameraProfile.from_ccm(np.diag([0.5, 1.0, 1.0]), np.ones(3))
    img = ImagePlane(np.array([[[1.0, 0.0, 0.0]]]), Domain.LINEAR_SRGB)
    out = color_correct(img, prof, TransformDirection.INVERT)
    assert out.data[0, 0, 0] == 2.0  # INVERT never clamps
    assert out.domain is Domain.LINEAR_CAMERA_RGB


def test_color_correct_round_trip():
    prof = spec_ccm_profile()
    rng = np.random.default_rng(11)
    img = ImagePlane(rng.uniform(0.2, 0.5, (4, 4, 3)), Domain.LINEAR_SRGB)
    cam = color_correct(img, prof, TransformDirection.INVERT)
    back = color_correct(linear_cam(cam.data), prof, TransformDirection.APPLY)
    assert np.abs(back.data - img.data).max() < 1e-12


def test_color_correct_domain_gate():
    with pytest.raises(DomainMismatchError):
        color_correct(srgb(np.full((2, 2, 3), 0.5)), identity_profile(),
                      TransformDirection.APPLY)


# --------------------------------------------------------------------- mosaic

def test_mosaic_constant_oracle():
    img = linear_cam(np.broadcast_to(np.array([0.3, 0.5, 0.7]), (4, 4, 3)))
    plane = mosaic_rggb(img)
    quad = np.array([[0.3, 0.5], [0.5, 0.7]])
    assert (plane.data == np.tile(quad, (2, 2))).all()


def test_mosaic_site_mapping():
    rng = np.random.default_rng(5)
    data = rng.random((4, 4, 3))
    plane = mosaic_rggb(linear_cam(data))
    assert plane.data[0, 0] == data[0, 0, 0]  # R
    assert plane.data[0, 1] == data[0, 1, 1]  # G in R row
    assert plane.data[1, 0] == data[1, 0, 1]  # G in B row
    assert plane.data[1, 1] == data[1, 1, 2]  # B


def test_mosaic_gates():
    with pytest.raises(ShapeError):
        mosaic_rggb(linear_cam(np.zeros((3, 4, 3))))
    with pytest.raises(DomainMismatchError):
        mosaic_rggb(ImagePlane(np.zeros((4, 4, 3)), Domain.LINEAR_SRGB))


# ------------------------------------------------------------------- demosaic

def test_demosaic_constant_fixed_point():
    plane = BayerPlane(np.full((6, 6), 0.37))
    out = demosaic_bilinear(plane)
    # Exact at interior and borders.
    assert (out.data == 0.37).all()
    assert out.domain is Domain.LINEAR_CAMERA_RGB


def test_demosaic_hot_pixel_oracle():
    raw = np.zeros((8, 8))
    raw[2, 2] = 0.8  # an R site
    out = demosaic_bilinear(BayerPlane(raw)).data
    assert (out[2, 2] == np.array([0.8, 0.0, 0.0])).all()


def test_demosaic_sampled_sites_identity():
    rng = np.random.default_rng(7)
    raw = BayerPlane(rng.random((8, 8)))
    back = mosaic_rggb(demosaic_bilinear(raw))
    assert (back.data == raw.data).all()


def test_demosaic_smooth_ramp_error():
    h = w = 16
    ramp = np.empty((h, w, 3))
    ramp[..., 0] = np.linspace(0.2, 0.8, w)[None, :]
    ramp[..., 1] = np.linspace(0.3, 0.7, h)[:, None]
    ramp[..., 2] = 0.5
    out = demosaic_bilinear(mosaic_rggb(linear_cam(ramp))).data
    err = np.abs(out - ramp)[2:-2, 2:-2]
    assert err.max() < 2.0 / 255.0


def test_demosaic_linearity():
    rng = np.random.default_rng(9)
    x = rng.random((6, 6))
    y = rng.random((6, 6))
    mix = demosaic_bilinear(BayerPlane(0.3 * x + 0.6 * y)).data
    parts = (0.3 * demosaic_bilinear(BayerPlane(x)).data
             + 0.6 * demosaic_bilinear(BayerPlane(y)).data)
    assert np.abs(mix - parts).max() < 1e-9


# ---------------------------------------------------------------- plane types

def test_image_plane_promotes_2d_and_freezes():
    img = ImagePlane(np.zeros((4, 4)), Domain.LINEAR_SRGB)
    assert img.data.shape == (4, 4, 1)
    with pytest.raises(ValueError):
        img.data[0, 0, 0] = 1.0


def test_image_plane_gates():
    with pytest.raises(ShapeError):
        ImagePlane(np.zeros((4, 4, 2)), Domain.LINEAR_SRGB)
    with pytest.raises(RejectedInputError):
        ImagePlane(np.full((2, 2, 3), np.nan), Domain.LINEAR_SRGB)


def test_bayer_plane_gates():
    with pytest.raises(ShapeError):
        BayerPlane(np.zeros((3, 4)))
    with pytest.raises(ShapeError):
        BayerPlane(np.zeros((4, 4, 1)))
    with pytest.raises(ShapeError):
        BayerPlane(np.zeros((4, 4)), pattern="BGGR")


# ------------------------------------------------------------------- profiles

def test_profile_validation_gates():
    with pytest.raises(InvalidProfileError):
        CameraProfile.from_ccm(np.zeros((3, 3)), np.ones(3))  # singular
    with pytest.raises(InvalidProfileError):
        CameraProfile(ccm=np.eye(3), ccm_inv=2 * np.eye(3), wb_gains=np.ones(3))
    with pytest.raises(InvalidProfileError):
        CameraProfile(ccm=np.eye(3), ccm_inv=np.eye(3),
                      wb_gains=np.array([1.0, 0.0, 1.0]))
    with pytest.raises(InvalidProfileError):
        CameraProfile(ccm=np.eye(3), ccm_inv=np.eye(3), wb_gains=np.ones(3),
                      gamma=-1.0)


def test_load_profile_row_sum_gate():
    ok = {"ccm": np.eye(3).tolist(), "wb_gains": [2.0, 1.0, 1.5]}
    prof = load_profile(ok, name="flat")
    assert prof.name == "flat" and prof.gamma == 2.2
    bad = {"ccm": (1.5 * np.eye(3)).tolist(), "wb_gains": [2.0, 1.0, 1.5]}
    with pytest.raises(InvalidProfileError):
        load_profile(bad)
    with pytest.raises(InvalidProfileError):
        load_profile({"wb_gains": [1.0, 1.0, 1.0]})


def test_bundled_profiles_are_valid_and_sorted():
    pool = bundled_profiles()
    names = [p.name for p in pool]
    assert names == ["canon_5d_like", "nikon_d700_like", "sony_alpha_like"]
    for prof in pool:
        assert np.abs(prof.ccm @ prof.ccm_inv - np.eye(3)).max() < 1e-9
        assert (prof.wb_gains > 0).all()
        sums = prof.ccm.sum(axis=1)
        assert (sums >= 0.9).all() and (sums <= 1.1).all()
