"""Physics-based degradation synthesis.

Composes the three pipeline stages: invert the display-referred image
back to a RAW mosaic, inject Poisson-Gaussian noise there, and render
the noisy mosaic forward to sRGB again. Also builds the self-perturbed
pair used by the consistency objective: a second pass over an already
degraded image that adds pure read noise (k held at exactly 0).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import RejectedInputError
from .isp_core import (
    BayerPlane,
    CameraProfile,
    Domain,
    GammaDirection,
    ImagePlane,
    TransformDirection,
    bundled_profiles,
    color_correct,
    demosaic_bilinear,
    gamma_transfer,
    mosaic_rggb,
    white_balance,
)
from .noise_model import NoiseMode, NoiseParams, inject_noise, sample_noise_params

WB_GAIN_LO = 1.2
WB_GAIN_HI = 2.4


@dataclass(frozen=True)
class DegradedSample:
    """Degraded sRGB image plus the exact recipe that produced it."""

    image: ImagePlane
    attack: NoiseParams
    profile: CameraProfile
    seed: int
    mode: NoiseMode = NoiseMode.GAUSS_APPROX


@dataclass(frozen=True)
class PerturbedPair:
    """An input image and its read-noise-perturbed sibling."""

    original: ImagePlane
    perturbed: ImagePlane
    sigma_per: float
    k_per: float = 0.0

    def __post_init__(self):
        if self.sigma_per <= 0:
            raise RejectedInputError("sigma_per must be positive")
        if self.k_per != 0.0:
            raise RejectedInputError("k_per is held at exactly 0")
        if self.original.data.shape != self.perturbed.data.shape:
            raise RejectedInputError("pair images must share dimensions")


def _even_crop(img: ImagePlane) -> ImagePlane:
    """Center-crop odd dimensions down to even ones, with a warning."""
    h, w = img.height, img.width
    if h % 2 == 0 and w % 2 == 0:
        return img
    warnings.warn(f"odd image size {(h, w)} center-cropped to even", stacklevel=3)
    h2, w2 = h - h % 2, w - w % 2
    top, left = (h - h2) // 2, (w - w2) // 2
    return ImagePlane(img.data[top:top + h2, left:left + w2, :], img.domain)


def inverse_isp(img: ImagePlane, profile: CameraProfile) -> BayerPlane:
    """sRGB image to clean RAW mosaic: degamma, invert CCM and WB, mosaic."""
    img = _even_crop(img)
    linear = gamma_transfer(img, profile.gamma, GammaDirection.EXPAND)
    camera = color_correct(linear, profile, TransformDirection.INVERT)
    unbalanced = white_balance(camera, profile, TransformDirection.INVERT)
    return mosaic_rggb(unbalanced)


def forward_isp(raw: BayerPlane, profile: CameraProfile) -> ImagePlane:
    """RAW mosaic to sRGB: demosaic, WB, CCM (clamped), gamma compress."""
    camera = demosaic_bilinear(raw)
    balanced = white_balance(camera, profile, TransformDirection.APPLY)
    linear = color_correct(balanced, profile, TransformDirection.APPLY)
    return gamma_transfer(linear, profile.gamma, GammaDirection.COMPRESS)


def sample_profile(rng: np.random.Generator, pool: list[CameraProfile] | None = None) -> CameraProfile:
    """Random sensor: CCM from the bundled pool, fresh red/blue WB gains."""
    pool = pool if pool is not None else bundled_profiles()
    base = pool[int(rng.integers(len(pool)))]
    gains = np.array([rng.uniform(WB_GAIN_LO, WB_GAIN_HI), 1.0, rng.uniform(WB_GAIN_LO, WB_GAIN_HI)])
    return CameraProfile(ccm=base.ccm, ccm_inv=base.ccm_inv, wb_gains=gains, gamma=base.gamma, name=base.name)


def synthesize_attack(
    img_normal: ImagePlane,
    profile: CameraProfile | None,
    params: NoiseParams | None,
    rng: np.random.Generator,
    seed: int = 0,
    mode: NoiseMode = NoiseMode.GAUSS_APPROX,
) -> DegradedSample:
    """Full attack: inverse ISP, RAW noise, forward ISP.

    Passing None for profile or params draws them from the same rng
    (profile from the bundled pool with sampled WB gains, params
    log-uniformly). The seed argument is recorded for the sidecar.
    """
    if img_normal.domain is not Domain.SRGB_NONLINEAR:
        raise RejectedInputError("attack input must be an sRGB image")
    if profile is None:
        profile = sample_profile(rng)
    if params is None:
        params = sample_noise_params(rng)
    raw = inverse_isp(img_normal, profile)
    noisy = inject_noise(raw, params, mode, rng)
    attacked = forward_isp(noisy, profile)
    return DegradedSample(image=attacked, attack=params, profile=profile, seed=seed, mode=mode)


def perturb_lowlight(
    img_input: ImagePlane,
    sigma_per: float | None,
    profile: CameraProfile,
    rng: np.random.Generator,
    seed: int = 0,
    sigma_per_range: tuple[float, float] = (1e-3, 5e-3),
) -> PerturbedPair:
    """Second-pass read-noise attack with shot noise pinned to zero."""
    if sigma_per is None:
        lo, hi = sigma_per_range
        sigma_per = float(rng.uniform(lo, hi))
    if sigma_per <= 0:
        raise RejectedInputError(f"sigma_per must be positive, got {sigma_per}")
    img_input = _even_crop(img_input)
    degraded = synthesize_attack(
        img_input, profile, NoiseParams(k=0.0, sigma=sigma_per), rng, seed=seed
    )
    return PerturbedPair(original=img_input, perturbed=degraded.image, sigma_per=sigma_per)
