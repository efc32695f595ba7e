"""Physical sensor-noise parameterization and injection.

The noise model is heteroscedastic Poisson-Gaussian: a measurement at
linear intensity x has variance k*x + sigma**2, where k is the shot
(photon) coefficient and sigma the read-noise standard deviation, both
in normalized RAW units. Parameters are sampled log-uniformly:
log10(k) ~ U[-3, -2], log10(sigma) ~ U[-4, log10(5e-3)].

All randomness flows through counter-based Philox generators derived
from explicit 64-bit seeds; there is no global RNG state.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import CodecClampWarning, RejectedInputError
from .isp_core import BayerPlane

K_MIN = 1e-3
K_MAX = 1e-2
SIGMA_MIN = 1e-4
SIGMA_MAX = 5e-3

_LOG10_K_MIN = -3.0
_LOG10_K_MAX = -2.0
_LOG10_SIGMA_MIN = -4.0
_LOG10_SIGMA_MAX = np.log10(SIGMA_MAX)  # -2.3010299956639813


class NoiseMode(Enum):
    GAUSS_APPROX = "gauss"
    EXACT_PG = "pg"


class CodecDirection(Enum):
    NORMALIZE = "normalize"
    DENORMALIZE = "denormalize"


@dataclass(frozen=True)
class NoiseParams:
    """Shot coefficient k and read-noise std sigma, physical units."""

    k: float
    sigma: float

    def __post_init__(self):
        if not (np.isfinite(self.k) and np.isfinite(self.sigma)):
            raise RejectedInputError("noise params must be finite")
        if self.k < 0 or self.sigma < 0:
            raise RejectedInputError("noise params must be nonnegative")


@dataclass(frozen=True)
class NormalizedNoiseParams:
    """The same pair mapped log-linearly onto [0, 1]^2."""

    k_n: float
    sigma_n: float

    def __post_init__(self):
        if not (0.0 <= self.k_n <= 1.0 and 0.0 <= self.sigma_n <= 1.0):
            raise RejectedInputError("normalized params must lie in [0, 1]")


def make_stream(seed: int, index: int | None = None) -> np.random.Generator:
    """Philox stream for a seed, optionally forked per item index."""
    if index is None:
        seq = np.random.SeedSequence(seed)
    else:
        seq = np.random.SeedSequence(entropy=seed, spawn_key=(index,))
    return np.random.Generator(np.random.Philox(seq))


def sample_noise_params(rng: np.random.Generator) -> NoiseParams:
    """Draw an attack vector log-uniformly from the physical ranges."""
    log_k = rng.uniform(_LOG10_K_MIN, _LOG10_K_MAX)
    log_sigma = rng.uniform(_LOG10_SIGMA_MIN, _LOG10_SIGMA_MAX)
    return NoiseParams(k=float(10.0 ** log_k), sigma=float(10.0 ** log_sigma))


def noise_variance(intensity: float, params: NoiseParams) -> float:
    """Variance of a measurement at the given linear intensity."""
    if not np.isfinite(intensity) or intensity < 0:
        raise RejectedInputError(f"intensity must be finite and >= 0, got {intensity}")
    return params.k * intensity + params.sigma ** 2


def inject_noise(
    raw: BayerPlane,
    params: NoiseParams,
    mode: NoiseMode,
    rng: np.random.Generator,
) -> BayerPlane:
    """Draw a noisy RAW plane. Output is not clamped; negatives survive.

    GAUSS_APPROX draws N(x, k*x + sigma^2) per sample. EXACT_PG draws
    k*Poisson(x/k) + N(0, sigma^2), skipping the Poisson term when k=0.
    Negative input samples are clamped to 0 before the draw. The
    zero-noise pair (0, 0) returns the input bit-exactly without
    consuming randomness.
    """
    if not np.isfinite(raw.data).all():
        raise RejectedInputError("raw plane contains non-finite samples")
    x = np.clip(raw.data, 0.0, None)
    if params.k == 0.0 and params.sigma == 0.0:
        return BayerPlane(raw.data.copy())
    if mode is NoiseMode.GAUSS_APPROX:
        std = np.sqrt(params.k * x + params.sigma ** 2)
        noisy = rng.normal(loc=x, scale=std)
    elif mode is NoiseMode.EXACT_PG:
        if params.k > 0.0:
            shot = params.k * rng.poisson(x / params.k).astype(np.float64)
        else:
            shot = x
        noisy = shot + rng.normal(loc=0.0, scale=params.sigma, size=x.shape)
    else:
        raise RejectedInputError(f"unknown noise mode {mode}")
    return BayerPlane(noisy)


def _clamp(value: float, lo: float, hi: float, label: str) -> float:
    if value < lo or value > hi:
        warnings.warn(
            f"{label}={value:g} outside [{lo:g}, {hi:g}], clamped",
            CodecClampWarning,
            stacklevel=3,
        )
        return min(max(value, lo), hi)
    return value


def normalize_params(params: NoiseParams) -> NormalizedNoiseParams:
    """Map physical (k, sigma) onto [0, 1]^2, clamping with a warning."""
    k = _clamp(params.k, K_MIN, K_MAX, "k")
    sigma = _clamp(params.sigma, SIGMA_MIN, SIGMA_MAX, "sigma")
    k_n = (np.log10(k) - _LOG10_K_MIN) / (_LOG10_K_MAX - _LOG10_K_MIN)
    sigma_n = (np.log10(sigma) - _LOG10_SIGMA_MIN) / (_LOG10_SIGMA_MAX - _LOG10_SIGMA_MIN)
    return NormalizedNoiseParams(k_n=float(np.clip(k_n, 0.0, 1.0)), sigma_n=float(np.clip(sigma_n, 0.0, 1.0)))


def denormalize_params(norm: NormalizedNoiseParams) -> NoiseParams:
    """Exact inverse of normalize_params on [0, 1]^2."""
    k_n = _clamp(norm.k_n, 0.0, 1.0, "k_n")
    sigma_n = _clamp(norm.sigma_n, 0.0, 1.0, "sigma_n")
    k = 10.0 ** (_LOG10_K_MIN + k_n * (_LOG10_K_MAX - _LOG10_K_MIN))
    sigma = 10.0 ** (_LOG10_SIGMA_MIN + sigma_n * (_LOG10_SIGMA_MAX - _LOG10_SIGMA_MIN))
    return NoiseParams(k=float(k), sigma=float(sigma))


def param_codec(value, direction: CodecDirection):
    """Dispatch between normalize_params and denormalize_params."""
    if direction is CodecDirection.NORMALIZE:
        if not isinstance(value, NoiseParams):
            raise RejectedInputError("NORMALIZE expects NoiseParams")
        return normalize_params(value)
    if direction is CodecDirection.DENORMALIZE:
        if not isinstance(value, NormalizedNoiseParams):
            raise RejectedInputError("DENORMALIZE expects NormalizedNoiseParams")
        return denormalize_params(value)
    raise RejectedInputError(f"unknown codec direction {direction}")


def normalize_arrays(k: np.ndarray, sigma: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized normalize for batched targets; clamps silently."""
    k = np.clip(np.asarray(k, dtype=np.float64), K_MIN, K_MAX)
    sigma = np.clip(np.asarray(sigma, dtype=np.float64), SIGMA_MIN, SIGMA_MAX)
    k_n = (np.log10(k) - _LOG10_K_MIN) / (_LOG10_K_MAX - _LOG10_K_MIN)
    sigma_n = (np.log10(sigma) - _LOG10_SIGMA_MIN) / (_LOG10_SIGMA_MAX - _LOG10_SIGMA_MIN)
    return np.clip(k_n, 0.0, 1.0), np.clip(sigma_n, 0.0, 1.0)


def denormalize_arrays(k_n: np.ndarray, sigma_n: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized inverse of normalize_arrays."""
    k_n = np.clip(np.asarray(k_n, dtype=np.float64), 0.0, 1.0)
    sigma_n = np.clip(np.asarray(sigma_n, dtype=np.float64), 0.0, 1.0)
    k = 10.0 ** (_LOG10_K_MIN + k_n * (_LOG10_K_MAX - _LOG10_K_MIN))
    sigma = 10.0 ** (_LOG10_SIGMA_MIN + sigma_n * (_LOG10_SIGMA_MAX - _LOG10_SIGMA_MIN))
    return k, sigma
