"""Invertible color-pipeline primitives.

Gamma transfer, white balance, color correction, RGGB mosaicking and
bilinear demosaicking. Every operation is a pure function of immutable
inputs; the apply/invert pairs are analytic inverses of each other.

Clamping policy: values are clamped to [0, 1] only at sRGB-domain
boundaries (gamma outputs, forward color correction). Linear
intermediates keep their headroom, including negative excursions left
by noise injection; white_balance never clamps.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import (
    DomainMismatchError,
    InvalidProfileError,
    RejectedInputError,
    ShapeError,
)

_CCM_DET_MIN = 1e-8
_CCM_INV_TOL = 1e-9


class Domain(Enum):
    SRGB_NONLINEAR = "srgb_nonlinear"
    LINEAR_SRGB = "linear_srgb"
    LINEAR_CAMERA_RGB = "linear_camera_rgb"


_LINEAR_DOMAINS = (Domain.LINEAR_SRGB, Domain.LINEAR_CAMERA_RGB)


class GammaDirection(Enum):
    EXPAND = "expand"
    COMPRESS = "compress"


class TransformDirection(Enum):
    APPLY = "apply"
    INVERT = "invert"


def _frozen(arr: np.ndarray) -> np.ndarray:
    out = np.asarray(arr, dtype=np.float64)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class CameraProfile:
    """One simulated sensor: color matrix, white-balance gains, gamma."""

    ccm: np.ndarray
    ccm_inv: np.ndarray
    wb_gains: np.ndarray
    gamma: float = 2.2
    name: str = "unnamed"

    def __post_init__(self):
        object.__setattr__(self, "ccm", _frozen(self.ccm))
        object.__setattr__(self, "ccm_inv", _frozen(self.ccm_inv))
        object.__setattr__(self, "wb_gains", _frozen(self.wb_gains))
        if self.ccm.shape != (3, 3) or self.ccm_inv.shape != (3, 3):
            raise InvalidProfileError("ccm and ccm_inv must be 3x3")
        if self.wb_gains.shape != (3,):
            raise InvalidProfileError("wb_gains must have 3 entries")
        if not (np.isfinite(self.ccm).all() and np.isfinite(self.wb_gains).all()):
            raise InvalidProfileError("profile contains non-finite values")
        if abs(float(np.linalg.det(self.ccm))) < _CCM_DET_MIN:
            raise InvalidProfileError("ccm is singular")
        if (self.wb_gains <= 0).any():
            raise InvalidProfileError("wb_gains must be strictly positive")
        if self.gamma <= 0:
            raise InvalidProfileError("gamma must be positive")
        resid = np.abs(self.ccm @ self.ccm_inv - np.eye(3)).max()
        if resid > _CCM_INV_TOL:
            raise InvalidProfileError(f"ccm_inv is not the inverse (residual {resid:g})")

    @classmethod
    def from_ccm(cls, ccm, wb_gains, gamma: float = 2.2, name: str = "unnamed") -> "CameraProfile":
        ccm = np.asarray(ccm, dtype=np.float64)
        if ccm.shape != (3, 3):
            raise InvalidProfileError("ccm must be 3x3")
        if abs(float(np.linalg.det(ccm))) < _CCM_DET_MIN:
            raise InvalidProfileError("ccm is singular")
        return cls(ccm=ccm, ccm_inv=np.linalg.inv(ccm), wb_gains=np.asarray(wb_gains, dtype=np.float64), gamma=gamma, name=name)


@dataclass(frozen=True)
class ImagePlane:
    """Row-major float image, 1 or 3 channels, with a color-domain tag."""

    data: np.ndarray  # (H, W, C)
    domain: Domain

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        if arr.ndim != 3 or arr.shape[2] not in (1, 3):
            raise ShapeError(f"image must be (H, W, 1|3), got {arr.shape}")
        if not np.isfinite(arr).all():
            raise RejectedInputError("image contains non-finite samples")
        object.__setattr__(self, "data", _frozen(arr))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]


@dataclass(frozen=True)
class BayerPlane:
    """Single-channel RGGB mosaic plane. Height and width must be even."""

    data: np.ndarray  # (H, W)
    pattern: str = "RGGB"

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim != 2:
            raise ShapeError(f"bayer plane must be 2-d, got {arr.shape}")
        if arr.shape[0] % 2 or arr.shape[1] % 2:
            raise ShapeError(f"bayer plane needs even dimensions, got {arr.shape}")
        if not np.isfinite(arr).all():
            raise RejectedInputError("bayer plane contains non-finite samples")
        if self.pattern != "RGGB":
            raise ShapeError("only the RGGB pattern is supported")
        object.__setattr__(self, "data", _frozen(arr))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


def gamma_transfer(img: ImagePlane, gamma: float, direction: GammaDirection) -> ImagePlane:
    """Power-law transfer x**gamma (EXPAND) or x**(1/gamma) (COMPRESS)."""
    if gamma <= 0:
        raise RejectedInputError("gamma must be positive")
    if not np.isfinite(img.data).all():
        raise RejectedInputError("non-finite samples")
    if direction is GammaDirection.EXPAND:
        if img.domain is not Domain.SRGB_NONLINEAR:
            raise DomainMismatchError(f"EXPAND expects sRGB input, got {img.domain}")
        out_domain = Domain.LINEAR_SRGB
        exponent = gamma
    elif direction is GammaDirection.COMPRESS:
        if img.domain not in _LINEAR_DOMAINS:
            raise DomainMismatchError(f"COMPRESS expects linear input, got {img.domain}")
        out_domain = Domain.SRGB_NONLINEAR
        exponent = 1.0 / gamma
    else:
        raise DomainMismatchError(f"unknown direction {direction}")
    x = img.data
    if x.min() < 0.0 or x.max() > 1.0:
        raise RejectedInputError("gamma transfer input must lie in [0, 1]")
    out = np.clip(np.power(x, exponent), 0.0, 1.0)
    return ImagePlane(out, out_domain)


def white_balance(img: ImagePlane, profile: CameraProfile, direction: TransformDirection) -> ImagePlane:
    """Per-channel gain (APPLY multiplies, INVERT divides). Never clamps."""
    if img.channels != 3:
        raise ShapeError("white balance needs a 3-channel image")
    if img.domain not in _LINEAR_DOMAINS:
        raise DomainMismatchError(f"white balance expects a linear image, got {img.domain}")
    if (profile.wb_gains <= 0).any():
        raise InvalidProfileError("wb_gains must be strictly positive")
    gains = profile.wb_gains.reshape(1, 1, 3)
    if direction is TransformDirection.APPLY:
        out = img.data * gains
    else:
        out = img.data / gains
    return ImagePlane(out, img.domain)


def _ccm_matmul(data: np.ndarray, matrix: np.ndarray) -> np.ndarray:
    # Per-pixel 3-vector times matrix; unclamped.
    return data @ matrix.T


def color_correct(img: ImagePlane, profile: CameraProfile, direction: TransformDirection) -> ImagePlane:
    """3x3 color matrix. APPLY maps camera RGB to linear sRGB and clamps."""
    if img.channels != 3:
        raise ShapeError("color correction needs a 3-channel image")
    if img.domain not in _LINEAR_DOMAINS:
        raise DomainMismatchError(f"color correction expects a linear image, got {img.domain}")
    if abs(float(np.linalg.det(profile.ccm))) < _CCM_DET_MIN:
        raise InvalidProfileError("ccm is singular")
    if direction is TransformDirection.APPLY:
        out = np.clip(_ccm_matmul(img.data, profile.ccm), 0.0, 1.0)
        return ImagePlane(out, Domain.LINEAR_SRGB)
    out = _ccm_matmul(img.data, profile.ccm_inv)
    return ImagePlane(out, Domain.LINEAR_CAMERA_RGB)


def mosaic_rggb(img: ImagePlane) -> BayerPlane:
    """Subsample a 3-channel linear image onto a single RGGB plane."""
    if img.channels != 3:
        raise ShapeError("mosaic needs a 3-channel image")
    if img.domain is not Domain.LINEAR_CAMERA_RGB:
        raise DomainMismatchError(f"mosaic expects linear camera RGB, got {img.domain}")
    h, w = img.height, img.width
    if h % 2 or w % 2:
        raise ShapeError(f"mosaic needs even dimensions, got {(h, w)}")
    data = img.data
    plane = np.empty((h, w), dtype=np.float64)
    plane[0::2, 0::2] = data[0::2, 0::2, 0]  # R
    plane[0::2, 1::2] = data[0::2, 1::2, 1]  # G
    plane[1::2, 0::2] = data[1::2, 0::2, 1]  # G
    plane[1::2, 1::2] = data[1::2, 1::2, 2]  # B
    return BayerPlane(plane)


def demosaic_bilinear(raw: BayerPlane) -> ImagePlane:
    """Bilinear RGGB demosaic with phase-preserving borders, unclamped.

    Missing colors at a site are the mean of the same-color neighbors in
    the 3x3 window: 4 diagonals or 2/4 edge neighbors depending on the
    site class. Border pixels borrow the nearest row/column of the SAME
    Bayer phase (mirror about the edge sample); plain edge replication
    would put an R value where the kernel expects G and break the
    constant-image fixed point. Linear in the input.
    """
    h, w = raw.height, raw.width
    p = np.pad(raw.data, 1, mode="reflect")
    out = np.empty((h, w, 3), dtype=np.float64)

    # Shifted views of the padded plane, all (h, w).
    c = p[1:-1, 1:-1]
    n = p[0:-2, 1:-1]
    s = p[2:, 1:-1]
    e = p[1:-1, 2:]
    wv = p[1:-1, 0:-2]
    ne = p[0:-2, 2:]
    nw = p[0:-2, 0:-2]
    se = p[2:, 2:]
    sw = p[2:, 0:-2]

    edge_mean = (n + s + e + wv) * 0.25
    diag_mean = (ne + nw + se + sw) * 0.25
    horiz_mean = (e + wv) * 0.5
    vert_mean = (n + s) * 0.5

    r = np.empty((h, w), dtype=np.float64)
    g = np.empty((h, w), dtype=np.float64)
    b = np.empty((h, w), dtype=np.float64)

    rr = (slice(0, None, 2), slice(0, None, 2))   # R sites
    g1 = (slice(0, None, 2), slice(1, None, 2))   # G in R rows
    g2 = (slice(1, None, 2), slice(0, None, 2))   # G in B rows
    bb = (slice(1, None, 2), slice(1, None, 2))   # B sites

    r[rr] = c[rr]
    g[rr] = edge_mean[rr]
    b[rr] = diag_mean[rr]

    r[g1] = horiz_mean[g1]
    g[g1] = c[g1]
    b[g1] = vert_mean[g1]

    r[g2] = vert_mean[g2]
    g[g2] = c[g2]
    b[g2] = horiz_mean[g2]

    r[bb] = diag_mean[bb]
    g[bb] = edge_mean[bb]
    b[bb] = c[bb]

    out[:, :, 0] = r
    out[:, :, 1] = g
    out[:, :, 2] = b
    return ImagePlane(out, Domain.LINEAR_CAMERA_RGB)


def load_profile(source: str | Path | dict, name: str | None = None) -> CameraProfile:
    """Load and validate a camera profile from a JSON file or dict."""
    if isinstance(source, dict):
        obj = source
        prof_name = name or obj.get("name", "unnamed")
    else:
        path = Path(source)
        obj = json.loads(path.read_text())
        prof_name = name or obj.get("name", path.stem)
    try:
        ccm = np.asarray(obj["ccm"], dtype=np.float64)
        gains = np.asarray(obj["wb_gains"], dtype=np.float64)
        gamma = float(obj.get("gamma", 2.2))
    except (KeyError, TypeError, ValueError) as exc:
        raise InvalidProfileError(f"malformed profile: {exc}") from exc
    profile = CameraProfile.from_ccm(ccm, gains, gamma, name=prof_name)
    row_sums = profile.ccm.sum(axis=1)
    if (row_sums < 0.9).any() or (row_sums > 1.1).any():
        raise InvalidProfileError(f"ccm row sums {row_sums} outside [0.9, 1.1]")
    return profile


def bundled_profiles() -> list[CameraProfile]:
    """The profiles shipped with the package, sorted by name."""
    pkg = resources.files("noiselab") / "profiles"
    profiles = []
    for entry in sorted(pkg.iterdir(), key=lambda e: e.name):
        if entry.name.endswith(".json"):
            profiles.append(load_profile(json.loads(entry.read_text()), name=entry.name[:-5]))
    return profiles
