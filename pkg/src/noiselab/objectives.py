"""Loss functions: self-supervised predictor consistency, adaptive metric
defense over a frozen feature pyramid, reconstruction, and the total blend.

The metric defense measures perceptual distances with a fixed, seeded
5-stage conv pyramid (a stand-in for a pretrained feature stack, same
loss algebra, no external weights). The dual-domain losses supervise the
noise predictor against the physical injection parameters in the sRGB
domain and against the additive-variance law under display perturbation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff_core as ad
from .autodiff_core import Tensor
from .defense_nets import NoisePredictorNet, noise_predictor_forward
from .errors import ContractError, ShapeError
from .isp_core import ImagePlane
from .noise_model import (
    NoiseParams,
    NormalizedNoiseParams,
    denormalize_arrays,
    normalize_arrays,
    normalize_params,
)
from .pds_attack import DegradedSample, PerturbedPair

AMD_EPS = 1e-7
ETA_DEFAULT = 0.05
LAMBDA_CON_DEFAULT = 0.5
LAMBDA_MET_DEFAULT = 0.01
EXTRACTOR_SEED_DEFAULT = 1009

_STAGE_PLAN = ((3, 8), (8, 16), (16, 32), (32, 64), (64, 64))


# ------------------------------------------------------- feature extractor

@dataclass
class SurrogateFeatureExtractor:
    """Frozen 5-stage conv pyramid; weights fixed by the construction seed."""

    seed: int
    stages: list[tuple[Tensor, Tensor]]

    def stage_count(self) -> int:
        return len(self.stages)


def _orthogonal_conv(rng: np.random.Generator, cout: int, cin: int, k: int) -> np.ndarray:
    """Rows form an orthonormal set (QR with sign-fixed diagonal), He-gained."""
    flat = rng.standard_normal((cin * k * k, cout))
    q, r = np.linalg.qr(flat)
    q = q * np.sign(np.diag(r))
    gain = np.sqrt(2.0 / (1.0 + 0.2 ** 2))
    return (gain * q.T).reshape(cout, cin, k, k).astype(np.float32)


def make_surrogate_extractor(seed: int = EXTRACTOR_SEED_DEFAULT) -> SurrogateFeatureExtractor:
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
    stages = []
    for cin, cout in _STAGE_PLAN:
        w = Tensor(_orthogonal_conv(rng, cout, cin, 3))
        b = Tensor(np.zeros(cout, dtype=np.float32))
        stages.append((w, b))
    return SurrogateFeatureExtractor(seed=seed, stages=stages)


def surrogate_features(ex: SurrogateFeatureExtractor, img: Tensor) -> list[Tensor]:
    """Deterministic 5-level pyramid, spatial size halving per stage."""
    if img.data.ndim != 4 or img.data.shape[1] != 3:
        raise ShapeError(f"extractor expects (B, 3, H, W), got {img.data.shape}")
    h, w = img.data.shape[2:]
    if h % 32 or w % 32:
        raise ShapeError(f"spatial dims must be divisible by 32, got {(h, w)}")
    feats = []
    x = img
    for wt, bt in ex.stages:
        x = ad.avg_pool(ad.leaky_relu(ad.conv2d(x, wt, bt), 0.2), 2)
        feats.append(x)
    return feats


def perceptual_distance(ex: SurrogateFeatureExtractor, x: Tensor, y: Tensor, stage: int) -> Tensor:
    """Per-element mean L1 distance between stage features of two images."""
    if not 0 <= stage < len(ex.stages):
        raise IndexError(f"stage {stage} out of [0, {len(ex.stages)})")
    if x.data.shape != y.data.shape:
        raise ShapeError(f"shape mismatch {x.data.shape} vs {y.data.shape}")
    fx = surrogate_features(ex, x)[stage]
    fy = surrogate_features(ex, y)[stage]
    return ad.mean_abs_diff(fx, fy)


# ----------------------------------------------------------- dynamic margin

def dynamic_margin_normalized(norm: NormalizedNoiseParams, eta: float) -> float:
    if eta < 0:
        raise ContractError(f"eta must be >= 0, got {eta}")
    return float(eta * np.hypot(norm.k_n, norm.sigma_n))


def dynamic_margin(attack: NoiseParams, eta: float = ETA_DEFAULT) -> float:
    """Exclusion-zone radius: eta times the norm of the normalized attack."""
    if eta < 0:
        raise ContractError(f"eta must be >= 0, got {eta}")
    k_n, sigma_n = normalize_arrays(np.array([attack.k]), np.array([attack.sigma]))
    return float(eta * np.hypot(k_n[0], sigma_n[0]))


# -------------------------------------------------------- adaptive metric

def amd_from_distances(d_normal: list[float], d_att: list[float], margin: float) -> float:
    """Scalar form of the metric: sum_i n_i / (max(a_i - m, 0) + eps)."""
    if len(d_normal) != len(d_att):
        raise ContractError("distance lists must align")
    total = 0.0
    for n, a in zip(d_normal, d_att):
        total += n / (max(a - margin, 0.0) + AMD_EPS)
    return total


def amd_loss_with_features(
    ex: SurrogateFeatureExtractor,
    output: Tensor,
    feats_normal: list[Tensor],
    feats_att: list[Tensor],
    margin: float,
) -> Tensor:
    """Metric loss against precomputed constant anchor/negative pyramids."""
    feats_out = surrogate_features(ex, output)
    if len(feats_normal) != len(feats_out) or len(feats_att) != len(feats_out):
        raise ContractError("feature pyramids must have 5 stages")
    total = None
    for fo, fn, fa in zip(feats_out, feats_normal, feats_att):
        num = ad.mean_abs_diff(fo, fn)
        den_gap = ad.relu(ad.sub(ad.mean_abs_diff(fo, fa), float(margin)))
        term = ad.div(num, ad.add(den_gap, AMD_EPS))
        total = term if total is None else ad.add(total, term)
    return total


def amd_loss(
    ex: SurrogateFeatureExtractor,
    output: Tensor,
    normal: Tensor,
    att: Tensor,
    attack: NoiseParams,
    eta: float = ETA_DEFAULT,
) -> Tensor:
    """Adaptive metric defense: pull toward the clean anchor, push out of
    the margin-widened ball around the attacked image. Gradients reach the
    network only through `output`; the anchor and negative are constants.
    """
    m = dynamic_margin(attack, eta)
    feats_normal = [f.detach() for f in surrogate_features(ex, normal.detach())]
    feats_att = [f.detach() for f in surrogate_features(ex, att.detach())]
    return amd_loss_with_features(ex, output, feats_normal, feats_att, m)


# ------------------------------------------------------- dual-domain losses

def image_batch(planes: list[ImagePlane]) -> Tensor:
    """Stack sRGB planes into a predictor-ready (B, 3, H, W) tensor."""
    if not planes:
        raise ContractError("need at least one image")
    arrs = [np.transpose(p.data, (2, 0, 1)).astype(np.float32) for p in planes]
    return Tensor(np.stack(arrs, axis=0))


def _squared_error(pred: Tensor, target: np.ndarray) -> Tensor:
    """Sum of squared components, averaged over the batch axis."""
    if pred.data.shape != target.shape:
        raise ShapeError(f"prediction {pred.data.shape} vs target {target.shape}")
    diff = ad.sub(pred, Tensor(target.astype(np.float32)))
    per_batch = 1.0 / pred.data.shape[0]
    return ad.mul(ad.reduce_sum(ad.mul(diff, diff)), per_batch)


def np_low_targets(pred_orig: np.ndarray, sigma_per: np.ndarray) -> np.ndarray:
    """Additive-variance targets: keep k, grow sigma to sqrt(s^2 + s_per^2)."""
    k, sigma = denormalize_arrays(pred_orig[:, 0], pred_orig[:, 1])
    sigma_new = np.sqrt(sigma ** 2 + np.asarray(sigma_per, dtype=np.float64) ** 2)
    k_n, sigma_n = normalize_arrays(k, sigma_new)
    return np.stack([k_n, sigma_n], axis=1)


def dual_domain_loss_batched(
    net: NoisePredictorNet,
    att_imgs: Tensor,
    att_targets: np.ndarray,
    orig_imgs: Tensor,
    pert_imgs: Tensor,
    sigma_per: np.ndarray,
) -> tuple[Tensor, Tensor]:
    """Batched (np_normal, np_low); the original-image branch is constant.

    The attacked and perturbed stacks share one forward pass (per-sample
    results are batch-independent, so this is exact); the original-image
    prediction runs untaped since its branch carries no gradient.
    """
    b = att_imgs.data.shape[0]
    with ad.suspend_tape():
        pred_orig = noise_predictor_forward(net, orig_imgs)
    low_targets = np_low_targets(pred_orig.data.astype(np.float64), sigma_per)
    stacked = Tensor(np.concatenate([att_imgs.data, pert_imgs.data], axis=0))
    pred = noise_predictor_forward(net, stacked)
    targets = np.concatenate([att_targets, low_targets], axis=0)
    if pred.data.shape != targets.shape:
        raise ShapeError(f"prediction {pred.data.shape} vs target {targets.shape}")
    diff = ad.sub(pred, Tensor(targets.astype(np.float32)))
    sq = ad.mul(diff, diff)
    top = np.zeros((2 * b, 2), dtype=np.float32)
    top[:b] = 1.0
    np_normal = ad.mul(ad.reduce_sum(ad.mul(sq, Tensor(top))), 1.0 / b)
    np_low = ad.mul(ad.reduce_sum(ad.mul(sq, Tensor(1.0 - top))), 1.0 / b)
    return np_normal, np_low


def dual_domain_loss(
    net: NoisePredictorNet,
    att_sample: DegradedSample,
    pair: PerturbedPair,
) -> tuple[Tensor, Tensor]:
    """Single-sample wrapper around the batched form."""
    norm = normalize_params(att_sample.attack)
    target = np.array([[norm.k_n, norm.sigma_n]], dtype=np.float64)
    return dual_domain_loss_batched(
        net,
        image_batch([att_sample.image]),
        target,
        image_batch([pair.original]),
        image_batch([pair.perturbed]),
        np.array([pair.sigma_per]),
    )


def consist_loss(np_normal, np_low) -> Tensor:
    """Predictor alignment: plain sum of the two domain losses."""
    a = np_normal if isinstance(np_normal, Tensor) else Tensor(np.asarray(np_normal))
    b = np_low if isinstance(np_low, Tensor) else Tensor(np.asarray(np_low))
    return ad.add(a, b)


def reconstruction_loss(output: Tensor, normal: Tensor) -> Tensor:
    """Mean absolute error against the clean target."""
    if output.data.shape != normal.data.shape:
        raise ShapeError(f"shape mismatch {output.data.shape} vs {normal.data.shape}")
    return ad.mean_abs_diff(output, normal)


# --------------------------------------------------------------- total loss

@dataclass
class LossReport:
    total: Tensor
    rec: float
    consist: float
    np_normal: float
    np_low: float
    metric: float
    margin_used: float
    lambda_con: float
    lambda_met: float

    def identity_gap(self) -> float:
        """|total - (rec + lc*consist + lm*metric)|, should be ~0."""
        blend = self.rec + self.lambda_con * self.consist + self.lambda_met * self.metric
        return abs(float(self.total.data) - blend)

    def as_dict(self) -> dict:
        return {
            "total": float(self.total.data),
            "rec": self.rec,
            "consist": self.consist,
            "np_normal": self.np_normal,
            "np_low": self.np_low,
            "metric": self.metric,
            "margin_used": self.margin_used,
        }


def total_loss(
    rec,
    consist,
    metric,
    lambda_con: float = LAMBDA_CON_DEFAULT,
    lambda_met: float = LAMBDA_MET_DEFAULT,
    np_normal: float = 0.0,
    np_low: float = 0.0,
    margin_used: float = 0.0,
) -> LossReport:
    """Weighted blend of the three loss families, with components logged."""
    rec_t = rec if isinstance(rec, Tensor) else Tensor(np.asarray(float(rec)))
    con_t = consist if isinstance(consist, Tensor) else Tensor(np.asarray(float(consist)))
    met_t = metric if isinstance(metric, Tensor) else Tensor(np.asarray(float(metric)))
    for name, t in (("rec", rec_t), ("consist", con_t), ("metric", met_t)):
        if not np.isfinite(t.data).all():
            raise ContractError(f"{name} loss is not finite")
    total = ad.add(rec_t, ad.add(ad.mul(con_t, lambda_con), ad.mul(met_t, lambda_met)))
    return LossReport(
        total=total,
        rec=float(rec_t.data),
        consist=float(con_t.data),
        np_normal=float(np_normal),
        np_low=float(np_low),
        metric=float(met_t.data),
        margin_used=float(margin_used),
        lambda_con=float(lambda_con),
        lambda_met=float(lambda_met),
    )
