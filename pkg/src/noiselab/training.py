"""Desk-scale training: Adam, synthetic patch data, and the two recipes.

Everything here runs on 64x64 patches in seconds-to-minutes on a single
core. Datasets regenerate bit-exactly from their seed; training is fully
deterministic given (seed, data, config); checkpoints resume bit-exactly
because parameters and moments live in float32 end to end.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage, stats

from . import autodiff_core as ad
from . import objectives as ob
from .autodiff_core import Tensor
from .defense_nets import (
    DaMoeBlock,
    MoeConfig,
    MoeMode,
    NoisePredictorNet,
    PredictorConfig,
    da_moe_forward,
    make_da_moe_block,
    make_noise_predictor,
    noise_predictor_forward,
)
from .errors import ContractError, GradientFault, RejectedInputError
from .isp_core import Domain, GammaDirection, ImagePlane, gamma_transfer
from .noise_model import NoiseParams, make_stream, normalize_arrays
from .pds_attack import (
    DegradedSample,
    PerturbedPair,
    perturb_lowlight,
    sample_profile,
    synthesize_attack,
)

DARKEN_LO = 0.05
DARKEN_HI = 0.3


# ----------------------------------------------------------------- optimizer

@dataclass
class OptimizerState:
    """Adam accumulators, float32 throughout for bit-exact resume."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def make_adam(params: dict[str, Tensor], lr: float = 1e-3) -> OptimizerState:
    state = OptimizerState(lr=lr)
    for name, t in params.items():
        state.m[name] = np.zeros(t.data.shape, dtype=np.float32)
        state.v[name] = np.zeros(t.data.shape, dtype=np.float32)
    return state


def adam_step(state: OptimizerState, params: dict[str, Tensor]) -> None:
    """Bias-corrected moment update, reading each parameter's .grad."""
    state.step_count += 1
    t = state.step_count
    b1, b2 = np.float32(state.beta1), np.float32(state.beta2)
    lr = np.float32(state.lr)
    eps = np.float32(state.eps)
    c1 = np.float32(1.0 - state.beta1 ** t)
    c2 = np.float32(1.0 - state.beta2 ** t)
    for name, p in params.items():
        g = p.grad
        if g is None:
            raise ContractError(f"parameter '{name}' has no gradient")
        if not np.isfinite(g).all():
            raise GradientFault(f"non-finite gradient for parameter '{name}'")
        g32 = g.astype(np.float32)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (np.float32(1.0) - b1) * g32
        v *= b2
        v += (np.float32(1.0) - b2) * g32 * g32
        update = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        p.data -= update


# ------------------------------------------------------------------- dataset

@dataclass(frozen=True)
class ToyItem:
    clean: ImagePlane
    lowlight: ImagePlane
    att_sample: DegradedSample
    pair: PerturbedPair
    lowlight_attack: NoiseParams
    brightness: float
    seed: int


@dataclass
class ToyDataset:
    items: list[ToyItem]
    seed: int
    patch: int = 64
    attack_domain: str = "pds"

    def __len__(self) -> int:
        return len(self.items)


def _texture(rng: np.random.Generator, kind: int, hw: int) -> np.ndarray:
    """Procedural clean patch, (H, W, 3) float64.

    All three families are smooth (noise stays the only high-frequency
    content), and a shadow wedge drives part of every patch near black:
    read noise is only identifiable where shot noise k*I stops
    dominating, so each patch must expose genuinely dark pixels next to
    bright ones.
    """
    y, x = np.mgrid[0:hw, 0:hw] / (hw - 1.0)
    if kind == 0:  # oriented bright ramps
        img = np.empty((hw, hw, 3))
        for c in range(3):
            theta = rng.uniform(0, 2 * np.pi)
            t = np.cos(theta) * x + np.sin(theta) * y
            t = (t - t.min()) / max(t.max() - t.min(), 1e-9)
            img[..., c] = 0.15 + (0.7 + rng.uniform(-0.05, 0.1)) * t
    elif kind == 1:  # low-frequency sinusoidal shading
        img = np.empty((hw, hw, 3))
        for c in range(3):
            fx, fy = rng.uniform(0.4, 1.2, size=2)
            phase = rng.uniform(0, 2 * np.pi)
            wave = np.sin(2 * np.pi * (fx * x + fy * y) + phase)
            img[..., c] = 0.5 + 0.42 * wave
    else:  # broad blurred blobs
        smooth = rng.uniform(4.0, 8.0)
        img = ndimage.gaussian_filter(rng.random((hw, hw, 3)), sigma=(smooth, smooth, 0))
        lo, hi = img.min(), img.max()
        img = 0.08 + 0.85 * (img - lo) / max(hi - lo, 1e-9)
    theta = rng.uniform(0, 2 * np.pi)
    t = np.cos(theta) * x + np.sin(theta) * y
    t = (t - t.min()) / max(t.max() - t.min(), 1e-9)
    floor = rng.uniform(0.004, 0.02)
    # ~1/3 of the wedge sits at the floor, then a smooth rise to full level.
    shade = floor + (1.0 - floor) * np.clip((t - 0.35) / 0.45, 0.0, 1.0) ** 2
    img = img * shade[..., None]
    return np.clip(img, 0.002, 0.95)


def _darken(img: ImagePlane, u: float, gamma: float) -> ImagePlane:
    """Scale brightness by u in the linear domain, re-encode to sRGB."""
    linear = gamma_transfer(img, gamma, GammaDirection.EXPAND)
    scaled = ImagePlane(linear.data * u, linear.domain)
    return gamma_transfer(scaled, gamma, GammaDirection.COMPRESS)


def synth_toy_dataset(
    n: int,
    seed: int,
    patch: int = 64,
    attack_domain: str = "pds",
) -> ToyDataset:
    """Procedural tuples; each item regenerates from (seed, index) alone.

    attack_domain "pds" runs the physics pipeline on the darkened patch;
    "srgb" adds white Gaussian noise of matched scale directly in sRGB
    (the ablation arm that skips the RAW-domain model).
    """
    if n < 1:
        raise RejectedInputError(f"need n >= 1, got {n}")
    if attack_domain not in ("pds", "srgb"):
        raise RejectedInputError(f"unknown attack domain '{attack_domain}'")
    items = []
    for i in range(n):
        rng = make_stream(seed, index=i)
        clean = ImagePlane(_texture(rng, i % 3, patch), Domain.SRGB_NONLINEAR)
        profile = sample_profile(rng)
        u = float(rng.uniform(DARKEN_LO, DARKEN_HI))
        dark = _darken(clean, u, profile.gamma)
        low_attack = synthesize_attack(dark, profile, None, rng, seed=i)
        if attack_domain == "pds":
            lowlight = low_attack.image
        else:
            # Matched energy: white Gaussian at the std the physics attack
            # actually produced on this patch, so the arms differ only in
            # noise structure (signal dependence, Bayer correlation).
            scale = float(np.std(low_attack.image.data - dark.data))
            noisy = dark.data + rng.normal(0.0, scale, size=dark.data.shape)
            lowlight = ImagePlane(np.clip(noisy, 0.0, 1.0), Domain.SRGB_NONLINEAR)
        att_sample = synthesize_attack(clean, profile, None, rng, seed=i)
        pair = perturb_lowlight(lowlight, None, profile, rng, seed=i)
        items.append(ToyItem(
            clean=clean,
            lowlight=lowlight,
            att_sample=att_sample,
            pair=pair,
            lowlight_attack=low_attack.attack,
            brightness=u,
            seed=i,
        ))
    return ToyDataset(items=items, seed=seed, patch=patch, attack_domain=attack_domain)


def dataset_digest(ds: ToyDataset) -> str:
    """Content hash over every array and parameter in the dataset."""
    h = hashlib.sha256()
    for it in ds.items:
        for arr in (it.clean.data, it.lowlight.data, it.att_sample.image.data,
                    it.pair.original.data, it.pair.perturbed.data):
            h.update(np.ascontiguousarray(arr).tobytes())
        h.update(np.array([
            it.att_sample.attack.k, it.att_sample.attack.sigma,
            it.lowlight_attack.k, it.lowlight_attack.sigma,
            it.pair.sigma_per, it.brightness, float(it.seed),
        ]).tobytes())
    return h.hexdigest()


def _shuffle_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, 7, epoch]))


# ---------------------------------------------------------- predictor recipe

@dataclass
class PredictorTrainReport:
    epoch_losses: list[float]
    spearman_sigma: float
    spearman_k: float
    holdout_mse: float


def _predictor_arrays(items: list[ToyItem]):
    att = ob.image_batch([it.att_sample.image for it in items])
    k = np.array([it.att_sample.attack.k for it in items])
    sigma = np.array([it.att_sample.attack.sigma for it in items])
    k_n, sigma_n = normalize_arrays(k, sigma)
    targets = np.stack([k_n, sigma_n], axis=1)
    orig = ob.image_batch([it.pair.original for it in items])
    pert = ob.image_batch([it.pair.perturbed for it in items])
    sigma_per = np.array([it.pair.sigma_per for it in items])
    return att, targets, orig, pert, sigma_per, k, sigma


def predictor_holdout_metrics(net: NoisePredictorNet, items: list[ToyItem]) -> tuple[float, float, float]:
    """(spearman_sigma, spearman_k, mse) on the normal-light attack task."""
    att, targets, _, _, _, k, sigma = _predictor_arrays(items)
    pred = noise_predictor_forward(net, att).data
    rho_sigma = float(stats.spearmanr(pred[:, 1], sigma).statistic)
    rho_k = float(stats.spearmanr(pred[:, 0], k).statistic)
    mse = float(np.mean((pred - targets) ** 2))
    return rho_sigma, rho_k, mse


def train_noise_predictor(
    net: NoisePredictorNet,
    data: ToyDataset,
    epochs: int,
    lr: float = 1e-3,
    batch_size: int = 16,
    seed: int = 0,
    holdout: int = 20,
    include_normal: bool = True,
    include_low: bool = True,
    optimizer: OptimizerState | None = None,
    start_epoch: int = 0,
    log_fn=None,
) -> PredictorTrainReport:
    """Self-supervised predictor training on the consistency objective."""
    if len(data.items) <= holdout:
        raise RejectedInputError("dataset smaller than the holdout split")
    if not (include_normal or include_low):
        raise ContractError("at least one loss branch must stay enabled")
    train_items = data.items[:-holdout] if holdout else data.items
    held_items = data.items[-holdout:] if holdout else []
    att, targets, orig, pert, sigma_per, _, _ = _predictor_arrays(train_items)
    n = len(train_items)
    opt = optimizer if optimizer is not None else make_adam(net.params, lr)
    epoch_losses = []
    for epoch in range(start_epoch, start_epoch + epochs):
        perm = _shuffle_rng(seed, epoch).permutation(n)
        total = 0.0
        for lo in range(0, n, batch_size):
            idx = perm[lo:lo + batch_size]
            with ad.tape() as tp:
                for t in net.params.values():
                    tp.watch(t)
                np_normal, np_low = ob.dual_domain_loss_batched(
                    net,
                    Tensor(att.data[idx]),
                    targets[idx],
                    Tensor(orig.data[idx]),
                    Tensor(pert.data[idx]),
                    sigma_per[idx],
                )
                zero = Tensor(np.asarray(0.0, dtype=np.float32))
                loss = ob.consist_loss(
                    np_normal if include_normal else zero,
                    np_low if include_low else zero,
                )
                if not np.isfinite(loss.data):
                    raise GradientFault(f"training diverged at epoch {epoch}")
            tp.backward(loss)
            adam_step(opt, net.params)
            total += float(loss.data) * len(idx)
        epoch_losses.append(total / n)
        if log_fn is not None:
            log_fn(epoch, epoch_losses[-1])
    if held_items:
        rho_sigma, rho_k, mse = predictor_holdout_metrics(net, held_items)
    else:
        rho_sigma = rho_k = mse = float("nan")
    return PredictorTrainReport(
        epoch_losses=epoch_losses,
        spearman_sigma=rho_sigma,
        spearman_k=rho_k,
        holdout_mse=mse,
    )


# ------------------------------------------------------------ defense system

@dataclass(frozen=True)
class DefenseConfig:
    enc_widths: tuple[int, int] = (8, 16)
    predictor: PredictorConfig = field(default_factory=PredictorConfig)
    moe: MoeConfig = field(default_factory=MoeConfig)
    freeze_predictor: bool = False
    eta: float = ob.ETA_DEFAULT
    lambda_con: float = ob.LAMBDA_CON_DEFAULT
    lambda_met: float = ob.LAMBDA_MET_DEFAULT
    extractor_seed: int = ob.EXTRACTOR_SEED_DEFAULT


@dataclass
class DefenseSystem:
    """Toy 2-level U-Net with MoE insertions plus the sentinel predictor.

    Layout: enc1 -> pool -> enc2 -> pool -> bottleneck conv -> MoE
    (GAUSSIAN_ONLY) -> up -> skip(enc2) -> dec2 -> MoE (DUAL) -> up ->
    skip(enc1) -> dec1 -> MoE (DUAL) -> head, with a global residual.
    """

    config: DefenseConfig
    predictor: NoisePredictorNet
    backbone: dict[str, Tensor]
    moe_bott: DaMoeBlock
    moe_dec2: DaMoeBlock
    moe_dec1: DaMoeBlock

    def backbone_parameters(self) -> dict[str, Tensor]:
        out = dict(self.backbone)
        out.update({f"moe_bott.{k}": v for k, v in self.moe_bott.parameters().items()})
        out.update({f"moe_dec2.{k}": v for k, v in self.moe_dec2.parameters().items()})
        out.update({f"moe_dec1.{k}": v for k, v in self.moe_dec1.parameters().items()})
        return out

    def trainable_parameters(self) -> dict[str, Tensor]:
        out = self.backbone_parameters()
        if not self.config.freeze_predictor:
            out.update({f"np.{k}": v for k, v in self.predictor.params.items()})
        return out

    def all_parameters(self) -> dict[str, Tensor]:
        out = self.backbone_parameters()
        out.update({f"np.{k}": v for k, v in self.predictor.params.items()})
        return out


def make_defense_system(config: DefenseConfig | None = None, seed: int = 0) -> DefenseSystem:
    cfg = config or DefenseConfig()
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
    w1, w2 = cfg.enc_widths

    def he(cout, cin, k):
        std = np.sqrt(2.0 / (cin * k * k))
        return Tensor((rng.standard_normal((cout, cin, k, k)) * std).astype(np.float32),
                      requires_grad=True)

    def zeros(c):
        return Tensor(np.zeros(c, dtype=np.float32), requires_grad=True)

    backbone = {
        "enc1.w": he(w1, 3, 3), "enc1.b": zeros(w1),
        "enc2.w": he(w2, w1, 3), "enc2.b": zeros(w2),
        "bott.w": he(w2, w2, 3), "bott.b": zeros(w2),
        "dec2.w": he(w1, 2 * w2, 3), "dec2.b": zeros(w1),
        "dec1.w": he(w1, 2 * w1, 3), "dec1.b": zeros(w1),
        "head.w": he(3, w1, 3), "head.b": zeros(3),
    }
    sub = rng.integers(0, 2 ** 31 - 1, size=4)
    return DefenseSystem(
        config=cfg,
        predictor=make_noise_predictor(cfg.predictor, seed=int(sub[0])),
        backbone=backbone,
        moe_bott=make_da_moe_block(w2, MoeMode.GAUSSIAN_ONLY, cfg.moe, seed=int(sub[1])),
        moe_dec2=make_da_moe_block(w1, MoeMode.DUAL, cfg.moe, seed=int(sub[2])),
        moe_dec1=make_da_moe_block(w1, MoeMode.DUAL, cfg.moe, seed=int(sub[3])),
    )


def defense_forward(system: DefenseSystem, img: Tensor) -> tuple[Tensor, Tensor]:
    """Restore an attacked patch; returns (output, predicted params)."""
    p = system.backbone
    s = 0.2
    pred = noise_predictor_forward(system.predictor, img)
    cond = pred.detach() if system.config.freeze_predictor else pred
    e1 = ad.leaky_relu(ad.conv2d(img, p["enc1.w"], p["enc1.b"]), s)
    e2 = ad.leaky_relu(ad.conv2d(ad.avg_pool(e1, 2), p["enc2.w"], p["enc2.b"]), s)
    b = ad.leaky_relu(ad.conv2d(ad.avg_pool(e2, 2), p["bott.w"], p["bott.b"]), s)
    b = da_moe_forward(system.moe_bott, b, cond)
    u2 = ad.concat_channels([ad.upsample_nearest(b, 2), e2])
    d2 = ad.leaky_relu(ad.conv2d(u2, p["dec2.w"], p["dec2.b"]), s)
    d2 = da_moe_forward(system.moe_dec2, d2, cond)
    u1 = ad.concat_channels([ad.upsample_nearest(d2, 2), e1])
    d1 = ad.leaky_relu(ad.conv2d(u1, p["dec1.w"], p["dec1.b"]), s)
    d1 = da_moe_forward(system.moe_dec1, d1, cond)
    out = ad.add(img, ad.conv2d(d1, p["head.w"], p["head.b"]))
    return out, pred


# ------------------------------------------------------------ defense recipe

@dataclass
class DefenseTrainReport:
    steps: list[dict]
    holdout_mae: float
    dead_params: list[str]


def defense_holdout_mae(system: DefenseSystem, items: list[ToyItem]) -> float:
    """Mean absolute restoration error against clean targets."""
    total = 0.0
    for it in items:
        img = ob.image_batch([it.lowlight])
        out, _ = defense_forward(system, img)
        target = np.transpose(it.clean.data, (2, 0, 1))[None].astype(np.float32)
        total += float(np.mean(np.abs(out.data - target)))
    return total / len(items)


def train_defense_toy(
    system: DefenseSystem,
    data: ToyDataset,
    epochs: int,
    lr: float = 1e-3,
    seed: int = 0,
    holdout: int = 8,
    use_metric: bool = True,
    use_consist: bool = True,
    extractor: ob.SurrogateFeatureExtractor | None = None,
    optimizer: OptimizerState | None = None,
    start_epoch: int = 0,
    warmup_epochs: int = 0,
    metric_delay: int = 0,
    log_fn=None,
) -> DefenseTrainReport:
    """Joint toy training with the total objective, one item per step.

    With warmup_epochs > 0 and the consistency loss enabled, the predictor
    is first trained alone on the dual-domain objective so the conditioning
    signal is informative before the backbone starts fitting to it. Warmup
    belongs to epoch zero: resumed runs (start_epoch > 0) skip it.

    metric_delay holds the metric loss out of the objective for that many
    epochs (absolute epoch index, so resumed runs continue the schedule):
    the hinge on the distance to the degraded input is saturated until the
    backbone has learned to brighten, and a saturated hinge contributes a
    near-constant spike rather than a usable gradient.
    """
    if len(data.items) <= holdout:
        raise RejectedInputError("dataset smaller than the holdout split")
    cfg = system.config
    train_items = data.items[:-holdout] if holdout else data.items
    held_items = data.items[-holdout:] if holdout else []
    ex = extractor if extractor is not None else ob.make_surrogate_extractor(cfg.extractor_seed)
    params = system.trainable_parameters()
    opt = optimizer if optimizer is not None else make_adam(params, lr)

    # Constant per-item tensors and anchor/negative feature pyramids. The
    # metric negative is the degraded lowlight input itself: the output must
    # clear the dynamic margin away from what it started as. Until it has
    # learned to brighten, that hinge is saturated, so the metric term only
    # joins the objective after metric_delay epochs.
    inputs = [ob.image_batch([it.lowlight]) for it in train_items]
    targets = [ob.image_batch([it.clean]) for it in train_items]
    att_imgs = [ob.image_batch([it.att_sample.image]) for it in train_items]
    margins = [ob.dynamic_margin(it.lowlight_attack, cfg.eta) for it in train_items]
    feats_normal = [[f.detach() for f in ob.surrogate_features(ex, t)] for t in targets]
    feats_att = [[f.detach() for f in ob.surrogate_features(ex, i)] for i in inputs]
    att_targets = []
    for it in train_items:
        k_n, s_n = normalize_arrays(np.array([it.att_sample.attack.k]),
                                    np.array([it.att_sample.attack.sigma]))
        att_targets.append(np.stack([k_n, s_n], axis=1))
    orig_imgs = [ob.image_batch([it.pair.original]) for it in train_items]
    pert_imgs = [ob.image_batch([it.pair.perturbed]) for it in train_items]
    sigma_pers = [np.array([it.pair.sigma_per]) for it in train_items]

    if start_epoch == 0 and use_consist and warmup_epochs > 0:
        np_params = {f"np.{k}": v for k, v in system.predictor.params.items()}
        warm_opt = make_adam(np_params, lr)
        for epoch in range(warmup_epochs):
            perm = np.random.default_rng(
                np.random.SeedSequence([seed, 11, epoch])).permutation(len(train_items))
            for j in perm:
                with ad.tape() as tp:
                    for t in np_params.values():
                        tp.watch(t)
                    np_n, np_l = ob.dual_domain_loss_batched(
                        system.predictor, att_imgs[j], att_targets[j],
                        orig_imgs[j], pert_imgs[j], sigma_pers[j])
                    consist = ob.consist_loss(np_n, np_l)
                if not np.isfinite(consist.data):
                    raise GradientFault(f"predictor warmup diverged at epoch {epoch}")
                tp.backward(consist)
                adam_step(warm_opt, np_params)

    steps: list[dict] = []
    seen_grad = {name: False for name in params}
    n = len(train_items)
    for epoch in range(start_epoch, start_epoch + epochs):
        perm = _shuffle_rng(seed, epoch).permutation(n)
        for j in perm:
            with ad.tape() as tp:
                for t in params.values():
                    tp.watch(t)
                out, _ = defense_forward(system, inputs[j])
                rec = ob.reconstruction_loss(out, targets[j])
                if use_consist:
                    np_n, np_l = ob.dual_domain_loss_batched(
                        system.predictor, att_imgs[j], att_targets[j],
                        orig_imgs[j], pert_imgs[j], sigma_pers[j])
                    consist = ob.consist_loss(np_n, np_l)
                    np_n_v, np_l_v = float(np_n.data), float(np_l.data)
                else:
                    consist = Tensor(np.asarray(0.0, dtype=np.float32))
                    np_n_v = np_l_v = 0.0
                metric_on = use_metric and epoch >= metric_delay
                if metric_on:
                    metric = ob.amd_loss_with_features(
                        ex, out, feats_normal[j], feats_att[j], margins[j])
                else:
                    metric = Tensor(np.asarray(0.0, dtype=np.float32))
                report = ob.total_loss(
                    rec, consist, metric,
                    lambda_con=cfg.lambda_con if use_consist else 0.0,
                    lambda_met=cfg.lambda_met if metric_on else 0.0,
                    np_normal=np_n_v, np_low=np_l_v, margin_used=margins[j])
                if not np.isfinite(report.total.data):
                    raise GradientFault(f"defense training diverged at epoch {epoch}")
            tp.backward(report.total)
            for name, t in params.items():
                if not seen_grad[name] and t.grad is not None and np.any(t.grad != 0):
                    seen_grad[name] = True
            adam_step(opt, params)
            steps.append(report.as_dict())
        if log_fn is not None:
            epoch_steps = steps[-n:]
            log_fn(epoch, float(np.mean([s["total"] for s in epoch_steps])))
    dead = sorted(name for name, seen in seen_grad.items() if not seen)
    mae = defense_holdout_mae(system, held_items) if held_items else float("nan")
    return DefenseTrainReport(steps=steps, holdout_mae=mae, dead_params=dead)


# ----------------------------------------------------------------- persisting

def save_training_state(path, params: dict[str, Tensor], opt: OptimizerState,
                        meta: dict | None = None) -> None:
    """One checkpoint holding parameters and optimizer moments."""
    tensors: dict[str, np.ndarray] = {}
    for name, t in params.items():
        tensors[f"p.{name}"] = t.data
        tensors[f"m.{name}"] = opt.m[name]
        tensors[f"v.{name}"] = opt.v[name]
    payload = dict(meta or {})
    payload.update({
        "step_count": opt.step_count,
        "lr": opt.lr,
        "beta1": opt.beta1,
        "beta2": opt.beta2,
        "eps": opt.eps,
    })
    ad.save_checkpoint(path, tensors, meta=payload)


def load_training_state(path, params: dict[str, Tensor]) -> tuple[OptimizerState, dict]:
    """Restore parameters in place; returns the optimizer and extra meta."""
    tensors, meta = ad.load_checkpoint(path)
    opt = OptimizerState(
        lr=float(meta["lr"]),
        beta1=float(meta["beta1"]),
        beta2=float(meta["beta2"]),
        eps=float(meta["eps"]),
        step_count=int(meta["step_count"]),
    )
    for name, t in params.items():
        key = f"p.{name}"
        if key not in tensors:
            raise ContractError(f"checkpoint is missing parameter '{name}'")
        if tensors[key].shape != t.data.shape:
            raise ContractError(f"shape mismatch for '{name}'")
        t.data = tensors[key].astype(np.float32)
        opt.m[name] = tensors[f"m.{name}"].astype(np.float32)
        opt.v[name] = tensors[f"v.{name}"].astype(np.float32)
    return opt, meta
