"""Defense networks: noise predictor, SFT modulation, and the 2-expert MoE.

Three small architectures over the tape engine. The predictor is a
sentinel that regresses normalized noise parameters from an sRGB image;
the SFT layer conditions feature maps on those parameters through a
learned affine modulation; the degradation-aware MoE routes features
through a Gaussian expert (signal-independent path) and a Poisson expert
(signal-dependent path, SFT-conditioned) blended by a softmax gate.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import autodiff_core as ad
from .autodiff_core import Tensor
from .errors import ContractError, ShapeError
from .noise_model import NormalizedNoiseParams


class MoeMode(Enum):
    DUAL = "dual"
    GAUSSIAN_ONLY = "gaussian_only"


class ExpertKind(Enum):
    GAUSSIAN = "gaussian"
    POISSON = "poisson"


# ------------------------------------------------------------- configuration

@dataclass(frozen=True)
class PredictorConfig:
    """Channel plan for the noise predictor; small by design."""

    widths: tuple[int, int, int] = (16, 32, 64)
    mlp_hidden: int = 32
    leaky_slope: float = 0.2


@dataclass(frozen=True)
class SftConfig:
    cond_latent: int = 16
    leaky_slope: float = 0.2


@dataclass(frozen=True)
class MoeConfig:
    gate_hidden: int = 16
    sft: SftConfig = field(default_factory=SftConfig)
    leaky_slope: float = 0.2


# ------------------------------------------------------------ initialization

def _he_conv(rng: np.random.Generator, cout: int, cin: int, k: int) -> np.ndarray:
    std = np.sqrt(2.0 / (cin * k * k))
    return (rng.standard_normal((cout, cin, k, k)) * std).astype(np.float32)


def _he_affine(rng: np.random.Generator, dout: int, din: int) -> np.ndarray:
    std = np.sqrt(2.0 / din)
    return (rng.standard_normal((dout, din)) * std).astype(np.float32)


def _param(data: np.ndarray) -> Tensor:
    return Tensor(np.ascontiguousarray(data, dtype=np.float32), requires_grad=True)


def _zeros(*shape: int) -> np.ndarray:
    return np.zeros(shape, dtype=np.float32)


def _net_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))


# ------------------------------------------------------------- param helpers

def _params_as_tensor(params, batch: int) -> Tensor:
    """Accept NormalizedNoiseParams or a (B, 2) tensor; always return (B, 2)."""
    if isinstance(params, NormalizedNoiseParams):
        row = np.array([[params.k_n, params.sigma_n]], dtype=np.float32)
        return Tensor(np.repeat(row, batch, axis=0))
    if isinstance(params, Tensor):
        if params.data.ndim != 2 or params.data.shape[1] != 2:
            raise ShapeError(f"conditioning tensor must be (B, 2), got {params.data.shape}")
        if params.data.shape[0] != batch:
            raise ShapeError(f"conditioning batch {params.data.shape[0]} != feature batch {batch}")
        return params
    raise ContractError(f"unsupported conditioning type {type(params).__name__}")


def _broadcast_hw(latent: Tensor, h: int, w: int) -> Tensor:
    """(B, C) -> (B, C, H, W) by constant spatial tiling, grad-aware."""
    b, c = latent.data.shape
    col = ad.reshape(latent, (b, c, 1, 1))
    ones = Tensor(np.ones((1, 1, h, w), dtype=latent.data.dtype))
    return ad.mul(col, ones)


# ------------------------------------------------------------ noise predictor

@dataclass
class NoisePredictorNet:
    """Sentinel regressor: sRGB image -> normalized (k, sigma) in (0,1)^2."""

    config: PredictorConfig
    params: dict[str, Tensor]

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def param_count(self) -> int:
        return int(sum(t.data.size for t in self.params.values()))


def make_noise_predictor(config: PredictorConfig | None = None, seed: int = 0) -> NoisePredictorNet:
    cfg = config or PredictorConfig()
    rng = _net_rng(seed)
    w1, w2, w3 = cfg.widths
    p = {
        "conv1.w": _param(_he_conv(rng, w1, 3, 3)),
        "conv1.b": _param(_zeros(w1)),
        "conv2.w": _param(_he_conv(rng, w2, w1, 3)),
        "conv2.b": _param(_zeros(w2)),
        "conv3.w": _param(_he_conv(rng, w3, w2, 3)),
        "conv3.b": _param(_zeros(w3)),
        "mlp1.w": _param(_he_affine(rng, cfg.mlp_hidden, w3)),
        "mlp1.b": _param(_zeros(cfg.mlp_hidden)),
        "mlp2.w": _param(_he_affine(rng, 2, cfg.mlp_hidden)),
        "mlp2.b": _param(_zeros(2)),
    }
    net = NoisePredictorNet(config=cfg, params=p)
    if net.param_count() >= 100_000:
        raise ContractError(f"predictor exceeds the sentinel budget: {net.param_count()} params")
    return net


def noise_predictor_forward(net: NoisePredictorNet, img: Tensor) -> Tensor:
    """conv-LeakyReLU x3 -> global average pool -> MLP -> sigmoid, (B, 2)."""
    if img.data.ndim != 4 or img.data.shape[1] != 3:
        raise ShapeError(f"predictor expects (B, 3, H, W), got {img.data.shape}")
    s = net.config.leaky_slope
    p = net.params
    h = ad.leaky_relu(ad.conv2d(img, p["conv1.w"], p["conv1.b"]), s)
    h = ad.leaky_relu(ad.conv2d(h, p["conv2.w"], p["conv2.b"]), s)
    h = ad.leaky_relu(ad.conv2d(h, p["conv3.w"], p["conv3.b"]), s)
    h = ad.global_avg_pool(h)
    h = ad.reshape(h, (h.data.shape[0], h.data.shape[1]))
    h = ad.leaky_relu(ad.affine(h, p["mlp1.w"], p["mlp1.b"]), s)
    h = ad.affine(h, p["mlp2.w"], p["mlp2.b"])
    return ad.sigmoid(h)


def predicted_params(out: Tensor) -> list[NormalizedNoiseParams]:
    """Freeze a (B, 2) predictor output into per-item parameter pairs."""
    if out.data.ndim != 2 or out.data.shape[1] != 2:
        raise ShapeError(f"expected (B, 2), got {out.data.shape}")
    return [NormalizedNoiseParams(k_n=float(r[0]), sigma_n=float(r[1])) for r in out.data]


# ------------------------------------------------------------------ SFT layer

@dataclass
class SftLayer:
    """Parameter-conditioned feature modulation: (1 + scale) * F + shift."""

    channels: int
    config: SftConfig
    params: dict[str, Tensor]

    def parameters(self) -> dict[str, Tensor]:
        return self.params


def make_sft_layer(channels: int, config: SftConfig | None = None, seed: int = 0) -> SftLayer:
    cfg = config or SftConfig()
    rng = _net_rng(seed)
    lat = cfg.cond_latent
    p = {
        "cond.w": _param(_he_affine(rng, lat, 2)),
        "cond.b": _param(_zeros(lat)),
        "fuse.w": _param(_he_conv(rng, channels, channels + lat, 3)),
        "fuse.b": _param(_zeros(channels)),
        # Zero heads make the layer an exact identity until trained.
        "scale.w": _param(_zeros(channels, channels, 1, 1)),
        "scale.b": _param(_zeros(channels)),
        "shift.w": _param(_zeros(channels, channels, 1, 1)),
        "shift.b": _param(_zeros(channels)),
    }
    return SftLayer(channels=channels, config=cfg, params=p)


def sft_forward(layer: SftLayer, features: Tensor, params) -> Tensor:
    if features.data.ndim != 4 or features.data.shape[1] != layer.channels:
        raise ShapeError(
            f"sft expects (B, {layer.channels}, H, W), got {features.data.shape}")
    b, _, h, w = features.data.shape
    s = layer.config.leaky_slope
    p = layer.params
    cond = _params_as_tensor(params, b)
    latent = ad.leaky_relu(ad.affine(cond, p["cond.w"], p["cond.b"]), s)
    grid = _broadcast_hw(latent, h, w)
    fused = ad.leaky_relu(
        ad.conv2d(ad.concat_channels([features, grid]), p["fuse.w"], p["fuse.b"]), s)
    scale = ad.conv2d(fused, p["scale.w"], p["scale.b"], padding=0)
    shift = ad.conv2d(fused, p["shift.w"], p["shift.b"], padding=0)
    one = Tensor(np.ones((), dtype=features.data.dtype))
    return ad.add(ad.mul(ad.add(one, scale), features), shift)


# -------------------------------------------------------------- residual unit

def _make_residual_unit(rng: np.random.Generator, channels: int, prefix: str) -> dict[str, Tensor]:
    return {
        f"{prefix}.c1.w": _param(_he_conv(rng, channels, channels, 3)),
        f"{prefix}.c1.b": _param(_zeros(channels)),
        f"{prefix}.c2.w": _param(_he_conv(rng, channels, channels, 3)),
        f"{prefix}.c2.b": _param(_zeros(channels)),
    }


def _residual_forward(params: dict[str, Tensor], prefix: str, x: Tensor, slope: float) -> Tensor:
    h = ad.leaky_relu(ad.conv2d(x, params[f"{prefix}.c1.w"], params[f"{prefix}.c1.b"]), slope)
    h = ad.conv2d(h, params[f"{prefix}.c2.w"], params[f"{prefix}.c2.b"])
    return ad.add(x, h)


# ----------------------------------------------------------------- MoE block

@dataclass
class DaMoeBlock:
    """Degradation-aware 2-expert block with a parameter-driven gate.

    GAUSSIAN_ONLY instantiates no Poisson expert and no gate; the block
    degenerates to the Gaussian path with weights pinned to (1, 0).
    """

    channels: int
    mode: MoeMode
    config: MoeConfig
    params: dict[str, Tensor]
    sft: SftLayer | None

    def parameters(self) -> dict[str, Tensor]:
        out = dict(self.params)
        if self.sft is not None:
            out.update({f"psft.{k}": v for k, v in self.sft.params.items()})
        return out


def make_da_moe_block(
    channels: int,
    mode: MoeMode = MoeMode.DUAL,
    config: MoeConfig | None = None,
    seed: int = 0,
) -> DaMoeBlock:
    cfg = config or MoeConfig()
    rng = _net_rng(seed)
    p: dict[str, Tensor] = {}
    p.update(_make_residual_unit(rng, channels, "gauss.u1"))
    p.update(_make_residual_unit(rng, channels, "gauss.u2"))
    sft = None
    if mode is MoeMode.DUAL:
        p.update(_make_residual_unit(rng, channels, "poisson.u1"))
        p["gate.w1"] = _param(_he_affine(rng, cfg.gate_hidden, 2))
        p["gate.b1"] = _param(_zeros(cfg.gate_hidden))
        # Zero final layer: equal logits, so the gate opens at (0.5, 0.5).
        p["gate.w2"] = _param(_zeros(2, cfg.gate_hidden))
        p["gate.b2"] = _param(_zeros(2))
        sft = make_sft_layer(channels, cfg.sft, seed=int(rng.integers(0, 2**31 - 1)))
    return DaMoeBlock(channels=channels, mode=mode, config=cfg, params=p, sft=sft)


def expert_forward(block: DaMoeBlock, which: ExpertKind, features: Tensor, params) -> Tensor:
    if features.data.ndim != 4 or features.data.shape[1] != block.channels:
        raise ShapeError(
            f"expert expects (B, {block.channels}, H, W), got {features.data.shape}")
    s = block.config.leaky_slope
    if which is ExpertKind.GAUSSIAN:
        h = _residual_forward(block.params, "gauss.u1", features, s)
        return _residual_forward(block.params, "gauss.u2", h, s)
    if block.mode is not MoeMode.DUAL:
        raise ContractError("GAUSSIAN_ONLY block has no Poisson expert")
    h = _residual_forward(block.params, "poisson.u1", features, s)
    return sft_forward(block.sft, h, params)


def gate_forward(block: DaMoeBlock, params) -> tuple[Tensor, Tensor]:
    """Routing weights (w_g, w_p), each (B,), nonnegative, summing to 1."""
    if block.mode is MoeMode.GAUSSIAN_ONLY:
        if isinstance(params, Tensor):
            b = params.data.shape[0]
        else:
            b = 1
        return (Tensor(np.ones(b, dtype=np.float32)),
                Tensor(np.zeros(b, dtype=np.float32)))
    cond = params if isinstance(params, Tensor) else _params_as_tensor(params, 1)
    cond = _params_as_tensor(cond, cond.data.shape[0])
    p = block.params
    h = ad.leaky_relu(ad.affine(cond, p["gate.w1"], p["gate.b1"]), block.config.leaky_slope)
    logits = ad.affine(h, p["gate.w2"], p["gate.b2"])
    weights = ad.softmax(logits)
    b = weights.data.shape[0]
    w_g = ad.reshape(ad.slice_channels(weights, 0, 1), (b,))
    w_p = ad.reshape(ad.slice_channels(weights, 1, 2), (b,))
    return w_g, w_p


def da_moe_forward(block: DaMoeBlock, features: Tensor, params) -> Tensor:
    """Gate-weighted blend of the two expert paths."""
    b = features.data.shape[0]
    gauss = expert_forward(block, ExpertKind.GAUSSIAN, features, params)
    if block.mode is MoeMode.GAUSSIAN_ONLY:
        return gauss
    cond = _params_as_tensor(params, b)
    poisson = expert_forward(block, ExpertKind.POISSON, features, cond)
    w_g, w_p = gate_forward(block, cond)
    w_g4 = ad.reshape(w_g, (b, 1, 1, 1))
    w_p4 = ad.reshape(w_p, (b, 1, 1, 1))
    return ad.add(ad.mul(w_g4, gauss), ad.mul(w_p4, poisson))
