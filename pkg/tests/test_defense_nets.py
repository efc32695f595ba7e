"""Architecture contracts: predictor sentinel, SFT identity, MoE routing."""

import numpy as np
import pytest

from noiselab import (
    ContractError,
    MoeMode,
    NormalizedNoiseParams,
    PredictorConfig,
    ShapeError,
    Tensor,
    da_moe_forward,
    grad_check,
    make_da_moe_block,
    make_noise_predictor,
    make_sft_layer,
    noise_predictor_forward,
    predicted_params,
    sft_forward,
)
from noiselab import autodiff_core as ad
from noiselab.defense_nets import ExpertKind, expert_forward, gate_forward


def rand_features(shape, seed=0):
    rng = np.random.default_rng(seed)
    return Tensor(rng.standard_normal(shape).astype(np.float32))


# ------------------------------------------------------------ noise predictor

def test_predictor_output_range_and_shape():
    net = make_noise_predictor(seed=1)
    img = rand_features((3, 3, 8, 8), seed=2)
    out = noise_predictor_forward(net, img)
    assert out.data.shape == (3, 2)
    assert (out.data > 0.0).all() and (out.data < 1.0).all()
    pairs = predicted_params(out)
    assert len(pairs) == 3
    assert all(isinstance(p, NormalizedNoiseParams) for p in pairs)


def test_predictor_constant_image_shuffle_invariance():
    net = make_noise_predictor(seed=1)
    img = Tensor(np.full((1, 3, 8, 8), 0.4, dtype=np.float32))
    rng = np.random.default_rng(3)
    flat = img.data.reshape(1, 3, -1).copy()
    flat = flat[:, :, rng.permutation(64)]
    shuffled = Tensor(flat.reshape(1, 3, 8, 8))
    a = noise_predictor_forward(net, img)
    b = noise_predictor_forward(net, shuffled)
    assert (a.data == b.data).all()


def test_predictor_sentinel_budget():
    net = make_noise_predictor()
    # Frozen structure count for the default 16/32/64 + 32 plan.
    assert net.param_count() == 25730
    assert net.param_count() < 100_000
    with pytest.raises(ContractError):
        make_noise_predictor(PredictorConfig(widths=(64, 128, 128), mlp_hidden=64))


def test_predictor_seed_determinism():
    a = make_noise_predictor(seed=7)
    b = make_noise_predictor(seed=7)
    for name in a.params:
        assert (a.params[name].data == b.params[name].data).all()


def test_predictor_shape_gate():
    net = make_noise_predictor()
    with pytest.raises(ShapeError):
        noise_predictor_forward(net, rand_features((2, 1, 8, 8)))


# ------------------------------------------------------------------ SFT layer

def test_sft_zero_init_exact_identity():
    layer = make_sft_layer(channels=4, seed=5)
    feats = rand_features((2, 4, 6, 6), seed=6)
    out = sft_forward(layer, feats, NormalizedNoiseParams(k_n=0.7, sigma_n=0.2))
    assert (out.data == feats.data).all()


def test_sft_unit_scale_doubles_features():
    layer = make_sft_layer(channels=3, seed=5)
    layer.params["scale.b"] = Tensor(np.ones(3, dtype=np.float32), requires_grad=True)
    feats = rand_features((1, 3, 4, 4), seed=8)
    out = sft_forward(layer, feats, NormalizedNoiseParams(k_n=0.5, sigma_n=0.5))
    assert (out.data == 2.0 * feats.data).all()


def test_sft_batch_conditioning_and_gates():
    layer = make_sft_layer(channels=2, seed=9)
    feats = rand_features((3, 2, 4, 4), seed=10)
    cond = Tensor(np.full((3, 2), 0.5, dtype=np.float32))
    out = sft_forward(layer, feats, cond)
    assert out.data.shape == feats.data.shape
    with pytest.raises(ShapeError):
        sft_forward(layer, feats, Tensor(np.zeros((2, 2), dtype=np.float32)))
    with pytest.raises(ContractError):
        sft_forward(layer, feats, (0.5, 0.5))
    with pytest.raises(ShapeError):
        sft_forward(layer, rand_features((1, 3, 4, 4)), cond)


def test_sft_gradients_pass():
    layer = make_sft_layer(channels=2, seed=11)
    feats = rand_features((1, 2, 4, 4), seed=12)
    cond_w = layer.params["cond.w"]
    cond_b = layer.params["cond.b"]

    def f(wv, bv):
        layer.params["cond.w"] = wv
        layer.params["cond.b"] = bv
        # Nonzero heads so the conditioning path reaches the loss.
        layer.params["scale.w"] = Tensor(
            np.full((2, 2, 1, 1), 0.3, dtype=np.float32), requires_grad=True)
        out = sft_forward(layer, feats, NormalizedNoiseParams(k_n=0.3, sigma_n=0.8))
        return ad.reduce_l2(out)

    report = grad_check(f, [cond_w, cond_b], tol_rel=1e-4, tol_abs=1e-6)
    assert report.passed, report.detail


# ------------------------------------------------------------------ MoE block

def test_gate_zero_init_is_half_half():
    block = make_da_moe_block(channels=3, mode=MoeMode.DUAL, seed=13)
    w_g, w_p = gate_forward(block, NormalizedNoiseParams(k_n=0.9, sigma_n=0.1))
    assert w_g.data[0] == 0.5 and w_p.data[0] == 0.5


def test_gaussian_only_gate_pinned():
    block = make_da_moe_block(channels=3, mode=MoeMode.GAUSSIAN_ONLY, seed=13)
    for pair in ((0.0, 0.0), (1.0, 1.0), (0.2, 0.9)):
        w_g, w_p = gate_forward(block, NormalizedNoiseParams(*pair))
        assert w_g.data[0] == 1.0 and w_p.data[0] == 0.0
    with pytest.raises(ContractError):
        expert_forward(block, ExpertKind.POISSON, rand_features((1, 3, 4, 4)),
                       NormalizedNoiseParams(k_n=0.5, sigma_n=0.5))


def test_gate_weights_sum_to_one():
    block = make_da_moe_block(channels=2, mode=MoeMode.DUAL, seed=15)
    # Break the zero-init symmetry so the sum check is not vacuous.
    rng = np.random.default_rng(16)
    block.params["gate.w2"] = Tensor(
        rng.standard_normal((2, block.config.gate_hidden)).astype(np.float32),
        requires_grad=True)
    cond = Tensor(rng.random((1000, 2)).astype(np.float32))
    w_g, w_p = gate_forward(block, cond)
    sums = w_g.data + w_p.data
    assert np.abs(sums - 1.0).max() <= 1e-6
    assert (w_g.data >= 0).all() and (w_p.data >= 0).all()


def test_gaussian_expert_ignores_params():
    block = make_da_moe_block(channels=3, mode=MoeMode.DUAL, seed=17)
    feats = rand_features((2, 3, 6, 6), seed=18)
    a = expert_forward(block, ExpertKind.GAUSSIAN, feats,
                       NormalizedNoiseParams(k_n=0.0, sigma_n=0.0))
    b = expert_forward(block, ExpertKind.GAUSSIAN, feats,
                       NormalizedNoiseParams(k_n=1.0, sigma_n=1.0))
    assert (a.data == b.data).all()


def test_poisson_expert_sees_params_once_heads_are_nonzero():
    block = make_da_moe_block(channels=3, mode=MoeMode.DUAL, seed=19)
    rng = np.random.default_rng(20)
    block.sft.params["scale.w"] = Tensor(
        (rng.standard_normal((3, 3, 1, 1)) * 0.2).astype(np.float32),
        requires_grad=True)
    feats = rand_features((1, 3, 6, 6), seed=21)
    a = expert_forward(block, ExpertKind.POISSON, feats,
                       NormalizedNoiseParams(k_n=0.0, sigma_n=0.0))
    b = expert_forward(block, ExpertKind.POISSON, feats,
                       NormalizedNoiseParams(k_n=1.0, sigma_n=1.0))
    assert (a.data != b.data).any()


def test_identity_experts_make_identity_block():
    block = make_da_moe_block(channels=2, mode=MoeMode.DUAL, seed=23)
    for name, t in block.params.items():
        if ".c1." in name or ".c2." in name:
            block.params[name] = Tensor(np.zeros_like(t.data), requires_grad=True)
    feats = rand_features((2, 2, 4, 4), seed=24)
    out = da_moe_forward(block, feats, NormalizedNoiseParams(k_n=0.4, sigma_n=0.6))
    # 0.5*F + 0.5*F with identity experts is exactly F.
    assert (out.data == feats.data).all()


def test_gaussian_only_block_is_pure_gaussian_path():
    block = make_da_moe_block(channels=3, mode=MoeMode.GAUSSIAN_ONLY, seed=25)
    feats = rand_features((1, 3, 6, 6), seed=26)
    params = NormalizedNoiseParams(k_n=0.5, sigma_n=0.5)
    out = da_moe_forward(block, feats, params)
    gauss = expert_forward(block, ExpertKind.GAUSSIAN, feats, params)
    assert (out.data == gauss.data).all()


def test_gate_convexity():
    block = make_da_moe_block(channels=2, mode=MoeMode.DUAL, seed=27)
    rng = np.random.default_rng(28)
    block.params["gate.w2"] = Tensor(
        rng.standard_normal((2, block.config.gate_hidden)).astype(np.float32),
        requires_grad=True)
    feats = rand_features((1, 2, 5, 5), seed=29)
    params = NormalizedNoiseParams(k_n=0.8, sigma_n=0.3)
    out = da_moe_forward(block, feats, params).data
    g = expert_forward(block, ExpertKind.GAUSSIAN, feats, params).data
    p = expert_forward(block, ExpertKind.POISSON, feats, params).data
    lo = np.minimum(g, p) - 1e-6
    hi = np.maximum(g, p) + 1e-6
    assert (out >= lo).all() and (out <= hi).all()


def test_moe_shape_and_conditioning_gates():
    block = make_da_moe_block(channels=3, mode=MoeMode.DUAL, seed=31)
    with pytest.raises(ShapeError):
        da_moe_forward(block, rand_features((1, 2, 4, 4)),
                       NormalizedNoiseParams(k_n=0.5, sigma_n=0.5))
    feats = rand_features((2, 3, 4, 4))
    with pytest.raises(ShapeError):
        da_moe_forward(block, feats, Tensor(np.zeros((3, 2), dtype=np.float32)))
    with pytest.raises(ContractError):
        da_moe_forward(block, feats, [0.5, 0.5])
