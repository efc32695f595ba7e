"""Tape, op, and checkpoint tests with hand-derived gradient oracles."""

import numpy as np
import pytest

from noiselab import (
    ContractError,
    GradientFault,
    IoFormatError,
    ShapeError,
    Tensor,
    grad_check,
    load_checkpoint,
    save_checkpoint,
    suspend_tape,
    tape,
)
from noiselab import autodiff_core as ad


def leaf(data):
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=True)


# ------------------------------------------------------------ forward oracles

def test_affine_oracle():
    x = leaf([[1.0, 2.0]])
    w = leaf([[1.0, 2.0], [3.0, 4.0]])
    b = leaf([2.0, 4.0])
    out = ad.affine(x, w, b)
    # x @ W.T + b = (1+4+2, 3+8+4) = (7, 15), by hand
    assert (out.data == np.array([[7.0, 15.0]])).all()


def test_softmax_oracle():
    out = ad.softmax(Tensor(np.array([[0.0, np.log(3.0)]])))
    # exp(0)/(1+3) = 0.25, 3/4 = 0.75, by hand
    assert out.data.reshape(-1) == pytest.approx([0.25, 0.75], rel=1e-6)
    assert out.data.sum() == pytest.approx(1.0, rel=1e-6)


def test_global_avg_pool_oracle():
    x = Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
    out = ad.global_avg_pool(x)
    assert out.data.reshape(-1)[0] == pytest.approx(2.5, rel=1e-6)


def test_avg_pool_and_upsample_are_adjoint_shapes():
    x = Tensor(np.arange(16.0).reshape(1, 1, 4, 4))
    pooled = ad.avg_pool(x, 2)
    assert pooled.data[0, 0, 0, 0] == pytest.approx((0 + 1 + 4 + 5) / 4.0)
    up = ad.upsample_nearest(pooled, 2)
    assert up.data.shape == (1, 1, 4, 4)
    # Pooling a nearest-upsampled field recovers it exactly.
    back = ad.avg_pool(up, 2)
    assert np.allclose(back.data, pooled.data, atol=1e-7)


def test_leaky_relu_and_sigmoid_oracles():
    x = Tensor(np.array([-1.0, 0.0, 2.0]))
    out = ad.leaky_relu(x, 0.2)
    assert out.data == pytest.approx([-0.2, 0.0, 2.0], rel=1e-6)
    assert ad.relu(x).data == pytest.approx([0.0, 0.0, 2.0], abs=1e-9)
    assert ad.sigmoid(Tensor(np.zeros(3))).data == pytest.approx(0.5, rel=1e-6)


def test_conv2d_oracles():
    # Hand case: valid 2x2 kernel as a diagonal picker.
    x = Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
    w = Tensor(np.array([[[[1.0, 0.0], [0.0, 1.0]]]]))
    b = Tensor(np.zeros(1))
    out = ad.conv2d(x, w, b, stride=1, padding=0)
    assert out.data.reshape(-1)[0] == pytest.approx(5.0, rel=1e-6)
    # Centered 3x3 delta kernel with padding 1 is the identity.
    rng = np.random.default_rng(2)
    img = Tensor(rng.random((2, 3, 6, 6)))
    delta = np.zeros((3, 3, 3, 3))
    for c in range(3):
        delta[c, c, 1, 1] = 1.0
    out = ad.conv2d(img, Tensor(delta), Tensor(np.zeros(3)))
    assert np.abs(out.data - img.data).max() < 1e-6


def test_concat_slice_reshape_round_trip():
    rng = np.random.default_rng(3)
    a = Tensor(rng.random((1, 2, 4, 4)))
    b = Tensor(rng.random((1, 3, 4, 4)))
    cat = ad.concat_channels([a, b])
    assert cat.data.shape == (1, 5, 4, 4)
    assert (ad.slice_channels(cat, 2, 5).data == b.data).all()
    flat = ad.reshape(cat, (1, 5 * 16))
    assert (flat.data.reshape(1, 5, 4, 4) == cat.data).all()


def test_reductions_oracles():
    x = Tensor(np.array([3.0, -4.0]))
    assert ad.reduce_sum(x).data == pytest.approx(-1.0)
    assert ad.reduce_mean(x).data == pytest.approx(-0.5)
    assert ad.reduce_l1(x).data == pytest.approx(7.0)
    assert ad.reduce_l2(x).data == pytest.approx(5.0)
    d = ad.mean_abs_diff(Tensor(np.array([1.0, 2.0])), Tensor(np.array([0.0, 4.0])))
    assert d.data == pytest.approx(1.5)


# ----------------------------------------------------------- backward oracles

def test_reduce_l2_gradient_oracle():
    x = leaf([3.0, 4.0])
    with tape() as tp:
        tp.watch(x)
        loss = ad.reduce_l2(x)
    tp.backward(loss)
    # d||x||/dx = x/||x|| = (0.6, 0.8), by hand
    assert x.grad == pytest.approx([0.6, 0.8], rel=1e-12)


def test_mul_add_gradient_accumulation():
    a = leaf(3.0)
    b = leaf(5.0)
    with tape() as tp:
        tp.watch(a)
        tp.watch(b)
        # f = a*b + a -> df/da = b + 1, df/db = a
        loss = ad.add(ad.mul(a, b), a)
    tp.backward(loss)
    assert a.grad == pytest.approx(6.0)
    assert b.grad == pytest.approx(3.0)


def test_zero_dim_relu_chain():
    # 0-d accumulations collapse to numpy scalars; the tape must re-wrap.
    t = leaf(0.7)
    with tape() as tp:
        tp.watch(t)
        loss = ad.relu(ad.add(ad.mul(t, t), t))
    tp.backward(loss)
    assert t.grad == pytest.approx(2 * 0.7 + 1.0, rel=1e-12)


def test_broadcast_unbroadcast_gradients():
    a = leaf(np.ones((2, 3)))
    b = leaf(np.full((1, 3), 2.0))
    with tape() as tp:
        tp.watch(a)
        tp.watch(b)
        loss = ad.reduce_sum(ad.mul(a, b))
    tp.backward(loss)
    assert a.grad == pytest.approx(np.full((2, 3), 2.0))
    assert b.grad == pytest.approx(np.full((1, 3), 2.0))  # summed over rows


def test_div_gradient():
    a = leaf(6.0)
    b = leaf(2.0)
    with tape() as tp:
        tp.watch(a)
        tp.watch(b)
        loss = ad.div(a, b)
    tp.backward(loss)
    assert a.grad == pytest.approx(0.5)
    assert b.grad == pytest.approx(-1.5)  # -a/b^2


# --------------------------------------------------------------- tape contract

def test_watch_requires_grad_gate():
    t = Tensor(np.ones(3))
    with tape() as tp:
        with pytest.raises(ContractError):
            tp.watch(t)


def test_backward_needs_scalar_and_taped_loss():
    x = leaf(np.ones(3))
    with tape() as tp:
        tp.watch(x)
        vec = ad.mul(x, 2.0)
        with pytest.raises(ContractError):
            tp.backward(vec)
    free = ad.reduce_sum(Tensor(np.ones(2)))
    with tape() as tp2:
        with pytest.raises(ContractError):
            tp2.backward(free)


def test_suspend_tape_blocks_recording():
    x = leaf(np.ones(3))
    with tape() as tp:
        tp.watch(x)
        with suspend_tape():
            hidden = ad.mul(x, 3.0)
        loss = ad.reduce_sum(ad.add(x, hidden.detach()))
    tp.backward(loss)
    # Only the add path contributes; the suspended mul is invisible.
    assert x.grad == pytest.approx(np.ones(3))


def test_unwatched_leaf_gets_zero_grad():
    x = leaf(np.ones(2))
    y = leaf(np.ones(2))
    with tape() as tp:
        tp.watch(x)
        tp.watch(y)
        loss = ad.reduce_sum(x)
    tp.backward(loss)
    assert y.grad == pytest.approx(np.zeros(2))


def test_params_survive_multiple_tapes():
    w = leaf(2.0)
    for step in range(3):
        with tape() as tp:
            tp.watch(w)
            loss = ad.mul(w, w)
        tp.backward(loss)
        assert w.grad == pytest.approx(2.0 * float(w.data))


def test_tensor_axis_limit():
    with pytest.raises(ShapeError):
        Tensor(np.zeros((1, 1, 1, 1, 1)))


def test_non_finite_forward_faults():
    with np.errstate(divide="ignore"):
        with pytest.raises(GradientFault):
            ad.div(Tensor(np.ones(2)), Tensor(np.zeros(2)))


# ----------------------------------------------------------------- grad check

def test_grad_check_passes_on_composite():
    rng = np.random.default_rng(5)
    x = Tensor(rng.random((1, 2, 6, 6)) + 0.1)
    w = Tensor(rng.standard_normal((3, 2, 3, 3)) * 0.3)
    b = Tensor(rng.standard_normal(3) * 0.1)

    def f(xv, wv, bv):
        return ad.reduce_l2(ad.sigmoid(ad.conv2d(xv, wv, bv)))

    report = grad_check(f, [x, w, b], tol_rel=1e-4, tol_abs=1e-6)
    assert report.passed, report.detail
    assert report.max_rel_err <= 1e-4 or report.max_abs_err <= 1e-6


def test_grad_check_catches_corrupted_backward():
    # Negative control: a deliberately wrong backward must fail the check.
    def broken_square(x):
        out = x.data * x.data

        def bwd(g):
            return (g * 3.0 * x.data,)  # wrong factor; true is 2x

        return ad._emit("broken_square", (x,), out, bwd)

    x = Tensor(np.array([1.5, -0.7]))
    report = grad_check(lambda v: ad.reduce_sum(broken_square(v)), [x])
    assert not report.passed


# ---------------------------------------------------------------- checkpoints

def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(9)
    tensors = {
        "conv.w": rng.standard_normal((4, 3, 3, 3)).astype(np.float32),
        "conv.b": rng.standard_normal(4).astype(np.float32),
        "scalar": np.float32(0.25),
    }
    path = tmp_path / "ck.adt1"
    save_checkpoint(path, tensors, meta={"kind": "test", "widths": [4]})
    loaded, meta = load_checkpoint(path)
    assert meta == {"kind": "test", "widths": [4]}
    assert list(loaded.keys()) == list(tensors.keys())
    for name in tensors:
        assert (loaded[name] == np.asarray(tensors[name], dtype=np.float32)).all()


def test_checkpoint_rejects_bad_magic_and_truncation(tmp_path):
    path = tmp_path / "ck.adt1"
    save_checkpoint(path, {"w": np.ones((8, 8), dtype=np.float32)})
    blob = path.read_bytes()
    path.write_bytes(b"XXXX" + blob[4:])
    with pytest.raises(IoFormatError):
        load_checkpoint(path)
    path.write_bytes(blob[: len(blob) - 16])
    with pytest.raises(IoFormatError):
        load_checkpoint(path)
    with pytest.raises(IoFormatError):
        load_checkpoint(tmp_path / "missing.adt1")


def test_checkpoint_byte_determinism(tmp_path):
    tensors = {"a": np.arange(12, dtype=np.float32).reshape(3, 4)}
    p1, p2 = tmp_path / "a.adt1", tmp_path / "b.adt1"
    save_checkpoint(p1, tensors, meta={"k": 1})
    save_checkpoint(p2, tensors, meta={"k": 1})
    assert p1.read_bytes() == p2.read_bytes()
    assert (tmp_path / "a.adt1.json").read_text() == (tmp_path / "b.adt1.json").read_text()
