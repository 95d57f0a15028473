import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from polyfuse import model as M
from polyfuse.errors import (
    BadMagicError,
    DataError,
    ShapeMismatchError,
    TruncatedError,
    VersionMismatchError,
)
from polyfuse.ndmath import Mode, grad_check
from polyfuse.rng import Stream, derive_key

from helpers import model_loss_fn, random_inputs

TINY = M.ModelConfig(llm_dim=6, uni_dim=4, hidden=8, rank=2, alpha=4.0, dropout=0.0)


def tiny_params(seed=1):
    return M.init_model(TINY, seed)


# ---------------------------------------------------------------------------
# Forward


def test_zero_network_predicts_zero():
    params = tiny_params()
    for t in params.trainable().values():
        t[...] = 0.0
    llm, uni = random_inputs(TINY, 5, 0)
    assert np.array_equal(M.predict(params, llm, uni), np.zeros(5))


def test_zero_b_adapter_matches_adapter_free_model():
    with_lora = M.init_model(TINY, seed=7, with_lora=True)
    without = M.init_model(TINY, seed=7, with_lora=False)
    assert np.array_equal(with_lora.llm.lora.B, np.zeros_like(with_lora.llm.lora.B))
    for _ in range(5):
        llm, uni = random_inputs(TINY, 20, _)
        a = M.predict(with_lora, llm, uni)
        b = M.predict(without, llm, uni)
        assert np.array_equal(a, b)  # bitwise


def test_forward_matches_scalar_reimplementation():
    """Independent straight-line oracle: pure-Python loops, math.erf."""
    params = tiny_params(seed=5)
    # Exercise batch norm in Eval mode with non-trivial running stats.
    for bn in (params.llm.bn, params.uni.bn, params.bn_refine):
        bn.running_mean = Stream(derive_key("rm", id(bn) % 97)).normal(TINY.hidden) * 0.3
        bn.running_var = np.abs(Stream(derive_key("rv", id(bn) % 89)).normal(TINY.hidden)) + 0.5
    llm, uni = random_inputs(TINY, 2, 3)
    got = M.predict(params, llm, uni)

    def lin(x, W, b):
        return [sum(x[i] * W[j][i] for i in range(len(x))) + b[j] for j in range(len(b))]

    def lora_lin(x, layer, lora):
        y = lin(x, layer.W, layer.b)
        if lora is None:
            return y
        xa = lin(x, lora.A, [0.0] * lora.rank)
        delta = lin(xa, lora.B, [0.0] * len(y))
        return [y[j] + lora.scale * delta[j] for j in range(len(y))]

    def gelu(v):
        return [x * 0.5 * (1.0 + math.erf(x / math.sqrt(2.0))) for x in v]

    def bn_eval(v, bn):
        return [
            bn.gamma[j] * (v[j] - bn.running_mean[j]) / math.sqrt(bn.running_var[j] + bn.eps)
            + bn.beta[j]
            for j in range(len(v))
        ]

    def sigmoid(z):
        return 1.0 / (1.0 + math.exp(-z))

    expected = []
    for row in range(2):
        bl = bn_eval(gelu(lora_lin(list(llm[row]), params.llm.proj, params.llm.lora)), params.llm.bn)
        bu = bn_eval(gelu(lora_lin(list(uni[row]), params.uni.proj, params.uni.lora)), params.uni.bn)
        uv = bl + bu
        g = [sigmoid(sum(uv[i] * params.gate.Wg[j][i] for i in range(len(uv))) + params.gate.bg[j])
             for j in range(TINY.hidden)]
        fused = [g[j] * bl[j] + (1 - g[j]) * bu[j] for j in range(TINY.hidden)]
        r = bn_eval(gelu(lin(fused, params.refine.W, params.refine.b)), params.bn_refine)
        refined = [fused[j] + r[j] for j in range(TINY.hidden)]
        h1 = gelu(lin(refined, params.head1.W, params.head1.b))
        expected.append(lin(h1, params.head2.W, params.head2.b)[0])

    assert np.allclose(got, expected, rtol=0, atol=1e-12)


def test_forward_shape_mismatch():
    params = tiny_params()
    with pytest.raises(ShapeMismatchError):
        M.forward(params, np.zeros((2, 5)), np.zeros((2, 4)))


def test_forward_reports_nan_layer():
    params = tiny_params()
    params.gate.bg[0] = np.nan
    llm, uni = random_inputs(TINY, 2, 1)
    with pytest.raises(Exception, match="gate"):
        M.forward(params, llm, uni)


def test_eval_forward_deterministic():
    params = tiny_params()
    llm, uni = random_inputs(TINY, 10, 2)
    a = M.predict(params, llm, uni)
    b = M.predict(params, llm, uni)
    assert np.array_equal(a, b)


@given(st.integers(min_value=0, max_value=10_000))
@settings(max_examples=50, deadline=None)
def test_batch_permutation_equivariance(seed):
    params = tiny_params()
    llm, uni = random_inputs(TINY, 6, seed)
    perm = list(range(6))
    Stream(seed).shuffle(perm)
    direct = M.predict(params, llm[perm], uni[perm])
    permuted = M.predict(params, llm, uni)[perm]
    assert np.allclose(direct, permuted, rtol=1e-12, atol=1e-14)


# ---------------------------------------------------------------------------
# Losses


def test_perfect_predictions_zero_loss_zero_grads():
    params = tiny_params()
    llm, uni = random_inputs(TINY, 4, 9)
    targets = M.predict(params, llm, uni)
    loss, grads = M.loss_and_grads(params, llm, uni, targets, "mse", mode=Mode.EVAL)
    assert loss == 0.0
    assert all(np.array_equal(g, np.zeros_like(g)) for g in grads.values())


def test_mse_hand_case():
    pred = np.array([1.0, 2.0, 3.0])
    tgt = np.array([0.0, 0.0, 0.0])
    loss, dpred = M.loss_forward(pred, tgt, "mse")
    assert loss == pytest.approx((1 + 4 + 9) / 3, rel=1e-15)
    assert np.allclose(dpred, 2 * pred / 3)


def test_mae_values_and_grad():
    loss, dpred = M.loss_forward(np.array([2.0, -1.0]), np.array([0.0, 0.0]), "mae")
    assert loss == 1.5
    assert np.array_equal(dpred, [0.5, -0.5])


def test_huber_piecewise_values():
    loss_small, _ = M.loss_forward(np.array([0.5]), np.array([0.0]), "huber", huber_delta=1.0)
    loss_big, _ = M.loss_forward(np.array([2.0]), np.array([0.0]), "huber", huber_delta=1.0)
    assert loss_small == pytest.approx(0.125, abs=0)
    assert loss_big == pytest.approx(1.5, abs=0)


def test_empty_batch_rejected():
    with pytest.raises(DataError):
        M.loss_forward(np.array([]), np.array([]), "mse")


# ---------------------------------------------------------------------------
# Full-model gradient check


@pytest.mark.parametrize("loss_kind", ["mse", "huber"])
def test_full_model_gradients_match_fd(loss_kind):
    params = M.init_model(TINY, seed=11)
    llm, uni = random_inputs(TINY, 3, 11)
    targets = Stream(12).normal(3)
    f, theta0 = model_loss_fn(params, llm, uni, targets, loss_kind)
    assert grad_check(f, theta0) < 1e-4


def test_input_gradient_matches_fd():
    params = M.init_model(TINY, seed=13)
    llm, uni = random_inputs(TINY, 1, 13)

    def f(theta):
        pred, dllm = M.input_gradient(params, theta.reshape(1, -1), uni)
        return float(pred[0]), dllm.ravel()

    assert grad_check(f, llm.ravel()) < 1e-5


# ---------------------------------------------------------------------------
# Checkpoints


def test_checkpoint_roundtrip_bitwise(tmp_path):
    params = tiny_params(seed=21)
    llm, uni = random_inputs(TINY, 8, 21)
    meta = {"property": "Tg", "val_loss": 0.25, "epoch": 3, "seed": 21,
            "target_mean": 1.0, "target_std": 2.0}
    path = tmp_path / "model.plym"
    M.save_checkpoint(params, meta, path)
    loaded, meta_back = M.load_checkpoint(path)
    assert meta_back == meta
    assert np.array_equal(M.predict(params, llm, uni), M.predict(loaded, llm, uni))


def test_checkpoint_saves_are_deterministic(tmp_path):
    params = tiny_params(seed=22)
    a, b = tmp_path / "a.plym", tmp_path / "b.plym"
    M.save_checkpoint(params, {"k": 1}, a)
    M.save_checkpoint(params, {"k": 1}, b)
    assert a.read_bytes() == b.read_bytes()


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "x.plym"
    M.save_checkpoint(tiny_params(), {}, path)
    data = bytearray(path.read_bytes())
    data[:4] = b"NOPE"
    path.write_bytes(bytes(data))
    with pytest.raises(BadMagicError):
        M.load_checkpoint(path)


def test_checkpoint_version_mismatch(tmp_path):
    path = tmp_path / "x.plym"
    M.save_checkpoint(tiny_params(), {}, path)
    data = bytearray(path.read_bytes())
    data[4:6] = (9).to_bytes(2, "little")
    path.write_bytes(bytes(data))
    with pytest.raises(VersionMismatchError):
        M.load_checkpoint(path)


def test_checkpoint_truncated(tmp_path):
    path = tmp_path / "x.plym"
    M.save_checkpoint(tiny_params(), {}, path)
    path.write_bytes(path.read_bytes()[:-5])
    with pytest.raises(TruncatedError):
        M.load_checkpoint(path)


def test_checkpoint_tampered_shape(tmp_path):
    # Swap the dims of the non-square head1.W tensor: the payload size
    # still matches, so this must surface as a shape mismatch.
    path = tmp_path / "x.plym"
    M.save_checkpoint(tiny_params(), {}, path)
    data = bytearray(path.read_bytes())
    name = b"head1.W"
    i = data.index(name)
    dims_at = i + len(name) + 1  # rank byte follows name
    d0 = data[dims_at : dims_at + 4]
    d1 = data[dims_at + 4 : dims_at + 8]
    assert d0 != d1
    data[dims_at : dims_at + 4], data[dims_at + 4 : dims_at + 8] = d1, d0
    path.write_bytes(bytes(data))
    with pytest.raises(ShapeMismatchError):
        M.load_checkpoint(path)
