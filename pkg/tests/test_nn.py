import numpy as np
import pytest
from scipy.special import logsumexp

from duovision import tensor as T
from duovision.nn import (AdamW, LayerNorm, Linear, MLP, ParamSet, SelfAttention,
                          TransformerBlock, clip_grad_norm, cross_entropy_mean,
                          global_grad_norm, mse_mean, trunc_normal)


def test_trunc_normal_bounds_and_scale():
    rng = np.random.default_rng(0)
    x = trunc_normal((20000,), 0.02, rng)
    assert np.all(np.abs(x) <= 2 * 0.02 + 1e-7)
    assert abs(float(np.mean(x))) < 2e-3
    assert x.dtype == np.float32


def test_linear_shapes_and_grad():
    params = ParamSet()
    lin = Linear(params, "lin", 6, 4, seed=0)
    x = T.Tensor(np.random.default_rng(1).normal(size=(3, 5, 6)).astype(np.float32),
                 requires_grad=True)
    with T.Tape() as tape:
        out = lin(x)
        assert out.shape == (3, 5, 4)
        tape.backward(T.mean_(out))
    assert params["lin/w"].grad is not None
    assert params["lin/b"].grad is not None


def test_cross_entropy_matches_logsumexp_oracle():
    rng = np.random.default_rng(2)
    logits = rng.normal(size=(4, 7, 11))
    labels = rng.integers(0, 11, size=(4, 7))
    want = float(np.mean(logsumexp(logits, axis=-1) -
                         np.take_along_axis(logits, labels[..., None], axis=-1)[..., 0]))
    got = cross_entropy_mean(T.Tensor(logits), labels).item()
    assert got == pytest.approx(want, abs=1e-6)


def test_mse_mean_oracle():
    rng = np.random.default_rng(3)
    a, b = rng.normal(size=(5, 4)), rng.normal(size=(5, 4))
    got = mse_mean(T.Tensor(a), T.Tensor(b)).item()
    assert got == pytest.approx(float(np.mean((a - b) ** 2)), abs=1e-6)


def test_adamw_zero_lr_is_identity():
    params = ParamSet()
    lin = Linear(params, "lin", 3, 3, seed=0)
    before = {n: p.data.copy() for n, p in params.trainable()}
    opt = AdamW(params, lr=0.0)
    x = T.Tensor(np.ones((2, 3), dtype=np.float32))
    with T.Tape() as tape:
        tape.backward(T.mean_(lin(x)))
    opt.step()
    for n, p in params.trainable():
        np.testing.assert_array_equal(p.data, before[n])


def test_adamw_first_step_closed_form():
    params = ParamSet()
    p = params.add("w", T.Tensor(np.array([2.0], dtype=np.float32), requires_grad=True))
    opt = AdamW(params, lr=0.1)
    p.grad = np.array([0.5], dtype=np.float32)
    opt.step()
    # bias-corrected first step: m_hat = g, v_hat = g^2, update = g/(|g|+eps)
    expect = 2.0 - 0.1 * (0.5 / (0.5 + 1e-8) + 0.01 * 2.0)
    assert p.data[0] == pytest.approx(expect, rel=1e-5)


def test_adamw_decoupled_decay_without_gradient_signal():
    params = ParamSet()
    p = params.add("w", T.Tensor(np.array([4.0], dtype=np.float32), requires_grad=True))
    opt = AdamW(params, lr=0.25)
    p.grad = np.array([0.0], dtype=np.float32)
    opt.step()
    assert p.data[0] == pytest.approx(4.0 * (1 - 0.25 * 0.01), rel=1e-6)


def test_adamw_state_roundtrip_bitwise():
    rng = np.random.default_rng(4)
    params = ParamSet()
    lin = Linear(params, "lin", 4, 4, seed=1)
    opt = AdamW(params, lr=1e-2)
    x = T.Tensor(rng.normal(size=(3, 4)).astype(np.float32))
    for _ in range(3):
        params.zero_grad()
        with T.Tape() as tape:
            tape.backward(T.mean_(T.mul(lin(x), lin(x))))
        opt.step()
    state = opt.state()
    snap = {n: p.data.copy() for n, p in params.trainable()}

    params2 = ParamSet()
    lin2 = Linear(params2, "lin", 4, 4, seed=1)
    params2.load_state({n: p.data.copy() for n, p in params.trainable()})
    opt2 = AdamW(params2, lr=1e-2)
    opt2.load_state(state)

    for ps, op in ((params, opt), (params2, opt2)):
        ps.zero_grad()
        model = lin if ps is params else lin2
        with T.Tape() as tape:
            tape.backward(T.mean_(T.mul(model(x), model(x))))
        op.step()
    for n, p in params.trainable():
        np.testing.assert_array_equal(p.data, params2[n].data)
    assert any(not np.array_equal(p.data, snap[n]) for n, p in params.trainable())


def test_clip_grad_norm_scales_to_cap():
    params = ParamSet()
    a = params.add("a", T.Tensor(np.zeros(3, dtype=np.float32), requires_grad=True))
    b = params.add("b", T.Tensor(np.zeros(4, dtype=np.float32), requires_grad=True))
    a.grad = np.full(3, 2.0, dtype=np.float32)
    b.grad = np.full(4, 2.0, dtype=np.float32)
    raw = float(np.sqrt(3 * 4.0 + 4 * 4.0))
    got = clip_grad_norm(params, 1.0)
    assert got == pytest.approx(raw, rel=1e-6)
    assert global_grad_norm(params) == pytest.approx(1.0, rel=1e-5)


def test_paramset_digest_sensitivity():
    params = ParamSet()
    Linear(params, "enc/lin", 3, 3, seed=0)
    Linear(params, "dec/lin", 3, 3, seed=0)
    d0 = params.digest("enc")
    params["dec/lin/w"].data += 1.0
    assert params.digest("enc") == d0  # other prefixes do not leak in
    params["enc/lin/w"].data += 1.0
    assert params.digest("enc") != d0


def test_freeze_marks_untrainable():
    params = ParamSet()
    Linear(params, "enc/lin", 3, 3, seed=0)
    Linear(params, "head", 3, 3, seed=0)
    params.freeze("enc")
    names = [n for n, _ in params.trainable()]
    assert names == ["head/b", "head/w"] or set(names) == {"head/w", "head/b"}


def test_copy_from_overwrites_prefix():
    src, dst = ParamSet(), ParamSet()
    Linear(src, "enc/lin", 3, 3, seed=5)
    Linear(dst, "enc/lin", 3, 3, seed=9)
    dst.copy_from(src, "enc")
    np.testing.assert_array_equal(dst["enc/lin/w"].data, src["enc/lin/w"].data)
    assert dst["enc/lin/w"].data is not src["enc/lin/w"].data


def test_attention_is_causal_under_mask():
    params = ParamSet()
    attn = SelfAttention(params, "attn", 16, 4, seed=0)
    rng = np.random.default_rng(5)
    x = rng.normal(size=(1, 6, 16)).astype(np.float32)
    L = 6
    causal = np.triu(np.full((L, L), -1e9, dtype=np.float32), k=1)[None, None]
    out1 = attn(T.Tensor(x), causal).data
    x2 = x.copy()
    x2[0, 4:] = rng.normal(size=(2, 16))
    out2 = attn(T.Tensor(x2), causal).data
    np.testing.assert_array_equal(out1[0, :4], out2[0, :4])


def test_transformer_block_grad_flow():
    params = ParamSet()
    block = TransformerBlock(params, "blk", 16, 4, seed=0)
    x = T.Tensor(np.random.default_rng(6).normal(size=(2, 5, 16)).astype(np.float32),
                 requires_grad=True)
    mask = np.zeros((1, 1, 5, 5), dtype=np.float32)
    with T.Tape() as tape:
        out = block(x, mask)
        tape.backward(T.mean_(T.mul(out, out)))
    assert all(p.grad is not None for _, p in params.trainable())
