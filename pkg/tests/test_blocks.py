import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cliptts.autodiff import Adam, Tape, Tensor, backward, float64_mode, gradcheck, ops
from cliptts.blocks import (AttentionMask, DurationPredictor, FFTBlock, ModelConfig,
                            MultiHeadAttention, expand_durations, length_regulator, lr_to_frames)
from cliptts.errors import EmptyExpansion, MaskError, ShapeError


def small_block(causal=False, seed=0):
    return FFTBlock(16, 2, 32, (3, 1), dropout=0.0, causal=causal).bind_names().initialize(seed)


def np_layer_norm(x, eps=1e-5):
    mu = x.mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(x.var(-1, keepdims=True) + eps)


# ---------------------------------------------------------------- attention

def test_single_position_attention_weight_is_one():
    mha = MultiHeadAttention(16, 2).initialize(0)
    mha(Tensor(np.random.default_rng(0).standard_normal((1, 16))))
    np.testing.assert_array_equal(mha.last_attention, 1.0)


def test_attention_rows_sum_to_one():
    mha = MultiHeadAttention(16, 2).initialize(1)
    x = Tensor(np.random.default_rng(1).standard_normal((3, 7, 16)))
    mha(x, AttentionMask(np.array([7, 4, 1]), causal=True))
    np.testing.assert_allclose(mha.last_attention.sum(-1), 1.0, atol=1e-6)
    # hidden keys get no weight
    assert np.all(mha.last_attention[1, :, :, 4:] < 1e-30)
    assert np.all(np.triu(mha.last_attention[0, 0], 1) < 1e-30)


def test_attention_matches_numpy_oracle():
    with float64_mode():
        mha = MultiHeadAttention(8, 2).initialize(2)
        x = np.random.default_rng(2).standard_normal((5, 8))
        out = mha(Tensor(x)).data
        q, k, v = (x @ w.data for w in (mha.wq, mha.wk, mha.wv))
        heads = []
        for h in range(2):
            sl = slice(4 * h, 4 * h + 4)
            s = q[:, sl] @ k[:, sl].T / 2.0
            a = np.exp(s - s.max(1, keepdims=True))
            heads.append((a / a.sum(1, keepdims=True)) @ v[:, sl])
        np.testing.assert_allclose(out, np.concatenate(heads, 1) @ mha.wo.data, rtol=1e-10)


def test_causal_attention_perturbation_t3():
    mha = MultiHeadAttention(16, 2).initialize(3)
    x = np.random.default_rng(3).standard_normal((3, 16)).astype(np.float32)
    mask = AttentionMask.full(1, 3, causal=True)
    base = mha(Tensor(x), mask).data
    x2 = x.copy()
    x2[2] += 10.0
    out = mha(Tensor(x2), mask).data
    assert base[:2].tobytes() == out[:2].tobytes()
    assert not np.array_equal(base[2], out[2])


def test_mask_errors():
    with pytest.raises(MaskError):
        AttentionMask(np.array([0])).allowed(4)
    with pytest.raises(MaskError):
        AttentionMask(np.array([5])).allowed(4)
    assert AttentionMask.full(1, 3, True).mode == "causal+padding"
    assert AttentionMask.full(1, 3).mode == "padding"


# ---------------------------------------------------------------- FFT block

@settings(max_examples=15, deadline=None)
@given(T=st.integers(1, 40), causal=st.booleans())
def test_fft_block_preserves_shape(T, causal):
    block = small_block(causal)
    x = Tensor(np.random.default_rng(T).standard_normal((2, T, 16)))
    assert block(x).shape == (2, T, 16)


def test_fft_block_default_width_long_sequence():
    block = FFTBlock().initialize(0).eval()
    assert block(Tensor(np.zeros((2048, 256), np.float32))).shape == (2048, 256)


def test_fft_block_zero_weights_oracle():
    with float64_mode():
        block = small_block()
        for name, p in block.named_parameters():
            p.data[...] = 1.0 if name.endswith("gamma") else 0.0
        x = np.random.default_rng(4).standard_normal((6, 16))
        np.testing.assert_allclose(block(Tensor(x)).data, np_layer_norm(np_layer_norm(x)),
                                   rtol=1e-10, atol=1e-12)


def test_fft_block_causal_exact_and_padding_invariance():
    block = small_block(causal=True, seed=5)
    rng = np.random.default_rng(5)
    x = rng.standard_normal((1, 12, 16)).astype(np.float32)
    base = block(Tensor(x)).data
    for t in range(11):
        x2 = x.copy()
        x2[0, t + 1:] = rng.standard_normal((11 - t, 16))
        assert block(Tensor(x2)).data[0, :t + 1].tobytes() == base[0, :t + 1].tobytes()

    mask = AttentionMask(np.array([7]), causal=True)
    x3 = x.copy()
    x3[0, 7:] = 1e3
    a = block(Tensor(x), mask).data[0, :7]
    b = block(Tensor(x3), mask).data[0, :7]
    assert a.tobytes() == b.tobytes()


def test_fft_block_padding_invariance_bidirectional():
    block = small_block(seed=6)
    x = np.random.default_rng(6).standard_normal((2, 9, 16)).astype(np.float32)
    mask = AttentionMask(np.array([9, 5]))
    x2 = x.copy()
    x2[1, 5:] = -77.0
    assert block(Tensor(x), mask).data[1, :5].tobytes() == block(Tensor(x2), mask).data[1, :5].tobytes()


def test_fft_block_gradcheck():
    block = small_block(seed=7)
    names = [n for n, _ in block.named_parameters()]
    rng = np.random.default_rng(7)
    # jitter every parameter so zero biases do not sit ReLU inputs on the kink
    params = [p.data + 0.1 * rng.standard_normal(p.shape) for _, p in block.named_parameters()]
    x = rng.standard_normal((2, 5, 16))
    mask = AttentionMask(np.array([5, 3]), causal=False)

    def fn(xt, *ps):
        for name, t in zip(names, ps):
            setattr_path(block, name, t)
        return block(xt, mask)

    errs = gradcheck(fn, [x, *params])
    assert max(errs) < 1e-4


def setattr_path(root, dotted, value):
    *path, leaf = dotted.split(".")
    obj = root
    for part in path:
        obj = obj[int(part)] if part.isdigit() else getattr(obj, part)
    setattr(obj, leaf, value)


# ---------------------------------------------------------------- duration predictor

def test_duration_predictor_shapes_and_config():
    dp = DurationPredictor()
    assert dp.dropout == 0.5
    assert dp.conv1.kernel_size == 3 and dp.conv1.weight.shape == (3, 256, 256)
    assert dp.conv2.weight.shape == (3, 256, 256) and dp.proj.weight.shape == (256, 1)
    dp.initialize(0).eval()
    assert dp(Tensor(np.zeros((11, 256), np.float32))).shape == (11,)
    assert dp(Tensor(np.zeros((3, 11, 256), np.float32))).shape == (3, 11)


def test_duration_predictor_overfits_one_utterance():
    dp = DurationPredictor(d_model=32, hidden=32).bind_names().initialize(0)
    rng = np.random.default_rng(0)
    table = rng.standard_normal((10, 32)).astype(np.float32)
    ids = np.array([2, 5, 3, 7, 2, 9])
    gt = np.array([3, 5, 2, 6, 4, 2])
    h = Tensor(table[ids])
    opt = Adam(dp.parameters())
    for step in range(50):
        opt.zero_grad()
        with Tape():
            loss = ops.loss(dp(h, rng=np.random.default_rng([0, step])), np.log(gt), "mse")
        backward(loss)
        opt.step(3e-3)
    pred = dp.eval()(h).data
    assert np.mean(np.abs(np.exp(pred) - gt)) < 0.5


# ---------------------------------------------------------------- length regulation

def test_lr_to_frames_examples():
    np.testing.assert_array_equal(lr_to_frames([0.0, np.log(2.4), -50.0, np.log(2.6)]), [1, 2, 1, 3])
    assert lr_to_frames([1e6])[0] >= 1


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-30, 30), min_size=1, max_size=20))
def test_lr_to_frames_positive(log_d):
    d = lr_to_frames(log_d)
    assert np.all(d >= 1) and d.sum() >= 1


def test_length_regulator_examples():
    h = Tensor(np.arange(9, dtype=np.float32).reshape(3, 3))
    np.testing.assert_array_equal(length_regulator(h, [1, 1, 1]).data, h.data)
    out = length_regulator(h, [2, 0, 1]).data
    np.testing.assert_array_equal(out, h.data[[0, 0, 2]])
    with pytest.raises(EmptyExpansion):
        length_regulator(h, [0, 0, 0])
    with pytest.raises(ShapeError):
        length_regulator(h, [1, 1])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(0, 6), min_size=1, max_size=10).filter(lambda d: sum(d) > 0))
def test_length_regulator_length_and_gradient_routing(d):
    rng = np.random.default_rng(len(d))
    with float64_mode(), Tape():
        h = Tensor(rng.standard_normal((len(d), 4)), requires_grad=True)
        out = length_regulator(h, d)
        assert out.shape == (sum(d), 4)
        g = rng.standard_normal(out.shape)
        backward(ops.sum(ops.mul(out, Tensor(g))))
    index, _ = expand_durations(d)
    expected = np.zeros((len(d), 4))
    np.add.at(expected, index[0], g)
    np.testing.assert_allclose(h.grad, expected, atol=1e-12)


def test_length_regulator_batch_padding():
    h = Tensor(np.ones((2, 3, 4), np.float32))
    out = length_regulator(h, np.array([[2, 2, 1], [1, 0, 1]]))
    assert out.shape == (2, 5, 4)
    np.testing.assert_array_equal(out.data[1, 2:], 0.0)
    _, valid = expand_durations([[2, 2, 1], [1, 0, 1]])
    np.testing.assert_array_equal(valid.sum(1), [5, 2])


def test_model_config_defaults():
    cfg = ModelConfig()
    assert (cfg.d_model, cfg.n_heads, cfg.n_blocks, cfg.ffn_hidden) == (256, 2, 4, 1024)
    assert cfg.ffn_kernels == (9, 1) and cfg.dp_kernel == 3 and cfg.dp_dropout == 0.5
    with pytest.raises(ValueError):
        ModelConfig(d_model=255)
    with pytest.raises(ValueError):
        ModelConfig(ffn_kernels=(8, 1))
