import math
from dataclasses import replace

import numpy as np
import pytest

from saliency_bci import attnet
from saliency_bci.attnet import (
    GRADCHECK_CONFIG,
    ModelParams,
    NetConfig,
    TrainConfig,
    attend,
    backward,
    decode_reconstruct,
    dense_head,
    embed,
    encode,
    forward,
    init_params,
    load_model,
    loss_mse,
    lstm_step,
    mask_input,
    numerical_gradient,
    relative_errors,
    save_model,
    train,
    trial_losses,
    zeros_like_params,
)
from saliency_bci.errors import InvalidSpec, ModelFormatError, NonFiniteActivation, ShapeMismatch
from saliency_bci.trialio import SynthSpec, generate_synthetic


def sigmoid(v):
    return 1.0 / (1.0 + math.exp(-v))


def with_arrays(params, **updates):
    return replace(params, **updates)


SMALL = NetConfig(m=3, d=2, h=2, n_k=2, n_v=2, n_c=2, dense_hidden=(3,))


# -- configuration and initialisation


def test_default_hyperparameters():
    cfg = NetConfig()
    assert (cfg.m, cfg.d, cfg.h, cfg.n_k, cfg.n_v, cfg.p1, cfg.p2) == (5, 4, 4, 4, 4, 0.6, 0.4)
    assert cfg.dense_hidden == (5, 10, 15)


@pytest.mark.parametrize("bad", [dict(m=0), dict(dense_hidden=()), dict(p1=1.5), dict(p2=-0.1)])
def test_invalid_net_config(bad):
    with pytest.raises(InvalidSpec):
        NetConfig(**bad)


def test_init_is_deterministic():
    a, b = init_params(NetConfig(), 7), init_params(NetConfig(), 7)
    assert all(np.array_equal(x, y) for x, y in zip(a.arrays(), b.arrays()))
    c = init_params(NetConfig(), 8)
    assert not np.array_equal(a.enc_w, c.enc_w)


def test_init_shapes_and_forget_bias():
    cfg = NetConfig(h=4, m=5, n_c=3)
    p = init_params(cfg, 0)
    assert p.enc_w.shape == (16, 9)
    assert p.dec_w.shape == (16, 8)
    p.check(cfg)
    for b in (p.enc_b, p.dec_b):
        np.testing.assert_array_equal(b[4:8], 1.0)
        assert not np.any(b[:4]) and not np.any(b[8:])
    assert [w.shape for w, _ in p.dense] == [(5, 4), (10, 5), (15, 10), (3, 15)]


def test_init_glorot_bounds():
    p = init_params(NetConfig(n_c=3), 0)
    s = math.sqrt(6 / (4 + 4))
    assert np.max(np.abs(p.w_q)) <= s


# -- embedding


def test_embed_zero_kernels():
    p = zeros_like_params(SMALL)
    assert not np.any(embed(p, np.ones((2, 5))))


def test_embed_hand_example():
    cfg = NetConfig(m=1, d=2, h=1, n_k=1, n_v=1, n_c=1, dense_hidden=(1,))
    p = with_arrays(zeros_like_params(cfg), embed_kernels=np.array([[[1.0, 1.0]]]))
    np.testing.assert_array_equal(embed(p, np.array([[1.0, 2.0, 3.0]])), [[3.0, 5.0, 3.0]])


def test_embed_identity_kernel():
    cfg = NetConfig(m=3, d=1, n_c=3)
    kern = np.eye(3)[:, :, None]
    p = with_arrays(zeros_like_params(cfg), embed_kernels=kern)
    x = np.random.default_rng(0).standard_normal((3, 6))
    np.testing.assert_array_equal(embed(p, x), x)


def test_embed_matches_direct_sum():
    cfg = NetConfig(m=2, d=3, n_c=2)
    p = init_params(cfg, 3)
    p = with_arrays(p, embed_bias=np.array([0.5, -0.25]))
    x = np.random.default_rng(1).standard_normal((2, 5))
    y = embed(p, x)
    for j in range(2):
        for t in range(5):
            want = p.embed_bias[j] + sum(
                p.embed_kernels[j, i, tau] * x[i, t + tau] for i in range(2) for tau in range(3) if t + tau < 5
            )
            assert y[j, t] == pytest.approx(want, abs=1e-14)


def test_embed_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        embed(zeros_like_params(SMALL), np.zeros((3, 4)))


# -- LSTM


def test_lstm_zero_everything():
    h, c, _ = lstm_step(np.zeros((8, 4)), np.zeros(8), np.zeros(2), np.zeros(2), np.zeros(2))
    assert not np.any(h) and not np.any(c)


def test_lstm_zero_weights_with_cell_state():
    h, c, _ = lstm_step(np.zeros((8, 4)), np.zeros(8), np.zeros(2), np.zeros(2), np.ones(2))
    np.testing.assert_allclose(c, 0.5)
    np.testing.assert_allclose(h, 0.5 * math.tanh(0.5))


def test_lstm_scalar_hand_computation():
    w = np.array([[0.5, -0.3], [0.2, 0.4], [-0.7, 0.1], [0.9, -0.6]])
    b = np.array([0.1, 1.0, -0.2, 0.05])
    x, h_prev, c_prev = 0.8, -0.4, 0.3
    zi, zf, zg, zo = (w[k, 0] * x + w[k, 1] * h_prev + b[k] for k in range(4))
    c_want = sigmoid(zf) * c_prev + sigmoid(zi) * math.tanh(zg)
    h_want = sigmoid(zo) * math.tanh(c_want)
    h, c, _ = lstm_step(w, b, np.array([x]), np.array([h_prev]), np.array([c_prev]))
    assert c[0] == pytest.approx(c_want, abs=1e-15)
    assert h[0] == pytest.approx(h_want, abs=1e-15)


def test_lstm_step_shape_check():
    with pytest.raises(ShapeMismatch):
        lstm_step(np.zeros((8, 5)), np.zeros(8), np.zeros(2), np.zeros(2), np.zeros(2))


def test_encode_single_step():
    p = init_params(NetConfig(n_c=3), 0)
    hid, fh, fc = encode(p, np.random.default_rng(0).standard_normal((5, 1)))
    assert hid.shape == (4, 1)
    np.testing.assert_array_equal(hid[:, 0], fh)


def test_encode_zero_params():
    hid, fh, fc = encode(zeros_like_params(NetConfig(n_c=3)), np.ones((5, 4)))
    assert not np.any(hid) and not np.any(fc)


def test_encode_is_chained_steps():
    p = init_params(NetConfig(n_c=3), 4)
    e = np.random.default_rng(2).standard_normal((5, 3))
    hid, fh, fc = encode(p, e)
    h, c = np.zeros(4), np.zeros(4)
    for t in range(3):
        h, c, _ = lstm_step(p.enc_w, p.enc_b, e[:, t], h, c)
        np.testing.assert_allclose(hid[:, t], h, atol=1e-15)
    np.testing.assert_allclose(fh, h, atol=1e-15)
    np.testing.assert_allclose(fc, c, atol=1e-15)


# -- attention


def test_attend_uniform_when_queries_vanish():
    p = init_params(NetConfig(n_c=3), 1)
    p = with_arrays(p, w_q=np.zeros_like(p.w_q))
    hid = np.random.default_rng(0).standard_normal((4, 6))
    lam, ctx = attend(p, hid)
    np.testing.assert_allclose(lam, 1 / 6)
    mean_v = (p.w_v @ hid).mean(axis=1)
    np.testing.assert_allclose(ctx, np.repeat(mean_v[:, None], 6, axis=1), atol=1e-15)


def test_attend_hand_example():
    cfg = NetConfig(m=1, d=1, h=2, n_k=2, n_v=2, n_c=1, dense_hidden=(1,))
    wq = np.array([[1.0, 0.5], [0.0, -1.0]])
    wk = np.array([[0.3, 0.0], [1.0, 1.0]])
    wv = np.array([[2.0, -1.0], [0.5, 0.5]])
    p = with_arrays(zeros_like_params(cfg), w_q=wq, w_k=wk, w_v=wv)
    hid = np.array([[0.2, -0.5, 1.0], [0.7, 0.1, -0.3]])
    cols = [hid[:, t] for t in range(3)]
    q = [wq @ c for c in cols]
    k = [wk @ c for c in cols]
    v = [wv @ c for c in cols]
    lam_want = np.zeros((3, 3))
    for i in range(3):
        e = [math.exp(float(q[i] @ k[t])) for t in range(3)]
        lam_want[i] = [x / sum(e) for x in e]
    ctx_want = np.column_stack([sum(lam_want[i, t] * v[t] for t in range(3)) for i in range(3)])
    lam, ctx = attend(p, hid)
    np.testing.assert_allclose(lam, lam_want, atol=1e-15)
    np.testing.assert_allclose(ctx, ctx_want, atol=1e-15)


def test_attention_rows_stochastic_under_large_logits():
    p = init_params(NetConfig(n_c=3), 2)
    p = with_arrays(p, w_q=p.w_q * 200, w_k=p.w_k * 200)
    lam, _ = attend(p, np.random.default_rng(5).standard_normal((4, 30)))
    assert np.all(lam >= 0)
    np.testing.assert_allclose(lam.sum(axis=1), 1.0, atol=1e-12)


# -- decoder and dense head


def test_decoder_zero_weights():
    p = init_params(NetConfig(n_c=3), 0)
    zero = ModelParams.from_arrays(p.arrays()[:7] + [np.zeros_like(a) for a in p.arrays()[7:]])
    out = decode_reconstruct(zero, np.ones((4, 5)), np.ones(4), np.ones(4))
    assert out.shape == (3, 5) and not np.any(out)


def test_dense_head_hand_chain():
    cfg = NetConfig(h=2, n_c=1, dense_hidden=(2,))
    w1, b1 = np.array([[1.0, -2.0], [0.5, 0.25]]), np.array([0.1, -0.3])
    w2, b2 = np.array([[1.5, -0.5]]), np.array([0.2])
    p = with_arrays(zeros_like_params(cfg), dense=((w1, b1), (w2, b2)))
    v = np.array([0.4, 0.3])
    a1 = [math.tanh(w1[j, 0] * v[0] + w1[j, 1] * v[1] + b1[j]) for j in range(2)]
    out = w2[0, 0] * a1[0] + w2[0, 1] * a1[1] + b2[0]
    assert dense_head(p, v)[-1][0] == pytest.approx(out, abs=1e-15)


@pytest.mark.parametrize("T", [1, 4, 9])
def test_decoder_output_shape(T):
    p = init_params(NetConfig(n_c=3), 0)
    assert decode_reconstruct(p, np.zeros((4, T)), np.zeros(4), np.zeros(4)).shape == (3, T)


# -- masking and loss


def test_mask_p1_zero_is_identity():
    x = np.random.default_rng(0).standard_normal((4, 10))
    np.testing.assert_array_equal(mask_input(x, 0.0, 0.4, np.random.default_rng(1)), x)


def test_mask_full():
    x = np.random.default_rng(0).standard_normal((4, 10))
    assert not np.any(mask_input(x, 1.0, 1.0, np.random.default_rng(1)))


def test_mask_counts():
    x = np.ones((10, 100))
    out = mask_input(x, 0.6, 0.4, np.random.default_rng(3))
    zeros_per_col = (out == 0).sum(axis=0)
    assert (zeros_per_col > 0).sum() == 60
    assert set(zeros_per_col[zeros_per_col > 0]) == {4}


def test_mask_deterministic_and_input_untouched():
    x = np.random.default_rng(0).standard_normal((5, 20))
    keep = x.copy()
    a = mask_input(x, 0.6, 0.4, np.random.default_rng(9))
    b = mask_input(x, 0.6, 0.4, np.random.default_rng(9))
    np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(x, keep)


def test_loss_examples():
    x = np.random.default_rng(0).standard_normal((3, 4))
    assert loss_mse(x, x) == 0.0
    assert loss_mse(np.zeros((2, 1)), np.array([[1.0], [2.0]])) == pytest.approx(2.5)
    y = x + 0.3
    assert loss_mse(x + 2 * (y - x), x) == pytest.approx(4 * loss_mse(y, x))
    with pytest.raises(ShapeMismatch):
        loss_mse(np.zeros((2, 2)), np.zeros((2, 3)))


# -- forward / backward


def test_forward_shapes_and_attention_rows():
    cfg = NetConfig(n_c=3)
    p = init_params(cfg, 0)
    x = np.random.default_rng(0).standard_normal((2, 3, 10))
    tr = forward(p, x)
    assert tr.reconstruction.shape == x.shape
    assert tr.embedded.shape == (2, 5, 10)
    assert tr.enc_hidden.shape == (2, 4, 10)
    assert tr.Q.shape == (2, 4, 10) and tr.V.shape == (2, 4, 10)
    assert tr.Lambda.shape == (2, 10, 10)
    assert tr.context.shape == (2, 4, 10)
    np.testing.assert_allclose(tr.Lambda.sum(axis=2), 1.0, atol=1e-9)


def test_forward_matches_composition():
    cfg = NetConfig(n_c=3)
    p = init_params(cfg, 5)
    x = np.random.default_rng(5).standard_normal((3, 8))
    hid, fh, fc = encode(p, embed(p, x))
    lam, ctx = attend(p, hid)
    rec = decode_reconstruct(p, ctx, fh, fc)
    tr = forward(p, x)
    np.testing.assert_allclose(tr.reconstruction[0], rec, atol=1e-14)
    np.testing.assert_allclose(tr.Lambda[0], lam, atol=1e-15)


def test_forward_is_bitwise_deterministic():
    p = init_params(NetConfig(n_c=3), 0)
    x = np.random.default_rng(0).standard_normal((3, 15))
    a, b = forward(p, x), forward(p, x)
    assert a.reconstruction.tobytes() == b.reconstruction.tobytes()
    assert a.Lambda.tobytes() == b.Lambda.tobytes()


def test_batch_equals_individual_trials():
    p = init_params(NetConfig(n_c=3), 1)
    x = np.random.default_rng(1).standard_normal((3, 3, 7))
    batch = forward(p, x).reconstruction
    for i in range(3):
        np.testing.assert_allclose(batch[i], forward(p, x[i]).reconstruction[0], atol=1e-14)


@pytest.mark.parametrize("seed", [0, 1])
def test_gradients_match_finite_differences(seed):
    errors = attnet.gradcheck(seed)
    assert max(errors.values()) < 1e-4, errors


def test_gradients_on_a_batch_with_larger_signal():
    cfg = NetConfig(m=3, d=2, h=3, n_k=2, n_v=3, n_c=2, dense_hidden=(4, 3))
    rng = np.random.default_rng(4)
    p = init_params(cfg, 4)
    x = 3.0 * rng.standard_normal((2, 2, 6))
    x_in = np.stack([mask_input(xi, 0.5, 0.5, rng) for xi in x])
    errors = relative_errors(backward(p, forward(p, x_in), x), numerical_gradient(p, x_in, x))
    assert max(errors.values()) < 1e-4, errors


def test_gradcheck_detects_a_wrong_gradient():
    cfg = GRADCHECK_CONFIG
    rng = np.random.default_rng(0)
    p = init_params(cfg, 0)
    x = rng.standard_normal((3, 12))
    g = backward(p, forward(p, x), x)
    bad = replace(g, w_k=g.w_k * 1.01)
    errors = relative_errors(bad, numerical_gradient(p, x, x))
    assert errors["w_k"] > 1e-3


def test_zero_residual_gives_zero_gradient():
    cfg = GRADCHECK_CONFIG
    p = zeros_like_params(cfg)
    x = np.zeros((3, 12))
    g = backward(p, forward(p, x), x)
    assert all(not np.any(a) for a in g.arrays())


def test_output_layer_gradient_linear_in_residual():
    cfg = GRADCHECK_CONFIG
    p = init_params(cfg, 3)
    x_in = np.random.default_rng(3).standard_normal((3, 12))
    tr = forward(p, x_in)
    rec = tr.reconstruction[0]
    target = rec - np.random.default_rng(4).standard_normal(rec.shape)
    g1 = backward(p, tr, target)
    g2 = backward(p, tr, rec - 2 * (rec - target))
    np.testing.assert_allclose(g2.dense[-1][0], 2 * g1.dense[-1][0], rtol=1e-12)
    np.testing.assert_allclose(g2.dense[-1][1], 2 * g1.dense[-1][1], rtol=1e-12)


def test_non_finite_activation_raises():
    p = init_params(NetConfig(n_c=3), 0)
    with pytest.raises(NonFiniteActivation):
        forward(p, np.full((3, 5), 1e300))
    bad = replace(p, dense=p.dense[:-1] + ((p.dense[-1][0], np.array([np.nan, 0.0, 0.0])),))
    with pytest.raises(NonFiniteActivation):
        forward(bad, np.zeros((3, 5)))


# -- training


@pytest.fixture(scope="module")
def tiny_set():
    return generate_synthetic(
        SynthSpec(n_c=3, T=100, trials_per_class=10, salient_start=30, salient_len=40, snr_db=6.0, seed=3)
    )


def test_training_is_deterministic(tiny_set):
    cfg = TrainConfig(epochs=3, seed=5)
    a = train(tiny_set, NetConfig(n_c=3), cfg)
    b = train(tiny_set, NetConfig(n_c=3), cfg)
    assert a.loss_curve == b.loss_curve
    assert all(np.array_equal(x, y) for x, y in zip(a.params.arrays(), b.params.arrays()))


def test_zero_learning_rate_keeps_params(tiny_set):
    init = init_params(NetConfig(n_c=3), 2)
    for opt in ("adam", "sgd"):
        res = train(tiny_set, NetConfig(n_c=3), TrainConfig(epochs=2, learning_rate=0.0, optimizer=opt), init=init)
        assert all(np.array_equal(x, y) for x, y in zip(init.arrays(), res.params.arrays()))


def test_training_reduces_loss(tiny_set):
    res = train(tiny_set, NetConfig(n_c=3), TrainConfig(epochs=200))
    assert res.loss_curve[-1] < 0.5 * res.loss_curve[0]


def test_single_trial_loss_independent_of_order(tiny_set):
    p = init_params(NetConfig(n_c=3), 0)
    data = tiny_set.stack()
    ids = [t.trial_id for t in tiny_set]

    def losses(order):
        masked = np.stack([mask_input(data[i], 0.6, 0.4, attnet.mask_rng(0, 0, ids[i])) for i in order])
        return dict(zip(order, trial_losses(forward(p, masked), data[order])))

    fwd = losses(list(range(len(ids))))
    rev = losses(list(reversed(range(len(ids)))))
    assert all(fwd[i] == pytest.approx(rev[i], rel=1e-12) for i in fwd)


def test_training_rejects_wrong_channel_count(tiny_set):
    with pytest.raises(ShapeMismatch):
        train(tiny_set, NetConfig(n_c=4), TrainConfig(epochs=1))


# -- serialization


def test_model_round_trip(tmp_path):
    cfg = NetConfig(n_c=3, dense_hidden=(5, 7))
    p = init_params(cfg, 9)
    save_model(tmp_path / "m.bin", p, cfg)
    q, cfg2 = load_model(tmp_path / "m.bin")
    assert cfg2 == cfg
    assert all(a.tobytes() == b.tobytes() for a, b in zip(p.arrays(), q.arrays()))


def test_model_file_layout(tmp_path):
    cfg = NetConfig(n_c=3)
    p = init_params(cfg, 9)
    save_model(tmp_path / "m.bin", p, cfg)
    blob = (tmp_path / "m.bin").read_bytes()
    assert blob[:8] == b"SBCIMODL"
    n_values = sum(a.size for a in p.arrays())
    tail = np.frombuffer(blob[-8 * n_values:], dtype="<f8")
    np.testing.assert_array_equal(tail, np.concatenate([a.ravel() for a in p.arrays()]))


def test_model_rejects_garbage(tmp_path):
    (tmp_path / "bad.bin").write_bytes(b"not a model")
    with pytest.raises(ModelFormatError):
        load_model(tmp_path / "bad.bin")
    cfg = NetConfig(n_c=3)
    save_model(tmp_path / "m.bin", init_params(cfg, 0), cfg)
    (tmp_path / "cut.bin").write_bytes((tmp_path / "m.bin").read_bytes()[:-8])
    with pytest.raises(ModelFormatError):
        load_model(tmp_path / "cut.bin")
