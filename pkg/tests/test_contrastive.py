import math

import numpy as np
import pytest

from foveassl import nn
from foveassl.contrastive import (
    Batch, DegenerateEmbedding, Encoder, EncoderConfig, EncoderState, TrainOptions, backward,
    cosine_sim, ema_update, embed, info_nce, info_nce_logits, normalize_rows, train_step,
)
from foveassl.optim import Lars, LarsConfig


def tiny_encoder(predictor=0):
    cfg = EncoderConfig(input_size=6, backbone=("conv:3:3", "relu", "avgpool:2", "flatten"),
                        hidden=24, out_dim=5, predictor_hidden=predictor)
    return Encoder(cfg)


def test_cosine_sim_examples():
    a = np.array([1.0, 2.0, 3.0])
    assert cosine_sim(a, a) == pytest.approx(1.0)
    assert cosine_sim(a, -a) == pytest.approx(-1.0)
    assert cosine_sim([1, 0], [0, 1]) == 0.0
    b = np.array([-2.0, 0.5, 4.0])
    assert cosine_sim(a, b) == cosine_sim(b, a)
    with pytest.raises(DegenerateEmbedding):
        cosine_sim([0, 0], [1, 0])


def test_loss_hand_values():
    q = np.array([[1.0, 0.0], [0.0, 1.0]])
    assert info_nce(q, q[::-1] * 0 + [[1, 1], [1, 1]], 0.1).loss_value == pytest.approx(math.log(2), abs=1e-12)
    r = info_nce(q, q, 0.1)
    assert abs(r.loss_value - math.log1p(math.exp(-10))) < 1e-12
    assert r.positive_similarity_mean == 1.0 and r.negative_similarity_mean == 0.0


def test_single_item_batch_is_zero():
    assert info_nce(np.array([[0.3, -1.0]]), np.array([[2.0, 1.0]]), 0.1).loss_value == 0.0


def test_shift_invariance_of_logits():
    rng = np.random.default_rng(0)
    logits = rng.normal(size=(6, 6))
    shift = rng.normal(size=(6, 1)) * 50
    l1, g1 = info_nce_logits(logits)
    l2, g2 = info_nce_logits(logits + shift)
    assert abs(l1 - l2) < 1e-12
    assert np.abs(g1 - g2).max() < 1e-12


def test_loss_bounded_when_positive_is_max():
    rng = np.random.default_rng(1)
    for _ in range(20):
        b = int(rng.integers(2, 10))
        q = rng.normal(size=(b, 4))
        k = q + 0.01 * rng.normal(size=(b, 4))
        sims = normalize_rows(q)[0] @ normalize_rows(k)[0].T
        if np.all(np.argmax(sims, axis=1) == np.arange(b)):
            assert 0 <= info_nce(q, k, 0.1).loss_value <= math.log(b)


def test_excluding_positive_changes_denominator():
    q = np.eye(3)
    with_pos = info_nce(q, q, 1.0).loss_value
    without = info_nce(q, q, 1.0, include_positive=False).loss_value
    assert with_pos == pytest.approx(math.log(math.e + 2) - 1)
    assert without == pytest.approx(math.log(2) - 1)


def test_query_gradient_matches_finite_differences():
    rng = np.random.default_rng(2)
    q = rng.normal(size=(4, 8))
    k = rng.normal(size=(4, 8))
    _, dq = info_nce(q, k, 0.1, return_grad=True)
    h = 1e-6
    num = np.zeros_like(q)
    for idx in np.ndindex(q.shape):
        qp, qm = q.copy(), q.copy()
        qp[idx] += h
        qm[idx] -= h
        num[idx] = (info_nce(qp, k, 0.1).loss_value - info_nce(qm, k, 0.1).loss_value) / (2 * h)
    assert np.abs(num - dq).max() / np.abs(num).max() < 1e-6


def test_near_stationary_at_optimum():
    q = np.array([[1.0, 0.0], [-1.0, 0.0]])
    _, dq = info_nce(q, q, 0.1, return_grad=True)
    assert np.linalg.norm(dq) < 1e-7


def test_duplicated_batch_keeps_gradient_structure():
    rng = np.random.default_rng(3)
    q = rng.normal(size=(3, 4))
    _, dq = info_nce(np.vstack([q, q]), np.vstack([q, q]), 0.5, return_grad=True)
    assert np.allclose(dq[:3], dq[3:])


def test_embed_unit_norm_and_deterministic():
    enc = tiny_encoder()
    params = enc.init(np.random.default_rng(0))
    x = np.random.default_rng(1).random((5, 6, 6, 3))
    e = embed(enc, params, x)
    assert np.allclose(np.linalg.norm(e.vectors, axis=1), 1, atol=1e-6)
    assert np.array_equal(e.vectors, embed(enc, params, x).vectors)
    with pytest.raises(ValueError):
        embed(enc, params, np.zeros((2, 5, 6, 3)))


def test_zero_dense_encoder_flags_degenerate():
    enc = Encoder(EncoderConfig(input_size=2, backbone=("flatten",), hidden=3, out_dim=2))
    params = {k: np.zeros_like(v) for k, v in enc.init(np.random.default_rng(0)).items()}
    e = embed(enc, params, np.zeros((1, 2, 2, 3)))
    assert e.degenerate.all() and not e.vectors.any()


def numeric_grad(enc, params, x, k, tau, name, idx, h=1e-5):
    def loss(p):
        z, _ = enc.forward(p, x, query=True)
        return info_nce(z, k, tau).loss_value
    p1 = {n: v.copy() for n, v in params.items()}
    p2 = {n: v.copy() for n, v in params.items()}
    p1[name][idx] += h
    p2[name][idx] -= h
    return (loss(p1) - loss(p2)) / (2 * h)


@pytest.mark.parametrize("predictor", [0, 8])
def test_encoder_gradient_including_predictor(predictor):
    enc = tiny_encoder(predictor)
    rng = np.random.default_rng(4)
    params = enc.init(rng)
    x = rng.random((4, 6, 6, 3))
    k = rng.normal(size=(4, 5))
    grads, _ = backward(enc, params, x, k, 0.1)
    assert set(grads) == set(params)
    for name, g in grads.items():
        for idx in list(np.ndindex(g.shape))[:6]:
            num = numeric_grad(enc, params, x, k, 0.1, name, idx)
            assert abs(num - g[idx]) <= 1e-6 + 1e-4 * abs(num)


def test_ema_examples():
    s = EncoderState({"w": np.ones(3)}, {"w": np.zeros(3)})
    assert np.allclose(ema_update(s, 0.996).theta_k["w"], 0.004)
    assert np.array_equal(ema_update(s, 1.0).theta_k["w"], np.zeros(3))
    assert np.array_equal(ema_update(s, 0.5).theta_q["w"], np.ones(3))
    with pytest.raises(ValueError):
        ema_update(s, 1.5)
    with pytest.raises(ValueError):
        ema_update(EncoderState({"w": np.ones(3)}, {"w": np.zeros(2)}), 0.9)


def make_step_inputs(seed=0):
    enc = tiny_encoder()
    rng = np.random.default_rng(seed)
    state = EncoderState.create(enc, rng)
    batch = Batch(rng.random((6, 6, 6, 3)), rng.random((6, 6, 6, 3)))
    return enc, state, batch


def test_train_step_deterministic_and_ordered():
    enc, state, batch = make_step_inputs()
    opt = lambda: Lars(LarsConfig(base_lr=0.5, batch_size=6, total_steps=10))
    s1, r1 = train_step(enc, batch, state, opt())
    s2, r2 = train_step(enc, batch, state, opt())
    for name in s1.theta_q:
        assert s1.theta_q[name].tobytes() == s2.theta_q[name].tobytes()
        assert s1.theta_k[name].tobytes() == s2.theta_k[name].tobytes()
        # theta_k follows the EMA rule applied to the post-step theta_q
        want = 0.996 * state.theta_k[name] + (1 - 0.996) * s1.theta_q[name]
        assert np.array_equal(s1.theta_k[name], want)
    assert r1.loss_value == r2.loss_value and s1.step == 1


def test_theta_k_only_moves_through_ema():
    enc, state, batch = make_step_inputs(1)
    new, _ = train_step(enc, batch, state, Lars(LarsConfig(total_steps=5)), TrainOptions(momentum=1.0))
    for name in state.theta_k:
        assert np.array_equal(new.theta_k[name], state.theta_k[name])


def test_symmetric_loss_runs():
    enc, state, batch = make_step_inputs(2)
    _, rep = train_step(enc, batch, state, Lars(LarsConfig(total_steps=5)), TrainOptions(symmetric=True))
    assert np.isfinite(rep.loss_value)


def test_every_layer_type_parses():
    for kind in nn.LAYER_TYPES:
        tok = {"conv": "conv:4:3:1", "avgpool": "avgpool:2", "dense": "dense:3"}.get(kind, kind)
        layer = nn.parse_layer(tok, "x")
        assert layer.kind == kind and nn.layer_token(layer).split(":")[0] == kind
