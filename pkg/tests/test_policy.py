import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vqloco import diffcore as dc
from vqloco.codebook import Codebook
from vqloco.policy import (LOGSTD_MAX, LOGSTD_MIN, PriorEncoder, TeacherWeights, kl_loss, make_student,
                           make_teacher, prior_act, prior_loss, student_loss, teacher_loss)
from vqloco.worldmodel import FrozenError, WorldModel

import gradchecks as gc
from gradchecks import LAYOUT, SMALL, random_features


def policies(mode="vq", seed=0):
    cb = Codebook(8, 4, rng=seed) if mode == "vq" else None
    t = make_teacher(LAYOUT, cb, mode, shape=SMALL, rng=seed, latent_dim=4)
    s = make_student(LAYOUT, cb, mode, hs=5, shape=SMALL, rng=seed + 1, latent_dim=4)
    return cb, t, s


# -- gradient oracles ------------------------------------------------------------------------


@pytest.mark.parametrize("mode", ["vq", "vae", "mlp"])
def test_teacher_loss_bptt_gradients(mode):
    assert gc.teacher_loss_error(mode, steps=8) < 1e-3


@pytest.mark.parametrize("mode", ["vq", "vae", "mlp"])
def test_student_loss_gradients(mode):
    assert gc.student_loss_error(mode) < 1e-3


def test_commitment_gradient_reaches_encoder():
    assert gc.commitment_in_policy_error() < 1e-3


def test_prior_and_kl_gradients():
    assert gc.prior_loss_error() < 1e-5
    assert gc.kl_error() < 1e-5


def test_action_gradient_reaches_encoder_through_straight_through():
    cb, t, _ = policies()
    gc.perturb(t.params(), np.random.default_rng(1))
    rng = np.random.default_rng(2)
    g = dc.Graph()
    out = t.act_graph(g, g.const(random_features(rng, (3,))), g.const(random_features(rng, (3,))))
    grads = g.backward(g.sum(g.square(out.mean)))
    enc = [v for k, v in grads.items() if ".encoder." in k]
    assert enc and any(np.any(v != 0) for v in enc)


# -- acting ------------------------------------------------------------------------------------


def test_mean_mode_is_deterministic_and_on_codebook():
    cb, t, s = policies()
    rng = np.random.default_rng(0)
    obs, goal = random_features(rng, (5,)), random_features(rng, (5,))
    a, b = t.act(obs, goal), t.act(obs, goal)
    assert a["action"].tobytes() == b["action"].tobytes()
    assert np.array_equal(a["z_hat"], cb.entries[a["index"]])
    so = np.zeros((5, 6 * LAYOUT.local_dim))
    out = s.act(so, np.zeros((5, LAYOUT.student_goal_dim)))
    assert np.all(np.isfinite(out["action"]))
    assert np.all((out["index"] >= 0) & (out["index"] < cb.k))


def test_graph_and_numpy_acting_agree():
    for mode in ("vq", "vae", "mlp"):
        _, t, _ = policies(mode)
        gc.perturb(t.params(), np.random.default_rng(3))
        rng = np.random.default_rng(4)
        obs, goal = random_features(rng, (4,)), random_features(rng, (4,))
        g = dc.Graph()
        out = t.act_graph(g, g.const(obs), g.const(goal))
        np.testing.assert_allclose(out.mean.value, t.act(obs, goal)["mean"], atol=1e-12)


def test_shape_errors():
    _, t, _ = policies()
    with pytest.raises(ValueError):
        t.act(np.zeros((1, LAYOUT.dim + 1)), np.zeros((1, LAYOUT.dim)))
    with pytest.raises(ValueError):
        make_teacher(LAYOUT, None, "vq")
    with pytest.raises(ValueError):
        make_teacher(LAYOUT, None, "transformer")


def test_logstd_is_clamped():
    _, t, _ = policies()
    rng = np.random.default_rng(5)
    for bias, bound in ((50.0, LOGSTD_MAX), (-50.0, LOGSTD_MIN)):
        t.logstd_head.p.biases[-1][:] = bias
        out = t.act(random_features(rng, (3,)), random_features(rng, (3,)), "sample", rng)
        np.testing.assert_array_equal(out["logstd"], bound)


def test_teacher_and_student_share_the_codebook():
    cb, t, s = policies()
    assert t.codebook is s.codebook is cb


# -- losses --------------------------------------------------------------------------------------


def test_teacher_loss_zero_for_a_perfect_rollout():
    cb, t, _ = policies()
    wm = WorldModel(LAYOUT, LAYOUT.n_joint, hidden=(8,), rng=0)   # zero delta head: identity dynamics
    for arr in t.params().values():
        arr[...] = 0.0
    cb.entries[0] = 0.0
    rng = np.random.default_rng(6)
    start = random_features(rng, (2, 1))
    targets = np.repeat(start, 3, axis=1)
    g, loss, info = teacher_loss(wm, t, start, targets, targets)
    assert loss.value < 1e-12    # rounding from re-orthonormalising the rotation blocks
    assert np.all(info["index"] == 0)


def test_teacher_loss_rotation_weight_example():
    cb, t, _ = policies()
    wm = WorldModel(LAYOUT, LAYOUT.n_joint, hidden=(8,), rng=0)
    for arr in t.params().values():
        arr[...] = 0.0
    cb.entries[0] = 0.0
    rng = np.random.default_rng(7)
    start = random_features(rng, (1, 1))
    targets = start.copy()
    targets[0, 0, LAYOUT.rot[0]] += 1.0
    _, loss, _ = teacher_loss(wm, t, start, targets, targets)
    assert loss.value == pytest.approx(0.1)


def test_teacher_loss_refuses_frozen_parts():
    cb, t, _ = policies()
    wm = WorldModel(LAYOUT, LAYOUT.n_joint, hidden=(8,), rng=0)
    x = np.zeros((1, 1, LAYOUT.dim))
    cb.freeze()
    with pytest.raises(FrozenError):
        teacher_loss(wm, t, x, x, x)


def test_smoothness_term_zero_for_constant_actions():
    _, t, _ = policies("mlp")
    wm = WorldModel(LAYOUT, LAYOUT.n_joint, hidden=(8,), rng=0)
    for arr in t.params().values():
        arr[...] = 0.0
    t.mean_head.p.biases[-1][:] = 0.3
    x = random_features(np.random.default_rng(8), (1, 4))
    losses = [teacher_loss(wm, t, x[:, :1], x, x, TeacherWeights(beta2=b2))[1].value for b2 in (0.01, 0.0, 5.0)]
    assert losses[0] == losses[1] == losses[2]


def test_student_loss_examples():
    g = dc.Graph()
    a = np.zeros((1, 6))
    z = np.zeros((1, 4))
    assert student_loss(g, g.const(a), a, g.const(z), z).value == 0.0
    a_s = a.copy()
    a_s[0, 0] = 1.0
    assert student_loss(g, g.const(a_s), a, g.const(z), z).value == pytest.approx(1.0)
    assert TeacherWeights().beta4 == 1.0


def test_prior_loss_examples():
    g = dc.Graph()
    assert prior_loss(g, g.const(np.zeros((1, 4))), [2]).value == pytest.approx(np.log(4))
    confident = np.full((1, 4), -50.0)
    confident[0, 1] = 50.0
    assert prior_loss(g, g.const(confident), [1]).value < 1e-12
    with pytest.raises(ValueError):
        prior_loss(g, g.const(np.zeros((1, 4))), [4])


def test_untrained_prior_first_loss_is_log_k():
    prior = PriorEncoder(12, 64, hidden=(16,), rng=0)
    g = dc.Graph()
    x = np.random.default_rng(0).normal(size=(10, 12))
    loss = prior_loss(g, prior.logits_graph(g, g.const(x)), np.arange(10))
    assert loss.value == pytest.approx(np.log(64), rel=1e-12)


def test_kl_examples():
    g = dc.Graph()
    assert kl_loss(g, g.const(np.zeros((1, 2))), g.const(np.zeros((1, 2)))).value == 0.0
    assert kl_loss(g, g.const(np.array([[1.0, 0.0]])), g.const(np.zeros((1, 2)))).value == pytest.approx(0.5)
    with pytest.raises(FloatingPointError):
        kl_loss(g, g.const(np.zeros((1, 2))), g.const(np.array([[np.nan, 0.0]])))


# -- prior acting -----------------------------------------------------------------------------


def prior_setup():
    cb, _, s = policies()
    prior = PriorEncoder(s.state_dim, cb.k, hidden=(8,), rng=0)
    gc.perturb(prior.params(), np.random.default_rng(9), 3.0)
    obs = np.random.default_rng(10).normal(size=(50, s.state_dim))
    return cb, s, prior, obs


def test_prior_act_low_temperature_is_argmax():
    cb, s, prior, obs = prior_setup()
    out = prior_act(prior, obs, cb, s, temperature=0.0)
    np.testing.assert_array_equal(out["index"], np.argmax(prior.logits(obs), axis=-1))
    out = prior_act(prior, obs, cb, s, temperature=1e-6, rng=np.random.default_rng(0))
    np.testing.assert_array_equal(out["index"], np.argmax(prior.logits(obs), axis=-1))


def test_prior_act_seeded_and_on_codebook():
    cb, s, prior, obs = prior_setup()
    a = prior_act(prior, obs, cb, s, rng=np.random.default_rng(3))
    b = prior_act(prior, obs, cb, s, rng=np.random.default_rng(3))
    np.testing.assert_array_equal(a["index"], b["index"])
    assert np.array_equal(a["z_hat"], cb.entries[a["index"]])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.1, 5.0))
def test_prior_probabilities_sum_to_one(seed, temp):
    prior = PriorEncoder(5, 7, hidden=(6,), rng=seed)
    gc.perturb(prior.params(), np.random.default_rng(seed), 2.0)
    p = prior.probs(np.random.default_rng(seed).normal(size=(4, 5)), temp)
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-12)
    assert np.all(p >= 0)


def test_json_round_trip():
    _, t, _ = policies()
    gc.perturb(t.params(), np.random.default_rng(0))
    _, other, _ = policies(seed=5)
    other.load_json(t.to_json())
    assert dc.params_digest(other.params()) == dc.params_digest(t.params())
    _, vae, _ = policies("vae")
    with pytest.raises(ValueError):
        vae.load_json(t.to_json())
