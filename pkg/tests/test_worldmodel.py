import numpy as np
import pytest

from vqloco import diffcore as dc
from vqloco import geometry as geo
from vqloco.motion import FeatureLayout
from vqloco.worldmodel import FrozenError, WmWeights, WorldModel, train_world_model, wm_loss, wm_loss_np

from oracles import central_difference, check_param_grads, rel_err

LAYOUT = FeatureLayout()


def features(rng, n):
    s = rng.normal(size=(n, LAYOUT.dim))
    quats = rng.normal(size=(n * LAYOUT.n_body, 4))
    rot = geo.rot6d_encode(quats / np.linalg.norm(quats, axis=-1, keepdims=True))
    s[:, LAYOUT.rot] = rot.reshape(n, -1)
    return s


def randomized(wm, rng, scale=0.3):
    for arr in wm.params().values():
        arr[...] = rng.normal(0, scale / np.sqrt(max(arr.shape[0], 1)), size=arr.shape)
    return wm


class FixedSource:
    """A fixed set of recorded clips; mimics the trajectory buffer's sampling interface."""

    def __init__(self, feats, acts):
        self.feats, self.acts = feats, acts

    def sample_clips(self, count, length, space, rng):
        n, t = self.acts.shape[:2]
        if t < length:
            raise ValueError("clips too short")
        pick = rng.integers(0, n, size=count)
        off = rng.integers(0, t - length + 1, size=count)
        f = np.stack([self.feats[i, o:o + length + 1] for i, o in zip(pick, off)])
        a = np.stack([self.acts[i, o:o + length] for i, o in zip(pick, off)])
        return {"features": f, "actions": a}


def test_zero_init_is_identity():
    rng = np.random.default_rng(0)
    wm = WorldModel(LAYOUT, 6, hidden=(16,), rng=0)
    s = features(rng, 5)
    np.testing.assert_allclose(wm.predict_np(s, rng.normal(size=(5, 6))), s, atol=1e-12)


def test_rotation_channels_stay_valid():
    rng = np.random.default_rng(1)
    wm = randomized(WorldModel(LAYOUT, 6, hidden=(16,), rng=0), rng, 3.0)
    out = wm.predict_np(features(rng, 4), rng.normal(size=(4, 6)))
    m = geo.rot6d_to_matrix(out[:, LAYOUT.rot].reshape(-1, 6))
    np.testing.assert_allclose(np.einsum("nji,njk->nik", m, m), np.broadcast_to(np.eye(3), m.shape), atol=1e-12)


def test_graph_and_numpy_predictions_agree():
    rng = np.random.default_rng(2)
    wm = randomized(WorldModel(LAYOUT, 6, hidden=(16, 16), rng=0), rng)
    s, a = features(rng, 3), rng.normal(size=(3, 6))
    g = dc.Graph()
    np.testing.assert_allclose(wm.predict(g, g.const(s), g.const(a)).value, wm.predict_np(s, a), atol=1e-12)


def test_predict_gradient_wrt_action_and_state():
    rng = np.random.default_rng(3)
    wm = randomized(WorldModel(LAYOUT, 6, hidden=(16,), rng=0), rng)
    s, a = features(rng, 2), rng.normal(size=(2, 6))

    def value():
        out = wm.predict_np(s, a)
        return float(np.sum(out * out))

    g = dc.Graph()
    sn, an = g.param("s", s), g.param("a", a)
    out = wm.predict(g, sn, an)
    grads = g.backward(g.sum(g.square(out)))
    assert rel_err(grads["a"], central_difference(value, a)) < 1e-4
    assert rel_err(grads["s"], central_difference(value, s)) < 1e-4


def test_dimension_errors():
    wm = WorldModel(LAYOUT, 6, hidden=(8,), rng=0)
    with pytest.raises(ValueError):
        wm.predict_np(np.zeros((1, LAYOUT.dim)), np.zeros((1, 5)))
    with pytest.raises(ValueError):
        wm.predict_np(np.zeros((1, LAYOUT.dim - 1)), np.zeros((1, 6)))


def test_loss_examples():
    w = WmWeights().vector(LAYOUT)
    tgt = np.zeros((1, 1, LAYOUT.dim))
    assert wm_loss_np(tgt, tgt, w) == 0.0
    pred = tgt.copy()
    pred[0, 0, LAYOUT.pos[0]] = 0.5
    assert wm_loss_np(pred, tgt, w) == pytest.approx(1.0)
    g = dc.Graph()
    assert wm_loss(g, [g.const(pred[:, 0])], tgt, w).value == pytest.approx(1.0)


def test_loss_weights_are_uniform_within_blocks():
    w = WmWeights().vector(LAYOUT)
    for block, value in ((LAYOUT.pos, 2), (LAYOUT.rot, 1), (LAYOUT.vel, 10), (LAYOUT.angvel, 5)):
        assert np.all(w[block] == value)


def test_unit_discount_ignores_step_order():
    rng = np.random.default_rng(4)
    w = WmWeights().vector(LAYOUT)
    err = rng.normal(size=(3, 5, LAYOUT.dim))
    perm = rng.permutation(5)
    base = wm_loss_np(err, np.zeros_like(err), w)
    assert wm_loss_np(err[:, perm], np.zeros_like(err), w) == pytest.approx(base, rel=1e-12)


def test_loss_length_mismatch():
    w = WmWeights().vector(LAYOUT)
    with pytest.raises(ValueError):
        wm_loss_np(np.zeros((1, 2, LAYOUT.dim)), np.zeros((1, 3, LAYOUT.dim)), w)
    g = dc.Graph()
    with pytest.raises(ValueError):
        wm_loss(g, [g.const(np.zeros((1, LAYOUT.dim)))], np.zeros((1, 2, LAYOUT.dim)), w)


def test_weights_must_be_positive():
    with pytest.raises(ValueError):
        WmWeights(vel=0.0).validate()


def test_unroll_is_closed_loop():
    rng = np.random.default_rng(5)
    wm = randomized(WorldModel(LAYOUT, 6, hidden=(8,), rng=0), rng)
    s0 = features(rng, 2)
    acts = [rng.normal(size=(2, 6)) for _ in range(4)]
    seen = []
    g = dc.Graph()
    preds = wm.unroll(g, g.const(s0), [g.const(a) for a in acts], hook=lambda t, s: seen.append(s))
    assert seen[0].value is not None and np.array_equal(seen[0].value, s0)
    for t in range(1, 4):
        assert seen[t] is preds[t - 1]
    ref = s0
    for a in acts:
        ref = wm.predict_np(ref, a)
    np.testing.assert_allclose(preds[-1].value, ref, atol=1e-12)


def test_multistep_loss_gradients_match_finite_differences():
    rng = np.random.default_rng(6)
    wm = randomized(WorldModel(LAYOUT, 6, hidden=(8,), rng=0), rng)
    s0, tgt = features(rng, 2), features(rng, 6).reshape(2, 3, -1)
    acts = rng.normal(size=(2, 3, 6))
    w = WmWeights().vector(LAYOUT)

    def loss_fn():
        s, out = s0, []
        for t in range(3):
            s = wm.predict_np(s, acts[:, t])
            out.append(s)
        return wm_loss_np(np.stack(out, axis=1), tgt, w)

    g = dc.Graph()
    preds = wm.unroll(g, g.const(s0), [g.const(acts[:, t]) for t in range(3)])
    loss = wm_loss(g, preds, tgt, w)
    assert loss.value == pytest.approx(loss_fn(), rel=1e-12)
    assert check_param_grads(loss_fn, wm.params(), g.backward(loss), rng) < 1e-3


def _source(seed=7):
    rng = np.random.default_rng(seed)
    return FixedSource(features(rng, 4 * 9).reshape(4, 9, -1), rng.normal(size=(4, 8, 6)))


def test_training_is_deterministic_and_reduces_loss():
    finals = []
    for _ in range(2):
        wm = WorldModel(LAYOUT, 6, hidden=(16,), rng=1)
        adam = dc.AdamState(lr=1e-3)
        rng = np.random.default_rng(0)
        stats = [train_world_model(wm, _source(), adam, rng, 8, 4)["wm_loss"] for _ in range(60)]
        finals.append(dc.params_digest(wm.params()))
    assert finals[0] == finals[1]
    assert np.mean(stats[-10:]) < np.mean(stats[:10])


def test_frozen_model_refuses_training():
    wm = WorldModel(LAYOUT, 6, hidden=(8,), rng=0)
    wm.freeze()
    before = dc.params_digest(wm.params())
    with pytest.raises(FrozenError):
        train_world_model(wm, _source(), dc.AdamState(), np.random.default_rng(0), 4, 4)
    assert dc.params_digest(wm.params()) == before


def test_json_round_trip_and_architecture_check():
    rng = np.random.default_rng(8)
    wm = randomized(WorldModel(LAYOUT, 6, hidden=(8,), rng=0), rng)
    other = WorldModel(LAYOUT, 6, hidden=(8,), rng=5).load_json(wm.to_json())
    assert dc.params_digest(other.params()) == dc.params_digest(wm.params())
    with pytest.raises(ValueError):
        WorldModel(LAYOUT, 6, hidden=(9,), rng=0).load_json(wm.to_json())
