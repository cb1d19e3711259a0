import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vqloco import diffcore as dc
from vqloco.codebook import Codebook, codebook_usage, commitment_loss, straight_through
from vqloco.worldmodel import FrozenError

from oracles import brute_force_nearest


def tiny():
    cb = Codebook(2, 2, rng=0)
    cb.entries = np.array([[0.0, 0.0], [1.0, 1.0]])
    cb.sums = cb.entries.copy()
    return cb


def test_quantize_examples():
    cb = tiny()
    i, zh = cb.quantize(np.array([0.2, 0.1]))
    assert i == 0 and np.array_equal(zh, [0, 0])
    assert cb.quantize(np.array([0.6, 0.6]))[0] == 1
    assert cb.quantize(np.array([0.5, 0.5]))[0] == 0


def test_quantize_width_error():
    with pytest.raises(ValueError):
        tiny().quantize(np.zeros(3))


def test_quantize_matches_brute_force_with_ties():
    rng = np.random.default_rng(0)
    cb = Codebook(64, 32, rng=1)
    # duplicated entries force exact ties; the lower index must win
    cb.entries[40] = cb.entries[7]
    cb.entries[63] = cb.entries[2]
    z = rng.normal(0, 0.1, size=(1000, 32))
    z[::10] = cb.entries[[7, 40, 2, 63] * 25]
    idx, zh = cb.quantize(z)
    np.testing.assert_array_equal(idx, brute_force_nearest(cb.entries, z))
    assert np.array_equal(zh, cb.entries[idx])
    assert not np.any(idx == 40) and not np.any(idx == 63)


def test_quantize_is_idempotent_on_entries():
    cb = Codebook(64, 32, rng=3)
    np.testing.assert_array_equal(cb.quantize(cb.entries)[0], np.arange(64))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 16), st.integers(1, 6))
def test_quantize_returns_a_nearest_entry(seed, k, d):
    rng = np.random.default_rng(seed)
    cb = Codebook(k, d, rng=rng)
    z = rng.normal(size=(20, d))
    idx, zh = cb.quantize(z)
    dist = np.sum((z[:, None] - cb.entries[None]) ** 2, axis=-1)
    np.testing.assert_array_equal(np.sum((z - zh) ** 2, axis=-1), dist.min(axis=1))


def test_straight_through_value_and_identity_gradient():
    rng = np.random.default_rng(0)
    g = dc.Graph()
    z = g.param("z", rng.normal(size=(3, 4)))
    zh = rng.normal(size=(3, 4))
    st_ = straight_through(g, z, zh)
    assert np.array_equal(st_.value, zh)
    w = rng.normal(size=(3, 4))
    loss = g.sum(st_ * g.const(w))
    np.testing.assert_array_equal(g.backward(loss)["z"], w)


def test_straight_through_fixed_point():
    g = dc.Graph()
    v = np.array([[0.5, -1.0]])
    z = g.param("z", v.copy())
    out = straight_through(g, z, v)
    assert np.array_equal(out.value, v)
    np.testing.assert_array_equal(g.backward(g.sum(g.square(out)))["z"], 2 * v)


def test_commitment_loss_examples_and_gradient_path():
    g = dc.Graph()
    z = g.param("z", np.array([1.0, 0.0]))
    zh = g.param("zh", np.array([0.0, 0.0]))
    loss = commitment_loss(g, z, zh, 0.05)
    assert loss.value == pytest.approx(0.05)
    grads = g.backward(loss)
    np.testing.assert_allclose(grads["z"], [0.1, 0.0])
    assert "zh" not in grads or not np.any(grads["zh"])
    g = dc.Graph()
    v = np.array([[0.3, 0.2]])
    assert commitment_loss(g, g.const(v), v).value == 0.0


def test_ema_single_step_example():
    cb = Codebook(1, 2, rng=0)
    cb.counts = np.array([1.0])
    cb.sums = np.zeros((1, 2))
    cb.entries = np.zeros((1, 2))
    cb.ema_update(np.array([[1.0, 0.0]]), np.array([0]))
    assert cb.counts[0] == pytest.approx(1.0)
    np.testing.assert_allclose(cb.sums[0], [0.01, 0.0])
    np.testing.assert_allclose(cb.entries[0], [0.01, 0.0])


def test_ema_unassigned_code_keeps_its_entry():
    cb = Codebook(4, 3, rng=0)
    before = cb.entries.copy()
    cb.ema_update(np.ones((2, 3)), np.array([1, 1]))
    np.testing.assert_allclose(cb.entries[[0, 2, 3]], before[[0, 2, 3]], rtol=1e-13)
    np.testing.assert_allclose(cb.counts[[0, 2, 3]], 0.99)


def test_ema_fixed_point_is_the_partition_mean():
    rng = np.random.default_rng(0)
    cb = Codebook(8, 5, rng=1)
    z = rng.normal(size=(60, 5))
    idx = rng.integers(0, 4, size=60)
    for _ in range(2000):
        cb.ema_update(z, idx)
    for i in range(4):
        np.testing.assert_allclose(cb.entries[i], z[idx == i].mean(axis=0), atol=1e-4)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(0, 30))
def test_ema_ratio_invariant(seed, n):
    rng = np.random.default_rng(seed)
    cb = Codebook(6, 3, rng=rng)
    for _ in range(3):
        cb.ema_update(rng.normal(size=(n, 3)), rng.integers(0, 6, size=n))
        assert np.all(cb.counts > 0)
        np.testing.assert_allclose(cb.entries, cb.sums / cb.counts[:, None], rtol=1e-12)


def test_ema_errors():
    cb = Codebook(4, 2, rng=0)
    with pytest.raises(ValueError):
        cb.ema_update(np.zeros((2, 2)), np.array([0]))
    with pytest.raises(ValueError):
        cb.ema_update(np.zeros((1, 2)), np.array([4]))
    cb.freeze()
    before = cb.digest()
    with pytest.raises(FrozenError):
        cb.ema_update(np.zeros((1, 2)), np.array([0]))
    assert cb.digest() == before


def test_usage_examples():
    assert codebook_usage([3] * 10, 64)[1] == pytest.approx(1.0)
    freq, ppl = codebook_usage(np.arange(64), 64)
    assert ppl == pytest.approx(64.0) and freq.sum() == pytest.approx(1.0)
    assert codebook_usage([0, 1], 64)[1] == pytest.approx(2.0)
    with pytest.raises(ValueError):
        codebook_usage([], 64)


def test_json_round_trip():
    cb = Codebook(5, 3, rng=0)
    cb.ema_update(np.ones((2, 3)), np.array([0, 4]))
    back = Codebook.from_json(cb.to_json())
    assert back.digest() == cb.digest()
    assert back.decay == cb.decay and back.frozen == cb.frozen
