"""Learned dynamics over state features: an MLP predicts a scaled state change that is added
to the current features; the 6D rotation blocks are then re-orthonormalised (Gram-Schmidt)
inside the graph so every prediction stays a valid rotation and remains differentiable."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .motion import FeatureLayout

__all__ = ["WmWeights", "WorldModel", "FrozenError", "wm_loss", "wm_loss_np", "train_world_model",
           "feature_scales"]


class FrozenError(RuntimeError):
    """An update was requested on a frozen component."""


@dataclass(frozen=True)
class WmWeights:
    pos: float = 2.0
    rot: float = 1.0
    vel: float = 10.0
    angvel: float = 5.0
    gamma: float = 1.0

    def validate(self):
        if min(self.pos, self.rot, self.vel, self.angvel) <= 0:
            raise ValueError("world-model loss weights must be positive")
        return self

    def vector(self, layout: FeatureLayout):
        return layout.component_weights(self.pos, self.rot, self.vel, self.angvel)


# static per-component scales: input multipliers and delta-output multipliers
INPUT_SCALE = dict(pos=1.0, rot=1.0, vel=0.5, angvel=0.2, q=1.0, dq=0.1, height=1.0)
DELTA_SCALE = dict(pos=0.05, rot=0.05, vel=0.5, angvel=1.0, q=0.1, dq=1.0, height=0.02)


def feature_scales(layout: FeatureLayout, table):
    return layout.component_weights(table["pos"], table["rot"], table["vel"], table["angvel"],
                                    q=table["q"], dq=table["dq"], height=table["height"])


class WorldModel:
    def __init__(self, layout: FeatureLayout, n_action, hidden=(256, 256), rng=None, prefix="wm"):
        rng = np.random.default_rng(rng)
        self.layout = layout
        self.n_action = n_action
        self.hidden = tuple(hidden)
        self.net = dc.Mlp([layout.dim + n_action, *hidden, layout.dim], rng, prefix, zero_last=True)
        self.in_scale = np.concatenate([feature_scales(layout, INPUT_SCALE), np.ones(n_action)])
        self.delta_scale = feature_scales(layout, DELTA_SCALE)
        rot = layout.rot
        other = np.setdiff1d(np.arange(layout.dim), rot)
        self._rot_idx, self._other_idx = rot, other
        self._inv_perm = np.argsort(np.concatenate([other, rot]))
        self.frozen = False

    def params(self):
        return self.net.named_params()

    def freeze(self):
        self.frozen = True

    def _check(self, s_shape, a_shape):
        if s_shape[-1] != self.layout.dim or a_shape[-1] != self.n_action:
            raise ValueError(f"world model expects state width {self.layout.dim} and action width "
                             f"{self.n_action}, got {s_shape[-1]} and {a_shape[-1]}")

    def predict(self, g: dc.Graph, s: dc.Node, a: dc.Node) -> dc.Node:
        """Next-state features, connected to ``s`` and ``a`` in the graph."""
        self._check(s.shape, a.shape)
        x = g.concat([s, a], axis=-1) * g.const(self.in_scale)
        nxt = s + self.net(g, x) * g.const(self.delta_scale)
        return self._orthonormalise(g, nxt)

    def _orthonormalise(self, g, nxt):
        nb = self.layout.n_body
        r = g.reshape(nxt[:, self._rot_idx], (-1, nb, 2, 3))
        a1 = r[:, :, 0, :]
        a2 = r[:, :, 1, :]
        b1 = a1 / g.sqrt(g.sum(g.square(a1), axis=-1, keepdims=True))
        u2 = a2 - g.sum(b1 * a2, axis=-1, keepdims=True) * b1
        b2 = u2 / g.sqrt(g.sum(g.square(u2), axis=-1, keepdims=True))
        rot = g.reshape(g.concat([b1, b2], axis=-1), (-1, nb * 6))
        return g.concat([nxt[:, self._other_idx], rot], axis=-1)[:, self._inv_perm]

    def predict_np(self, s, a):
        """Numpy evaluation of ``predict`` for batched ``s`` (B, F) and ``a`` (B, A)."""
        s = np.atleast_2d(np.asarray(s, dtype=float))
        a = np.atleast_2d(np.asarray(a, dtype=float))
        self._check(s.shape, a.shape)
        nxt = s + self.net.apply(np.concatenate([s, a], axis=-1) * self.in_scale) * self.delta_scale
        nb = self.layout.n_body
        r = nxt[:, self._rot_idx].reshape(-1, nb, 2, 3)
        a1, a2 = r[:, :, 0], r[:, :, 1]
        b1 = a1 / np.sqrt(np.sum(a1 * a1, axis=-1, keepdims=True))
        u2 = a2 - np.sum(b1 * a2, axis=-1, keepdims=True) * b1
        b2 = u2 / np.sqrt(np.sum(u2 * u2, axis=-1, keepdims=True))
        out = nxt.copy()
        out[:, self._rot_idx] = np.concatenate([b1, b2], axis=-1).reshape(-1, nb * 6)
        return out

    def unroll(self, g: dc.Graph, s0: dc.Node, actions, hook=None):
        """Closed-loop rollout: every step consumes the previous prediction. ``hook(t, s_in)``
        sees the state node fed into step ``t``."""
        s = s0
        out = []
        for t, a in enumerate(actions):
            if hook is not None:
                hook(t, s)
            s = self.predict(g, s, a)
            out.append(s)
        return out

    def to_json(self):
        return {"hidden": list(self.hidden), "n_action": self.n_action, "frozen": self.frozen,
                "params": dc.params_to_json(self.params())}

    def load_json(self, doc):
        if list(doc["hidden"]) != list(self.hidden) or doc["n_action"] != self.n_action:
            raise ValueError("world-model checkpoint has a different architecture")
        dc.params_from_json(doc["params"], into=self.params())
        self.frozen = bool(doc["frozen"])
        return self


def wm_loss(g: dc.Graph, predicted, target, weights, gamma=1.0) -> dc.Node:
    """Sum over steps of ``gamma**t * ||w * (target_t - predicted_t)||_1``, averaged over the batch.

    ``predicted`` is a list of (B, F) nodes, ``target`` an array (B, T, F)."""
    target = np.asarray(target, dtype=float)
    if target.shape[1] != len(predicted):
        raise ValueError(f"trajectory lengths differ: {len(predicted)} predicted vs {target.shape[1]} simulated")
    w = g.const(np.asarray(weights, dtype=float))
    total = None
    for t, p in enumerate(predicted):
        err = g.sum(g.abs(g.const(target[:, t]) - p) * w) * (gamma ** t / target.shape[0])
        total = err if total is None else total + err
    return total


def wm_loss_np(predicted, target, weights, gamma=1.0):
    predicted = np.asarray(predicted, dtype=float)
    target = np.asarray(target, dtype=float)
    if predicted.shape != target.shape:
        raise ValueError(f"trajectory shapes differ: {predicted.shape} vs {target.shape}")
    disc = gamma ** np.arange(target.shape[1])
    per = np.sum(np.abs(target - predicted) * weights, axis=-1)
    return float(np.mean(np.sum(per * disc, axis=-1)))


def train_world_model(wm: WorldModel, source, adam: dc.AdamState, rng, batch_size=512, length=24,
                      weights: WmWeights = WmWeights(), max_grad_norm=1.0):
    """One Adam step on the closed-loop multi-step loss over clips drawn from ``source``.

    ``source.sample_clips(count, length, space, rng)`` must return ``features`` (B, L+1, F) and
    ``actions`` (B, L, A) of recorded simulator transitions."""
    if wm.frozen:
        raise FrozenError("world model is frozen")
    batch = source.sample_clips(batch_size, length, "global", rng)
    feats, acts = batch["features"], batch["actions"]
    g = dc.Graph()
    s0 = g.const(feats[:, 0])
    preds = wm.unroll(g, s0, [g.const(acts[:, t]) for t in range(length)])
    loss = wm_loss(g, preds, feats[:, 1:], weights.vector(wm.layout), weights.gamma)
    grads = g.backward(loss)
    grads, norm = dc.clip_by_global_norm(grads, max_grad_norm)
    dc.adam_step(wm.params(), grads, adam)
    return {"wm_loss": float(loss.value), "wm_grad_norm": norm}
