"""Encoder / bottleneck / decoder policies and their losses.

A ``LatentPolicy`` embeds its state history and goal (one ELU layer each), encodes the pair
into a latent ``z``, passes it through the bottleneck selected by ``mode`` and decodes
``(z_hat, state embedding)`` into a Gaussian over joint targets:

* ``vq``  -- nearest codebook entry with straight-through gradients (shared codebook)
* ``vae`` -- reparameterised continuous latent, KL-regularised
* ``mlp`` -- no bottleneck

The teacher sees heading-frame state features and the next reference frame; the student sees a
local (proprioceptive) history and a reduced goal. Both can share one ``Codebook``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .codebook import Codebook, commitment_loss, straight_through
from .motion import FeatureLayout
from .worldmodel import INPUT_SCALE, FrozenError, WorldModel, feature_scales

__all__ = [
    "MODES",
    "LOGSTD_MIN",
    "LOGSTD_MAX",
    "PolicyShape",
    "TeacherWeights",
    "LatentPolicy",
    "PriorEncoder",
    "make_teacher",
    "make_student",
    "teacher_loss",
    "student_loss",
    "prior_loss",
    "kl_loss",
    "prior_act",
    "local_scale",
    "student_goal_scale",
]

MODES = ("vq", "vae", "mlp")
LOGSTD_MIN, LOGSTD_MAX = -5.0, 1.0


@dataclass(frozen=True)
class PolicyShape:
    embed: int = 128
    enc_hidden: tuple = (256, 256)
    dec_hidden: tuple = (256, 256)


@dataclass(frozen=True)
class TeacherWeights:
    pos: float = 2.0 * 0.1
    rot: float = 1.0 * 0.1
    vel: float = 0.5 / 3 * 0.1
    angvel: float = 0.5 / 3 * 0.1
    beta1: float = 0.05     # commitment
    beta2: float = 0.01     # action smoothness
    beta3: float = 0.001    # action L2
    beta4: float = 1.0      # latent alignment (student)
    gamma: float = 1.0
    kl_weight: float = 0.01

    def vector(self, layout: FeatureLayout):
        return layout.component_weights(self.pos, self.rot, self.vel, self.angvel)


def local_scale(n_joint, frames=1):
    one = np.concatenate([np.ones(3), np.full(3, 0.2), np.ones(n_joint), np.full(n_joint, 0.1)])
    return np.tile(one, frames)


def student_goal_scale(n_joint):
    return np.concatenate([local_scale(n_joint), np.full(3, 10.0), [10.0]])


@dataclass
class Act:
    """Graph outputs of one policy evaluation."""

    z: dc.Node            # encoder output (pre-bottleneck; the mean for ``vae``)
    z_st: dc.Node         # decoder-side latent
    index: np.ndarray     # codebook indices (-1 when there is no codebook)
    z_hat: np.ndarray     # bottleneck value
    mean: dc.Node
    logstd: dc.Node
    action: dc.Node
    reg: dc.Node | None   # commitment (vq) or KL (vae) term, unweighted by the step discount


class LatentPolicy:
    def __init__(self, name, state_dim, goal_dim, n_action, codebook: Codebook | None, mode="vq",
                 shape: PolicyShape = PolicyShape(), rng=None, state_scale=None, goal_scale=None,
                 init_logstd=-2.0, latent_dim=None, beta1=0.05, kl_weight=0.01):
        if mode not in MODES:
            raise ValueError(f"unknown policy mode {mode!r}; expected one of {MODES}")
        if mode == "vq" and codebook is None:
            raise ValueError("vq mode needs a codebook")
        rng = np.random.default_rng(rng)
        self.name, self.mode = name, mode
        self.state_dim, self.goal_dim, self.n_action = state_dim, goal_dim, n_action
        self.codebook = codebook if mode == "vq" else None
        self.latent_dim = codebook.d if codebook is not None else (latent_dim or 32)
        self.shape = shape
        self.beta1, self.kl_weight = beta1, kl_weight
        e = shape.embed
        zdim = 2 * self.latent_dim if mode == "vae" else self.latent_dim
        self.state_emb = dc.Mlp([state_dim, e], rng, f"{name}.state_emb", final_activation=True)
        self.goal_emb = dc.Mlp([goal_dim, e], rng, f"{name}.goal_emb", final_activation=True)
        self.encoder = dc.Mlp([2 * e, *shape.enc_hidden, zdim], rng, f"{name}.encoder")
        self.decoder = dc.Mlp([self.latent_dim + e, *shape.dec_hidden], rng, f"{name}.decoder",
                              final_activation=True)
        self.mean_head = dc.Mlp([shape.dec_hidden[-1], n_action], rng, f"{name}.mean", last_scale=0.1)
        self.logstd_head = dc.Mlp([shape.dec_hidden[-1], n_action], rng, f"{name}.logstd", zero_last=True)
        self.logstd_head.p.biases[-1][:] = init_logstd
        self.state_scale = np.ones(state_dim) if state_scale is None else np.asarray(state_scale, float)
        self.goal_scale = np.ones(goal_dim) if goal_scale is None else np.asarray(goal_scale, float)
        self.frozen = False

    # -- parameters --------------------------------------------------------------------

    def modules(self):
        return (self.state_emb, self.goal_emb, self.encoder, self.decoder, self.mean_head, self.logstd_head)

    def params(self):
        out = {}
        for m in self.modules():
            out.update(m.named_params())
        return out

    def freeze(self):
        self.frozen = True

    def digest(self):
        return dc.params_digest(self.params())

    # -- graph evaluation ------------------------------------------------------------------

    def _check(self, state_shape, goal_shape):
        if state_shape[-1] != self.state_dim:
            raise ValueError(f"{self.name} expects state width {self.state_dim}, got {state_shape[-1]}")
        if goal_shape is not None and goal_shape[-1] != self.goal_dim:
            raise ValueError(f"{self.name} expects goal width {self.goal_dim}, got {goal_shape[-1]}")

    def embed_state(self, g, state):
        return self.state_emb(g, state * g.const(self.state_scale))

    def encode(self, g, state_e, goal):
        goal_e = self.goal_emb(g, goal * g.const(self.goal_scale))
        return self.encoder(g, g.concat([state_e, goal_e], axis=-1))

    def decode(self, g, z_st, state_e, eps=None):
        h = self.decoder(g, g.concat([z_st, state_e], axis=-1))
        mean = self.mean_head(g, h)
        logstd = g.clip(self.logstd_head(g, h), LOGSTD_MIN, LOGSTD_MAX)
        action = mean if eps is None else mean + g.exp(logstd) * g.const(eps)
        return mean, logstd, action

    def act_graph(self, g: dc.Graph, state: dc.Node, goal: dc.Node, eps=None, z_eps=None) -> Act:
        """Differentiable evaluation. ``eps`` is action noise (None for the mean action);
        ``z_eps`` is the latent noise of ``vae`` mode (None uses the latent mean)."""
        self._check(state.shape, goal.shape)
        state_e = self.embed_state(g, state)
        enc = self.encode(g, state_e, goal)
        n = state.value.shape[0]
        reg = None
        if self.mode == "vq":
            z = enc
            index, z_hat = self.codebook.quantize(z.value)
            z_st = straight_through(g, z, z_hat)
            reg = commitment_loss(g, z, z_hat, self.beta1)
        elif self.mode == "vae":
            d = self.latent_dim
            z = enc[:, :d]
            logsig = enc[:, d:]
            reg = kl_loss(g, z, logsig) * self.kl_weight
            z_st = z if z_eps is None else z + g.exp(logsig) * g.const(z_eps)
            index, z_hat = np.full(n, -1), z_st.value.copy()
        else:
            z = z_st = enc
            index, z_hat = np.full(n, -1), enc.value.copy()
        mean, logstd, action = self.decode(g, z_st, state_e, eps)
        return Act(z, z_st, index, z_hat, mean, logstd, action, reg)

    # -- numpy acting --------------------------------------------------------------------------

    def act(self, state, goal, mode="mean", rng=None):
        """Batched numpy acting. Returns dict with z, index, z_hat, mean, logstd, action."""
        state = np.atleast_2d(np.asarray(state, dtype=float))
        goal = np.atleast_2d(np.asarray(goal, dtype=float))
        self._check(state.shape, goal.shape)
        if mode not in ("mean", "sample"):
            raise ValueError("mode must be 'mean' or 'sample'")
        state_e = self.state_emb.apply(state * self.state_scale)
        goal_e = self.goal_emb.apply(goal * self.goal_scale)
        enc = self.encoder.apply(np.concatenate([state_e, goal_e], axis=-1))
        n = state.shape[0]
        if self.mode == "vq":
            z = enc
            index, z_hat = self.codebook.quantize(z)
        elif self.mode == "vae":
            z = enc[:, :self.latent_dim]
            z_hat = z
            if mode == "sample":
                z_hat = z + np.exp(enc[:, self.latent_dim:]) * rng.standard_normal(z.shape)
            index = np.full(n, -1)
        else:
            z = z_hat = enc
            index = np.full(n, -1)
        out = self.decode_np(z_hat, state_e, mode, rng)
        out.update(z=z, index=index, z_hat=z_hat)
        return out

    def decode_np(self, z_hat, state_e, mode="mean", rng=None):
        h = self.decoder.apply(np.concatenate([z_hat, state_e], axis=-1))
        mean = self.mean_head.apply(h)
        logstd = np.clip(self.logstd_head.apply(h), LOGSTD_MIN, LOGSTD_MAX)
        action = mean if mode == "mean" else mean + np.exp(logstd) * rng.standard_normal(mean.shape)
        return {"mean": mean, "logstd": logstd, "action": action}

    def embed_state_np(self, state):
        return self.state_emb.apply(np.atleast_2d(state) * self.state_scale)

    # -- persistence -----------------------------------------------------------------------------

    def to_json(self):
        return {"name": self.name, "mode": self.mode, "state_dim": self.state_dim, "goal_dim": self.goal_dim,
                "n_action": self.n_action, "frozen": self.frozen, "params": dc.params_to_json(self.params())}

    def load_json(self, doc):
        if doc["mode"] != self.mode:
            raise ValueError(f"checkpoint {self.name} mode is {doc['mode']!r}, expected {self.mode!r}")
        for key in ("state_dim", "goal_dim", "n_action"):
            if doc[key] != getattr(self, key):
                raise ValueError(f"checkpoint {self.name} {key} is {doc[key]}, expected {getattr(self, key)}")
        dc.params_from_json(doc["params"], into=self.params())
        self.frozen = bool(doc["frozen"])
        return self


def make_teacher(layout: FeatureLayout, codebook, mode="vq", ht=0, shape=PolicyShape(), rng=None, **kw):
    scale = feature_scales(layout, INPUT_SCALE)
    return LatentPolicy("teacher", layout.dim * (ht + 1), layout.dim, layout.n_joint, codebook, mode, shape,
                        rng, state_scale=np.tile(scale, ht + 1), goal_scale=scale, **kw)


def make_student(layout: FeatureLayout, codebook, mode="vq", hs=5, shape=PolicyShape(), rng=None, **kw):
    nj = layout.n_joint
    return LatentPolicy("student", layout.local_dim * (hs + 1), layout.student_goal_dim, nj, codebook, mode,
                        shape, rng, state_scale=local_scale(nj, hs + 1), goal_scale=student_goal_scale(nj), **kw)


class PriorEncoder:
    """Classifier from the student's local history to codebook logits."""

    def __init__(self, in_dim, k, hidden=(256, 256), rng=None, temperature=1.0, scale=None):
        rng = np.random.default_rng(rng)
        self.k = k
        self.in_dim = in_dim
        self.hidden = tuple(hidden)
        self.temperature = temperature
        self.net = dc.Mlp([in_dim, *hidden, k], rng, "prior", zero_last=True)
        self.scale = np.ones(in_dim) if scale is None else np.asarray(scale, float)
        self.frozen = False

    def params(self):
        return self.net.named_params()

    def logits_graph(self, g, obs):
        return self.net(g, obs * g.const(self.scale))

    def logits(self, obs):
        return self.net.apply(np.atleast_2d(obs) * self.scale)

    def probs(self, obs, temperature=None):
        temperature = self.temperature if temperature is None else temperature
        x = self.logits(obs) / max(temperature, 1e-12)
        x = x - x.max(axis=-1, keepdims=True)
        p = np.exp(x)
        return p / p.sum(axis=-1, keepdims=True)

    def to_json(self):
        return {"k": self.k, "in_dim": self.in_dim, "hidden": list(self.hidden), "temperature": self.temperature,
                "frozen": self.frozen, "params": dc.params_to_json(self.params())}

    def load_json(self, doc):
        if doc["k"] != self.k or doc["in_dim"] != self.in_dim:
            raise ValueError("prior checkpoint has a different architecture")
        dc.params_from_json(doc["params"], into=self.params())
        self.temperature = doc["temperature"]
        self.frozen = bool(doc["frozen"])
        return self


# -- losses -----------------------------------------------------------------------------------


def kl_loss(g: dc.Graph, mu: dc.Node, logsig: dc.Node) -> dc.Node:
    """KL(N(mu, sigma^2) || N(0, 1)) summed over width, averaged over the batch."""
    if not np.all(np.isfinite(logsig.value)):
        raise FloatingPointError("non-finite log-sigma in KL term")
    batch = mu.value.shape[0] if mu.value.ndim > 1 else 1
    term = g.square(mu) + g.exp(logsig * 2.0) - 1.0 - logsig * 2.0
    return g.sum(term) * (0.5 / batch)


def teacher_loss(wm: WorldModel, teacher: LatentPolicy, start, goals, targets, w: TeacherWeights = TeacherWeights(),
                 eps=None, z_eps=None, hook=None):
    """Unroll ``teacher`` through ``wm`` and score it against the reference.

    ``start``: (B, HT+1, F) heading-frame feature history ending at the start state.
    ``goals``: (B, L, F) teacher goals; ``targets``: (B, L, F) reference features in their own
    heading frame. ``eps`` / ``z_eps``: optional (B, L, .) noise. Returns (graph, loss, info)."""
    if teacher.frozen:
        raise FrozenError("teacher is frozen")
    if teacher.mode == "vq" and teacher.codebook.frozen:
        raise FrozenError("codebook is frozen; the teacher cannot be trained")
    start = np.asarray(start, dtype=float)
    goals = np.asarray(goals, dtype=float)
    targets = np.asarray(targets, dtype=float)
    b, length = goals.shape[:2]
    layout = wm.layout
    wt = w.vector(layout)
    g = dc.Graph()
    history = [g.const(start[:, i]) for i in range(start.shape[1])]
    h = start.shape[1]
    s = history[-1]
    prev = None
    total = None
    zs, idxs = [], []
    for t in range(length):
        obs = history[-h] if h == 1 else g.concat(history[-h:], axis=-1)
        out = teacher.act_graph(g, obs, g.const(goals[:, t]),
                                None if eps is None else eps[:, t], None if z_eps is None else z_eps[:, t])
        if hook is not None:
            hook(t, s, out)
        s = wm.predict(g, s, out.action)
        history.append(s)
        step = g.sum(g.abs(s - g.const(targets[:, t])) * g.const(wt)) * (1.0 / b)
        step = step + g.sum(g.square(out.action)) * (w.beta3 / b)
        if prev is not None:
            step = step + g.sum(g.square(out.action - prev)) * (w.beta2 / b)
        if out.reg is not None:
            step = step + out.reg
        prev = out.action
        step = step * (w.gamma ** t)
        total = step if total is None else total + step
        zs.append(out.z.value)
        idxs.append(out.index)
    info = {"z": np.stack(zs, axis=1), "index": np.stack(idxs, axis=1)}
    return g, total, info


def student_loss(g: dc.Graph, a_s: dc.Node, a_t, z_s: dc.Node, z_t, beta4=1.0, weights=None, batch=None) -> dc.Node:
    """``sum_t w_t (||aS - aT||^2 + beta4 ||zS - zT||^2)`` averaged over ``batch`` sequences.

    Rows are (sequence, step) pairs; ``weights`` carries the per-row discount (ones for gamma=1).
    Teacher quantities are constants, so gradients reach only the student."""
    a_t = g.const(a_t)
    z_t = g.const(z_t)
    rows = a_s.value.shape[0]
    batch = rows if batch is None else batch
    per = g.sum(g.square(a_s - a_t), axis=-1) + g.sum(g.square(z_s - z_t), axis=-1) * beta4
    if weights is not None:
        per = per * g.const(weights)
    return g.sum(per) * (1.0 / batch)


def prior_loss(g: dc.Graph, logits: dc.Node, target) -> dc.Node:
    """Mean cross-entropy of ``logits`` (B, K) against integer targets."""
    target = np.asarray(target, dtype=np.intp).reshape(-1)
    k = logits.shape[-1]
    if np.any((target < 0) | (target >= k)):
        raise ValueError(f"target index outside [0, {k})")
    lsm = g.log_softmax(logits, axis=-1)
    picked = lsm[np.arange(len(target)), target]
    return -g.sum(picked) * (1.0 / len(target))


def prior_act(prior: PriorEncoder, obs, codebook: Codebook, student: LatentPolicy, temperature=None, rng=None):
    """Sample a code from the prior, decode the student's mean action for it."""
    obs = np.atleast_2d(np.asarray(obs, dtype=float))
    temperature = prior.temperature if temperature is None else temperature
    if temperature <= 1e-8:
        index = np.argmax(prior.logits(obs), axis=-1)
    else:
        p = prior.probs(obs, temperature)
        u = rng.random((obs.shape[0], 1))
        index = np.minimum((np.cumsum(p, axis=-1) < u).sum(axis=-1), prior.k - 1)
    z_hat = codebook.entries[index]
    out = student.decode_np(z_hat, student.embed_state_np(obs), "mean")
    out.update(index=index, z_hat=z_hat)
    return out
