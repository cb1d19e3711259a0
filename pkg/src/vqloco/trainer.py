"""Staged training: world model + teacher pretraining, warm-up distillation, annealed
take-over distillation, and prior-encoder post-training.

Stages by epoch ``e`` and milestones ``(ms1, ms2, ms3)``::

    e < ms1          pretrain   world model and teacher updates (world model only for the first
                                ``wm_warmup`` epochs), teacher-only rollouts
    ms1 <= e < ms2   warmup     + student updates on teacher demonstrations
    ms2 <= e <= ms3  distill    world model, codebook and teacher frozen; student only;
                                rollouts mix teacher/student with the annealed probability
    e > ms3          post       nothing left to anneal (prior training is a separate call)
"""

from __future__ import annotations

import json
import logging
from collections import deque
from pathlib import Path

import numpy as np

from . import diffcore as dc
from . import motion as mo
from .codebook import Codebook, codebook_usage
from .config import RunConfig
from .policy import (LatentPolicy, PolicyShape, PriorEncoder, TeacherWeights, local_scale, make_student,
                     make_teacher, prior_loss, student_loss, teacher_loss)
from .rollout import TAG_STUDENT, TAG_TEACHER, EpisodeSpec, Trajectory, run_episodes
from .worldmodel import FrozenError, WmWeights, WorldModel, train_world_model

log = logging.getLogger(__name__)

__all__ = [
    "STAGES",
    "stage_of",
    "takeover_probability",
    "InsufficientData",
    "FreezeViolation",
    "TrajectoryBuffer",
    "Trainer",
    "mixed_policy",
]

STAGES = ("pretrain", "warmup", "distill", "post")


class InsufficientData(ValueError):
    pass


class FreezeViolation(RuntimeError):
    """A frozen component's parameters changed."""


def _check_ms(ms):
    ms1, ms2, ms3 = ms
    if not 0 < ms1 < ms2 < ms3:
        raise ValueError(f"milestones must satisfy 0 < ms1 < ms2 < ms3, got {tuple(ms)}")


def stage_of(epoch, ms):
    _check_ms(ms)
    ms1, ms2, ms3 = ms
    if epoch < ms1:
        return "pretrain"
    if epoch < ms2:
        return "warmup"
    if epoch <= ms3:
        return "distill"
    return "post"


def takeover_probability(epoch, ms, hard_switch=False):
    """Probability of the teacher acting at a rollout step."""
    _check_ms(ms)
    _, ms2, ms3 = ms
    if epoch < ms2:
        return 1.0
    if hard_switch or epoch > ms3:
        return 0.0
    return 1.0 - (epoch - ms2) / (ms3 - ms2)


def _history(arr, offsets, length, h):
    """Flattened windows ``arr[o+t-h : o+t+1]`` (zeros before index 0) for each offset, t < length."""
    padded = np.concatenate([np.zeros((h,) + arr.shape[1:]), arr])
    win = np.lib.stride_tricks.sliding_window_view(padded, h + 1, axis=0)   # (n, dim, h+1)
    win = np.swapaxes(win, -1, -2).reshape(win.shape[0], -1)
    return np.stack([win[o:o + length] for o in offsets])


class TrajectoryBuffer:
    """Ring of at most ``capacity`` trajectories, evicted oldest first."""

    def __init__(self, capacity=256, ht=0, hs=5):
        self.capacity = capacity
        self.ht, self.hs = ht, hs
        self.items: deque[Trajectory] = deque()

    def __len__(self):
        return len(self.items)

    def append(self, traj: Trajectory):
        if len(self.items) >= self.capacity:
            self.items.popleft()
        self.items.append(traj)

    def evict(self, n):
        for _ in range(min(n, len(self.items))):
            self.items.popleft()

    def n_steps(self):
        return sum(len(t) for t in self.items)

    def sample_clips(self, count, length, space="global", rng=None):
        """``count`` windows of ``length`` steps, uniform over (trajectory, start offset) pairs.

        ``global`` returns features, actions, start histories, teacher goals and targets;
        ``both`` adds index-aligned teacher and student observations and student goals."""
        if space not in ("global", "both"):
            raise ValueError("space must be 'global' or 'both'")
        trajs = list(self.items)
        spans = np.array([len(t) - length + 1 for t in trajs], dtype=np.int64)
        if not trajs or spans.max(initial=0) <= 0:
            raise InsufficientData(f"no stored trajectory has {length} steps")
        spans = np.maximum(spans, 0)
        pick = rng.choice(len(trajs), size=count, p=spans / spans.sum())
        offsets = np.array([rng.integers(0, spans[i]) for i in pick])
        ht, hs = self.ht, self.hs
        out = {"traj": pick, "offset": offsets}
        groups = {}
        for row, (i, o) in enumerate(zip(pick, offsets)):
            groups.setdefault(int(i), []).append((row, int(o)))

        def gather(name, n, extra=0):
            first = getattr(trajs[0], name)
            res = np.empty((count, n + extra) + first.shape[1:], dtype=first.dtype)
            for i, rows in groups.items():
                arr = getattr(trajs[i], name)
                for row, o in rows:
                    res[row] = arr[o:o + n + extra]
            return res

        out["features"] = gather("features", length, 1)
        out["actions"] = gather("actions", length)
        out["teacher_goal"] = gather("teacher_goal", length)
        out["target"] = gather("target", length)
        start = np.empty((count, ht + 1, out["features"].shape[-1]))
        for i, rows in groups.items():
            f = trajs[i].features
            for row, o in rows:
                lo = o - ht
                block = f[max(lo, 0):o + 1]
                start[row] = np.concatenate([np.zeros((max(-lo, 0), f.shape[1])), block])
        out["start"] = start
        if space == "both":
            tob = np.empty((count, length, (ht + 1) * out["features"].shape[-1]))
            sob = np.empty((count, length, (hs + 1) * trajs[0].local.shape[-1]))
            for i, rows in groups.items():
                offs = [o for _, o in rows]
                rws = [r for r, _ in rows]
                tob[rws] = _history(trajs[i].features, offs, length, ht)
                sob[rws] = _history(trajs[i].local, offs, length, hs)
            out["teacher_obs"] = tob
            out["student_obs"] = sob
            out["student_goal"] = gather("student_goal", length)
        return out

    def to_json(self):
        return {"capacity": self.capacity, "ht": self.ht, "hs": self.hs, "items": [t.to_json() for t in self.items]}

    @classmethod
    def from_json(cls, d):
        buf = cls(d["capacity"], d["ht"], d["hs"])
        for t in d["items"]:
            buf.items.append(Trajectory.from_json(t))
        return buf


def mixed_policy(teacher: LatentPolicy, student: LatentPolicy, p_teacher, sample=True):
    """Per-step, per-environment Bernoulli choice between teacher and student."""
    mode = "sample" if sample else "mean"

    def fn(obs, rng):
        m = len(obs["teacher_goal"])
        use_teacher = rng.random(m) < p_teacher
        t = teacher.act(obs["teacher_obs"], obs["teacher_goal"], mode, rng)
        action, index = t["action"].copy(), t["index"].copy()
        if not use_teacher.all():
            s = student.act(obs["student_obs"], obs["student_goal"], mode, rng)
            pick = ~use_teacher
            action[pick] = s["action"][pick]
            index[pick] = s["index"][pick]
        tag = np.where(use_teacher, TAG_TEACHER, TAG_STUDENT)
        return {"action": action, "tag": tag, "index": index}

    return fn


def load_clip_corpus(cfg: RunConfig, morph=None):
    """Clips named in the config, or a synthetic corpus when none are given."""
    from .config import default_gaits

    morph = morph or cfg.morphology()
    if cfg.clips:
        return [mo.load_clip(p, cfg.fps) for p in cfg.clips]
    clips = []
    for spec in default_gaits(cfg.n_synth_clips, cfg.seed):
        clips.append(mo.loop_clip(mo.synth_clip(spec, morph), cfg.gait_loops))
    return clips


class Trainer:
    """Holds every learned component, optimiser state, the replay buffer and the run rng."""

    def __init__(self, cfg: RunConfig, clips, morph=None):
        cfg.validate()
        self.cfg = cfg
        self.sim_cfg = cfg.sim_config()
        if morph is not None:
            from dataclasses import replace
            self.sim_cfg = replace(self.sim_cfg, morphology=morph)
        self.ranges = cfg.randomization()
        self.clips = list(clips)
        if not self.clips:
            raise ValueError("need at least one reference clip")
        self.layout = mo.FeatureLayout.for_morphology(self.sim_cfg.morphology)
        init = np.random.default_rng(cfg.seed)
        seeds = init.integers(0, 2**63 - 1, size=6)
        shape = PolicyShape(cfg.embed_dim, tuple(cfg.enc_hidden), tuple(cfg.dec_hidden))
        self.codebook = (Codebook(cfg.codebook_size, cfg.code_dim, seeds[0], cfg.ema_decay)
                         if cfg.mode == "vq" else None)
        kw = dict(init_logstd=cfg.init_logstd, latent_dim=cfg.code_dim, beta1=cfg.beta1, kl_weight=cfg.kl_weight)
        self.wm = WorldModel(self.layout, self.layout.n_joint, cfg.wm_hidden, seeds[1])
        self.teacher = make_teacher(self.layout, self.codebook, cfg.mode, cfg.history_teacher, shape, seeds[2], **kw)
        self.student = make_student(self.layout, self.codebook, cfg.mode, cfg.history_student, shape, seeds[3], **kw)
        self.prior = PriorEncoder(self.student.state_dim, cfg.codebook_size, cfg.prior_hidden, seeds[4],
                                  cfg.prior_temperature, scale=local_scale(self.layout.n_joint, cfg.history_student + 1))
        self.adam = {name: dc.AdamState(lr=cfg.lr) for name in ("teacher", "student")}
        self.adam["wm"] = dc.AdamState(lr=cfg.wm_lr)
        self.adam["prior"] = dc.AdamState(lr=cfg.prior_lr)
        self.buffer = TrajectoryBuffer(cfg.buff_len, cfg.history_teacher, cfg.history_student)
        self.rng = np.random.default_rng(seeds[5])
        self.epoch = 0
        self.wm_weights = WmWeights(*cfg.wm_weights, gamma=cfg.gamma)
        self.t_weights = TeacherWeights(*cfg.teacher_weights, beta1=cfg.beta1, beta2=cfg.beta2, beta3=cfg.beta3,
                                        beta4=cfg.beta4, gamma=cfg.gamma, kl_weight=cfg.kl_weight)
        self.ledger = []

    # -- bookkeeping -----------------------------------------------------------------------

    def digests(self):
        d = {"world_model": dc.params_digest(self.wm.params()), "teacher": self.teacher.digest(),
             "student": self.student.digest(), "prior": dc.params_digest(self.prior.params())}
        if self.codebook is not None:
            d["codebook"] = self.codebook.digest()
        return d

    def frozen_components(self):
        out = []
        if self.wm.frozen:
            out.append("world_model")
        if self.codebook is not None and self.codebook.frozen:
            out.append("codebook")
        if self.teacher.frozen:
            out.append("teacher")
        return out

    def freeze_for_distillation(self):
        self.wm.freeze()
        if self.codebook is not None:
            self.codebook.freeze()
        self.teacher.freeze()

    def _assert_frozen(self, before, where):
        after = self.digests()
        for name in self.frozen_components():
            if before[name] != after[name]:
                raise FreezeViolation(f"{name} parameters changed during {where}")

    # -- data --------------------------------------------------------------------------------

    def episode_spec(self, **kw):
        base = dict(max_steps=self.cfg.max_episode_len, window=self.cfg.clip_len, random_start=self.cfg.random_start)
        base.update(kw)
        return EpisodeSpec(**base)

    def collect(self, n, p_teacher):
        fn = mixed_policy(self.teacher, self.student, p_teacher, sample=True)
        return run_episodes(n, self.clips, fn, self.sim_cfg, self.ranges, self.rng, self.episode_spec(),
                            self.cfg.n_envs, self.cfg.history_teacher, self.cfg.history_student)

    def refill(self, p_teacher):
        """Evict the oldest ``evict_count`` trajectories (not on the first fill) and collect until
        the buffer holds ``refill_target``."""
        if len(self.buffer):
            self.buffer.evict(self.cfg.evict_count)
        need = self.cfg.refill_target - len(self.buffer)
        trajs = self.collect(need, p_teacher) if need > 0 else []
        for t in trajs:
            self.buffer.append(t)
        return trajs

    # -- updates -----------------------------------------------------------------------------

    def update_world_model(self):
        return train_world_model(self.wm, self.buffer, self.adam["wm"], self.rng, self.cfg.wm_batch,
                                 self.cfg.wm_len, self.wm_weights, self.cfg.max_grad_norm)

    def update_teacher(self):
        cfg = self.cfg
        batch = self.buffer.sample_clips(cfg.teacher_batch, cfg.teacher_len, "global", self.rng)
        b, length = batch["teacher_goal"].shape[:2]
        eps = self.rng.standard_normal((b, length, self.layout.n_joint))
        z_eps = (self.rng.standard_normal((b, length, cfg.code_dim)) if cfg.mode == "vae" else None)
        g, loss, info = teacher_loss(self.wm, self.teacher, batch["start"], batch["teacher_goal"], batch["target"],
                                     self.t_weights, eps=eps, z_eps=z_eps)
        before_wm = dc.params_digest(self.wm.params())
        grads = g.backward(loss)
        grads = {k: v for k, v in grads.items() if k.startswith("teacher.")}
        grads, norm = dc.clip_by_global_norm(grads, cfg.max_grad_norm)
        dc.adam_step(self.teacher.params(), grads, self.adam["teacher"])
        if dc.params_digest(self.wm.params()) != before_wm:
            raise FreezeViolation("teacher update touched the world model")
        stats = {"teacher_loss": float(loss.value), "teacher_grad_norm": norm}
        if self.codebook is not None:
            self.codebook.ema_update(info["z"].reshape(-1, cfg.code_dim), info["index"].reshape(-1))
        return stats

    def student_batch(self, count, length):
        batch = self.buffer.sample_clips(count, length, "both", self.rng)
        flat = lambda x: x.reshape((-1,) + x.shape[2:])  # noqa: E731
        tob, tg = flat(batch["teacher_obs"]), flat(batch["teacher_goal"])
        sob, sg = flat(batch["student_obs"]), flat(batch["student_goal"])
        t = self.teacher.act(tob, tg, "mean")
        weights = np.tile(self.cfg.gamma ** np.arange(length), count)
        return sob, sg, t["mean"], t["z"], weights

    def update_student(self):
        cfg = self.cfg
        sob, sg, a_t, z_t, weights = self.student_batch(cfg.student_batch, cfg.student_len)
        before = self.digests()
        g = dc.Graph()
        out = self.student.act_graph(g, g.const(sob), g.const(sg))
        loss = student_loss(g, out.mean, a_t, out.z, z_t, cfg.beta4, weights, batch=cfg.student_batch)
        grads = g.backward(loss)
        grads = {k: v for k, v in grads.items() if k.startswith("student.")}
        grads, norm = dc.clip_by_global_norm(grads, cfg.max_grad_norm)
        dc.adam_step(self.student.params(), grads, self.adam["student"])
        after = self.digests()
        for name in ("teacher", "codebook", "world_model"):
            if name in before and before[name] != after[name]:
                raise FreezeViolation(f"student update changed {name}")
        return {"student_loss": float(loss.value), "student_grad_norm": norm}

    # -- epochs ------------------------------------------------------------------------------

    def train_epoch(self):
        cfg = self.cfg
        e = self.epoch
        stage = stage_of(e, cfg.milestones)
        p = takeover_probability(e, cfg.milestones, cfg.hard_switch)
        if stage in ("distill", "post"):
            self.freeze_for_distillation()
        before = self.digests()
        trajs = self.refill(p)
        losses = {}

        def add(stats):
            for k, v in stats.items():
                losses.setdefault(k, []).append(v)

        skipped = 0

        def attempt(update):
            nonlocal skipped
            try:
                add(update())
            except InsufficientData:
                skipped += 1

        if stage in ("pretrain", "warmup"):
            n_teacher = 0 if e < cfg.wm_warmup else cfg.teacher_updates
            for i in range(max(cfg.wm_updates, n_teacher)):
                if i < cfg.wm_updates:
                    attempt(self.update_world_model)
                if i < n_teacher:
                    attempt(self.update_teacher)
        if stage in ("warmup", "distill"):
            for _ in range(cfg.student_updates):
                attempt(self.update_student)
        if skipped:
            log.warning("epoch %d: %d updates skipped, no buffered trajectory is long enough", e, skipped)
        self._assert_frozen(before, f"epoch {e}")
        sr = float(np.mean([not t.fell for t in trajs])) if trajs else None
        codes = np.concatenate([t.index[t.index >= 0] for t in trajs]) if trajs else np.array([])
        perplexity = codebook_usage(codes, cfg.codebook_size)[1] if codes.size else None
        teacher_frac = (float(np.mean(np.concatenate([t.tags for t in trajs]) == TAG_TEACHER))
                        if trajs and sum(len(t) for t in trajs) else None)
        record = {
            "epoch": e, "stage": stage, "P": p,
            "losses": {k: float(np.mean(v)) for k, v in sorted(losses.items())},
            "SR": sr, "teacher_fraction": teacher_frac, "perplexity": perplexity,
            "n_rollouts": len(trajs), "frozen": self.frozen_components(), "skipped_updates": skipped,
            "hashes": self.digests(),
        }
        self.ledger.append(record)
        self.epoch += 1
        return record

    def run(self, epochs=None, metrics_path=None, until=None):
        """Train epoch by epoch, appending one JSON line per epoch to ``metrics_path``."""
        last = self.cfg.epochs if until is None else until
        if epochs is not None:
            last = min(last, self.epoch + epochs)
        out = []
        while self.epoch < last:
            rec = self.train_epoch()
            log.info("epoch %d %s P=%.3f SR=%s %s", rec["epoch"], rec["stage"], rec["P"], rec["SR"], rec["losses"])
            if metrics_path is not None:
                with open(metrics_path, "a") as fh:
                    fh.write(json.dumps(rec, sort_keys=True) + "\n")
            out.append(rec)
        return out

    # -- prior post-training --------------------------------------------------------------------

    def collect_prior_data(self, n_rollouts):
        if not self.teacher.frozen or (self.codebook is not None and not self.codebook.frozen):
            raise FrozenError("prior training needs a frozen teacher and codebook")
        if self.codebook is None:
            raise ValueError("prior training needs a codebook (mode 'vq')")
        fn = mixed_policy(self.teacher, self.student, 1.0, sample=False)
        trajs = run_episodes(n_rollouts, self.clips, fn, self.sim_cfg, self.ranges, self.rng,
                             self.episode_spec(), self.cfg.n_envs, self.cfg.history_teacher,
                             self.cfg.history_student)
        xs, ys = [], []
        hs = self.cfg.history_student
        for t in trajs:
            if len(t) == 0:
                continue
            xs.append(_history(t.local, [0], len(t), hs)[0])
            ys.append(t.index)
        return xs, ys

    def train_prior(self, n_rollouts=None, updates=None, heldout_frac=0.2):
        """Fit the prior to teacher-labelled codes; report held-out top-1 accuracy."""
        cfg = self.cfg
        n_rollouts = cfg.prior_rollouts if n_rollouts is None else n_rollouts
        updates = cfg.prior_updates if updates is None else updates
        xs, ys = self.collect_prior_data(n_rollouts)
        n_held = max(1, int(round(len(xs) * heldout_frac))) if len(xs) > 1 else 0
        train_x = np.concatenate(xs[n_held:]) if len(xs) > n_held else np.concatenate(xs)
        train_y = np.concatenate(ys[n_held:]) if len(xs) > n_held else np.concatenate(ys)
        held_x = np.concatenate(xs[:n_held]) if n_held else train_x
        held_y = np.concatenate(ys[:n_held]) if n_held else train_y
        first = None
        for _ in range(updates):
            pick = self.rng.integers(0, len(train_x), size=min(cfg.prior_batch, len(train_x)))
            g = dc.Graph()
            loss = prior_loss(g, self.prior.logits_graph(g, g.const(train_x[pick])), train_y[pick])
            if first is None:
                first = float(loss.value)
            grads, _ = dc.clip_by_global_norm(g.backward(loss), cfg.max_grad_norm)
            dc.adam_step(self.prior.params(), grads, self.adam["prior"])
        self.prior.frozen = True

        def acc(x, y):
            return float(np.mean(np.argmax(self.prior.logits(x), axis=-1) == y))

        return {"prior_first_loss": first, "prior_train_acc": acc(train_x, train_y),
                "prior_heldout_acc": acc(held_x, held_y), "n_train": int(len(train_x)),
                "n_heldout": int(len(held_x)), "chance": 1.0 / self.prior.k}
