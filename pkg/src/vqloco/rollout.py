"""Batched closed-loop episodes on the toy simulator, shared by training and evaluation.

A policy is any callable ``fn(obs, rng) -> dict(action, tag, index)`` where ``obs`` holds, for
the active environments only::

    teacher_obs   (m, (HT+1) * F)    heading-frame feature history (privileged, noise-free)
    student_obs   (m, (HS+1) * L)    local observation history (noisy)
    teacher_goal  (m, F)             next reference frame in the current reference heading frame
    student_goal  (m, L + 4)         reduced goal (absent in generative episodes)
    ref_q         (m, n_joint)       joint angles of the next reference frame
"""

from __future__ import annotations

import base64
from dataclasses import dataclass, field

import numpy as np

from . import motion as mo
from . import sim

__all__ = ["TAG_TEACHER", "TAG_STUDENT", "TAG_OTHER", "Trajectory", "EpisodeSpec", "run_episodes"]

TAG_TEACHER, TAG_STUDENT, TAG_OTHER = 1, 0, -1


def _pack(arr):
    arr = np.ascontiguousarray(arr)
    return {"dtype": arr.dtype.str, "shape": list(arr.shape), "b64": base64.b64encode(arr.tobytes()).decode()}


def _unpack(d):
    return np.frombuffer(base64.b64decode(d["b64"]), dtype=np.dtype(d["dtype"])).reshape(d["shape"]).copy()


@dataclass
class Trajectory:
    """One episode. Step ``t`` maps ``features[t]`` through ``actions[t]`` to ``features[t+1]``."""

    features: np.ndarray        # (L+1, F) heading-frame state features
    local: np.ndarray           # (L+1, Dl) observed local frames (noise applied)
    actions: np.ndarray         # (L, A)
    tags: np.ndarray            # (L,) 1 teacher / 0 student / -1 other
    index: np.ndarray           # (L,) code index of the acting policy, -1 when none
    teacher_goal: np.ndarray    # (L, F)
    student_goal: np.ndarray    # (L, Dg)
    target: np.ndarray          # (L, F) reference features after the step, own heading frame
    joint_err: np.ndarray       # (L,) mean |q - q_ref| after the step
    vel_err: np.ndarray         # (L,) |v_root - v_root_ref| in the respective heading frames
    fell: bool = False
    clip: str = ""
    root_pos: np.ndarray = field(default=None)   # (L+1, 3) world root positions
    states: sim.RobotState = field(default=None)  # optional per-frame states, leading axis L+1

    def __len__(self):
        return len(self.actions)

    _ARRAYS = ("features", "local", "actions", "tags", "index", "teacher_goal", "student_goal", "target",
               "joint_err", "vel_err", "root_pos")

    _STATE_FIELDS = ("body_pos", "body_quat", "body_vel", "body_angvel", "joint_q", "joint_dq")

    def to_json(self):
        d = {name: _pack(getattr(self, name)) for name in self._ARRAYS}
        d.update(fell=self.fell, clip=self.clip)
        if self.states is not None:
            d["states"] = {f: _pack(getattr(self.states, f)) for f in self._STATE_FIELDS}
            d["states"]["foot_bodies"] = list(self.states.foot_bodies)
        return d

    @classmethod
    def from_json(cls, d):
        states = None
        if d.get("states") is not None:
            st = d["states"]
            states = sim.RobotState(*(_unpack(st[f]) for f in cls._STATE_FIELDS),
                                    foot_bodies=tuple(st["foot_bodies"]))
        return cls(**{name: _unpack(d[name]) for name in cls._ARRAYS}, fell=bool(d["fell"]), clip=d["clip"],
                   states=states)


@dataclass(frozen=True)
class EpisodeSpec:
    """How reference windows are drawn and episodes end.

    ``window``: frames per reference window; when a window is used up another clip window is
    drawn and re-rooted at the robot's current position and heading. ``None`` tracks each clip
    once from its first frame and ends the episode at the clip's last frame. ``random_start``
    draws the first window at a uniform offset; otherwise episodes begin at a clip's first frame."""

    max_steps: int = 1500
    window: int | None = 120
    randomize: bool = True
    obs_noise: bool = True
    goal_free: bool = False
    keep_states: bool = False
    random_start: bool = True


def _draw_window(clips, rng, window, random_start=True):
    c = int(rng.integers(len(clips)))
    clip = clips[c]
    if window is None:
        return clip.name, clip.states
    n = len(clip)
    span = min(window + 1, n)
    start = int(rng.integers(0, n - span + 1)) if random_start else 0
    return clip.name, clip.states[start:start + span]


def _root_heading_velocity(state):
    yaw = mo.heading_yaw(state)
    c, s = np.cos(yaw), np.sin(yaw)
    v = state.body_vel[..., 0, :]
    return np.stack([c * v[..., 0] + s * v[..., 1], -s * v[..., 0] + c * v[..., 1], v[..., 2]], axis=-1)


def run_episodes(n_episodes, clips, policy_fn, sim_cfg: sim.SimConfig, ranges: sim.RandomizationRanges, rng,
                 spec: EpisodeSpec = EpisodeSpec(), n_envs=8, ht=0, hs=5, start_states=None):
    """Run ``n_episodes`` episodes in batches of ``n_envs`` parallel environments."""
    out = []
    done = 0
    while done < n_episodes:
        m = min(n_envs, n_episodes - done)
        out.extend(_run_batch(m, clips, policy_fn, sim_cfg, ranges, rng, spec, ht, hs, start_states))
        done += m
    return out


def _run_batch(m, clips, policy_fn, sim_cfg, ranges, rng, spec, ht, hs, start_states):
    morph = sim_cfg.morphology
    layout = mo.FeatureLayout.for_morphology(morph)
    rand = sim.randomize(rng, ranges, n_env=m) if spec.randomize else sim.EnvRandomization.nominal(m)
    if not spec.obs_noise:
        rand.dof_pos_noise = rand.dof_vel_noise = rand.ang_vel_noise = rand.gravity_noise = (0.0, 0.0)
    names, windows = [], []
    for _ in range(m):
        name, w = _draw_window(clips, rng, spec.window, spec.random_start)
        names.append(name)
        windows.append(w)
    if start_states is not None:
        state = start_states.copy()
    else:
        state = sim.RobotState.stack([w[0] for w in windows])
    ptr = np.zeros(m, dtype=int)
    hist = mo.ObsHistory(m, layout.dim, layout.local_dim, ht, hs)
    feats = mo.state_features(state)
    local = sim.apply_obs_noise(mo.to_local_obs(state), rand, rng)
    hist.push(feats, local)
    rec = {k: [[] for _ in range(m)] for k in ("features", "local", "actions", "tags", "index", "teacher_goal",
                                               "student_goal", "target", "joint_err", "vel_err", "root_pos",
                                               "states")}
    for i in range(m):
        rec["features"][i].append(feats[i])
        rec["local"][i].append(local[i])
        rec["root_pos"][i].append(state.body_pos[i, 0].copy())
        if spec.keep_states:
            rec["states"][i].append(state[i].copy())
    active = np.ones(m, dtype=bool)
    fell = np.zeros(m, dtype=bool)
    steps = 0
    while active.any() and steps < spec.max_steps:
        idx = np.flatnonzero(active)
        ref_now = sim.RobotState.stack([windows[i][ptr[i]] for i in idx])
        ref_next = sim.RobotState.stack([windows[i][ptr[i] + 1] for i in idx])
        obs = {
            "teacher_obs": hist.teacher_vector()[idx],
            "student_obs": hist.student_vector()[idx],
            "teacher_goal": mo.teacher_goal(ref_now, ref_next),
            "student_goal": None if spec.goal_free else mo.student_goal(ref_now, ref_next),
            "ref_q": ref_next.joint_q,
        }
        act = policy_fn(obs, rng)
        action = np.asarray(act["action"], dtype=float)
        sub = sim.step(state[idx], action, rand.take(idx), sim_cfg)
        for name in ("body_pos", "body_quat", "body_vel", "body_angvel", "joint_q", "joint_dq"):
            getattr(state, name)[idx] = getattr(sub, name)
        fallen = np.asarray(sim.check_termination(sub, sim_cfg.termination_height))
        new_feats = mo.state_features(sub)
        new_local = sim.apply_obs_noise(mo.to_local_obs(sub), rand.take(idx), rng)
        target = mo.state_features(ref_next)
        jerr = np.mean(np.abs(sub.joint_q - ref_next.joint_q), axis=-1)
        verr = np.linalg.norm(_root_heading_velocity(sub) - _root_heading_velocity(ref_next), axis=-1)
        tags = np.asarray(act.get("tag", np.full(len(idx), TAG_OTHER)))
        codes = np.asarray(act.get("index", np.full(len(idx), -1)))
        for j, i in enumerate(idx):
            r = rec
            r["actions"][i].append(action[j])
            r["tags"][i].append(tags[j])
            r["index"][i].append(codes[j])
            r["teacher_goal"][i].append(obs["teacher_goal"][j])
            r["student_goal"][i].append(mo.student_goal(ref_now[j], ref_next[j]) if spec.goal_free
                                        else obs["student_goal"][j])
            r["target"][i].append(target[j])
            r["joint_err"][i].append(jerr[j])
            r["vel_err"][i].append(verr[j])
            r["features"][i].append(new_feats[j])
            r["local"][i].append(new_local[j])
            r["root_pos"][i].append(sub.body_pos[j, 0].copy())
            if spec.keep_states:
                r["states"][i].append(sub[j].copy())
        full_local = np.zeros((m, layout.local_dim))
        full_feats = np.zeros((m, layout.dim))
        full_local[idx] = new_local
        full_feats[idx] = new_feats
        hist.push(full_feats, full_local, mask=active)
        ptr[idx] += 1
        fell[idx] = fallen
        active[idx[fallen]] = False
        for j, i in enumerate(idx):
            if not active[i] or ptr[i] + 1 < len(windows[i]):
                continue
            if spec.window is None:
                active[i] = False      # clip tracked to its end
                continue
            name, w = _draw_window(clips, rng, spec.window)
            windows[i] = mo.reroot(w, sub.body_pos[j, 0, :2], float(mo.heading_yaw(sub[j])))
            names[i] = name
            ptr[i] = 0
        steps += 1
    trajs = []
    for i in range(m):
        r = rec
        trajs.append(Trajectory(
            features=np.array(r["features"][i]), local=np.array(r["local"][i]),
            actions=np.array(r["actions"][i]).reshape(-1, morph.n_joint),
            tags=np.array(r["tags"][i], dtype=np.int64), index=np.array(r["index"][i], dtype=np.int64),
            teacher_goal=np.array(r["teacher_goal"][i]).reshape(-1, layout.dim),
            student_goal=np.array(r["student_goal"][i]).reshape(-1, layout.student_goal_dim),
            target=np.array(r["target"][i]).reshape(-1, layout.dim),
            joint_err=np.array(r["joint_err"][i]), vel_err=np.array(r["vel_err"][i]),
            fell=bool(fell[i]), clip=names[i], root_pos=np.array(r["root_pos"][i]),
            states=sim.RobotState.stack(r["states"][i]) if spec.keep_states else None))
    return trajs
