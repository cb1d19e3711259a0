"""Tracking metrics, batch evaluation, goal-free generation and CSV trajectory export."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import sim
from .policy import LatentPolicy, PriorEncoder, prior_act
from .rollout import TAG_OTHER, TAG_STUDENT, TAG_TEACHER, EpisodeSpec, Trajectory, run_episodes

__all__ = [
    "EvalReport",
    "report_from_trajectories",
    "evaluate",
    "teacher_policy",
    "student_policy",
    "replay_policy",
    "prior_policy",
    "generate",
    "GenerationResult",
    "export_trajectory",
    "read_trajectory_csv",
]


@dataclass
class EvalReport:
    """``mjre`` / ``mve`` are ``None`` when nothing survived, never zero."""

    sr: float
    mjre: float | None
    mve: float | None
    n_envs: int
    n_success: int
    clips: list = field(default_factory=list)
    seed: int | None = None

    def to_dict(self):
        d = {"SR": self.sr, "n_envs": self.n_envs, "n_success": self.n_success, "clips": sorted(set(self.clips)),
             "seed": self.seed}
        if self.mjre is not None:
            d["MJRE"] = self.mjre
            d["MVE"] = self.mve
        return d


def report_from_trajectories(trajs, seed=None) -> EvalReport:
    if not trajs:
        raise ValueError("evaluation needs at least one environment")
    ok = [t for t in trajs if not t.fell]
    mjre = mve = None
    if ok:
        # flat mean over (frame, joint) pairs; every step holds the same number of joints
        mjre = float(np.mean(np.concatenate([t.joint_err for t in ok])))
        mve = float(np.mean(np.concatenate([t.vel_err for t in ok])))
    return EvalReport(len(ok) / len(trajs), mjre, mve, len(trajs), len(ok), [t.clip for t in trajs], seed)


def teacher_policy(teacher: LatentPolicy, sample=False):
    mode = "sample" if sample else "mean"

    def fn(obs, rng):
        out = teacher.act(obs["teacher_obs"], obs["teacher_goal"], mode, rng)
        return {"action": out["action"], "tag": np.full(len(out["action"]), TAG_TEACHER), "index": out["index"]}

    return fn


def student_policy(student: LatentPolicy, sample=False):
    mode = "sample" if sample else "mean"

    def fn(obs, rng):
        out = student.act(obs["student_obs"], obs["student_goal"], mode, rng)
        return {"action": out["action"], "tag": np.full(len(out["action"]), TAG_STUDENT), "index": out["index"]}

    return fn


def replay_policy():
    """Commands the reference's own next joint angles."""

    def fn(obs, rng):
        q = obs["ref_q"]
        return {"action": q, "tag": np.full(len(q), TAG_OTHER), "index": np.full(len(q), -1)}

    return fn


def prior_policy(prior: PriorEncoder, codebook, student: LatentPolicy, temperature=None):
    def fn(obs, rng):
        out = prior_act(prior, obs["student_obs"], codebook, student, temperature, rng)
        return {"action": out["action"], "tag": np.full(len(out["action"]), TAG_OTHER), "index": out["index"]}

    return fn


def evaluate(policy_fn, clips, n_envs, seed, sim_cfg: sim.SimConfig = sim.SimConfig(),
             ranges: sim.RandomizationRanges = sim.RandomizationRanges(), max_steps=1500, ht=0, hs=5,
             randomize=True, obs_noise=True, batch=64, keep=False):
    """Track whole clips in ``n_envs`` independently randomized environments.

    Each environment follows one clip from its first frame to its last (or ``max_steps``);
    success means it never fell. Returns the report, plus the trajectories when ``keep``."""
    if n_envs < 1:
        raise ValueError("n_envs must be >= 1")
    if not clips:
        raise ValueError("need at least one clip")
    rng = np.random.default_rng(seed)
    spec = EpisodeSpec(max_steps=max_steps, window=None, randomize=randomize, obs_noise=obs_noise)
    trajs = run_episodes(n_envs, clips, policy_fn, sim_cfg, ranges, rng, spec, batch, ht, hs)
    report = report_from_trajectories(trajs, seed)
    return (report, trajs) if keep else report


@dataclass
class GenerationResult:
    trajectory: Trajectory
    survived: int          # steps completed before a fall (== steps when nothing fell)
    fell: bool
    indices: np.ndarray

    @property
    def distinct_codes(self):
        return int(len(np.unique(self.indices[self.indices >= 0])))


def generate(prior: PriorEncoder, codebook, student: LatentPolicy, clips, steps, seed,
             sim_cfg: sim.SimConfig = sim.SimConfig(), ranges: sim.RandomizationRanges = sim.RandomizationRanges(),
             temperature=None, hs=5, randomize=False):
    """Goal-free closed loop: the prior picks a code each step, the student decoder acts.

    ``clips`` only supply the starting pose; the policy never sees a reference."""
    if codebook is None:
        raise ValueError("generation needs a codebook")
    rng = np.random.default_rng(seed)
    spec = EpisodeSpec(max_steps=steps, window=len(clips[0]) - 1, randomize=randomize, obs_noise=randomize,
                       goal_free=True, keep_states=True)
    fn = prior_policy(prior, codebook, student, temperature)
    start = clips[0].states[0:1].copy()
    traj = run_episodes(1, clips[:1], fn, sim_cfg, ranges, rng, spec, 1, 0, hs, start_states=start)[0]
    return GenerationResult(traj, len(traj), traj.fell, traj.index)


# -- CSV export ---------------------------------------------------------------------------


def _header(n_body, n_joint):
    cols = ["time[s]"]
    for b in range(n_body):
        cols += [f"body{b}_{c}[m]" for c in ("px", "py", "pz")]
        cols += [f"body{b}_{c}[1]" for c in ("qw", "qx", "qy", "qz")]
    cols += [f"joint{j}_q[rad]" for j in range(n_joint)]
    cols += [f"joint{j}_dq[rad/s]" for j in range(n_joint)]
    cols += [f"joint{j}_action[rad]" for j in range(n_joint)]
    cols += ["tag[1=teacher,0=student,-1=other]", "code_index[-1=none]"]
    return cols


def export_trajectory(traj: Trajectory, path, fps=30):
    """One row per recorded frame. The last frame has no action: its action columns are empty."""
    st = traj.states
    if st is None:
        raise ValueError("trajectory has no recorded states; roll out with keep_states=True")
    n_frames = len(st)
    nb, nj = st.n_body, st.n_joint
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(_header(nb, nj))
        for k in range(n_frames):
            row = [repr(k / fps)]
            for b in range(nb):
                row += [repr(float(x)) for x in st.body_pos[k, b]]
                row += [repr(float(x)) for x in st.body_quat[k, b]]
            row += [repr(float(x)) for x in st.joint_q[k]]
            row += [repr(float(x)) for x in st.joint_dq[k]]
            if k < len(traj.actions):
                row += [repr(float(x)) for x in traj.actions[k]]
                row += [int(traj.tags[k]), int(traj.index[k])]
            else:
                row += [""] * nj + [TAG_OTHER, -1]
            w.writerow(row)
    return n_frames


def read_trajectory_csv(path):
    """Columns keyed by header name; empty cells become NaN."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    data = np.array([[float(x) if x != "" else np.nan for x in r] for r in body]).reshape(len(body), len(header))
    return {name: data[:, i] for i, name in enumerate(header)}
