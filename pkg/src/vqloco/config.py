"""Run configuration: one flat JSON object. Unknown keys are rejected."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .motion import GaitSpec
from .sim import Morphology, RandomizationRanges, SimConfig

_MORPH = Morphology()
_SIM = SimConfig()


def _deep_tuple(v):
    return tuple(_deep_tuple(x) for x in v) if isinstance(v, (list, tuple)) else v

__all__ = ["RunConfig", "ConfigError", "load_config", "MAX_ENVS"]

MAX_ENVS = 1024   # parallel-environment ceiling


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    # simulation
    fps: int = 30
    substeps: int = 6
    termination_height: float = 0.2
    max_episode_len: int = 1500
    clip_len: int = 120
    random_start: bool = False    # training episodes begin at a random clip offset instead of frame 0
    kernel: str = "auto"
    # actuators and morphology (body 0 is the base; joint k drives body k + 1)
    kp: tuple = _SIM.kp
    kd: tuple = _SIM.kd
    link_offsets: tuple = _MORPH.offset
    body_masses: tuple = _MORPH.body_mass
    joint_lower: tuple = _MORPH.joint_lower
    joint_upper: tuple = _MORPH.joint_upper
    foot_bodies: tuple = _MORPH.foot_bodies
    # domain randomization ranges
    friction_range: tuple = (0.60, 1.00)
    payload_range: tuple = (-2.00, 2.00)
    kp_scale_range: tuple = (0.90, 1.10)
    kd_scale_range: tuple = (0.90, 1.10)
    dof_pos_noise: tuple = (-0.05, 0.05)
    dof_vel_noise: tuple = (-0.50, 0.50)
    ang_vel_noise: tuple = (-0.50, 0.50)
    gravity_noise: tuple = (-0.05, 0.05)
    # replay buffer and batches
    buff_len: int = 256
    refill_target: int = 64
    evict_count: int = 16
    wm_batch: int = 512
    teacher_batch: int = 1024
    student_batch: int = 1024
    wm_len: int = 24
    teacher_len: int = 24
    student_len: int = 32
    # optimisation
    lr: float = 2e-4
    wm_lr: float = 2e-4
    gamma: float = 1.0
    max_grad_norm: float = 1.0
    wm_weights: tuple = (2.0, 1.0, 10.0, 5.0)
    teacher_weights: tuple = (0.2, 0.1, 0.5 / 3 * 0.1, 0.5 / 3 * 0.1)
    beta1: float = 0.05
    beta2: float = 0.01
    beta3: float = 0.001
    beta4: float = 1.0
    kl_weight: float = 0.01
    # models
    mode: str = "vq"
    codebook_size: int = 64
    code_dim: int = 32
    ema_decay: float = 0.99
    embed_dim: int = 128
    enc_hidden: tuple = (256, 256)
    dec_hidden: tuple = (256, 256)
    wm_hidden: tuple = (256, 256)
    prior_hidden: tuple = (256, 256)
    init_logstd: float = -2.0
    history_teacher: int = 0
    history_student: int = 5
    prior_temperature: float = 1.0
    # schedule
    epochs: int = 100
    milestones: tuple = (40, 60, 100)
    hard_switch: bool = False
    n_envs: int = 8
    wm_updates: int = 8
    teacher_updates: int = 8
    wm_warmup: int = 0          # leading pretraining epochs that update only the world model
    student_updates: int = 8
    # prior post-training
    prior_rollouts: int = 32
    prior_updates: int = 500
    prior_batch: int = 256
    prior_lr: float = 1e-3
    # data
    clips: tuple = ()
    n_synth_clips: int = 8
    gait_loops: int = 4
    # evaluation / generation
    eval_envs: int = 64
    eval_max_steps: int = 1500
    gen_steps: int = 600
    # output
    out_dir: str = "runs/default"

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, list):
                object.__setattr__(self, f.name, _deep_tuple(v))

    # -- validation ----------------------------------------------------------------------

    def validate(self):
        def need(cond, msg):
            if not cond:
                raise ConfigError(msg)

        need(self.fps > 0 and self.substeps >= 1, "fps must be positive and substeps >= 1")
        need(self.termination_height > 0, "termination_height must be positive")
        need(self.max_episode_len >= 1 and self.clip_len >= 2, "episode and clip lengths must be positive")
        for name in ("friction_range", "payload_range", "kp_scale_range", "kd_scale_range", "dof_pos_noise",
                     "dof_vel_noise", "ang_vel_noise", "gravity_noise"):
            r = getattr(self, name)
            need(len(r) == 2 and r[0] <= r[1], f"{name} must be an ordered pair")
        need(1 <= self.refill_target <= self.buff_len, "refill_target must lie in [1, buff_len]")
        need(0 <= self.evict_count <= self.refill_target, "evict_count must lie in [0, refill_target]")
        for name in ("wm_batch", "teacher_batch", "student_batch", "wm_len", "teacher_len", "student_len",
                     "n_envs", "codebook_size", "code_dim", "embed_dim", "eval_envs", "prior_batch"):
            need(getattr(self, name) >= 1, f"{name} must be >= 1")
        need(self.n_envs <= MAX_ENVS and self.eval_envs <= MAX_ENVS, f"at most {MAX_ENVS} parallel environments")
        need(self.lr > 0 and self.wm_lr > 0 and self.prior_lr > 0, "learning rates must be positive")
        need(0 < self.gamma <= 1, "gamma must lie in (0, 1]")
        need(len(self.wm_weights) == 4 and min(self.wm_weights) > 0, "wm_weights needs four positive values")
        need(len(self.teacher_weights) == 4 and min(self.teacher_weights) > 0,
             "teacher_weights needs four positive values")
        need(self.mode in ("vq", "vae", "mlp"), "mode must be one of vq, vae, mlp")
        need(0 < self.ema_decay < 1, "ema_decay must lie in (0, 1)")
        need(len(self.milestones) == 3 and 0 < self.milestones[0] < self.milestones[1] < self.milestones[2],
             "milestones must satisfy 0 < ms1 < ms2 < ms3")
        need(self.history_teacher >= 0 and self.history_student >= 0, "history lengths must be >= 0")
        need(self.kernel in ("auto", "numpy", "compiled"), "kernel must be auto, numpy or compiled")
        try:
            morph = self.morphology()
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"invalid morphology: {exc}") from exc
        need(len(self.kp) == len(self.kd) == morph.n_joint, "kp and kd need one entry per joint")
        need(min(self.kp) > 0 and min(self.kd) >= 0, "kp must be positive and kd non-negative")
        need(self.wm_updates >= 0 and self.teacher_updates >= 0 and self.student_updates >= 0,
             "update counts must be >= 0")
        need(0 <= self.wm_warmup < self.milestones[0], "wm_warmup must lie in [0, ms1)")
        return self

    # -- derived objects ---------------------------------------------------------------------

    def morphology(self) -> Morphology:
        if len(self.link_offsets) != len(self.body_masses):
            raise ValueError("link_offsets and body_masses need one entry per body")
        if len(self.body_masses) != _MORPH.n_body:
            raise ValueError(f"the walker has {_MORPH.n_body} bodies, got {len(self.body_masses)}")
        return replace(_MORPH, offset=self.link_offsets, body_mass=self.body_masses, joint_lower=self.joint_lower,
                       joint_upper=self.joint_upper, foot_bodies=self.foot_bodies).validate()

    def sim_config(self) -> SimConfig:
        kw = {} if self.kernel == "auto" else {"kernel": self.kernel}
        return SimConfig(fps=self.fps, substeps=self.substeps, termination_height=self.termination_height,
                         kp=self.kp, kd=self.kd, morphology=self.morphology(), **kw)

    def randomization(self) -> RandomizationRanges:
        return RandomizationRanges(self.friction_range, self.payload_range, self.kp_scale_range,
                                   self.kd_scale_range, self.dof_pos_noise, self.dof_vel_noise,
                                   self.ang_vel_noise, self.gravity_noise).validate()

    def to_dict(self):
        def listify(v):
            return [listify(x) for x in v] if isinstance(v, (list, tuple)) else v

        return {k: listify(v) for k, v in asdict(self).items()}

    def with_(self, **kw):
        return replace(self, **kw)

    @classmethod
    def from_dict(cls, d):
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        known = {f.name: f for f in fields(cls)}
        unknown = sorted(set(d) - set(known))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        defaults = cls()
        kw = {}
        for key, value in d.items():
            ref = getattr(defaults, key)
            if isinstance(ref, bool):
                ok = isinstance(value, bool)
            elif isinstance(ref, int):
                ok = isinstance(value, int) and not isinstance(value, bool)
            elif isinstance(ref, float):
                ok = isinstance(value, (int, float)) and not isinstance(value, bool)
            elif isinstance(ref, str):
                ok = isinstance(value, str)
            else:
                ok = isinstance(value, (list, tuple))
            if not ok:
                raise ConfigError(f"config key {key!r} has the wrong type ({type(value).__name__})")
            kw[key] = float(value) if isinstance(ref, float) else value
        return cls(**kw).validate()


def load_config(path=None, overrides=None) -> RunConfig:
    d = {}
    if path is not None:
        try:
            d = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: line {exc.lineno}: {exc.msg}") from exc
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
    d = dict(d, **(overrides or {}))
    return RunConfig.from_dict(d)


def default_gaits(n, seed=0):
    """A corpus of varied walk specifications for ``gen-data``."""
    import numpy as np

    rng = np.random.default_rng(seed)
    out = [GaitSpec(name="walk_000")]
    for i in range(1, n):
        out.append(GaitSpec(frequency=float(rng.uniform(0.8, 1.1)), hip_amplitude=float(rng.uniform(0.12, 0.25)),
                            knee_amplitude=float(rng.uniform(0.25, 0.45)), speed=float(rng.uniform(0.15, 0.4)),
                            turn_rate=float(rng.uniform(-0.3, 0.3)), name=f"walk_{i:03d}"))
    return out
