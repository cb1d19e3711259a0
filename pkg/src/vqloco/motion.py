"""Reference motion: clips, heading-frame features, local observations, history buffers.

State features used by the world model and the teacher (``FeatureLayout``)::

    per body, root heading frame: [pos 3 | rot6d 6 | vel 3 | angvel 3]   (n_body * 15)
    joint q (n_joint) | joint dq (n_joint) | root height (1)

The heading frame is centred on the root and rotated by the inverse of the root's yaw only, so
the features are invariant to horizontal translation and yaw of the whole scene.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import geometry as geo
from .sim import Morphology, RobotState, contact_points, forward_kinematics

FPS = 30
BODY_FEATURES = 15

__all__ = [
    "FPS",
    "FeatureLayout",
    "MotionClip",
    "GaitSpec",
    "ObsHistory",
    "ClipFormatError",
    "rot6d_encode",
    "rot6d_decode",
    "heading_yaw",
    "to_heading_frame",
    "state_features",
    "to_local_obs",
    "teacher_goal",
    "student_goal",
    "build_observation",
    "synth_clip",
    "loop_clip",
    "reroot",
    "save_clip",
    "load_clip",
    "resample",
]

rot6d_encode = geo.rot6d_encode
rot6d_decode = geo.rot6d_decode


class ClipFormatError(ValueError):
    pass


@dataclass(frozen=True)
class FeatureLayout:
    """Index sets of each component inside a state-feature vector."""

    n_body: int = 7
    n_joint: int = 6

    @property
    def global_dim(self):
        return self.n_body * BODY_FEATURES

    @property
    def dim(self):
        return self.global_dim + 2 * self.n_joint + 1

    @property
    def local_dim(self):
        return 6 + 2 * self.n_joint

    @property
    def student_goal_dim(self):
        return self.local_dim + 4

    def _body_block(self, lo, hi):
        return np.concatenate([np.arange(b * BODY_FEATURES + lo, b * BODY_FEATURES + hi)
                               for b in range(self.n_body)])

    @property
    def pos(self):
        return self._body_block(0, 3)

    @property
    def rot(self):
        return self._body_block(3, 9)

    @property
    def vel(self):
        return self._body_block(9, 12)

    @property
    def angvel(self):
        return self._body_block(12, 15)

    @property
    def q(self):
        return np.arange(self.global_dim, self.global_dim + self.n_joint)

    @property
    def dq(self):
        return np.arange(self.global_dim + self.n_joint, self.global_dim + 2 * self.n_joint)

    @property
    def height(self):
        return np.array([self.dim - 1])

    def component_weights(self, pos, rot, vel, angvel, q=None, dq=None, height=None):
        """Per-feature weight vector. Joint channels default to the rotation / angular weights
        and the root height to the position weight."""
        w = np.empty(self.dim)
        w[self.pos] = pos
        w[self.rot] = rot
        w[self.vel] = vel
        w[self.angvel] = angvel
        w[self.q] = rot if q is None else q
        w[self.dq] = angvel if dq is None else dq
        w[self.height] = pos if height is None else height
        return w

    @classmethod
    def for_morphology(cls, morph: Morphology):
        return cls(morph.n_body, morph.n_joint)


def heading_yaw(state: RobotState):
    return geo.heading_angle(state.body_quat[..., 0, :])


def _yaw_matrix(yaw):
    c, s = np.cos(yaw), np.sin(yaw)
    z, o = np.zeros_like(c), np.ones_like(c)
    m = np.stack([c, -s, z, s, c, z, z, z, o], axis=-1)
    return m.reshape(np.shape(yaw) + (3, 3))


def to_heading_frame(state: RobotState, frame: RobotState | None = None):
    """Flattened ``(n_body * 15)`` observation of ``state`` in the heading frame of ``frame``'s
    root (``state`` itself when omitted)."""
    frame = state if frame is None else frame
    h = _yaw_matrix(heading_yaw(frame))
    ht = np.swapaxes(h, -1, -2)[..., None, :, :]
    origin = frame.body_pos[..., 0:1, :]

    def rot(v):
        return np.einsum("...ij,...j->...i", ht, v)

    pos = rot(state.body_pos - origin)
    mats = ht @ geo.quat_to_matrix(state.body_quat)
    r6 = np.concatenate([mats[..., :, 0], mats[..., :, 1]], axis=-1)
    out = np.concatenate([pos, r6, rot(state.body_vel), rot(state.body_angvel)], axis=-1)
    return out.reshape(out.shape[:-2] + (-1,))


def state_features(state: RobotState, frame: RobotState | None = None):
    """World-model / teacher feature vector of ``state`` (see module docstring)."""
    return np.concatenate([to_heading_frame(state, frame), state.joint_q, state.joint_dq,
                           state.body_pos[..., 0, 2:3]], axis=-1)


def to_local_obs(state: RobotState):
    """``[projected gravity 3 | base angular velocity (base frame) 3 | q | dq]``.

    Projected gravity is world ``(0, 0, -1)`` expressed in the base frame, so an upright base
    reads ``(0, 0, -1)``."""
    r = geo.quat_to_matrix(state.body_quat[..., 0, :])
    rt = np.swapaxes(r, -1, -2)
    g = np.einsum("...ij,j->...i", rt, np.array([0.0, 0.0, -1.0]))
    w = np.einsum("...ij,...j->...i", rt, state.body_angvel[..., 0, :])
    return np.concatenate([g, w, state.joint_q, state.joint_dq], axis=-1)


def teacher_goal(ref_now: RobotState, ref_next: RobotState):
    """Next reference frame as state features in the heading frame of the current reference."""
    return state_features(ref_next, ref_now)


def student_goal(ref_now: RobotState, ref_next: RobotState):
    """Next reference frame as a local observation plus the root displacement (heading frame of
    the current reference) and the heading change."""
    h = _yaw_matrix(heading_yaw(ref_now))
    disp = np.einsum("...ji,...j->...i", h, ref_next.body_pos[..., 0, :] - ref_now.body_pos[..., 0, :])
    dyaw = _wrap(heading_yaw(ref_next) - heading_yaw(ref_now))
    return np.concatenate([to_local_obs(ref_next), disp, dyaw[..., None]], axis=-1)


def _wrap(a):
    return (a + np.pi) % (2 * np.pi) - np.pi


def build_observation(history_vec, goal=None):
    """Policy input: stacked history frames followed by the goal. ``goal=None`` drops the slot."""
    if goal is None:
        return np.asarray(history_vec, dtype=float)
    return np.concatenate([history_vec, goal], axis=-1)


class ObsHistory:
    """Per-environment ring buffers of global and local frames.

    ``vector(kind, h)`` returns the last ``h + 1`` frames oldest-first; slots before the episode
    start are zeros."""

    def __init__(self, n_env, global_dim, local_dim, ht=0, hs=5):
        self.ht, self.hs = ht, hs
        self.size = max(ht, hs) + 1
        self.n_env = n_env
        self.buf = {"global": np.zeros((n_env, self.size, global_dim)),
                    "local": np.zeros((n_env, self.size, local_dim))}
        self.count = np.zeros(n_env, dtype=int)

    def reset(self, mask=None):
        mask = np.ones(self.n_env, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
        for b in self.buf.values():
            b[mask] = 0.0
        self.count[mask] = 0

    def push(self, global_frame, local_frame, mask=None):
        """Append one frame per environment (only where ``mask`` is true)."""
        mask = np.ones(self.n_env, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
        for key, frame in (("global", global_frame), ("local", local_frame)):
            b = self.buf[key]
            b[mask, :-1] = b[mask, 1:]
            b[mask, -1] = np.asarray(frame)[mask] if np.ndim(frame) == 2 and len(frame) == self.n_env else frame
        self.count[mask] += 1

    def vector(self, kind, h=None):
        h = (self.ht if kind == "global" else self.hs) if h is None else h
        if h + 1 > self.size:
            raise ValueError(f"history of {h} frames exceeds buffer size {self.size - 1}")
        b = self.buf[kind][:, self.size - h - 1:]
        return b.reshape(self.n_env, -1).copy()

    def teacher_vector(self):
        return self.vector("global", self.ht)

    def student_vector(self):
        return self.vector("local", self.hs)


@dataclass
class MotionClip:
    """Reference motion sampled at a fixed rate. ``states`` is a RobotState batched over frames."""

    name: str
    states: RobotState
    fps: int = FPS

    def __post_init__(self):
        if len(self) < 2:
            raise ValueError("a clip needs at least two frames")

    def __len__(self):
        return self.states.joint_q.shape[0]

    @property
    def duration(self):
        return (len(self) - 1) / self.fps

    def frame(self, i) -> RobotState:
        return self.states[i]

    def validate(self):
        self.states.validate()
        return self


@dataclass(frozen=True)
class GaitSpec:
    """Parameters of a synthetic periodic walk. Angles in rad, speed in m/s."""

    frequency: float = 1.0
    hip_amplitude: float = 0.25
    knee_amplitude: float = 0.4
    ankle_amplitude: float = 0.0
    hip_bias: float = -0.2
    knee_bias: float = 0.4
    speed: float = 0.4
    turn_rate: float = 0.0
    duration: float = 4.0
    fps: int = FPS
    name: str = "walk"

    def validate(self):
        if not 0.0 <= self.frequency <= 3.0:
            raise ValueError("gait frequency must lie in [0, 3] Hz")
        for name in ("hip_amplitude", "knee_amplitude", "ankle_amplitude"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1] rad")
        if not -2.0 <= self.speed <= 2.0:
            raise ValueError("speed must lie in [-2, 2] m/s")
        if abs(self.turn_rate) > 1.0:
            raise ValueError("turn rate must lie in [-1, 1] rad/s")
        if self.duration <= 0 or self.fps <= 0:
            raise ValueError("duration and fps must be positive")
        return self


def _gait_joints(spec: GaitSpec, t):
    """Joint angles (T, 6) of both legs; the right leg runs half a cycle behind the left."""
    legs = []
    for shift in (0.0, np.pi):
        phase = 2 * np.pi * spec.frequency * t + shift
        hip = spec.hip_bias + spec.hip_amplitude * np.sin(phase)
        knee = spec.knee_bias + 0.5 * spec.knee_amplitude * (1.0 - np.cos(phase))
        # keep the sole parallel to the base, plus an optional push-off oscillation
        ankle = -(hip + knee) + spec.ankle_amplitude * np.sin(phase - 0.5 * np.pi)
        legs.append(np.stack([hip, knee, ankle], axis=-1))
    return np.concatenate(legs, axis=-1)


def _finite_difference_states(morph, root_pos, root_quat, q, dt):
    """Frames 1..T-2 of the padded sequences, with central-difference velocities."""
    n = root_pos.shape[0]
    nj = q.shape[-1]
    zeros3 = np.zeros((n, 3))
    rest = forward_kinematics(morph, root_pos, root_quat, zeros3, zeros3, q, np.zeros((n, nj)))
    vel = (rest.body_pos[2:] - rest.body_pos[:-2]) / (2 * dt)
    rel = geo.quat_mul(rest.body_quat[2:], geo.quat_conj(rest.body_quat[:-2]))
    angvel = geo.quat_to_rotvec(rel) / (2 * dt)
    dq = (q[2:] - q[:-2]) / (2 * dt)
    mid = slice(1, n - 1)
    return RobotState(rest.body_pos[mid], rest.body_quat[mid], vel, angvel, q[mid].copy(), dq,
                      tuple(morph.foot_bodies))


def synth_clip(spec: GaitSpec = GaitSpec(), morph: Morphology = Morphology()) -> MotionClip:
    """Kinematic walk clip: sinusoidal antiphase legs, upright root advancing at ``speed`` along
    its heading, root height chosen so the lowest sole point touches the ground. Velocities are
    central finite differences of the positions (one padding frame on each side)."""
    spec.validate()
    n = int(round(spec.duration * spec.fps))
    if n < 2:
        raise ValueError("clip would have fewer than two frames")
    dt = 1.0 / spec.fps
    t = (np.arange(n + 2) - 1) * dt
    q = _gait_joints(spec, t)
    yaw = spec.turn_rate * t
    root_quat = np.stack([np.cos(0.5 * yaw), 0 * yaw, 0 * yaw, np.sin(0.5 * yaw)], axis=-1)
    if spec.turn_rate == 0.0:
        x, y = spec.speed * t, np.zeros_like(t)
    else:
        x = spec.speed / spec.turn_rate * np.sin(yaw)
        y = spec.speed / spec.turn_rate * (1.0 - np.cos(yaw))
    zeros = np.zeros((n + 2, 3))
    probe = forward_kinematics(morph, zeros, root_quat, zeros, zeros, q, np.zeros_like(q))
    z = -contact_points(morph, probe)[..., 2].min(axis=-1)
    root_pos = np.stack([x, y, z], axis=-1)
    states = _finite_difference_states(morph, root_pos, root_quat, q, dt)
    return MotionClip(spec.name, states, spec.fps)


def _rigid_yaw(states: RobotState, yaw, anchor, target):
    """Rotate the scene by ``yaw`` about ``anchor`` (horizontal) and move ``anchor`` to ``target``."""
    rz = _yaw_matrix(np.asarray(yaw, dtype=float))
    q = np.array([np.cos(0.5 * yaw), 0.0, 0.0, np.sin(0.5 * yaw)])
    shift = np.array([anchor[0], anchor[1], 0.0])
    dest = np.array([target[0], target[1], 0.0])
    pos = np.einsum("ij,...j->...i", rz, states.body_pos - shift) + dest
    return RobotState(pos, geo.quat_mul(q, states.body_quat), np.einsum("ij,...j->...i", rz, states.body_vel),
                      np.einsum("ij,...j->...i", rz, states.body_angvel), states.joint_q.copy(),
                      states.joint_dq.copy(), states.foot_bodies)


def reroot(clip_states: RobotState, position, yaw):
    """Re-root frames so the first frame's root sits at horizontal ``position`` with heading
    ``yaw``. Heights, joints and body-relative motion are untouched."""
    first = clip_states[0]
    delta = float(yaw - heading_yaw(first))
    return _rigid_yaw(clip_states, delta, first.body_pos[0], position)


def loop_clip(clip: MotionClip, n: int) -> MotionClip:
    """Repeat ``clip`` ``n`` times; every repetition starts where the previous one would have
    continued (root displacement and heading extrapolated by one frame)."""
    if n < 1:
        raise ValueError("loop count must be >= 1")
    if n == 1:
        return MotionClip(clip.name, clip.states.copy(), clip.fps)
    s = clip.states
    parts = [s]
    last = s
    for _ in range(n - 1):
        lyaw = heading_yaw(last)
        step_yaw = _wrap(lyaw[-1] - lyaw[-2])
        step_pos = last.body_pos[-1, 0] - last.body_pos[-2, 0]
        target = last.body_pos[-1, 0] + step_pos
        nxt = reroot(s, target[:2], lyaw[-1] + step_yaw)
        parts.append(nxt)
        last = nxt
    return MotionClip(f"{clip.name}x{n}", RobotState.concat(parts), clip.fps)


def resample(states: RobotState, fps_in, fps_out=FPS) -> RobotState:
    """Linear interpolation of positions, velocities and joints; slerp for quaternions."""
    n = states.joint_q.shape[0]
    duration = (n - 1) / fps_in
    m = int(math.floor(duration * fps_out + 1e-9)) + 1
    src = np.arange(m) * fps_in / fps_out
    i0 = np.minimum(np.floor(src).astype(int), n - 1)
    i1 = np.minimum(i0 + 1, n - 1)
    a = src - i0

    def lerp(x):
        w = a.reshape((-1,) + (1,) * (x.ndim - 1))
        return (1 - w) * x[i0] + w * x[i1]

    quat = geo.quat_slerp(states.body_quat[i0], states.body_quat[i1], a[:, None] * np.ones(states.n_body))
    return RobotState(lerp(states.body_pos), quat, lerp(states.body_vel), lerp(states.body_angvel),
                      lerp(states.joint_q), lerp(states.joint_dq), states.foot_bodies)


def save_clip(clip: MotionClip, path):
    frames = []
    s = clip.states
    for i in range(len(clip)):
        bodies = [{"p": s.body_pos[i, b].tolist(), "q": s.body_quat[i, b].tolist(),
                   "v": s.body_vel[i, b].tolist(), "w": s.body_angvel[i, b].tolist()}
                  for b in range(s.n_body)]
        frames.append({"bodies": bodies, "joints": {"q": s.joint_q[i].tolist(), "dq": s.joint_dq[i].tolist()}})
    doc = {"name": clip.name, "fps": clip.fps, "n_body": s.n_body, "n_joint": s.n_joint,
           "foot_bodies": list(s.foot_bodies), "frames": frames}
    Path(path).write_text(json.dumps(doc))


def _field(d, key, where):
    if not isinstance(d, dict) or key not in d:
        raise ClipFormatError(f"{where}: missing field {key!r}")
    return d[key]


def _vector(d, key, size, where):
    v = _field(d, key, where)
    if not isinstance(v, list) or len(v) != size or not all(isinstance(x, (int, float)) for x in v):
        raise ClipFormatError(f"{where}.{key}: expected {size} numbers")
    return v


def load_clip(path, fps_out=FPS) -> MotionClip:
    """Read a clip file; clips recorded at another rate are resampled to ``fps_out``."""
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ClipFormatError(f"{path}: line {exc.lineno}: {exc.msg}") from exc
    name = _field(doc, "name", "clip")
    fps = _field(doc, "fps", "clip")
    nb = _field(doc, "n_body", "clip")
    nj = _field(doc, "n_joint", "clip")
    if not isinstance(fps, (int, float)) or fps <= 0:
        raise ClipFormatError("clip.fps: must be a positive number")
    if nb != nj + 1:
        raise ClipFormatError("clip: n_body must equal n_joint + 1")
    feet = tuple(doc.get("foot_bodies", Morphology().foot_bodies))
    raw = _field(doc, "frames", "clip")
    if not isinstance(raw, list) or len(raw) < 2:
        raise ClipFormatError("clip.frames: need at least two frames")
    pos, quat, vel, ang, q, dq = [], [], [], [], [], []
    for i, fr in enumerate(raw):
        where = f"clip.frames[{i}]"
        bodies = _field(fr, "bodies", where)
        if not isinstance(bodies, list) or len(bodies) != nb:
            raise ClipFormatError(f"{where}.bodies: expected {nb} bodies")
        for b, body in enumerate(bodies):
            bw = f"{where}.bodies[{b}]"
            pos.append(_vector(body, "p", 3, bw))
            quat.append(_vector(body, "q", 4, bw))
            vel.append(_vector(body, "v", 3, bw))
            ang.append(_vector(body, "w", 3, bw))
        joints = _field(fr, "joints", where)
        q.append(_vector(joints, "q", nj, where + ".joints"))
        dq.append(_vector(joints, "dq", nj, where + ".joints"))
    n = len(raw)
    states = RobotState(np.array(pos).reshape(n, nb, 3), np.array(quat).reshape(n, nb, 4),
                        np.array(vel).reshape(n, nb, 3), np.array(ang).reshape(n, nb, 3),
                        np.array(q), np.array(dq), feet)
    try:
        states.validate()
    except ValueError as exc:
        raise ClipFormatError(f"clip: {exc}") from exc
    if fps != fps_out:
        states = resample(states, fps, fps_out)
    return MotionClip(str(name), states, int(fps_out))
