"""Deterministic toy articulated walker.

A floating base carries two legs; every leg is a chain of pitch hinges (hip, knee, ankle) whose
axes are parallel to the base y-axis. Joints are PD-actuated and driven through rotor inertia;
the ground is a penalty spring-damper with Coulomb-clamped viscous friction. Contact forces act
on the base as a rigid body and on every joint upstream of the contact point (``J^T f``).

The walker is a surrogate: it is not a rigid-body-accurate humanoid, only a system with
contact-discontinuous dynamics for the world model to learn.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import geometry as geo

log = logging.getLogger(__name__)

try:
    from ._simcore import integrate as _integrate_compiled
except ImportError:  # pragma: no cover - exercised when the extension is not built
    _integrate_compiled = None
from ._simcore_py import integrate as _integrate_numpy

KERNELS = {"numpy": _integrate_numpy}
if _integrate_compiled is not None:
    KERNELS["compiled"] = _integrate_compiled
DEFAULT_KERNEL = "compiled" if _integrate_compiled is not None else "numpy"

__all__ = [
    "Morphology",
    "SimConfig",
    "RandomizationRanges",
    "EnvRandomization",
    "RobotState",
    "DEFAULT_KERNEL",
    "KERNELS",
    "pd_torque",
    "forward_kinematics",
    "step",
    "randomize",
    "check_termination",
    "apply_obs_noise",
]


@dataclass(frozen=True)
class Morphology:
    """Kinematic tree. Body 0 is the base; body ``k >= 1`` hangs off ``parent[k]`` through joint
    ``k - 1``, whose origin sits at ``offset[k]`` in the parent's (pitched) frame."""

    parent: tuple = (-1, 0, 1, 2, 0, 4, 5)
    offset: tuple = (
        (0.0, 0.0, 0.0),
        (0.0, 0.1, -0.05), (0.0, 0.0, -0.3), (0.0, 0.0, -0.3),
        (0.0, -0.1, -0.05), (0.0, 0.0, -0.3), (0.0, 0.0, -0.3),
    )
    body_mass: tuple = (5.0, 0.6, 0.4, 0.2, 0.6, 0.4, 0.2)
    base_inertia: tuple = (0.6, 0.6, 0.4)
    # armature stands in for the link inertia the joint coordinates do not carry
    joint_armature: tuple = (0.6, 0.4, 0.2, 0.6, 0.4, 0.2)
    joint_damping: tuple = (0.5, 0.5, 0.3, 0.5, 0.5, 0.3)
    joint_lower: tuple = (-1.2, -0.1, -1.0, -1.2, -0.1, -1.0)
    joint_upper: tuple = (1.2, 2.2, 1.0, 1.2, 2.2, 1.0)
    foot_bodies: tuple = (3, 6)
    # extra contact points besides the body origins: heel/toe by inner/outer edge of each sole.
    # The inner edges reach past the centre line so that single stance is laterally stable
    # with pitch-only legs (there is no self-collision, so the soles may overlap).
    sole_points: tuple = (
        (3, (-0.15, -0.16, -0.05)), (3, (-0.15, 0.05, -0.05)), (3, (0.2, -0.16, -0.05)), (3, (0.2, 0.05, -0.05)),
        (6, (-0.15, 0.16, -0.05)), (6, (-0.15, -0.05, -0.05)), (6, (0.2, 0.16, -0.05)), (6, (0.2, -0.05, -0.05)),
    )

    @property
    def n_body(self):
        return len(self.parent)

    @property
    def n_joint(self):
        return len(self.parent) - 1

    @property
    def total_mass(self):
        return float(sum(self.body_mass))

    def validate(self):
        nb = self.n_body
        if self.parent[0] != -1 or any(not 0 <= p < k for k, p in enumerate(self.parent) if k):
            raise ValueError("parent indices must precede their children and body 0 must be the root")
        for name in ("offset", "body_mass"):
            if len(getattr(self, name)) != nb:
                raise ValueError(f"{name} needs {nb} entries")
        for name in ("joint_armature", "joint_damping", "joint_lower", "joint_upper"):
            if len(getattr(self, name)) != nb - 1:
                raise ValueError(f"{name} needs {nb - 1} entries")
        if any(lo > hi for lo, hi in zip(self.joint_lower, self.joint_upper)):
            raise ValueError("joint limits are inverted")
        if any(not 0 < f < nb for f in self.foot_bodies):
            raise ValueError("foot body index out of range")
        return self

    def contact_arrays(self):
        bodies = list(range(self.n_body)) + [b for b, _ in self.sole_points]
        offsets = [(0.0, 0.0, 0.0)] * self.n_body + [o for _, o in self.sole_points]
        return np.asarray(bodies, dtype=np.intp), np.asarray(offsets, dtype=float)

    def to_dict(self):
        return {
            "parent": list(self.parent),
            "offset": [list(o) for o in self.offset],
            "body_mass": list(self.body_mass),
            "base_inertia": list(self.base_inertia),
            "joint_armature": list(self.joint_armature),
            "joint_damping": list(self.joint_damping),
            "joint_lower": list(self.joint_lower),
            "joint_upper": list(self.joint_upper),
            "foot_bodies": list(self.foot_bodies),
            "sole_points": [[b, list(o)] for b, o in self.sole_points],
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            parent=tuple(d["parent"]),
            offset=tuple(tuple(o) for o in d["offset"]),
            body_mass=tuple(d["body_mass"]),
            base_inertia=tuple(d["base_inertia"]),
            joint_armature=tuple(d["joint_armature"]),
            joint_damping=tuple(d["joint_damping"]),
            joint_lower=tuple(d["joint_lower"]),
            joint_upper=tuple(d["joint_upper"]),
            foot_bodies=tuple(d["foot_bodies"]),
            sole_points=tuple((int(b), tuple(o)) for b, o in d["sole_points"]),
        ).validate()


@dataclass(frozen=True)
class SimConfig:
    fps: int = 30
    substeps: int = 6
    gravity: float = 9.81
    kp: tuple = (240.0, 240.0, 160.0, 240.0, 240.0, 160.0)
    kd: tuple = (6.0, 6.0, 3.5, 6.0, 6.0, 3.5)
    termination_height: float = 0.2
    contact_stiffness: float = 5e3
    contact_damping: float = 50.0
    tangential_damping: float = 50.0
    limit_stiffness: float = 200.0
    angular_damping: float = 0.2
    morphology: Morphology = field(default_factory=Morphology)
    kernel: str = DEFAULT_KERNEL

    def __post_init__(self):
        if self.fps <= 0:
            raise ValueError("fps must be positive")
        if self.substeps < 1:
            raise ValueError("substeps must be >= 1")
        if self.termination_height <= 0:
            raise ValueError("termination height must be positive")
        if len(self.kp) != self.morphology.n_joint or len(self.kd) != self.morphology.n_joint:
            raise ValueError("kp/kd need one entry per joint")
        if self.kernel not in KERNELS:
            raise ValueError(f"unknown kernel {self.kernel!r}; available: {sorted(KERNELS)}")

    @property
    def dt(self):
        return 1.0 / self.fps

    @property
    def substep_dt(self):
        return 1.0 / (self.fps * self.substeps)

    @property
    def n_joint(self):
        return self.morphology.n_joint

    @property
    def n_body(self):
        return self.morphology.n_body

    def with_kernel(self, kernel):
        return replace(self, kernel=kernel)


@dataclass(frozen=True)
class RandomizationRanges:
    friction: tuple = (0.60, 1.00)
    payload: tuple = (-2.00, 2.00)
    kp_scale: tuple = (0.90, 1.10)
    kd_scale: tuple = (0.90, 1.10)
    dof_pos_noise: tuple = (-0.05, 0.05)
    dof_vel_noise: tuple = (-0.50, 0.50)
    ang_vel_noise: tuple = (-0.50, 0.50)
    gravity_noise: tuple = (-0.05, 0.05)

    def validate(self):
        for name, (lo, hi) in vars(self).items():
            if lo > hi:
                raise ValueError(f"inverted randomization range for {name}: [{lo}, {hi}]")
        return self

    @classmethod
    def none(cls):
        """No randomization and no observation noise."""
        return cls((1.0, 1.0), (0.0, 0.0), (1.0, 1.0), (1.0, 1.0),
                   (0.0, 0.0), (0.0, 0.0), (0.0, 0.0), (0.0, 0.0))


@dataclass
class EnvRandomization:
    """Per-environment physical draws. Scalars, or arrays of shape ``(n_env,)`` for batches."""

    friction: np.ndarray
    payload: np.ndarray
    kp_scale: np.ndarray
    kd_scale: np.ndarray
    dof_pos_noise: tuple = (-0.05, 0.05)
    dof_vel_noise: tuple = (-0.50, 0.50)
    ang_vel_noise: tuple = (-0.50, 0.50)
    gravity_noise: tuple = (-0.05, 0.05)

    @classmethod
    def nominal(cls, n_env=None):
        shape = () if n_env is None else (n_env,)
        one, zero = np.ones(shape), np.zeros(shape)
        return cls(one, zero, one.copy(), one.copy(), (0.0, 0.0), (0.0, 0.0), (0.0, 0.0), (0.0, 0.0))

    def take(self, idx):
        return replace(self, friction=np.asarray(self.friction)[idx], payload=np.asarray(self.payload)[idx],
                       kp_scale=np.asarray(self.kp_scale)[idx], kd_scale=np.asarray(self.kd_scale)[idx])


@dataclass
class RobotState:
    """Full simulator state. Arrays may carry leading batch dimensions."""

    body_pos: np.ndarray      # (..., n_body, 3) m
    body_quat: np.ndarray     # (..., n_body, 4) unit [w, x, y, z]
    body_vel: np.ndarray      # (..., n_body, 3) m/s
    body_angvel: np.ndarray   # (..., n_body, 3) rad/s, world frame
    joint_q: np.ndarray       # (..., n_joint) rad
    joint_dq: np.ndarray      # (..., n_joint) rad/s
    foot_bodies: tuple = (3, 6)

    @property
    def batch_shape(self):
        return self.joint_q.shape[:-1]

    @property
    def n_body(self):
        return self.body_pos.shape[-2]

    @property
    def n_joint(self):
        return self.joint_q.shape[-1]

    def __len__(self):
        return self.joint_q.shape[0] if self.joint_q.ndim > 1 else 1

    def __getitem__(self, idx):
        return RobotState(self.body_pos[idx], self.body_quat[idx], self.body_vel[idx],
                          self.body_angvel[idx], self.joint_q[idx], self.joint_dq[idx], self.foot_bodies)

    def copy(self):
        return RobotState(self.body_pos.copy(), self.body_quat.copy(), self.body_vel.copy(),
                          self.body_angvel.copy(), self.joint_q.copy(), self.joint_dq.copy(),
                          self.foot_bodies)

    def validate(self):
        if self.n_body != self.n_joint + 1:
            raise ValueError(f"expected n_body = n_joint + 1, got {self.n_body} and {self.n_joint}")
        norms = np.linalg.norm(self.body_quat, axis=-1)
        if np.any(np.abs(norms - 1.0) > 1e-6):
            raise ValueError("body quaternions are not unit norm")
        for name in ("body_pos", "body_quat", "body_vel", "body_angvel", "joint_q", "joint_dq"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"non-finite entries in {name}")
        return self

    def generalized(self):
        """Pack base pose/velocity and joint coordinates into kernel rows."""
        return np.concatenate(
            [self.body_pos[..., 0, :], self.body_quat[..., 0, :], self.body_vel[..., 0, :],
             self.body_angvel[..., 0, :], self.joint_q, self.joint_dq], axis=-1)

    @staticmethod
    def stack(states):
        return RobotState(*(np.stack([getattr(s, f) for s in states]) for f in
                            ("body_pos", "body_quat", "body_vel", "body_angvel", "joint_q", "joint_dq")),
                          foot_bodies=states[0].foot_bodies)

    @staticmethod
    def concat(states):
        """Join along the leading (frame) axis."""
        return RobotState(*(np.concatenate([getattr(s, f) for s in states]) for f in
                            ("body_pos", "body_quat", "body_vel", "body_angvel", "joint_q", "joint_dq")),
                          foot_bodies=states[0].foot_bodies)


def pd_torque(q, dq, target, kp, kd, kp_scale=1.0, kd_scale=1.0):
    """Joint torque of the PD actuator."""
    return kp * kp_scale * (np.asarray(target) - q) - kd * kd_scale * np.asarray(dq)


def forward_kinematics(morph: Morphology, base_pos, base_quat, base_vel, base_angvel, q, dq):
    """Per-body poses and velocities from base state and joint coordinates (batched)."""
    base_pos = np.asarray(base_pos, dtype=float)
    batch = base_pos.shape[:-1]
    nb = morph.n_body
    q = np.asarray(q, dtype=float)
    dq = np.asarray(dq, dtype=float)
    rot = geo.quat_to_matrix(base_quat)
    axis = rot[..., :, 1]
    theta = np.zeros(batch + (nb,))
    rate = np.zeros(batch + (nb,))
    pos = np.zeros(batch + (nb, 3))
    vel = np.zeros(batch + (nb, 3))
    angvel = np.zeros(batch + (nb, 3))
    quat = np.zeros(batch + (nb, 4))
    pos[..., 0, :] = base_pos
    vel[..., 0, :] = base_vel
    angvel[..., 0, :] = base_angvel
    quat[..., 0, :] = base_quat
    offsets = np.asarray(morph.offset, dtype=float)
    for k in range(1, nb):
        par = morph.parent[k]
        c, s = np.cos(theta[..., par]), np.sin(theta[..., par])
        o = offsets[k]
        local = np.stack([c * o[0] + s * o[2], np.full_like(c, o[1]), -s * o[0] + c * o[2]], axis=-1)
        delta = np.einsum("...ij,...j->...i", rot, local)
        pos[..., k, :] = pos[..., par, :] + delta
        # velocity of the child origin: parent origin velocity + parent angular velocity x lever
        vel[..., k, :] = vel[..., par, :] + np.cross(angvel[..., par, :], delta)
        theta[..., k] = theta[..., par] + q[..., k - 1]
        rate[..., k] = rate[..., par] + dq[..., k - 1]
        angvel[..., k, :] = base_angvel + axis * rate[..., k, None]
        quat[..., k, :] = geo.quat_mul(base_quat, geo.quat_from_axis_angle(np.array([0.0, 1.0, 0.0]),
                                                                             theta[..., k]))
    return RobotState(pos, quat, vel, angvel, q.copy(), dq.copy(), tuple(morph.foot_bodies))


def state_from_generalized(morph, gen):
    nj = morph.n_joint
    return forward_kinematics(morph, gen[..., 0:3], gen[..., 3:7], gen[..., 7:10], gen[..., 10:13],
                              gen[..., 13:13 + nj], gen[..., 13 + nj:13 + 2 * nj])


def standing_state(morph: Morphology, q=None, height=None, n_env=None):
    """A state with the given joint angles whose lowest contact point touches the ground."""
    nj = morph.n_joint
    q = np.zeros(nj) if q is None else np.asarray(q, dtype=float)
    probe = forward_kinematics(morph, np.zeros(3), np.array([1.0, 0, 0, 0]), np.zeros(3), np.zeros(3),
                               q, np.zeros(nj))
    if height is None:
        height = -contact_points(morph, probe)[..., 2].min()
    state = forward_kinematics(morph, np.array([0.0, 0.0, height]), np.array([1.0, 0, 0, 0]),
                               np.zeros(3), np.zeros(3), q, np.zeros(nj))
    if n_env is not None:
        state = RobotState.stack([state] * n_env)
    return state


def contact_points(morph: Morphology, state: RobotState):
    bodies, offsets = morph.contact_arrays()
    pts = []
    for b, o in zip(bodies, offsets):
        pts.append(state.body_pos[..., b, :] + geo.quat_rotate(state.body_quat[..., b, :], o))
    return np.stack(pts, axis=-2)


def _broadcast_rand(rand: EnvRandomization, n_env):
    def arr(x):
        return np.ascontiguousarray(np.broadcast_to(np.asarray(x, dtype=float), (n_env,)))
    return arr(rand.friction), arr(rand.payload), arr(rand.kp_scale), arr(rand.kd_scale)


def step(state: RobotState, action, rand: EnvRandomization, cfg: SimConfig) -> RobotState:
    """Advance one control step (``cfg.substeps`` substeps at ``fps * substeps`` Hz)."""
    morph = cfg.morphology
    action = np.asarray(action, dtype=float)
    single = state.joint_q.ndim == 1
    if action.shape[-1] != morph.n_joint:
        raise ValueError(f"action needs {morph.n_joint} entries, got {action.shape[-1]}")
    if not np.all(np.isfinite(action)):
        raise ValueError("non-finite action")
    gen = np.ascontiguousarray(state.generalized().reshape(-1, 13 + 2 * morph.n_joint))
    n_env = gen.shape[0]
    actions = np.ascontiguousarray(np.broadcast_to(action, (n_env, morph.n_joint)))
    friction, payload, kp_scale, kd_scale = _broadcast_rand(rand, n_env)
    kp = np.ascontiguousarray(np.asarray(cfg.kp)[None, :] * kp_scale[:, None])
    kd = np.ascontiguousarray(np.asarray(cfg.kd)[None, :] * kd_scale[:, None])
    mass = np.ascontiguousarray(morph.total_mass + payload)
    parent = np.asarray(morph.parent, dtype=np.intp)
    offset = np.ascontiguousarray(morph.offset, dtype=float)
    contact_body, contact_offset = morph.contact_arrays()
    jparams = np.ascontiguousarray(
        [morph.joint_armature, morph.joint_damping, morph.joint_lower, morph.joint_upper], dtype=float)
    scal = np.array([cfg.gravity, cfg.contact_stiffness, cfg.contact_damping, cfg.tangential_damping,
                     cfg.limit_stiffness, cfg.angular_damping, cfg.substep_dt])
    KERNELS[cfg.kernel](gen, actions, kp, kd, mass, friction, parent, offset, contact_body,
                        np.ascontiguousarray(contact_offset), np.asarray(morph.base_inertia, dtype=float),
                        jparams, scal, int(cfg.substeps))
    if not np.all(np.isfinite(gen)):
        raise FloatingPointError("simulation diverged")
    out = state_from_generalized(morph, gen[0] if single else gen.reshape(state.batch_shape + gen.shape[-1:]))
    return out


def randomize(seed, ranges: RandomizationRanges = RandomizationRanges(), n_env=None) -> EnvRandomization:
    """Uniform i.i.d. draws for every physical term; deterministic given ``seed``."""
    ranges.validate()
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    shape = None if n_env is None else (n_env,)

    def draw(lo_hi):
        lo, hi = lo_hi
        if lo == hi:
            return np.full(shape, float(lo)) if shape else float(lo)
        return rng.uniform(lo, hi, size=shape)

    return EnvRandomization(
        friction=draw(ranges.friction),
        payload=draw(ranges.payload),
        kp_scale=draw(ranges.kp_scale),
        kd_scale=draw(ranges.kd_scale),
        dof_pos_noise=tuple(ranges.dof_pos_noise),
        dof_vel_noise=tuple(ranges.dof_vel_noise),
        ang_vel_noise=tuple(ranges.ang_vel_noise),
        gravity_noise=tuple(ranges.gravity_noise),
    )


def check_termination(state: RobotState, h0=0.2):
    """True where any non-foot body's origin is strictly below ``h0``."""
    z = state.body_pos[..., 2]
    mask = np.ones(z.shape[-1], dtype=bool)
    mask[list(state.foot_bodies)] = False
    return np.any(z[..., mask] < h0, axis=-1)


def apply_obs_noise(obs, rand: EnvRandomization, rng, n_joint=None):
    """Additive uniform noise on a local observation ``[gravity(3), angvel(3), q(n), dq(n)]``."""
    obs = np.asarray(obs, dtype=float)
    n_joint = (obs.shape[-1] - 6) // 2 if n_joint is None else n_joint
    lo = np.concatenate([np.full(3, rand.gravity_noise[0]), np.full(3, rand.ang_vel_noise[0]),
                         np.full(n_joint, rand.dof_pos_noise[0]), np.full(n_joint, rand.dof_vel_noise[0])])
    hi = np.concatenate([np.full(3, rand.gravity_noise[1]), np.full(3, rand.ang_vel_noise[1]),
                         np.full(n_joint, rand.dof_pos_noise[1]), np.full(n_joint, rand.dof_vel_noise[1])])
    if np.all(lo == 0.0) and np.all(hi == 0.0):
        return obs.copy()
    return obs + rng.uniform(lo, hi, size=obs.shape)
