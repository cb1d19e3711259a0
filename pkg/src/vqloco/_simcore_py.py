"""Pure numpy substep integrator. Reference implementation of the compiled ``_simcore`` kernel.

Layout of one environment's generalized state row (length ``13 + 2 * n_joint``)::

    [px py pz | qw qx qy qz | vx vy vz | wx wy wz | q_0..q_{n-1} | dq_0..dq_{n-1}]

Scalar parameter vector ``scal``::

    [gravity, k_contact, c_contact, c_tangent, k_limit, ang_damping, dt]

Joint parameter matrix ``jparams`` rows: armature, viscous damping, lower limit, upper limit.
"""

import numpy as np

GRAVITY, K_CONTACT, C_CONTACT, C_TANGENT, K_LIMIT, ANG_DAMPING, DT = range(7)


def _quat_to_matrix(q):
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    r = np.empty((q.shape[0], 3, 3))
    r[:, 0, 0] = 1 - 2 * (y * y + z * z)
    r[:, 0, 1] = 2 * (x * y - w * z)
    r[:, 0, 2] = 2 * (x * z + w * y)
    r[:, 1, 0] = 2 * (x * y + w * z)
    r[:, 1, 1] = 1 - 2 * (x * x + z * z)
    r[:, 1, 2] = 2 * (y * z - w * x)
    r[:, 2, 0] = 2 * (x * z - w * y)
    r[:, 2, 1] = 2 * (y * z + w * x)
    r[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return r


def _pitch(theta, v):
    """Rotate base-frame vectors ``v`` (3,) about y by angles ``theta`` (E,)."""
    c, s = np.cos(theta), np.sin(theta)
    return np.stack([c * v[0] + s * v[2], np.full_like(theta, v[1]), -s * v[0] + c * v[2]], axis=-1)


def _apply(r, v):
    return np.einsum("eij,ej->ei", r, v)


def _cross(a, b):
    return np.stack(
        [a[:, 1] * b[:, 2] - a[:, 2] * b[:, 1],
         a[:, 2] * b[:, 0] - a[:, 0] * b[:, 2],
         a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0]],
        axis=-1,
    )


def integrate(gen, actions, kp, kd, mass, friction, parent, offset, contact_body,
              contact_offset, inertia, jparams, scal, n_substeps):
    """Advance ``gen`` in place by ``n_substeps`` semi-implicit Euler steps."""
    n_env = gen.shape[0]
    nj = actions.shape[1]
    nb = parent.shape[0]
    dt = scal[DT]
    inv_inertia = 1.0 / inertia
    armature, damping, lo, hi = jparams
    for _ in range(n_substeps):
        p = gen[:, 0:3]
        quat = gen[:, 3:7]
        v = gen[:, 7:10]
        w = gen[:, 10:13]
        q = gen[:, 13:13 + nj]
        dq = gen[:, 13 + nj:13 + 2 * nj]
        rot = _quat_to_matrix(quat)
        axis = rot[:, :, 1]

        theta = np.zeros((n_env, nb))
        pos = np.empty((n_env, nb, 3))
        pos[:, 0] = p
        for k in range(1, nb):
            par = parent[k]
            pos[:, k] = pos[:, par] + _apply(rot, _pitch(theta[:, par], offset[k]))
            theta[:, k] = theta[:, par] + q[:, k - 1]

        force = np.zeros((n_env, 3))
        force[:, 2] = -mass * scal[GRAVITY]
        torque = -scal[ANG_DAMPING] * w
        tau = kp * (actions - q) - kd * dq - damping * dq
        tau = tau + np.where(q < lo, scal[K_LIMIT] * (lo - q), 0.0)
        tau = tau + np.where(q > hi, scal[K_LIMIT] * (hi - q), 0.0)
        # joints rooted on the base react their actuator torque onto it
        for k in range(1, nb):
            if parent[k] == 0:
                torque = torque - tau[:, k - 1:k] * axis

        for c in range(contact_body.shape[0]):
            body = contact_body[c]
            pt = pos[:, body] + _apply(rot, _pitch(theta[:, body], contact_offset[c]))
            rel = pt - p
            vel = v + _cross(w, rel)
            chain = []
            k = body
            while k > 0:
                arm = _cross(axis, pt - pos[:, k])
                vel = vel + dq[:, k - 1:k] * arm
                chain.append((k - 1, arm))
                k = parent[k]
            pen = -pt[:, 2]
            fn = np.maximum(scal[K_CONTACT] * pen - scal[C_CONTACT] * vel[:, 2], 0.0)
            fn = np.where(pen > 0.0, fn, 0.0)
            ft = -scal[C_TANGENT] * vel[:, :2]
            limit = friction * fn
            norm = np.sqrt(ft[:, 0] ** 2 + ft[:, 1] ** 2)
            scale = np.where(norm > limit, limit / np.where(norm > 0.0, norm, 1.0), 1.0)
            ft = ft * scale[:, None]
            ft = np.where((pen > 0.0)[:, None], ft, 0.0)
            f = np.concatenate([ft, fn[:, None]], axis=-1)
            force = force + f
            torque = torque + _cross(rel, f)
            for j, arm in chain:
                tau[:, j] += np.sum(arm * f, axis=-1)
            if chain:
                # the hinge passes no moment about its own axis; the actuator reaction replaces it
                torque = torque - np.sum(chain[-1][1] * f, axis=-1, keepdims=True) * axis

        ang_acc = _apply(rot, inv_inertia * np.einsum("eji,ej->ei", rot, torque))
        v += dt * force / mass[:, None]
        w += dt * ang_acc
        dq += dt * tau / armature
        p += dt * v
        q += dt * dq
        wq = np.concatenate([np.zeros((n_env, 1)), w], axis=-1)
        qw, qx, qy, qz = quat[:, 0].copy(), quat[:, 1].copy(), quat[:, 2].copy(), quat[:, 3].copy()
        ow, ox, oy, oz = wq[:, 0], wq[:, 1], wq[:, 2], wq[:, 3]
        quat[:, 0] += 0.5 * dt * (ow * qw - ox * qx - oy * qy - oz * qz)
        quat[:, 1] += 0.5 * dt * (ow * qx + ox * qw + oy * qz - oz * qy)
        quat[:, 2] += 0.5 * dt * (ow * qy - ox * qz + oy * qw + oz * qx)
        quat[:, 3] += 0.5 * dt * (ow * qz + ox * qy - oy * qx + oz * qw)
        quat /= np.linalg.norm(quat, axis=-1, keepdims=True)
    return gen
