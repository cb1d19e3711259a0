# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled substep integrator; same contract as ``vqloco._simcore_py.integrate``."""

from libc.math cimport sin, cos, sqrt

import numpy as np
cimport numpy as cnp

cnp.import_array()

DEF MAX_BODIES = 64


cdef inline void _quat_to_matrix(double* q, double* r) noexcept nogil:
    cdef double w = q[0], x = q[1], y = q[2], z = q[3]
    r[0] = 1 - 2 * (y * y + z * z)
    r[1] = 2 * (x * y - w * z)
    r[2] = 2 * (x * z + w * y)
    r[3] = 2 * (x * y + w * z)
    r[4] = 1 - 2 * (x * x + z * z)
    r[5] = 2 * (y * z - w * x)
    r[6] = 2 * (x * z - w * y)
    r[7] = 2 * (y * z + w * x)
    r[8] = 1 - 2 * (x * x + y * y)


cdef inline void _pitch_apply(double* r, double theta, double* v, double* out) noexcept nogil:
    cdef double c = cos(theta), s = sin(theta)
    cdef double a0 = c * v[0] + s * v[2]
    cdef double a1 = v[1]
    cdef double a2 = -s * v[0] + c * v[2]
    out[0] = r[0] * a0 + r[1] * a1 + r[2] * a2
    out[1] = r[3] * a0 + r[4] * a1 + r[5] * a2
    out[2] = r[6] * a0 + r[7] * a1 + r[8] * a2


cdef inline void _cross(double* a, double* b, double* out) noexcept nogil:
    out[0] = a[1] * b[2] - a[2] * b[1]
    out[1] = a[2] * b[0] - a[0] * b[2]
    out[2] = a[0] * b[1] - a[1] * b[0]


def integrate(double[:, ::1] gen, const double[:, ::1] actions, const double[:, ::1] kp,
              const double[:, ::1] kd, const double[::1] mass, const double[::1] friction,
              const cnp.intp_t[::1] parent, const double[:, ::1] offset,
              const cnp.intp_t[::1] contact_body, const double[:, ::1] contact_offset,
              const double[::1] inertia, const double[:, ::1] jparams, const double[::1] scal,
              int n_substeps):
    cdef Py_ssize_t n_env = gen.shape[0]
    cdef Py_ssize_t nj = actions.shape[1]
    cdef Py_ssize_t nb = parent.shape[0]
    cdef Py_ssize_t nc = contact_body.shape[0]
    if nb > MAX_BODIES:
        raise ValueError("too many bodies for the compiled kernel")
    cdef double gravity = scal[0], k_contact = scal[1], c_contact = scal[2]
    cdef double c_tangent = scal[3], k_limit = scal[4], ang_damping = scal[5], dt = scal[6]
    cdef double rot[9]
    cdef double theta[MAX_BODIES]
    cdef double pos[MAX_BODIES * 3]
    cdef double tau[MAX_BODIES]
    cdef double force[3]
    cdef double torque[3]
    cdef double axis[3]
    cdef double tmp[3]
    cdef double pt[3]
    cdef double rel[3]
    cdef double vel[3]
    cdef double arm[3]
    cdef double f[3]
    cdef double local[3]
    cdef double hinge, wq0, wq1, wq2, wq3, qw, qx, qy, qz, nrm, pen, fn, ftx, fty, limit, tn, scale
    cdef Py_ssize_t e, s, k, c, j, par, body, i
    cdef double* g

    with nogil:
        for e in range(n_env):
            g = &gen[e, 0]
            for s in range(n_substeps):
                _quat_to_matrix(&g[3], rot)
                axis[0] = rot[1]
                axis[1] = rot[4]
                axis[2] = rot[7]
                theta[0] = 0.0
                pos[0] = g[0]
                pos[1] = g[1]
                pos[2] = g[2]
                for k in range(1, nb):
                    par = parent[k]
                    local[0] = offset[k, 0]
                    local[1] = offset[k, 1]
                    local[2] = offset[k, 2]
                    _pitch_apply(rot, theta[par], local, tmp)
                    pos[3 * k] = pos[3 * par] + tmp[0]
                    pos[3 * k + 1] = pos[3 * par + 1] + tmp[1]
                    pos[3 * k + 2] = pos[3 * par + 2] + tmp[2]
                    theta[k] = theta[par] + g[13 + k - 1]

                force[0] = 0.0
                force[1] = 0.0
                force[2] = -mass[e] * gravity
                torque[0] = -ang_damping * g[10]
                torque[1] = -ang_damping * g[11]
                torque[2] = -ang_damping * g[12]
                for j in range(nj):
                    tau[j] = kp[e, j] * (actions[e, j] - g[13 + j]) - kd[e, j] * g[13 + nj + j] \
                        - jparams[1, j] * g[13 + nj + j]
                    if g[13 + j] < jparams[2, j]:
                        tau[j] = tau[j] + k_limit * (jparams[2, j] - g[13 + j])
                    if g[13 + j] > jparams[3, j]:
                        tau[j] = tau[j] + k_limit * (jparams[3, j] - g[13 + j])
                # joints rooted on the base react their actuator torque onto it
                for k in range(1, nb):
                    if parent[k] == 0:
                        torque[0] = torque[0] - tau[k - 1] * axis[0]
                        torque[1] = torque[1] - tau[k - 1] * axis[1]
                        torque[2] = torque[2] - tau[k - 1] * axis[2]

                for c in range(nc):
                    body = contact_body[c]
                    local[0] = contact_offset[c, 0]
                    local[1] = contact_offset[c, 1]
                    local[2] = contact_offset[c, 2]
                    _pitch_apply(rot, theta[body], local, tmp)
                    pt[0] = pos[3 * body] + tmp[0]
                    pt[1] = pos[3 * body + 1] + tmp[1]
                    pt[2] = pos[3 * body + 2] + tmp[2]
                    pen = -pt[2]
                    if not pen > 0.0:
                        continue
                    rel[0] = pt[0] - g[0]
                    rel[1] = pt[1] - g[1]
                    rel[2] = pt[2] - g[2]
                    _cross(&g[10], rel, tmp)
                    vel[0] = g[7] + tmp[0]
                    vel[1] = g[8] + tmp[1]
                    vel[2] = g[9] + tmp[2]
                    k = body
                    while k > 0:
                        tmp[0] = pt[0] - pos[3 * k]
                        tmp[1] = pt[1] - pos[3 * k + 1]
                        tmp[2] = pt[2] - pos[3 * k + 2]
                        _cross(axis, tmp, arm)
                        vel[0] = vel[0] + g[13 + nj + k - 1] * arm[0]
                        vel[1] = vel[1] + g[13 + nj + k - 1] * arm[1]
                        vel[2] = vel[2] + g[13 + nj + k - 1] * arm[2]
                        k = parent[k]
                    fn = k_contact * pen - c_contact * vel[2]
                    if fn < 0.0:
                        fn = 0.0
                    ftx = -c_tangent * vel[0]
                    fty = -c_tangent * vel[1]
                    limit = friction[e] * fn
                    tn = sqrt(ftx * ftx + fty * fty)
                    if tn > limit:
                        scale = limit / tn if tn > 0.0 else 1.0
                        ftx = ftx * scale
                        fty = fty * scale
                    f[0] = ftx
                    f[1] = fty
                    f[2] = fn
                    force[0] = force[0] + f[0]
                    force[1] = force[1] + f[1]
                    force[2] = force[2] + f[2]
                    _cross(rel, f, tmp)
                    torque[0] = torque[0] + tmp[0]
                    torque[1] = torque[1] + tmp[1]
                    torque[2] = torque[2] + tmp[2]
                    k = body
                    hinge = 0.0
                    while k > 0:
                        tmp[0] = pt[0] - pos[3 * k]
                        tmp[1] = pt[1] - pos[3 * k + 1]
                        tmp[2] = pt[2] - pos[3 * k + 2]
                        _cross(axis, tmp, arm)
                        hinge = arm[0] * f[0] + arm[1] * f[1] + arm[2] * f[2]
                        tau[k - 1] = tau[k - 1] + hinge
                        k = parent[k]
                    if body > 0:
                        # the hinge passes no moment about its own axis; the actuator reaction replaces it
                        torque[0] = torque[0] - hinge * axis[0]
                        torque[1] = torque[1] - hinge * axis[1]
                        torque[2] = torque[2] - hinge * axis[2]

                # world torque -> body frame -> scaled by inverse inertia -> world
                for i in range(3):
                    tmp[i] = (rot[i] * torque[0] + rot[3 + i] * torque[1] + rot[6 + i] * torque[2]) / inertia[i]
                for i in range(3):
                    g[7 + i] = g[7 + i] + dt * force[i] / mass[e]
                for i in range(3):
                    g[10 + i] = g[10 + i] + dt * (rot[3 * i] * tmp[0] + rot[3 * i + 1] * tmp[1] + rot[3 * i + 2] * tmp[2])
                for j in range(nj):
                    g[13 + nj + j] = g[13 + nj + j] + dt * tau[j] / jparams[0, j]
                for i in range(3):
                    g[i] = g[i] + dt * g[7 + i]
                for j in range(nj):
                    g[13 + j] = g[13 + j] + dt * g[13 + nj + j]
                qw = g[3]
                qx = g[4]
                qy = g[5]
                qz = g[6]
                wq1 = g[10]
                wq2 = g[11]
                wq3 = g[12]
                g[3] = qw + 0.5 * dt * (-wq1 * qx - wq2 * qy - wq3 * qz)
                g[4] = qx + 0.5 * dt * (wq1 * qw + wq2 * qz - wq3 * qy)
                g[5] = qy + 0.5 * dt * (-wq1 * qz + wq2 * qw + wq3 * qx)
                g[6] = qz + 0.5 * dt * (wq1 * qy - wq2 * qx + wq3 * qw)
                nrm = sqrt(g[3] * g[3] + g[4] * g[4] + g[5] * g[5] + g[6] * g[6])
                g[3] = g[3] / nrm
                g[4] = g[4] / nrm
                g[5] = g[5] / nrm
                g[6] = g[6] / nrm
    return np.asarray(gen)
