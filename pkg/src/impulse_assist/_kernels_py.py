"""Pure-Python/numpy implementation of the dynamics kernels.

Mirrors ``_kernels.pyx`` function by function; used when the compiled
extension is unavailable or ``IMPULSE_ASSIST_PURE_PYTHON`` is set.

All functions take the flat arrays of ``model.KernelArrays`` plus state
vectors. Quantities are world-frame; link frames sit at joint locations.
"""

import numpy as np

from .rotations import axis_angle_matrix, quat_exp, quat_mul, quat_to_matrix


def link_frames(k, q):
    """World rotations, origins and world joint axes."""
    L = k.mass.shape[0]
    n = k.axis.shape[0]
    R = np.zeros((L, 3, 3))
    p = np.zeros((L, 3))
    z = np.zeros((n, 3))
    R[k.base] = quat_to_matrix(q[3:7])
    p[k.base] = q[:3]
    for j in k.order:
        par, ch = k.j_parent[j], k.j_child[j]
        Rj = R[par] @ k.origin_rot[j]
        R[ch] = Rj @ axis_angle_matrix(k.axis[j], q[7 + j])
        p[ch] = p[par] + R[par] @ k.origin_pos[j]
        z[j] = Rj @ k.axis[j]
    return R, p, z


def _rnea_frames(k, R, p, z, v, a, gravity):
    L = k.mass.shape[0]
    n = k.axis.shape[0]
    w = np.zeros((L, 3))
    dw = np.zeros((L, 3))
    ao = np.zeros((L, 3))
    b = k.base
    w[b] = v[3:6]
    dw[b] = a[3:6]
    # gravity enters as a fictitious upward acceleration of the base
    ao[b] = a[0:3] - gravity
    for j in k.order:
        par, ch = k.j_parent[j], k.j_child[j]
        r = p[ch] - p[par]
        qd = v[6 + j]
        w[ch] = w[par] + z[j] * qd
        dw[ch] = dw[par] + z[j] * a[6 + j] + np.cross(w[par], z[j] * qd)
        ao[ch] = ao[par] + np.cross(dw[par], r) + np.cross(w[par], np.cross(w[par], r))
    F = np.zeros((L, 3))
    N = np.zeros((L, 3))
    for l in range(L):
        c = R[l] @ k.com[l]
        ac = ao[l] + np.cross(dw[l], c) + np.cross(w[l], np.cross(w[l], c))
        Iw = R[l] @ k.inertia[l] @ R[l].T
        F[l] = k.mass[l] * ac
        N[l] = Iw @ dw[l] + np.cross(w[l], Iw @ w[l]) + np.cross(c, F[l])
    tau = np.zeros(6 + n)
    for j in k.order[::-1]:
        par, ch = k.j_parent[j], k.j_child[j]
        tau[6 + j] = z[j] @ N[ch]
        F[par] += F[ch]
        N[par] += N[ch] + np.cross(p[ch] - p[par], F[ch])
    tau[0:3] = F[b]
    tau[3:6] = N[b]
    return tau


def rnea(k, q, v, a, gravity):
    R, p, z = link_frames(k, q)
    return _rnea_frames(k, R, p, z, v, a, gravity)


def mass_matrix(k, q):
    R, p, z = link_frames(k, q)
    nv = 6 + k.axis.shape[0]
    M = np.zeros((nv, nv))
    zero = np.zeros(nv)
    g0 = np.zeros(3)
    for j in range(nv):
        e = np.zeros(nv)
        e[j] = 1.0
        M[:, j] = _rnea_frames(k, R, p, z, zero, e, g0)
    return 0.5 * (M + M.T)


def points_state(k, q, v, links, local):
    """World positions and velocities of points fixed to links."""
    R, p, z = link_frames(k, q)
    w, vo = _link_velocities(k, p, z, v)
    pos = p[links] + np.einsum("pij,pj->pi", R[links], local)
    vel = vo[links] + np.cross(w[links], pos - p[links])
    return pos, vel


def _link_velocities(k, p, z, v):
    L = k.mass.shape[0]
    w = np.zeros((L, 3))
    vo = np.zeros((L, 3))
    w[k.base] = v[3:6]
    vo[k.base] = v[0:3]
    for j in k.order:
        par, ch = k.j_parent[j], k.j_child[j]
        vo[ch] = vo[par] + np.cross(w[par], p[ch] - p[par])
        w[ch] = w[par] + z[j] * v[6 + j]
    return w, vo


def points_generalized_force(k, q, links, pos, forces):
    """J^T f summed over point forces applied at world positions ``pos``."""
    R, p, z = link_frames(k, q)
    n = k.axis.shape[0]
    gen = np.zeros(6 + n)
    base_p = p[k.base]
    for i in range(len(links)):
        f = forces[i]
        x = pos[i]
        gen[0:3] += f
        gen[3:6] += np.cross(x - base_p, f)
        link = links[i]
        while k.link_joint[link] >= 0:
            j = k.link_joint[link]
            gen[6 + j] += z[j] @ np.cross(x - p[k.j_child[j]], f)
            link = k.j_parent[j]
    return gen


def contact_law(pos, vel, k_n, d_n, mu, k_t):
    """Penalty ground contact on the plane z = 0 with a Coulomb-clamped viscous friction."""
    P = pos.shape[0]
    out = np.zeros((P, 3))
    for i in range(P):
        pen = pos[i, 2]
        if pen >= 0.0:
            continue
        fn = -k_n * pen - d_n * vel[i, 2]
        if fn <= 0.0:
            continue
        vt = np.array([vel[i, 0], vel[i, 1]])
        speed = np.hypot(vt[0], vt[1])
        out[i, 2] = fn
        if speed > 0.0:
            mag = min(mu * fn, k_t * speed)
            out[i, 0:2] = -mag * vt / speed
    return out


def step(k, q, v, tau_joint, wrench, gravity, links, local, contact_params, dt):
    """One semi-implicit Euler step.

    Returns (q_next, v_next, contact point forces).
    """
    k_n, d_n, mu, k_t = contact_params
    n = k.axis.shape[0]
    R, p, z = link_frames(k, q)
    M = mass_matrix(k, q)
    bias = _rnea_frames(k, R, p, z, v, np.zeros(6 + n), gravity)
    rhs = -bias
    rhs[6:] += tau_joint
    rhs[:6] += wrench
    if len(links):
        pos, vel = points_state(k, q, v, links, local)
        fc = contact_law(pos, vel, k_n, d_n, mu, k_t)
        rhs += points_generalized_force(k, q, links, pos, fc)
    else:
        fc = np.zeros((0, 3))
    acc = np.linalg.solve(M, rhs)
    v_next = v + dt * acc
    q_next = q.copy()
    q_next[0:3] = q[0:3] + dt * v_next[0:3]
    quat = quat_mul(quat_exp(v_next[3:6] * dt), q[3:7])
    q_next[3:7] = quat / np.linalg.norm(quat)
    q_next[7:] = q[7:] + dt * v_next[6:]
    return q_next, v_next, fc


class KernelModel:
    """Same surface as the compiled ``KernelModel``."""

    def __init__(self, k):
        self.k = k
        self.L = k.mass.shape[0]
        self.n = k.axis.shape[0]
        self.base = k.base

    def frames(self, q):
        return link_frames(self.k, np.asarray(q, dtype=float))

    def rnea(self, q, v, a, gravity):
        return rnea(self.k, np.asarray(q, dtype=float), np.asarray(v, dtype=float),
                    np.asarray(a, dtype=float), np.asarray(gravity, dtype=float))

    def mass_matrix(self, q):
        return mass_matrix(self.k, np.asarray(q, dtype=float))

    def points_state(self, q, v, links, local):
        return points_state(self.k, np.asarray(q, dtype=float), np.asarray(v, dtype=float),
                            np.asarray(links, dtype=int), np.asarray(local, dtype=float).reshape(-1, 3))

    def points_generalized_force(self, q, links, pos, forces):
        return points_generalized_force(self.k, np.asarray(q, dtype=float),
                                        np.asarray(links, dtype=int),
                                        np.asarray(pos, dtype=float).reshape(-1, 3),
                                        np.asarray(forces, dtype=float).reshape(-1, 3))

    def step(self, q, v, tau_joint, wrench, gravity, links, local, contact_params, dt):
        return step(self.k, np.asarray(q, dtype=float), np.asarray(v, dtype=float),
                    np.asarray(tau_joint, dtype=float), np.asarray(wrench, dtype=float),
                    np.asarray(gravity, dtype=float), np.asarray(links, dtype=int),
                    np.asarray(local, dtype=float).reshape(-1, 3), contact_params, dt)
