# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled dynamics kernels: forward kinematics, RNEA, mass matrix, contact step.

Semantics are defined by ``_kernels_py``; both are checked against each other
in the test-suite.
"""

import numpy as np
from libc.math cimport sin, cos, sqrt, hypot


cdef inline void cross(const double* a, const double* b, double* out) noexcept nogil:
    cdef double x = a[1] * b[2] - a[2] * b[1]
    cdef double y = a[2] * b[0] - a[0] * b[2]
    cdef double z = a[0] * b[1] - a[1] * b[0]
    out[0] = x
    out[1] = y
    out[2] = z


cdef inline double dot(const double* a, const double* b) noexcept nogil:
    return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]


cdef inline void matvec(const double* M, const double* x, double* out) noexcept nogil:
    cdef double a = M[0] * x[0] + M[1] * x[1] + M[2] * x[2]
    cdef double b = M[3] * x[0] + M[4] * x[1] + M[5] * x[2]
    cdef double c = M[6] * x[0] + M[7] * x[1] + M[8] * x[2]
    out[0] = a
    out[1] = b
    out[2] = c


cdef inline void matmul(const double* A, const double* B, double* out) noexcept nogil:
    cdef int i, j
    for i in range(3):
        for j in range(3):
            out[3 * i + j] = A[3 * i] * B[j] + A[3 * i + 1] * B[3 + j] + A[3 * i + 2] * B[6 + j]


cdef inline void axis_angle(const double* u, double angle, double* out) noexcept nogil:
    cdef double s = sin(angle)
    cdef double c1 = 1.0 - cos(angle)
    cdef double x = u[0], y = u[1], z = u[2]
    out[0] = 1.0 + c1 * (-y * y - z * z)
    out[1] = -s * z + c1 * x * y
    out[2] = s * y + c1 * x * z
    out[3] = s * z + c1 * x * y
    out[4] = 1.0 + c1 * (-x * x - z * z)
    out[5] = -s * x + c1 * y * z
    out[6] = -s * y + c1 * x * z
    out[7] = s * x + c1 * y * z
    out[8] = 1.0 + c1 * (-x * x - y * y)


cdef inline void quat_matrix(const double* q, double* R) noexcept nogil:
    cdef double w = q[0], x = q[1], y = q[2], z = q[3]
    R[0] = 1 - 2 * (y * y + z * z)
    R[1] = 2 * (x * y - w * z)
    R[2] = 2 * (x * z + w * y)
    R[3] = 2 * (x * y + w * z)
    R[4] = 1 - 2 * (x * x + z * z)
    R[5] = 2 * (y * z - w * x)
    R[6] = 2 * (x * z - w * y)
    R[7] = 2 * (y * z + w * x)
    R[8] = 1 - 2 * (x * x + y * y)


cdef class KernelModel:
    cdef public Py_ssize_t L, n, base
    cdef Py_ssize_t[::1] order, j_parent, j_child, link_joint
    cdef double[:, ::1] origin_pos, axis, com
    cdef double[:, :, ::1] origin_rot, inertia
    cdef double[::1] mass
    # scratch
    cdef double[:, :, ::1] R
    cdef double[:, ::1] p, z, w, dw, ao, F, N, vo
    cdef double[:, ::1] M
    cdef double[::1] tau, zero, unit

    def __init__(self, k):
        self.L = k.mass.shape[0]
        self.n = k.axis.shape[0]
        self.base = k.base
        self.order = np.ascontiguousarray(k.order, dtype=np.intp)
        self.j_parent = np.ascontiguousarray(k.j_parent, dtype=np.intp)
        self.j_child = np.ascontiguousarray(k.j_child, dtype=np.intp)
        self.link_joint = np.ascontiguousarray(k.link_joint, dtype=np.intp)
        self.origin_pos = np.ascontiguousarray(k.origin_pos, dtype=float).reshape(self.n, 3)
        self.axis = np.ascontiguousarray(k.axis, dtype=float).reshape(self.n, 3)
        self.origin_rot = np.ascontiguousarray(k.origin_rot, dtype=float).reshape(self.n, 3, 3)
        self.com = np.ascontiguousarray(k.com, dtype=float)
        self.inertia = np.ascontiguousarray(k.inertia, dtype=float)
        self.mass = np.ascontiguousarray(k.mass, dtype=float)
        self.R = np.zeros((self.L, 3, 3))
        self.p = np.zeros((self.L, 3))
        self.z = np.zeros((max(self.n, 1), 3))
        self.w = np.zeros((self.L, 3))
        self.dw = np.zeros((self.L, 3))
        self.ao = np.zeros((self.L, 3))
        self.F = np.zeros((self.L, 3))
        self.N = np.zeros((self.L, 3))
        self.vo = np.zeros((self.L, 3))
        self.M = np.zeros((6 + self.n, 6 + self.n))
        self.tau = np.zeros(6 + self.n)
        self.zero = np.zeros(6 + self.n)
        self.unit = np.zeros(6 + self.n)

    cdef void _frames(self, const double[::1] q) noexcept nogil:
        cdef Py_ssize_t jj, j, par, ch, b = self.base
        cdef double Rj[9]
        cdef double Rq[9]
        cdef double tmp[3]
        quat_matrix(&q[3], &self.R[b, 0, 0])
        self.p[b, 0] = q[0]
        self.p[b, 1] = q[1]
        self.p[b, 2] = q[2]
        for jj in range(self.n):
            j = self.order[jj]
            par = self.j_parent[j]
            ch = self.j_child[j]
            matmul(&self.R[par, 0, 0], &self.origin_rot[j, 0, 0], Rj)
            axis_angle(&self.axis[j, 0], q[7 + j], Rq)
            matmul(Rj, Rq, &self.R[ch, 0, 0])
            matvec(&self.R[par, 0, 0], &self.origin_pos[j, 0], tmp)
            self.p[ch, 0] = self.p[par, 0] + tmp[0]
            self.p[ch, 1] = self.p[par, 1] + tmp[1]
            self.p[ch, 2] = self.p[par, 2] + tmp[2]
            matvec(Rj, &self.axis[j, 0], &self.z[j, 0])

    cdef void _rnea(self, const double[::1] v, const double[::1] a, const double* g,
                    double[::1] tau) noexcept nogil:
        cdef Py_ssize_t jj, j, l, par, ch, i, b = self.base
        cdef double r[3]
        cdef double t1[3]
        cdef double t2[3]
        cdef double c[3]
        cdef double ac[3]
        cdef double Iw_dw[3]
        cdef double Iw_w[3]
        cdef double bw[3]
        cdef double qd, qdd, m
        for i in range(3):
            self.w[b, i] = v[3 + i]
            self.dw[b, i] = a[3 + i]
            self.ao[b, i] = a[i] - g[i]
        for jj in range(self.n):
            j = self.order[jj]
            par = self.j_parent[j]
            ch = self.j_child[j]
            qd = v[6 + j]
            qdd = a[6 + j]
            for i in range(3):
                r[i] = self.p[ch, i] - self.p[par, i]
                t1[i] = self.z[j, i] * qd
            cross(&self.w[par, 0], t1, t2)
            for i in range(3):
                self.w[ch, i] = self.w[par, i] + t1[i]
                self.dw[ch, i] = self.dw[par, i] + self.z[j, i] * qdd + t2[i]
            cross(&self.dw[par, 0], r, t1)
            cross(&self.w[par, 0], r, t2)
            cross(&self.w[par, 0], t2, t2)
            for i in range(3):
                self.ao[ch, i] = self.ao[par, i] + t1[i] + t2[i]
        for l in range(self.L):
            matvec(&self.R[l, 0, 0], &self.com[l, 0], c)
            cross(&self.dw[l, 0], c, t1)
            cross(&self.w[l, 0], c, t2)
            cross(&self.w[l, 0], t2, t2)
            m = self.mass[l]
            for i in range(3):
                ac[i] = self.ao[l, i] + t1[i] + t2[i]
                self.F[l, i] = m * ac[i]
            # world inertia applied as R I R^T x
            for i in range(3):
                bw[i] = (self.R[l, 0, i] * self.dw[l, 0] + self.R[l, 1, i] * self.dw[l, 1]
                         + self.R[l, 2, i] * self.dw[l, 2])
            matvec(&self.inertia[l, 0, 0], bw, t1)
            matvec(&self.R[l, 0, 0], t1, Iw_dw)
            for i in range(3):
                bw[i] = (self.R[l, 0, i] * self.w[l, 0] + self.R[l, 1, i] * self.w[l, 1]
                         + self.R[l, 2, i] * self.w[l, 2])
            matvec(&self.inertia[l, 0, 0], bw, t1)
            matvec(&self.R[l, 0, 0], t1, Iw_w)
            cross(&self.w[l, 0], Iw_w, t1)
            cross(c, &self.F[l, 0], t2)
            for i in range(3):
                self.N[l, i] = Iw_dw[i] + t1[i] + t2[i]
        for jj in range(self.n - 1, -1, -1):
            j = self.order[jj]
            par = self.j_parent[j]
            ch = self.j_child[j]
            tau[6 + j] = dot(&self.z[j, 0], &self.N[ch, 0])
            for i in range(3):
                r[i] = self.p[ch, i] - self.p[par, i]
            cross(r, &self.F[ch, 0], t1)
            for i in range(3):
                self.F[par, i] += self.F[ch, i]
                self.N[par, i] += self.N[ch, i] + t1[i]
        for i in range(3):
            tau[i] = self.F[b, i]
            tau[3 + i] = self.N[b, i]

    cdef void _mass(self) noexcept nogil:
        cdef Py_ssize_t nv = 6 + self.n, i, j
        cdef double g0[3]
        g0[0] = 0.0
        g0[1] = 0.0
        g0[2] = 0.0
        for i in range(nv):
            self.zero[i] = 0.0
            self.unit[i] = 0.0
        for j in range(nv):
            self.unit[j] = 1.0
            self._rnea(self.zero, self.unit, g0, self.tau)
            self.unit[j] = 0.0
            for i in range(nv):
                self.M[i, j] = self.tau[i]
        for i in range(nv):
            for j in range(i + 1, nv):
                self.M[i, j] = 0.5 * (self.M[i, j] + self.M[j, i])
                self.M[j, i] = self.M[i, j]

    cdef void _link_velocities(self, const double[::1] v) noexcept nogil:
        cdef Py_ssize_t jj, j, par, ch, i, b = self.base
        cdef double r[3]
        cdef double t[3]
        for i in range(3):
            self.w[b, i] = v[3 + i]
            self.vo[b, i] = v[i]
        for jj in range(self.n):
            j = self.order[jj]
            par = self.j_parent[j]
            ch = self.j_child[j]
            for i in range(3):
                r[i] = self.p[ch, i] - self.p[par, i]
            cross(&self.w[par, 0], r, t)
            for i in range(3):
                self.vo[ch, i] = self.vo[par, i] + t[i]
                self.w[ch, i] = self.w[par, i] + self.z[j, i] * v[6 + j]

    def frames(self, q):
        cdef double[::1] qv = np.ascontiguousarray(q, dtype=float)
        self._frames(qv)
        return (np.array(self.R), np.array(self.p), np.array(self.z[:self.n]))

    def rnea(self, q, v, a, gravity):
        cdef double[::1] qv = np.ascontiguousarray(q, dtype=float)
        cdef double[::1] vv = np.ascontiguousarray(v, dtype=float)
        cdef double[::1] av = np.ascontiguousarray(a, dtype=float)
        cdef double[::1] gv = np.ascontiguousarray(gravity, dtype=float)
        out = np.zeros(6 + self.n)
        cdef double[::1] ov = out
        self._frames(qv)
        self._rnea(vv, av, &gv[0], ov)
        return out

    def mass_matrix(self, q):
        cdef double[::1] qv = np.ascontiguousarray(q, dtype=float)
        self._frames(qv)
        self._mass()
        return np.array(self.M)

    def points_state(self, q, v, links, local):
        cdef double[::1] qv = np.ascontiguousarray(q, dtype=float)
        cdef double[::1] vv = np.ascontiguousarray(v, dtype=float)
        cdef Py_ssize_t[::1] lk = np.ascontiguousarray(links, dtype=np.intp)
        cdef double[:, ::1] loc = np.ascontiguousarray(local, dtype=float).reshape(-1, 3)
        P = lk.shape[0]
        pos = np.zeros((P, 3))
        vel = np.zeros((P, 3))
        cdef double[:, ::1] pv = pos
        cdef double[:, ::1] vl = vel
        self._frames(qv)
        self._link_velocities(vv)
        self._points(lk, loc, pv, vl)
        return pos, vel

    cdef void _points(self, Py_ssize_t[::1] lk, double[:, ::1] loc, double[:, ::1] pos,
                      double[:, ::1] vel) noexcept nogil:
        cdef Py_ssize_t i, l, d
        cdef double r[3]
        cdef double t[3]
        for i in range(lk.shape[0]):
            l = lk[i]
            matvec(&self.R[l, 0, 0], &loc[i, 0], r)
            cross(&self.w[l, 0], r, t)
            for d in range(3):
                pos[i, d] = self.p[l, d] + r[d]
                vel[i, d] = self.vo[l, d] + t[d]

    cdef void _gen_force(self, Py_ssize_t[::1] lk, double[:, ::1] pos, double[:, ::1] f,
                         double[::1] gen) noexcept nogil:
        cdef Py_ssize_t i, l, j, d, b = self.base
        cdef double r[3]
        cdef double t[3]
        for i in range(lk.shape[0]):
            for d in range(3):
                gen[d] += f[i, d]
                r[d] = pos[i, d] - self.p[b, d]
            cross(r, &f[i, 0], t)
            for d in range(3):
                gen[3 + d] += t[d]
            l = lk[i]
            while self.link_joint[l] >= 0:
                j = self.link_joint[l]
                for d in range(3):
                    r[d] = pos[i, d] - self.p[self.j_child[j], d]
                cross(r, &f[i, 0], t)
                gen[6 + j] += dot(&self.z[j, 0], t)
                l = self.j_parent[j]

    def points_generalized_force(self, q, links, pos, forces):
        cdef double[::1] qv = np.ascontiguousarray(q, dtype=float)
        cdef Py_ssize_t[::1] lk = np.ascontiguousarray(links, dtype=np.intp)
        cdef double[:, ::1] ps = np.ascontiguousarray(pos, dtype=float).reshape(-1, 3)
        cdef double[:, ::1] fs = np.ascontiguousarray(forces, dtype=float).reshape(-1, 3)
        gen = np.zeros(6 + self.n)
        cdef double[::1] gv = gen
        self._frames(qv)
        self._gen_force(lk, ps, fs, gv)
        return gen

    def step(self, q, v, tau_joint, wrench, gravity, links, local, contact_params, double dt):
        """One semi-implicit Euler step; returns (q_next, v_next, contact forces)."""
        cdef double[::1] qv = np.ascontiguousarray(q, dtype=float)
        cdef double[::1] vv = np.ascontiguousarray(v, dtype=float)
        cdef double[::1] tj = np.ascontiguousarray(tau_joint, dtype=float)
        cdef double[::1] wr = np.ascontiguousarray(wrench, dtype=float)
        cdef double[::1] gv = np.ascontiguousarray(gravity, dtype=float)
        cdef Py_ssize_t[::1] lk = np.ascontiguousarray(links, dtype=np.intp)
        cdef double[:, ::1] loc = np.ascontiguousarray(local, dtype=float).reshape(-1, 3)
        cdef double k_n = contact_params[0], d_n = contact_params[1]
        cdef double mu = contact_params[2], k_t = contact_params[3]
        cdef Py_ssize_t nv = 6 + self.n, P = lk.shape[0], i, j, kk
        q_next = np.empty(7 + self.n)
        v_next = np.empty(nv)
        fc = np.zeros((P, 3))
        pos = np.empty((P, 3))
        vel = np.empty((P, 3))
        rhs = np.zeros(nv)
        cdef double[::1] qn = q_next
        cdef double[::1] vn = v_next
        cdef double[:, ::1] fcv = fc
        cdef double[:, ::1] pv = pos
        cdef double[:, ::1] vl = vel
        cdef double[::1] b = rhs
        cdef double pen, fn, speed, mag, s, th, half, nrm
        cdef double dq[4]
        cdef double* q0
        self._frames(qv)
        self._mass()
        self._rnea(vv, self.zero, &gv[0], self.tau)
        for i in range(nv):
            b[i] = -self.tau[i]
        for i in range(6):
            b[i] += wr[i]
        for i in range(self.n):
            b[6 + i] += tj[i]
        if P > 0:
            self._link_velocities(vv)
            self._points(lk, loc, pv, vl)
            for i in range(P):
                pen = pv[i, 2]
                if pen >= 0.0:
                    continue
                fn = -k_n * pen - d_n * vl[i, 2]
                if fn <= 0.0:
                    continue
                fcv[i, 2] = fn
                speed = hypot(vl[i, 0], vl[i, 1])
                if speed > 0.0:
                    mag = mu * fn
                    if k_t * speed < mag:
                        mag = k_t * speed
                    fcv[i, 0] = -mag * vl[i, 0] / speed
                    fcv[i, 1] = -mag * vl[i, 1] / speed
            self._gen_force(lk, pv, fcv, b)
        # Cholesky solve, M is symmetric positive definite
        for j in range(nv):
            s = self.M[j, j]
            for kk in range(j):
                s -= self.M[j, kk] * self.M[j, kk]
            if s <= 0.0:
                raise np.linalg.LinAlgError("mass matrix is not positive definite")
            self.M[j, j] = sqrt(s)
            for i in range(j + 1, nv):
                s = self.M[i, j]
                for kk in range(j):
                    s -= self.M[i, kk] * self.M[j, kk]
                self.M[i, j] = s / self.M[j, j]
        for i in range(nv):
            s = b[i]
            for kk in range(i):
                s -= self.M[i, kk] * b[kk]
            b[i] = s / self.M[i, i]
        for i in range(nv - 1, -1, -1):
            s = b[i]
            for kk in range(i + 1, nv):
                s -= self.M[kk, i] * b[kk]
            b[i] = s / self.M[i, i]
        for i in range(nv):
            vn[i] = vv[i] + dt * b[i]
        for i in range(3):
            qn[i] = qv[i] + dt * vn[i]
        for i in range(self.n):
            qn[7 + i] = qv[7 + i] + dt * vn[6 + i]
        th = sqrt(vn[3] * vn[3] + vn[4] * vn[4] + vn[5] * vn[5]) * dt
        if th < 1e-12:
            dq[0] = 1.0 - th * th / 8.0
            dq[1] = 0.5 * vn[3] * dt
            dq[2] = 0.5 * vn[4] * dt
            dq[3] = 0.5 * vn[5] * dt
        else:
            half = sin(0.5 * th) / th * dt
            dq[0] = cos(0.5 * th)
            dq[1] = half * vn[3]
            dq[2] = half * vn[4]
            dq[3] = half * vn[5]
        q0 = &qv[3]
        qn[3] = dq[0] * q0[0] - dq[1] * q0[1] - dq[2] * q0[2] - dq[3] * q0[3]
        qn[4] = dq[0] * q0[1] + dq[1] * q0[0] + dq[2] * q0[3] - dq[3] * q0[2]
        qn[5] = dq[0] * q0[2] - dq[1] * q0[3] + dq[2] * q0[0] + dq[3] * q0[1]
        qn[6] = dq[0] * q0[3] + dq[1] * q0[2] - dq[2] * q0[1] + dq[3] * q0[0]
        nrm = sqrt(qn[3] * qn[3] + qn[4] * qn[4] + qn[5] * qn[5] + qn[6] * qn[6])
        for i in range(3, 7):
            qn[i] /= nrm
        return q_next, v_next, fc
