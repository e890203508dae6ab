# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops; see ``_pykernels`` for the reference semantics."""
import numpy as np
from libc.math cimport exp, sqrt, fabs

GAUSSIAN, LAPLACE, VMF = 0, 1, 2


cdef double _potential(const double[:, :] f, Py_ssize_t i, Py_ssize_t j, int kind,
                       double param, const double[:] norms) noexcept nogil:
    cdef Py_ssize_t k, d = f.shape[1]
    cdef double acc = 0.0, diff
    if kind == 0:
        for k in range(d):
            diff = f[i, k] - f[j, k]
            acc += diff * diff
        return -acc / (2.0 * param * param)
    elif kind == 1:
        for k in range(d):
            acc += fabs(f[i, k] - f[j, k])
        return -acc / param
    for k in range(d):
        acc += f[i, k] * f[j, k]
    return param * acc / (norms[i] * norms[j])


def edge_potentials(features, indptr, indices, int kind, double param):
    cdef const double[:, :, :] F = features
    cdef const long long[:] ptr = np.asarray(indptr, dtype=np.int64)
    cdef const long long[:] idx = np.asarray(indices, dtype=np.int64)
    cdef Py_ssize_t B = F.shape[0], N = F.shape[1], b, i
    cdef long long e
    out = np.empty((B, idx.shape[0]))
    cdef double[:, :] P = out
    cdef double[:] norms
    for b in range(B):
        norms = _norms(F[b], kind)
        for i in range(N):
            for e in range(ptr[i], ptr[i + 1]):
                P[b, e] = _potential(F[b], i, idx[e], kind, param, norms)
    return out


cdef double[:] _norms(const double[:, :] f, int kind):
    cdef Py_ssize_t n = f.shape[0], d = f.shape[1], i, k
    cdef double acc
    norms = np.zeros(n)
    cdef double[:] nv = norms
    if kind != 2:
        return nv
    for i in range(n):
        acc = 0.0
        for k in range(d):
            acc += f[i, k] * f[i, k]
        if acc == 0.0:
            raise ValueError("von Mises-Fisher potential is undefined for a zero feature")
        nv[i] = sqrt(acc)
    return nv


def gibbs_weights(features, indptr, indices, int kind, double param):
    if kind not in (0, 1, 2):
        raise ValueError(f"unknown potential kind {kind}")
    cdef const double[:, :, :] F = features
    cdef const long long[:] ptr = np.asarray(indptr, dtype=np.int64)
    cdef const long long[:] idx = np.asarray(indices, dtype=np.int64)
    cdef Py_ssize_t B = F.shape[0], N = F.shape[1], b, i
    cdef long long e
    cdef double peak, total
    out = np.empty((B, idx.shape[0]))
    cdef double[:, :] W = out
    cdef double[:] norms
    for b in range(B):
        norms = _norms(F[b], kind)
        for i in range(N):
            peak = -1e308
            for e in range(ptr[i], ptr[i + 1]):
                W[b, e] = _potential(F[b], i, idx[e], kind, param, norms)
                if W[b, e] > peak:
                    peak = W[b, e]
            total = 0.0
            for e in range(ptr[i], ptr[i + 1]):
                W[b, e] = exp(W[b, e] - peak)
                total += W[b, e]
            for e in range(ptr[i], ptr[i + 1]):
                W[b, e] = W[b, e] / total
    return out


def aggregate(features, indptr, indices, weights):
    cdef const double[:, :, :] F = features
    cdef const double[:, :] W = weights
    cdef const long long[:] ptr = np.asarray(indptr, dtype=np.int64)
    cdef const long long[:] idx = np.asarray(indices, dtype=np.int64)
    cdef Py_ssize_t B = F.shape[0], N = F.shape[1], d = F.shape[2], b, i, k
    cdef long long e, j
    cdef double w
    out = np.zeros((B, N, d))
    cdef double[:, :, :] O = out
    with nogil:
        for b in range(B):
            for i in range(N):
                for e in range(ptr[i], ptr[i + 1]):
                    j = idx[e]
                    w = W[b, e]
                    for k in range(d):
                        O[b, i, k] += w * F[b, j, k]
    return out


def block_matvec(blocks, indptr, indices, x):
    cdef const double[:, :, :] C = blocks
    cdef const double[:, :, :] X = x
    cdef const long long[:] ptr = np.asarray(indptr, dtype=np.int64)
    cdef const long long[:] idx = np.asarray(indices, dtype=np.int64)
    cdef Py_ssize_t B = X.shape[0], N = ptr.shape[0] - 1, p = C.shape[1], q = C.shape[2]
    cdef Py_ssize_t b, i, r, c
    cdef long long e, j
    cdef double acc
    out = np.zeros((B, N, p))
    cdef double[:, :, :] Y = out
    with nogil:
        for b in range(B):
            for i in range(N):
                for e in range(ptr[i], ptr[i + 1]):
                    j = idx[e]
                    for r in range(p):
                        acc = 0.0
                        for c in range(q):
                            acc += C[e, r, c] * X[b, j, c]
                        Y[b, i, r] += acc
    return out


def block_rmatvec(blocks, indptr, indices, y, Py_ssize_t n_sources):
    cdef const double[:, :, :] C = blocks
    cdef const double[:, :, :] Y = y
    cdef const long long[:] ptr = np.asarray(indptr, dtype=np.int64)
    cdef const long long[:] idx = np.asarray(indices, dtype=np.int64)
    cdef Py_ssize_t B = Y.shape[0], N = ptr.shape[0] - 1, p = C.shape[1], q = C.shape[2]
    cdef Py_ssize_t b, i, r, c
    cdef long long e, j
    out = np.zeros((B, n_sources, q))
    cdef double[:, :, :] X = out
    with nogil:
        for b in range(B):
            for i in range(N):
                for e in range(ptr[i], ptr[i + 1]):
                    j = idx[e]
                    for c in range(q):
                        for r in range(p):
                            X[b, j, c] += C[e, r, c] * Y[b, i, r]
    return out


def rope_rollout(pos0, vel0, forces, double mass, double stiffness, double rest_length,
                 double damping, double gravity, double dt):
    cdef Py_ssize_t n = pos0.shape[0], steps = forces.shape[0], t, i
    pos_arr = np.array(pos0, dtype=np.float64, copy=True)
    vel_arr = np.array(vel0, dtype=np.float64, copy=True)
    cdef double[:, :] pos = pos_arr
    cdef double[:, :] vel = vel_arr
    cdef const double[:] u = forces
    out = np.empty((steps + 1, n, 4))
    cdef double[:, :, :] O = out
    fx_arr = np.empty(n)
    fy_arr = np.empty(n)
    cdef double[:] fx = fx_arr
    cdef double[:] fy = fy_arr
    cdef double dx, dy, length, tension
    for i in range(n):
        O[0, i, 0] = pos[i, 0]
        O[0, i, 1] = pos[i, 1]
        O[0, i, 2] = vel[i, 0]
        O[0, i, 3] = vel[i, 1]
    with nogil:
        for t in range(steps):
            for i in range(n):
                fx[i] = -damping * vel[i, 0]
                fy[i] = -damping * vel[i, 1]
            for i in range(n - 1):
                dx = pos[i + 1, 0] - pos[i, 0]
                dy = pos[i + 1, 1] - pos[i, 1]
                length = sqrt(dx * dx + dy * dy)
                tension = stiffness * (length - rest_length) / length
                fx[i] += tension * dx
                fy[i] += tension * dy
                fx[i + 1] -= tension * dx
                fy[i + 1] -= tension * dy
            for i in range(1, n):
                fy[i] -= mass * gravity
            fx[0] += u[t]
            fy[0] = 0.0
            for i in range(n):
                vel[i, 0] += dt * fx[i] / mass
                vel[i, 1] += dt * fy[i] / mass
            vel[0, 1] = 0.0
            for i in range(n):
                pos[i, 0] += dt * vel[i, 0]
                pos[i, 1] += dt * vel[i, 1]
                O[t + 1, i, 0] = pos[i, 0]
                O[t + 1, i, 1] = pos[i, 1]
                O[t + 1, i, 2] = vel[i, 0]
                O[t + 1, i, 3] = vel[i, 1]
    return out


def grid_rollout(v0, vdot0, indptr, indices, controls, disturbance, generator,
                 double damping, double coupling, double restoring, double v_ref, double dt):
    cdef const long long[:] ptr = np.asarray(indptr, dtype=np.int64)
    cdef const long long[:] idx = np.asarray(indices, dtype=np.int64)
    cdef const double[:, :] u = controls
    cdef const double[:, :] w = disturbance
    cdef const unsigned char[:] gen = np.asarray(generator, dtype=np.uint8)
    cdef Py_ssize_t n = v0.shape[0], steps = controls.shape[0], t, i
    cdef long long e
    v_arr = np.array(v0, dtype=np.float64, copy=True)
    vd_arr = np.array(vdot0, dtype=np.float64, copy=True)
    nv_arr = np.empty(n)
    cdef double[:] v = v_arr
    cdef double[:] vd = vd_arr
    cdef double[:] acc = nv_arr
    cdef double lap
    out = np.empty((steps + 1, n, 2))
    cdef double[:, :, :] O = out
    for i in range(n):
        O[0, i, 0] = v[i]
        O[0, i, 1] = vd[i]
    with nogil:
        for t in range(steps):
            for i in range(n):
                lap = 0.0
                for e in range(ptr[i], ptr[i + 1]):
                    lap += v[i] - v[idx[e]]
                acc[i] = -damping * vd[i] - coupling * lap - restoring * (v[i] - v_ref)
                if gen[i]:
                    acc[i] += u[t, i]
                else:
                    acc[i] += w[t, i]
            for i in range(n):
                vd[i] = vd[i] + dt * acc[i]
                v[i] = v[i] + dt * vd[i]
                O[t + 1, i, 0] = v[i]
                O[t + 1, i, 1] = vd[i]
    return out
