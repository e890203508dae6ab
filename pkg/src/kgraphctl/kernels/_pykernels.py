"""Pure numpy implementations of the inner-loop kernels.

Every function here has a twin with the same signature in ``_ckernels.pyx``.
Inputs are assumed validated by the caller (contiguous float64, int64 CSR).
"""
import numpy as np

GAUSSIAN, LAPLACE, VMF = 0, 1, 2


def _receivers(indptr):
    return np.repeat(np.arange(indptr.size - 1), np.diff(indptr))


def edge_potentials(features, indptr, indices, kind, param):
    """Potential f(psi_i, psi_j) for every CSR pair, shape (B, nnz)."""
    recv = _receivers(indptr)
    fi = features[:, recv, :]
    fj = features[:, indices, :]
    if kind == GAUSSIAN:
        diff = fi - fj
        return -np.einsum("bed,bed->be", diff, diff) / (2.0 * param * param)
    if kind == LAPLACE:
        return -np.abs(fi - fj).sum(axis=2) / param
    if kind == VMF:
        norms = np.sqrt(np.einsum("bnd,bnd->bn", features, features))
        if np.any(norms == 0.0):
            raise ValueError("von Mises-Fisher potential is undefined for a zero feature")
        dots = np.einsum("bed,bed->be", fi, fj)
        return param * dots / (norms[:, recv] * norms[:, indices])
    raise ValueError(f"unknown potential kind {kind}")


def gibbs_weights(features, indptr, indices, kind, param):
    """Softmax of edge potentials over each inclusive neighborhood, shape (B, nnz)."""
    pot = edge_potentials(features, indptr, indices, kind, param)
    starts = indptr[:-1]
    counts = np.diff(indptr)
    peak = np.maximum.reduceat(pot, starts, axis=1)
    ex = np.exp(pot - np.repeat(peak, counts, axis=1))
    total = np.add.reduceat(ex, starts, axis=1)
    return ex / np.repeat(total, counts, axis=1)


def aggregate(features, indptr, indices, weights):
    """Weighted neighborhood sum ``sum_j w_ij psi_j``, shape (B, N, d)."""
    contrib = features[:, indices, :] * weights[:, :, None]
    return np.add.reduceat(contrib, indptr[:-1], axis=1)


def block_matvec(blocks, indptr, indices, x):
    """``y_i = sum_{j in E(i)} blocks[e(i,j)] @ x_j`` for a batch of inputs.

    blocks: (nnz, p, q); x: (B, N, q); returns (B, N, p).
    """
    contrib = np.einsum("epq,beq->bep", blocks, x[:, indices, :])
    return np.add.reduceat(contrib, indptr[:-1], axis=1)


def block_rmatvec(blocks, indptr, indices, y, n_sources):
    """Adjoint of :func:`block_matvec`: ``x_j = sum_i blocks[e(i,j)].T @ y_i``."""
    recv = _receivers(indptr)
    contrib = np.einsum("epq,bep->beq", blocks, y[:, recv, :])
    out = np.zeros((y.shape[0], n_sources, blocks.shape[2]))
    np.add.at(out, (slice(None), indices), contrib)
    return out


def rope_rollout(pos0, vel0, forces, mass, stiffness, rest_length, damping, gravity, dt):
    """Semi-implicit Euler rollout of a hanging chain; node 0 rides a horizontal rail.

    Returns (M + 1, N, 4) observations [x, y, vx, vy].
    """
    n = pos0.shape[0]
    steps = forces.shape[0]
    pos = pos0.copy()
    vel = vel0.copy()
    out = np.empty((steps + 1, n, 4))
    out[0, :, :2] = pos
    out[0, :, 2:] = vel
    for t in range(steps):
        delta = pos[1:] - pos[:-1]
        length = np.sqrt(delta[:, 0] ** 2 + delta[:, 1] ** 2)
        tension = stiffness * (length - rest_length) / length
        link = tension[:, None] * delta
        force = -damping * vel
        force[:-1] += link
        force[1:] -= link
        force[1:, 1] -= mass * gravity
        force[0, 0] += forces[t]
        force[0, 1] = 0.0
        vel += dt * force / mass
        vel[0, 1] = 0.0
        pos += dt * vel
        out[t + 1, :, :2] = pos
        out[t + 1, :, 2:] = vel
    return out


def grid_rollout(v0, vdot0, indptr, indices, controls, disturbance, generator,
                 damping, coupling, restoring, v_ref, dt):
    """Semi-implicit Euler rollout of the damped Laplacian-consensus voltage model.

    ``indptr``/``indices`` are inclusive neighborhoods; the self entry cancels
    in ``sum_j (V_i - V_j)``. Returns (M + 1, N, 2) observations [V, dV/dt].
    """
    n = v0.shape[0]
    steps = controls.shape[0]
    recv = _receivers(indptr)
    gen = generator.astype(bool)
    v = v0.copy()
    vd = vdot0.copy()
    out = np.empty((steps + 1, n, 2))
    out[0, :, 0] = v
    out[0, :, 1] = vd
    for t in range(steps):
        lap = np.add.reduceat(v[recv] - v[indices], indptr[:-1])
        acc = -damping * vd - coupling * lap - restoring * (v - v_ref)
        acc += np.where(gen, controls[t], disturbance[t])
        vd = vd + dt * acc
        v = v + dt * vd
        out[t + 1, :, 0] = v
        out[t + 1, :, 1] = vd
    return out
