"""Brute-force reference implementations used to cross-check optimized code paths."""
import numpy as np


def naive_weights(model, g, psi_h, i):
    nbrs = [j for j in range(g.n) if j == i or g.adjacency[i, j]]
    pot = []
    for j in nbrs:
        diff = psi_h[i] - psi_h[j]
        kind, s = model.potential.kind, model.potential.scale
        if kind == "gaussian":
            pot.append(-sum(x * x for x in diff) / (2 * s * s))
        elif kind == "laplace":
            pot.append(-sum(abs(x) for x in diff) / s)
        else:
            ni = np.sqrt(sum(x * x for x in psi_h[i]))
            nj = np.sqrt(sum(x * x for x in psi_h[j]))
            pot.append(s * sum(a * b for a, b in zip(psi_h[i], psi_h[j])) / (ni * nj))
    top = max(pot)
    e = [np.exp(p - top) for p in pot]
    return nbrs, [x / sum(e) for x in e]


def naive_predict(model, g, psi_h, psi_a):
    """Triple loop over (receiver, source, output coordinate)."""
    n, d = g.n, model.dim
    out = np.zeros((n, d))
    pos = {}
    for i in range(n):
        for e in range(g.indptr[i], g.indptr[i + 1]):
            pos[(i, int(g.indices[e]))] = e
    for i in range(n):
        nbrs = [j for j in range(n) if j == i or g.adjacency[i, j]]
        if model.form == "hom_mean":
            _, w = naive_weights(model, g, psi_h, i)
            hbar = [sum(w[k] * psi_h[j][c] for k, j in enumerate(nbrs)) for c in range(d)]
            for r in range(d):
                out[i, r] += sum(model.hist_blocks[r, c] * hbar[c] for c in range(d))
        for j in nbrs:
            e = pos[(i, j)]
            for r in range(d):
                if model.form == "tensor":
                    a = list(psi_a[j]) + ([1.0] if model.action_bias else [])
                    acc = 0.0
                    for c in range(d):
                        for k in range(len(a)):
                            acc += model.tensor_blocks[e, r, c * len(a) + k] * psi_h[j][c] * a[k]
                    out[i, r] += acc
                    continue
                if model.form == "dense":
                    blk = model.hist_blocks[e]
                elif model.form == "hom":
                    blk = model.hist_blocks[j]
                else:
                    blk = None
                if blk is not None:
                    out[i, r] += sum(blk[r, c] * psi_h[j][c] for c in range(d))
                out[i, r] += sum(model.act_blocks[e, r, k] * psi_a[j][k]
                                 for k in range(model.action_dim))
    return out


def naive_frozen_rollout(model, g, psi0, psi_a_seq, weights):
    """Rollout with prescribed HomMean weights using explicit per-node sums."""
    cur = np.array(psi0, dtype=float)
    out = []
    for t in range(len(psi_a_seq)):
        nxt = np.zeros_like(cur)
        for i in range(g.n):
            lo, hi = g.indptr[i], g.indptr[i + 1]
            hbar = sum(weights[t][e] * cur[g.indices[e]] for e in range(lo, hi))
            nxt[i] = model.hist_blocks @ hbar
            for e in range(lo, hi):
                nxt[i] += model.act_blocks[e] @ psi_a_seq[t][g.indices[e]]
        out.append(nxt)
        cur = nxt
    return np.array(out)
