"""Independent reference implementations shared by the test modules.

Everything here recomputes results from first principles (float64,
straight-line numpy) without touching the package's table/streaming
machinery, so agreement is evidence rather than tautology.
"""

import math

import numpy as np

from qbias.attention import ProjectionSet
from qbias.fsq import FsqParams, unpack_codes


def random_params(rng, levels, groups, subdim, biases=False):
    nL = len(levels)
    h = 1 / math.sqrt(subdim)
    b_in = rng.uniform(-0.1, 0.1, (groups, nL)) if biases else np.zeros((groups, nL))
    b_out = rng.uniform(-0.1, 0.1, (groups, subdim)) if biases else np.zeros((groups, subdim))
    return FsqParams(
        levels,
        rng.uniform(-h, h, size=(groups, nL, subdim)).astype(np.float32),
        b_in.astype(np.float32),
        rng.uniform(-h, h, size=(groups, subdim, nL)).astype(np.float32),
        b_out.astype(np.float32),
    )


def make_model(rng, dim, groups, levels, biases=True):
    params = random_params(rng, levels, groups, dim // groups, biases=biases)
    proj = ProjectionSet.random(dim, groups, seed=int(rng.integers(0, 2**31)))
    return params, proj


def reconstruct64(code_data, params):
    """Float64 reconstruction of every phrase, straight-line per group."""
    arr = np.asarray(code_data)
    codes = unpack_codes(arr, params.levels) if arr.dtype == np.uint16 else arr
    levels = np.asarray(params.levels, dtype=np.float64)
    n = 2.0 * codes.astype(np.float64) / (levels - 1.0) - 1.0  # (B, G, |L|)
    a_out = params.a_out.astype(np.float64)
    b_out = params.b_out.astype(np.float64)
    g_n, s, _ = a_out.shape
    b_n = codes.shape[0]
    z = np.empty((b_n, g_n * s), dtype=np.float64)
    for g in range(g_n):
        z[:, g * s : (g + 1) * s] = n[:, g, :] @ a_out[g].T + b_out[g]
    return z


def oracle_scores(frames, code_data, params, proj):
    """Exact (T, B) scores q . key(z) and the per-frame bias.

    Queries are projected in float32 exactly like the production path
    (the query is an input, not part of what the oracle re-derives);
    everything after that is float64.
    """
    q = (np.asarray(frames, dtype=np.float32) @ proj.w_q).astype(np.float64)
    z = reconstruct64(code_data, params)
    w_k = proj.w_k.astype(np.float64)
    scores = q @ (z @ w_k).T
    bias_vec = params.b_out.reshape(-1).astype(np.float64) @ w_k
    bias = q @ bias_vec
    return scores, bias


def oracle_topk(frames, code_data, params, proj, k):
    """Full-sort reference: per frame ids by (-score, id), then cut to k."""
    scores, bias = oracle_scores(frames, code_data, params, proj)
    t_n, b_n = scores.shape
    k_eff = min(k, b_n)
    ids = np.empty((t_n, k_eff), dtype=np.int64)
    out_scores = np.empty((t_n, k_eff), dtype=np.float64)
    for t in range(t_n):
        order = np.lexsort((np.arange(b_n), -scores[t]))[:k_eff]
        ids[t] = order
        out_scores[t] = scores[t, order]
    return ids, out_scores, bias


def ref_smooth_z(c, levels, a_in, b_in, a_out, b_out):
    """Smooth relaxation by literal substitution: round becomes identity.

    Walks the full scale/offset/shift/normalize chain per channel rather
    than any algebraically simplified form, all float64.
    """
    g_n, n_lev, s = a_in.shape
    b_n = c.shape[0]
    z = np.empty((b_n, g_n * s), dtype=np.float64)
    for b in range(b_n):
        for g in range(g_n):
            cg = c[b, g * s : (g + 1) * s]
            t = a_in[g] @ cg + b_in[g]
            n = np.empty(n_lev)
            for i, l in enumerate(levels):
                if l % 2 == 1:
                    y = (l // 2) * math.tanh(t[i])
                else:
                    y = ((l - 1) / 2) * math.tanh(t[i]) - 0.5
                n[i] = 2.0 * (y + l // 2) / (l - 1) - 1.0
            z[b, g * s : (g + 1) * s] = a_out[g] @ n + b_out[g]
    return z


def ref_surrogate(q, c, z, w_k, weights):
    """Straight-line per-sample objective, mean over the batch."""
    w_recon, w_dot = weights
    total = 0.0
    for b in range(q.shape[0]):
        r = c[b] - z[b]
        e = float((q[b] @ w_k) @ r)
        total += w_recon * float(r @ r) + w_dot * e * e
    return total / q.shape[0]


def fd_param_grads(f, arrays, h=1e-5):
    """Central differences of scalar f() w.r.t. every entry of arrays.

    f must read the (float64) arrays by reference; entries are perturbed
    in place and restored.
    """
    grads = {}
    for name, arr in arrays.items():
        flat = arr.ravel()
        out = np.zeros(flat.size)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            hi = f()
            flat[j] = orig - h
            lo = f()
            flat[j] = orig
            out[j] = (hi - lo) / (2.0 * h)
        grads[name] = out.reshape(arr.shape)
    return grads
