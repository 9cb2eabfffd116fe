"""Shared block fixtures and the scalar-loop attention oracle."""
import math

import numpy as np

from edgenext import blocks as B


def rand_params(shapes, rng, prefix="", scale=0.3):
    out = {}
    for name, shape in shapes.items():
        if name.endswith(("gamma", "running_var", "temperature")):
            out[prefix + name] = 1 + 0.1 * rng.standard_normal(shape)
            if name.endswith("running_var"):
                out[prefix + name] = np.abs(out[prefix + name])
        else:
            out[prefix + name] = scale * rng.standard_normal(shape)
    return out


def zeroed(shapes, prefix=""):
    """Annihilated non-skip path: zero weights and biases, LN gamma 1, beta 0."""
    return {
        prefix + k: (np.ones(s) if k.endswith(("gamma", "running_var")) else np.zeros(s))
        for k, s in shapes.items()
    }


def naive_xca(x, p, heads, eps=1e-6):
    """Scalar-loop transposed attention, written from the definition."""
    n, H, W, C = x.shape
    N, d = H * W, C // heads
    out = np.empty_like(x)
    for b in range(n):
        tok = [[x[b, t // W, t % W, c] for c in range(C)] for t in range(N)]
        y = []
        for t in range(N):
            mu = sum(tok[t]) / C
            var = sum((v - mu) ** 2 for v in tok[t]) / C
            y.append([(tok[t][c] - mu) / math.sqrt(var + eps) * p["norm_xca.gamma"][c] + p["norm_xca.beta"][c] for c in range(C)])

        def proj(name, rows):
            w, bias = p[name + ".weight"], p[name + ".bias"]
            return [[sum(rows[t][j] * w[j, c] for j in range(C)) + bias[c] for c in range(C)] for t in range(N)]

        q, k, v = proj("q", y), proj("k", y), proj("v", y)
        att = [[0.0] * C for _ in range(N)]
        for h in range(heads):
            ch = range(h * d, (h + 1) * d)
            qn = {c: math.sqrt(sum(q[t][c] ** 2 for t in range(N))) for c in ch}
            kn = {c: math.sqrt(sum(k[t][c] ** 2 for t in range(N))) for c in ch}
            for i in ch:
                s = [sum(q[t][i] / qn[i] * k[t][j] / kn[j] for t in range(N)) for j in ch]
                m = max(s)
                e = [math.exp(v_ - m) for v_ in s]
                z = sum(e)
                row = [v_ / z for v_ in e]
                # out[t][col] = sum_i V[t][i] * A[i][col]
                for t in range(N):
                    for jj, j in enumerate(ch):
                        att[t][j] += v[t][i] * row[jj]
        o = proj("proj", att)
        for t in range(N):
            for c in range(C):
                out[b, t // W, t % W, c] = x[b, t // W, t % W, c] + o[t][c]
    return out


def xca_params(c, rng, scale=0.3):
    shapes = {k: v for k, v in B.sdta_encoder_shapes(c, 1).items() if not k.startswith(("norm.", "pwconv"))}
    return rand_params(shapes, rng, scale=scale)
