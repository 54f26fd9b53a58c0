"""Slow reference implementations written without the package's code paths."""

import itertools
import math

import numpy as np


def agc_loop(x, k, T, eps=1e-6, gate="exp_decay", dist="L1"):
    """Per-pixel running max over (neighbour - self), following the
    algorithm's loop structure literally."""
    n, c, h, w = x.shape
    t = abs(T) + eps
    offsets = [("h", k, False), ("w", k, False)]
    offsets += [("h", 2**i, True) for i in range(1, int(math.log2(h)) + 1)]
    offsets += [("w", 2**i, True) for i in range(1, int(math.log2(w)) + 1)]
    out = np.zeros_like(x)
    for b in range(n):
        for i in range(h):
            for j in range(w):
                here = x[b, :, i, j]
                acc = np.zeros(c)
                for axis, off, gated in offsets:
                    there = x[b, :, (i + off) % h, j] if axis == "h" else x[b, :, i, (j + off) % w]
                    diff = there - here
                    if gated:
                        if dist == "L1":
                            d = sum(abs(float(v)) for v in here - there)
                        else:
                            d = math.sqrt(sum(float(v) ** 2 for v in here - there))
                        if gate == "exp_decay":
                            g = math.exp(-d / t)
                        else:
                            g = 2.0 / (1.0 + math.exp(d / t))
                        diff = g * diff
                    acc = np.maximum(acc, diff)
                out[b, :, i, j] = acc
    return out


def clustering_brute(adj):
    """Visit every (node, neighbour, neighbour) triple and count closed ones."""
    adj = np.asarray(adj, dtype=bool)
    n = len(adj)
    total = 0.0
    for v in range(n):
        nb = np.flatnonzero(adj[v])
        if len(nb) < 2:
            continue
        links = int(np.triu(adj[np.ix_(nb, nb)], 1).sum())
        total += links / (len(nb) * (len(nb) - 1) / 2)
    return total / n if n else 0.0


def clustering_pairs(adj):
    """Same quantity with explicit pair loops; for small graphs."""
    adj = np.asarray(adj, dtype=bool)
    n = len(adj)
    total = 0.0
    for v in range(n):
        nb = [u for u in range(n) if adj[v, u]]
        if len(nb) < 2:
            continue
        links = sum(1 for a, b in itertools.combinations(nb, 2) if adj[a, b])
        total += links / (len(nb) * (len(nb) - 1) / 2)
    return total / n if n else 0.0


def attention_direct(x, wq, bq, wk, bk, wv, bv, eps=1e-5):
    """softmax(LN(Q) LN(K)^T / sqrt(d)) V with plain einsums; no affine."""
    n, c, h, w = x.shape
    tok = x.reshape(n, c, h * w).transpose(0, 2, 1)
    q = tok @ wq.T + bq
    k = tok @ wk.T + bk
    v = tok @ wv.T + bv

    def ln(z):
        mu = z.mean(-1, keepdims=True)
        return (z - mu) / np.sqrt(((z - mu) ** 2).mean(-1, keepdims=True) + eps)

    s = ln(q) @ ln(k).transpose(0, 2, 1) / math.sqrt(wk.shape[0])
    s = np.exp(s - s.max(-1, keepdims=True))
    p = s / s.sum(-1, keepdims=True)
    out = p @ v
    return out.transpose(0, 2, 1).reshape(n, -1, h, w), p


def random_graph(rng, n, p):
    upper = np.triu(rng.random((n, n)) < p, 1)
    return upper | upper.T
