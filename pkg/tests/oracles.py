"""Plain-numpy reference implementations used as test oracles.

Written directly from the formulas, loop by loop, without sharing code with
the package.
"""

import math

import numpy as np


def boundaries(L, T):
    out, i = [], 1
    while True:
        b = i * T
        if b >= L:
            out.append(L)
            return out
        out.append(b)
        i += 1


def sig(x):
    return 1.0 / (1.0 + math.exp(-x))


def layer_norm(x, gamma, beta, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return gamma * (x - mu) / np.sqrt(var + eps) + beta


def encoder_fuse(states, w, T, gamma, beta, eps=1e-5):
    L = len(states)
    idx = boundaries(L, T)
    acc = np.zeros_like(states[0])
    for i, a in enumerate(idx):
        acc = acc + sig(w[i]) * states[a - 1]
    return layer_norm(acc / len(idx), gamma, beta, eps)


def decoder_fuse(states, w, T):
    L = len(states)
    out = []
    start = 0
    for b in boundaries(L, T):
        acc = np.zeros_like(states[0])
        for i in range(start, b):
            acc = acc + sig(w[i]) * states[i]
        out.append(acc)
        start = b
    return out


def psi(w, tau):
    e = [math.exp(v / tau - max(w) / tau) for v in w]
    s = sum(e)
    return [v / s for v in e]


def mix(probs, weights):
    return sum(p * q for p, q in zip(weights, probs))


def ngram_counts(tokens, n):
    c = {}
    for i in range(len(tokens) - n + 1):
        g = tuple(tokens[i:i + n])
        c[g] = c.get(g, 0) + 1
    return c
