"""numba-compiled kernels. Row loops are explicit so every output row depends
only on its own query row, which the gating invariants rely on."""
import math

import numpy as np
from numba import njit

NAME = "numba"

_jit = njit(cache=True, nogil=True)

_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_GAMMA = np.uint64(0x9E3779B97F4A7C15)


@_jit
def softmax_rows(x):
    n, m = x.shape
    out = np.empty_like(x)
    for i in range(n):
        mx = x[i, 0]
        for j in range(1, m):
            if x[i, j] > mx:
                mx = x[i, j]
        s = 0.0
        for j in range(m):
            e = math.exp(x[i, j] - mx)
            out[i, j] = e
            s += e
        for j in range(m):
            out[i, j] /= s
    return out


@_jit
def layer_norm_rows(x, gain, bias, eps):
    n, m = x.shape
    out = np.empty_like(x)
    for i in range(n):
        mu = 0.0
        for j in range(m):
            mu += x[i, j]
        mu /= m
        var = 0.0
        for j in range(m):
            d = x[i, j] - mu
            var += d * d
        inv = 1.0 / math.sqrt(var / m + eps)
        for j in range(m):
            out[i, j] = (x[i, j] - mu) * inv * gain[j] + bias[j]
    return out


@_jit
def _gelu_flat(x):
    out = np.empty_like(x)
    for i in range(x.size):
        v = x[i]
        out[i] = 0.5 * v * (1.0 + math.tanh(0.7978845608028654 * (v + 0.044715 * v * v * v)))
    return out


def gelu(x):
    return _gelu_flat(np.ascontiguousarray(x).ravel()).reshape(x.shape)


@_jit
def _attend(q, k, v, k_ext, v_ext, gate, scale):
    nq, d = q.shape
    nk = k.shape[0]
    ne = k_ext.shape[0]
    dv = v.shape[1]
    out = np.zeros((nq, dv))
    s = np.empty(nk)
    se = np.empty(ne)
    for i in range(nq):
        mx = -np.inf
        for j in range(nk):
            acc = 0.0
            for c in range(d):
                acc += q[i, c] * k[j, c]
            s[j] = acc * scale
            if s[j] > mx:
                mx = s[j]
        use_ext = gate[i] and ne > 0
        if use_ext:
            for j in range(ne):
                acc = 0.0
                for c in range(d):
                    acc += q[i, c] * k_ext[j, c]
                se[j] = acc * scale
                if se[j] > mx:
                    mx = se[j]
        z = 0.0
        for j in range(nk):
            s[j] = math.exp(s[j] - mx)
            z += s[j]
        if use_ext:
            for j in range(ne):
                se[j] = math.exp(se[j] - mx)
                z += se[j]
        for j in range(nk):
            p = s[j] / z
            for c in range(dv):
                out[i, c] += p * v[j, c]
        if use_ext:
            for j in range(ne):
                p = se[j] / z
                for c in range(dv):
                    out[i, c] += p * v_ext[j, c]
    return out


_NO_GATE = {}


def attention(q, k, v, scale):
    nq = q.shape[0]
    empty = np.empty((0, q.shape[1]))
    gate = _NO_GATE.get(nq)
    if gate is None:
        gate = _NO_GATE[nq] = np.zeros(nq, dtype=np.bool_)
    return _attend(q, k, v, empty, np.empty((0, v.shape[1])), gate, scale)


def attention_expanded(q, k, v, k_ext, v_ext, gate, scale):
    return _attend(q, k, v, k_ext, v_ext, gate, scale)


@_jit
def _rng_bits(key, counter, n):
    out = np.empty(n, dtype=np.uint64)
    for i in range(n):
        z = key + (counter + np.uint64(i)) * _GAMMA
        z = (z ^ (z >> np.uint64(30))) * _M1
        z = (z ^ (z >> np.uint64(27))) * _M2
        out[i] = z ^ (z >> np.uint64(31))
    return out


def rng_bits(key, counter, n):
    return _rng_bits(np.uint64(key), np.uint64(counter), n)
