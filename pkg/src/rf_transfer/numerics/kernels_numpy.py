"""Pure-numpy reference kernels. Same signatures as kernels_numba."""
import numpy as np

_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_GAMMA = np.uint64(0x9E3779B97F4A7C15)

NAME = "numpy"


def softmax_rows(x):
    m = x.max(axis=1, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=1, keepdims=True)


def layer_norm_rows(x, gain, bias, eps):
    mu = x.mean(axis=1, keepdims=True)
    d = x - mu
    var = (d * d).mean(axis=1, keepdims=True)
    return d / np.sqrt(var + eps) * gain + bias


def gelu(x):
    return 0.5 * x * (1.0 + np.tanh(0.7978845608028654 * (x + 0.044715 * x * x * x)))


def attention(q, k, v, scale):
    p = softmax_rows((q @ k.T) * scale)
    return p @ v


def attention_expanded(q, k, v, k_ext, v_ext, gate, scale):
    """Attention where gated query rows also see the rows of ``k_ext``/``v_ext``.

    Ungated rows go through exactly the arithmetic of :func:`attention`.
    """
    if k_ext.shape[0] == 0 or not gate.any():
        return attention(q, k, v, scale)
    s = (q @ k.T) * scale
    s_e = np.where(gate[:, None], (q @ k_ext.T) * scale, -np.inf)
    m = np.maximum(s.max(axis=1), s_e.max(axis=1))[:, None]
    e = np.exp(s - m)
    e_e = np.exp(s_e - m)
    z = e.sum(axis=1, keepdims=True) + e_e.sum(axis=1, keepdims=True)
    return (e / z) @ v + (e_e / z) @ v_ext


def _mix64(z):
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def rng_bits(key, counter, n):
    idx = np.arange(n, dtype=np.uint64) + np.uint64(counter)
    with np.errstate(over="ignore"):
        return _mix64(np.uint64(key) + idx * _GAMMA)
