"""Dense float64 kernels and a counter-based RNG.

Tensors are plain ``numpy.ndarray`` objects of dtype float64. The hot kernels
(softmax, layer norm, GELU, attention, RNG bit mixing) come from either
:mod:`.kernels_numba` or :mod:`.kernels_numpy`; see :mod:`._backend`.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from types import SimpleNamespace

import numpy as np

from ..errors import DimensionError, NumericError

from . import kernels_numpy
from ._backend import AUTO_NUMBA_KERNELS, KERNEL_NAMES, MODE


def _select_kernels(mode):
    if mode == "numpy":
        return kernels_numpy
    from . import kernels_numba

    if mode == "numba":
        return kernels_numba
    table = {
        name: getattr(kernels_numba if name in AUTO_NUMBA_KERNELS else kernels_numpy, name)
        for name in KERNEL_NAMES
    }
    return SimpleNamespace(NAME="auto", **table)


kernels = _select_kernels(MODE)
BACKEND = kernels.NAME


def get_kernels(name: str):
    """Return a kernel module by name ("numpy" or "numba")."""
    if name == "numpy":
        return kernels_numpy
    if name == "numba":
        from . import kernels_numba

        return kernels_numba
    raise ValueError(f"unknown kernel backend {name!r}")


def as_tensor(data, shape=None) -> np.ndarray:
    """Validate external input: float64, C-contiguous, finite."""
    arr = np.ascontiguousarray(data, dtype=np.float64)
    if shape is not None:
        if int(np.prod(shape)) != arr.size:
            raise DimensionError(f"cannot view {arr.size} values as shape {tuple(shape)}")
        arr = arr.reshape(shape)
    if not np.all(np.isfinite(arr)):
        raise NumericError("tensor contains NaN or Inf")
    return arr


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    return a @ b


def _rows(x):
    return np.ascontiguousarray(x, dtype=np.float64).reshape(-1, x.shape[-1])


def softmax_lastdim(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 0 or x.shape[-1] == 0:
        raise DimensionError("softmax over an empty last dimension")
    return kernels.softmax_rows(_rows(x)).reshape(x.shape)


def layer_norm(x, gain, bias, eps: float = 1e-6) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    gain = np.ascontiguousarray(gain, dtype=np.float64)
    bias = np.ascontiguousarray(bias, dtype=np.float64)
    if gain.shape != (x.shape[-1],) or bias.shape != (x.shape[-1],):
        raise DimensionError(
            f"layer_norm gain/bias {gain.shape}/{bias.shape} do not match last dim {x.shape[-1]}"
        )
    return kernels.layer_norm_rows(_rows(x), gain, bias, float(eps)).reshape(x.shape)


def gelu(x) -> np.ndarray:
    """tanh-approximate GELU."""
    return kernels.gelu(np.asarray(x, dtype=np.float64))


def _check_attention(q, k, v):
    if q.ndim != 2 or k.ndim != 2 or v.ndim != 2:
        raise DimensionError("attention expects 2-D Q, K, V")
    if q.shape[1] != k.shape[1]:
        raise DimensionError(f"Q/K width mismatch: {q.shape[1]} vs {k.shape[1]}")
    if k.shape[0] != v.shape[0]:
        raise DimensionError(f"K/V length mismatch: {k.shape[0]} vs {v.shape[0]}")


def attention(q, k, v, scale: float | None = None) -> np.ndarray:
    """softmax(Q K^T * scale) V with scale defaulting to 1/sqrt(d)."""
    _check_attention(q, k, v)
    if k.shape[0] == 0:
        raise DimensionError("attention over an empty context")
    if scale is None:
        scale = 1.0 / math.sqrt(q.shape[1])
    return kernels.attention(q, k, v, float(scale))


def attention_expanded(q, k, v, k_ext, v_ext, gate, scale: float | None = None) -> np.ndarray:
    """Attention whose gated query rows see the context ``[K ; K_ext]``, ``[V ; V_ext]``.

    Rows with ``gate[i] == False`` (and every row when ``K_ext`` is empty) are
    bitwise equal to :func:`attention`.
    """
    _check_attention(q, k, v)
    if k.shape[0] == 0:
        raise DimensionError("attention over an empty context")
    if k_ext.shape[1] != q.shape[1] or v_ext.shape[1] != v.shape[1]:
        raise DimensionError(
            f"expanded context width mismatch: K_ext {k_ext.shape}, V_ext {v_ext.shape}"
        )
    if k_ext.shape[0] != v_ext.shape[0]:
        raise DimensionError("K_ext/V_ext length mismatch")
    gate = np.ascontiguousarray(gate, dtype=np.bool_)
    if gate.shape != (q.shape[0],):
        raise DimensionError(f"gate length {gate.shape} does not match {q.shape[0]} queries")
    if scale is None:
        scale = 1.0 / math.sqrt(q.shape[1])
    return kernels.attention_expanded(q, k, v, k_ext, v_ext, gate, float(scale))


_MASK64 = (1 << 64) - 1


def _splitmix(x: int) -> int:
    x &= _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


@dataclass
class RngState:
    """Counter-based generator state. Output depends only on (seed, counter).

    Not thread-safe; give each concurrent stream its own state via :meth:`fork`.
    """

    seed: int
    counter: int = 0

    def __post_init__(self):
        self.seed = int(self.seed) & _MASK64
        self.counter = int(self.counter) & _MASK64

    @property
    def key(self) -> int:
        return _splitmix(self.seed ^ 0x5851F42D4C957F2D)

    def bits(self, n: int) -> np.ndarray:
        out = kernels.rng_bits(self.key, self.counter, n)
        self.counter = (self.counter + n) & _MASK64
        return out

    def uniform(self, shape) -> np.ndarray:
        """Uniform samples in (0, 1]."""
        n = int(np.prod(shape))
        u = ((self.bits(n) >> np.uint64(11)).astype(np.float64) + 1.0) * 2.0**-53
        return u.reshape(shape)

    def normal(self, shape) -> np.ndarray:
        return rng_normal(self, shape)

    def fork(self, stream: int) -> "RngState":
        return RngState(_splitmix(self.seed + _splitmix(stream + 1)), 0)


def rng_normal(state: RngState, shape) -> np.ndarray:
    """Standard normal samples by Box-Muller; advances ``state.counter``."""
    if isinstance(shape, (int, np.integer)):
        shape = (int(shape),)
    n = int(np.prod(shape))
    m = (n + 1) // 2
    u = state.uniform((2, m))
    r = np.sqrt(-2.0 * np.log(u[0]))
    theta = 2.0 * np.pi * u[1]
    z = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]
    return z.reshape(shape)


__all__ = [
    "BACKEND",
    "RngState",
    "as_tensor",
    "attention",
    "attention_expanded",
    "gelu",
    "get_kernels",
    "layer_norm",
    "matmul",
    "rng_normal",
    "softmax_lastdim",
]
