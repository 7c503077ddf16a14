"""Kernel backend selection.

``RF_TRANSFER_NUMBA`` (read once at import):

* ``auto`` (default): numba for kernels that are pure arithmetic loops
  (layer norm, RNG bit mixing), numpy for kernels dominated by exp/tanh,
  where numpy's SIMD transcendentals beat numba's scalar libm calls.
* ``1`` / ``all``: every kernel from numba.
* ``0`` / ``off``: pure numpy, numba never imported.

``benchmarks/bench_kernels.py`` measures the split.
"""
import os

_FLAG = os.environ.get("RF_TRANSFER_NUMBA", "auto").strip().lower()

_OFF = _FLAG in ("0", "false", "no", "off", "numpy")
_ALL = _FLAG in ("1", "true", "yes", "on", "all", "numba")

HAVE_NUMBA = False
if not _OFF:
    try:
        import numba  # noqa: F401
        HAVE_NUMBA = True
    except ImportError:  # pragma: no cover - numba is a declared dependency
        pass

if _OFF or not HAVE_NUMBA:
    MODE = "numpy"
elif _ALL:
    MODE = "numba"
else:
    MODE = "auto"

AUTO_NUMBA_KERNELS = ("layer_norm_rows", "rng_bits")
KERNEL_NAMES = ("softmax_rows", "layer_norm_rows", "gelu", "attention", "attention_expanded", "rng_bits")
