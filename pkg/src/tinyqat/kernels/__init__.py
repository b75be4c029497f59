"""Kernel dispatch: compiled extension when available, numpy otherwise.

The backend is chosen once at import time.  Set ``TINYQAT_KERNELS=numpy`` to
force the fallback, ``TINYQAT_KERNELS=native`` to require the extension
(raising if it was not built), or leave unset/``auto`` to prefer the
extension.  ``benchmarks/bench_kernels.py`` compares the two.
"""

import importlib
import os

import numpy as np

from . import fallback

_native = None
_choice = os.environ.get("TINYQAT_KERNELS", "auto").lower()
if _choice not in ("auto", "native", "numpy"):
    raise ValueError(f"TINYQAT_KERNELS must be auto|native|numpy, got {_choice!r}")
if _choice != "numpy":
    try:
        _native = importlib.import_module(__name__ + "._native")
    except ImportError:
        if _choice == "native":
            raise
        _native = None

_impl = _native if _native is not None else fallback
BACKEND = "native" if _native is not None else "numpy"


def backend_name():
    return BACKEND


def _flat(x):
    return np.ascontiguousarray(x, dtype=np.float64).ravel()


def quantize_values(x, s, q_n, q_p):
    """Fake-quantized values of x on the grid defined by (s, q_n, q_p)."""
    x = np.asarray(x, dtype=np.float64)
    out = _impl.quantize_values(_flat(x), float(s), float(q_n), float(q_p))
    return np.asarray(out).reshape(x.shape)


def quantize_parts(x, s, q_n, q_p):
    """(quantized, in-range indicator, per-element scale gradient)."""
    x = np.asarray(x, dtype=np.float64)
    out, ind, sg = _impl.quantize_parts(_flat(x), float(s), float(q_n), float(q_p))
    shape = x.shape
    return (np.asarray(out).reshape(shape), np.asarray(ind).reshape(shape),
            np.asarray(sg).reshape(shape))


def int_levels(x, s, q_n, q_p):
    """Integer grid level of each element of x."""
    x = np.asarray(x, dtype=np.float64)
    out = _impl.int_levels(_flat(x), float(s), float(q_n), float(q_p))
    return np.asarray(out).reshape(x.shape)


def oscillation_step(cur, prev_int, prev_dir, freq, momentum):
    """EMA oscillation update; mutates prev_int/prev_dir/freq in place."""
    return _impl.oscillation_step(cur, prev_int, prev_dir, freq, float(momentum))


def bin_moments(idx, w, nbins):
    """Per-bin (count, mean, population variance) of w grouped by idx."""
    idx = np.ascontiguousarray(idx, dtype=np.int64).ravel()
    w = _flat(w)
    counts, means, variances = _impl.bin_moments(idx, w, int(nbins))
    return np.asarray(counts), np.asarray(means), np.asarray(variances)
