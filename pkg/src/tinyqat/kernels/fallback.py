"""Pure-numpy implementations of the hot-path kernels.

Each function here mirrors one kernel in ``_native.pyx`` bit for bit: the
operations are applied in the same order on the same float64 values, so the
two backends are interchangeable (asserted by the test suite).  All inputs
are 1-D contiguous arrays; shape handling lives in ``tinyqat.kernels``.
"""

import numpy as np


def quantize_values(x, s, q_n, q_p):
    """s * round(clip(x / s, -q_n, q_p)), round half to even."""
    return np.rint(np.clip(x / s, -q_n, q_p)) * s


def quantize_parts(x, s, q_n, q_p):
    """Quantizer forward plus both backward ingredients in one pass.

    Returns (quantized, in_range_indicator, scale_gradient):
      quantized     = s * round(clip(x/s, -q_n, q_p))
      indicator     = 1 where -q_n <= x/s <= q_p (closed interval), else 0
      scale_grad    = round(x/s) - x/s   strictly inside the range,
                      -q_n when x/s <= -q_n, q_p when x/s >= q_p
    """
    v = x / s
    c = np.clip(v, -q_n, q_p)
    r = np.rint(c)
    out = r * s
    ind = ((v >= -q_n) & (v <= q_p)).astype(np.float64)
    sg = np.where(v <= -q_n, -q_n, np.where(v >= q_p, q_p, r - v))
    return out, ind, sg


def int_levels(x, s, q_n, q_p):
    """Integer grid level of each element, as int64."""
    return np.rint(np.clip(x / s, -q_n, q_p)).astype(np.int64)


def oscillation_step(cur, prev_int, prev_dir, freq, momentum):
    """One EMA update of the per-element oscillation frequency, in place.

    An oscillation event is an integer-value change whose direction differs
    from the direction of the previous change.  ``prev_int``/``prev_dir``
    advance only on changes; ``freq`` updates every call.  Returns the
    boolean event mask.
    """
    changed = cur != prev_int
    delta_sign = np.sign(cur - prev_int).astype(np.int8)
    events = changed & (prev_dir != 0) & (delta_sign != prev_dir)
    freq[:] = momentum * events + (1.0 - momentum) * freq
    prev_dir[changed] = delta_sign[changed]
    prev_int[changed] = cur[changed]
    return events


def bin_moments(idx, w, nbins):
    """Per-bin count, mean and population variance of w grouped by idx.

    Two-pass computation (mean first, then squared deviations) so the
    variance does not suffer cancellation.  Empty bins report mean 0 and
    variance 0.
    """
    counts = np.bincount(idx, minlength=nbins)
    sums = np.bincount(idx, weights=w, minlength=nbins)
    denom = np.maximum(counts, 1)
    means = sums / denom
    dev = w - means[idx]
    m2 = np.bincount(idx, weights=dev * dev, minlength=nbins)
    variances = m2 / denom
    return counts, means, variances
