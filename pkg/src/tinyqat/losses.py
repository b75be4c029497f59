"""Training objectives: distillation losses and the bin regularizer.

The total objective is ``kd + lambda(t) * obr`` where lambda ramps from 0
to its endpoint on a half-cosine over the training horizon.  The bin
regularizer penalizes, per quantization group, the distance of the latent
weights from their quantized values plus the population variance of the
weights inside each occupied quantization bin, pushing each bin toward a
point mass at its center.
"""

import json
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .tensor import Tensor, custom_gradient, soft_cross_entropy


class CacheMissError(KeyError):
    """A (sample, crop) pair required for training is absent from the cache."""


@dataclass
class ObrConfig:
    lambda_end: float = 0.0
    min_bin_population: int = 2
    norm: str = "l2"  # "l2" (euclidean) or "l2sq" (squared)

    def __post_init__(self):
        if self.lambda_end < 0:
            raise ValueError("lambda_end must be nonnegative")
        if self.norm not in ("l2", "l2sq"):
            raise ValueError(f"unknown norm variant {self.norm!r}")


@dataclass
class SoftLabelCacheEntry:
    sample_id: str
    crop_index: int
    offset: int
    length: int
    probs: np.ndarray

    def validate(self):
        p = np.asarray(self.probs, dtype=np.float64)
        if p.ndim != 1 or np.any(p < 0) or abs(p.sum() - 1.0) > 1e-6:
            raise ValueError(
                f"cache entry ({self.sample_id}, {self.crop_index}) is not a "
                "probability distribution"
            )


@dataclass
class SoftLabelCache:
    """Teacher soft labels for M crops per sample, keyed by (sample, crop)."""

    entries: dict = field(default_factory=dict)

    def add(self, entry):
        entry.validate()
        key = (entry.sample_id, entry.crop_index)
        if key in self.entries:
            raise ValueError(f"duplicate cache entry {key}")
        self.entries[key] = entry

    def get(self, sample_id, crop_index):
        try:
            return self.entries[(sample_id, crop_index)]
        except KeyError:
            raise CacheMissError(
                f"no cached soft label for sample {sample_id!r} crop {crop_index}"
            ) from None

    def __len__(self):
        return len(self.entries)

    @property
    def crops_per_sample(self):
        if not self.entries:
            return 0
        return max(k[1] for k in self.entries) + 1

    def save(self, path):
        with open(path, "w") as f:
            for entry in self.entries.values():
                f.write(json.dumps({
                    "sample_id": entry.sample_id,
                    "crop_index": entry.crop_index,
                    "offset": entry.offset,
                    "length": entry.length,
                    "probs": [float(p) for p in entry.probs],
                }) + "\n")

    @classmethod
    def load(cls, path):
        cache = cls()
        with open(path) as f:
            for line in f:
                if not line.strip():
                    continue
                rec = json.loads(line)
                cache.add(SoftLabelCacheEntry(
                    sample_id=rec["sample_id"],
                    crop_index=int(rec["crop_index"]),
                    offset=int(rec["offset"]),
                    length=int(rec["length"]),
                    probs=np.asarray(rec["probs"], dtype=np.float64),
                ))
        return cache


def kd_loss(student_logits, teacher_probs):
    """Cross-entropy of the student's softmax against teacher distributions."""
    return soft_cross_entropy(student_logits, teacher_probs)


def mckd_loss(student_logits_per_crop, sample_ids, cache):
    """Multi-crop distillation loss averaged over samples and crops.

    ``student_logits_per_crop`` has shape (N, M, c) where row (i, m) holds
    the student's logits on crop m of sample i, evaluated on the exact
    cached crop coordinates.  Missing cache entries raise; labels are never
    re-inferred silently.
    """
    n, m, c = student_logits_per_crop.shape
    if len(sample_ids) != n:
        raise ValueError("sample_ids length must match the logits batch")
    teacher = np.empty((n, m, c))
    for i, sid in enumerate(sample_ids):
        for j in range(m):
            entry = cache.get(sid, j)
            teacher[i, j] = entry.probs
    flat = student_logits_per_crop.reshape((n * m, c))
    return soft_cross_entropy(flat, teacher.reshape(n * m, c))


def _group_penalty_parts(w, w_q, s, q_n, q_p, min_bin_population, norm):
    """Value and analytic gradient of one group's regularization term."""
    resid = w - w_q
    if norm == "l2sq":
        resid_value = float((resid * resid).sum())
        resid_grad = 2.0 * resid
    else:
        resid_value = float(np.sqrt((resid * resid).sum()))
        resid_grad = resid / resid_value if resid_value > 0 else np.zeros_like(w)
    idx = kernels.int_levels(w, s, q_n, q_p) + int(q_n)
    nbins = int(q_n) + int(q_p) + 1
    counts, means, variances = kernels.bin_moments(idx.ravel(), w.ravel(), nbins)
    populated = counts >= min_bin_population
    var_value = float(variances[populated].sum())
    flat_idx = idx.ravel()
    in_pop = populated[flat_idx]
    var_grad = np.where(
        in_pop,
        2.0 * (w.ravel() - means[flat_idx]) / np.maximum(counts[flat_idx], 1),
        0.0,
    ).reshape(w.shape)
    return resid_value + var_value, resid_grad + var_grad


def obr_loss(groups, min_bin_population=2, norm="l2"):
    """Bin regularizer summed over quantization groups.

    Each group is (w_real, w_quant, s, q_n, q_p) with w_quant the fake
    quantization of w_real on that group's grid.  Gradients flow to the
    real-valued weights only; the quantized values are treated as constants
    so the residual term actively pulls weights toward bin centers.
    """
    total = None
    for w, w_q, s, q_n, q_p in groups:
        w_arr = w.data if isinstance(w, Tensor) else np.asarray(w, dtype=np.float64)
        w_q_arr = np.asarray(w_q.data if isinstance(w_q, Tensor) else w_q,
                             dtype=np.float64)
        if w_arr.shape != w_q_arr.shape:
            raise ValueError("w_real and w_quant shapes differ")
        saved = {}

        def forward(wa, _wq=w_q_arr, _s=float(s), _qn=q_n, _qp=q_p, _saved=saved):
            value, grad = _group_penalty_parts(wa, _wq, _s, _qn, _qp,
                                               min_bin_population, norm)
            _saved["grad"] = grad
            return np.float64(value)

        def backward(g, wa, _saved=saved):
            return (float(g) * _saved["grad"],)

        term = custom_gradient(forward, backward)(w)
        total = term if total is None else total + term
    if total is None:
        return Tensor(np.float64(0.0))
    return total


def lambda_schedule(t, horizon, lambda_end):
    """Half-cosine ramp from 0 at t=0 to lambda_end at t=horizon."""
    if horizon <= 0:
        return float(lambda_end)
    t = min(max(t, 0), horizon)
    return float(lambda_end) * (1.0 - np.cos(np.pi * t / horizon)) / 2.0


def total_loss(kd, obr, lam):
    """kd + lam * obr; with lam == 0 the regularizer term vanishes exactly."""
    if lam < 0:
        raise ValueError("lambda must be nonnegative")
    if obr is None or lam == 0.0:
        return kd
    return kd + obr * float(lam)
