"""Measurement instruments for quantization-aware training runs.

* Oscillation tracking: a weight oscillates when its integer grid value
  changes and the change direction flips relative to its previous change.
  A per-element EMA frequency accumulates these events; elements with
  frequency above a threshold (default 0.005) count as oscillating.
* SDAM: average over layers of the standard deviation of per-group mean
  absolute activations, a scalar summary of activation-distribution spread.
* Bin histograms: per-quantization-bin population, mean offset from the
  bin center, and variance.
* Sensitivity grids: one seeded training run per target set, in
  leave-one-out / only-one / per-head flavours, emitted as CSV rows.
"""

import csv
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import kernels
from .model import ATTN_WEIGHT_KINDS, enumerate_quant_sites

DEFAULT_MOMENTUM = 0.01
DEFAULT_THRESHOLD = 0.005


@dataclass
class OscillationState:
    """Per-element EMA oscillation frequency plus last-change memory."""

    prev_int: np.ndarray
    prev_dir: np.ndarray
    freq: np.ndarray
    momentum: float = DEFAULT_MOMENTUM

    @classmethod
    def from_initial(cls, x_int, momentum=DEFAULT_MOMENTUM):
        x_int = np.ascontiguousarray(x_int, dtype=np.int64)
        return cls(prev_int=x_int.copy(),
                   prev_dir=np.zeros(x_int.shape, dtype=np.int8),
                   freq=np.zeros(x_int.shape, dtype=np.float64),
                   momentum=momentum)


def update_oscillation(state, x_int):
    """Advance the EMA one step with the new integer values; returns state."""
    x_int = np.ascontiguousarray(x_int, dtype=np.int64)
    if x_int.shape != state.prev_int.shape:
        raise ValueError(
            f"integer array shape {x_int.shape} does not match state "
            f"{state.prev_int.shape}"
        )
    kernels.oscillation_step(x_int.ravel(), state.prev_int.ravel(),
                             state.prev_dir.ravel(), state.freq.ravel(),
                             state.momentum)
    return state


def oscillating_fraction(state, threshold=DEFAULT_THRESHOLD):
    """Percentage of elements with EMA frequency above the threshold."""
    if state.freq.size == 0:
        return 0.0
    return 100.0 * float((state.freq > threshold).sum()) / state.freq.size


class OscillationTracker:
    """Oscillation states for every quantized weight group of a run."""

    def __init__(self, momentum=DEFAULT_MOMENTUM, threshold=DEFAULT_THRESHOLD):
        self.momentum = momentum
        self.threshold = threshold
        self.states = {}

    def observe(self, key, w, s, q_n, q_p):
        """Record the post-step integer values of one weight group."""
        x_int = kernels.int_levels(w, s, q_n, q_p)
        if key not in self.states:
            self.states[key] = OscillationState.from_initial(x_int, self.momentum)
        else:
            update_oscillation(self.states[key], x_int)

    def oscillating_fraction(self, threshold=None):
        threshold = self.threshold if threshold is None else threshold
        total = sum(st.freq.size for st in self.states.values())
        if total == 0:
            return 0.0
        above = sum(int((st.freq > threshold).sum()) for st in self.states.values())
        return 100.0 * above / total


def sdam(layer_groups):
    """Average over layers of the std of per-group mean absolute activation.

    ``layer_groups`` is a sequence of layers, each a sequence of activation
    arrays (or precomputed mean-absolute scalars).  Layers with fewer than
    two groups are skipped; if every layer is skipped there is nothing to
    measure and a ValueError is raised.
    """
    per_layer = []
    for groups in layer_groups:
        means = []
        for g in groups:
            arr = np.abs(np.asarray(getattr(g, "data", g), dtype=np.float64))
            if arr.size == 0:
                raise ValueError("empty activation group")
            means.append(arr.mean())
        if len(means) < 2:
            continue
        per_layer.append(float(np.std(means)))
    if not per_layer:
        raise ValueError("sdam needs at least one layer with two groups")
    return float(np.mean(per_layer))


class ActivationCapture:
    """Collects mean-absolute activation per site during one forward pass."""

    def __init__(self):
        self.by_layer = {}

    def record(self, layer, key, mean_abs):
        if layer is None:
            return
        self.by_layer.setdefault(layer, {})[key] = mean_abs

    def layer_groups(self):
        return [list(self.by_layer[l].values()) for l in sorted(self.by_layer)]

    def sdam(self):
        groups = [g for g in self.layer_groups() if len(g) >= 2]
        if not groups:
            return 0.0
        return sdam(groups)

    def reset(self):
        self.by_layer = {}


@dataclass
class BinHistogram:
    levels: np.ndarray    # integer grid levels, -Q_N .. Q_P
    counts: np.ndarray
    mean_offset: np.ndarray  # (bin mean - bin center) in units of s; 0 if empty
    variance: np.ndarray


def bin_histogram(w, s, q_n, q_p):
    """Population, mean offset and variance per quantization bin.

    Out-of-range weights are absorbed by the two saturation bins, so counts
    always sum to the element count.
    """
    if s <= 0:
        raise ValueError("scale must be positive")
    w = np.asarray(w, dtype=np.float64)
    idx = kernels.int_levels(w, s, q_n, q_p) + int(q_n)
    nbins = int(q_n) + int(q_p) + 1
    counts, means, variances = kernels.bin_moments(idx.ravel(), w.ravel(), nbins)
    levels = np.arange(-int(q_n), int(q_p) + 1, dtype=np.int64)
    centers = levels * s
    offset = np.where(counts > 0, (means - centers) / s, 0.0)
    return BinHistogram(levels=levels, counts=counts, mean_offset=offset,
                        variance=variances)


def mean_populated_bin_variance(groups, min_population=2):
    """Mean variance over all bins with at least min_population elements.

    ``groups`` yields (w, s, q_n, q_p) tuples; returns 0.0 when no bin
    qualifies.
    """
    variances = []
    for w, s, q_n, q_p in groups:
        hist = bin_histogram(w, s, q_n, q_p)
        mask = hist.counts >= min_population
        variances.extend(hist.variance[mask].tolist())
    return float(np.mean(variances)) if variances else 0.0


# ---------------------------------------------------------------------------
# sensitivity grids


@dataclass
class SensitivityGridSpec:
    """One training run per target set, plus 'all' and 'fp' baseline rows."""

    mode: str  # leave-one-out | only-one | per-head
    targets: list = field(default_factory=list)  # names or explicit key lists
    base_bits: int = 3
    target_bits: Optional[int] = None

    def __post_init__(self):
        if self.mode not in ("leave-one-out", "only-one", "per-head"):
            raise ValueError(f"unknown sensitivity mode {self.mode!r}")


_NAMED_TARGETS = {
    "mhsa": lambda s: s.kind in ATTN_WEIGHT_KINDS,
    "ffn": lambda s: s.kind.startswith("ffn."),
    "query": lambda s: s.kind == "attn.q",
    "key": lambda s: s.kind == "attn.k",
    "value": lambda s: s.kind == "attn.v",
    "proj": lambda s: s.kind == "attn.proj",
    "embed": lambda s: s.kind == "embed",
    "classifier": lambda s: s.kind == "classifier",
}


def resolve_target_sites(target, config):
    """Weight-site keys selected by a named target or an explicit key list."""
    weight_sites = [s for s in enumerate_quant_sites(config) if s.site == "weight"]
    if isinstance(target, (list, tuple, set)):
        known = {s.key for s in weight_sites}
        missing = [k for k in target if k not in known]
        if missing:
            raise ValueError(f"unknown quantization sites: {missing}")
        return sorted(target)
    name = str(target).lower()
    if name.startswith("head:"):
        _, layer, head = name.split(":")
        layer, head = int(layer), int(head)
        keys = [s.key for s in weight_sites
                if s.kind in ATTN_WEIGHT_KINDS and s.layer == layer and s.head == head]
        if not keys:
            raise ValueError(f"no attention sites for layer {layer} head {head}")
        return keys
    if name not in _NAMED_TARGETS:
        raise ValueError(f"unknown sensitivity target {target!r}")
    return [s.key for s in weight_sites if _NAMED_TARGETS[name](s)]


def per_head_targets(config):
    return [f"head:{l}:{h}" for l in range(config.layers)
            for h in range(config.heads)]


def _grid_bit_plan(mode, base_bits, target_bits, target_keys):
    """(global_bits, overrides) for one grid row."""
    if mode == "leave-one-out":
        return base_bits, {k: None for k in target_keys}
    if mode == "only-one":
        return None, {k: target_bits for k in target_keys}
    return base_bits, {k: target_bits for k in target_keys}


GRID_COLUMNS = ("mode", "target", "bitwidth", "top1", "topk", "status")


def run_sensitivity_grid(grid, config, out_dir, jobs=1):
    """Run the grid and write rows to <out_dir>/grid.csv.

    Row order is the construction order (baseline 'all', targets, baseline
    'fp') regardless of completion order; failed runs keep their row with
    status=error so the grid always completes.
    """
    from . import harness  # deferred: harness drives runs, we define the grid

    rows_spec = [("all", "all")]
    rows_spec += [(str(t), t) for t in grid.targets]
    rows_spec += [("fp", "fp")]

    def build_config(label, target):
        if target == "all":
            if grid.mode == "only-one":
                bits, overrides = grid.target_bits, {}
            else:
                bits, overrides = grid.base_bits, {}
        elif target == "fp":
            bits, overrides = None, {}
        else:
            keys = resolve_target_sites(target, config.model)
            bits, overrides = _grid_bit_plan(grid.mode, grid.base_bits,
                                             grid.target_bits, keys)
        return harness.replace_quant_plan(config, global_bits=bits,
                                          overrides=overrides)

    def run_one(pos, label, target):
        run_dir = os.path.join(out_dir, f"run_{pos:02d}_{_slug(label)}")
        cfg = build_config(label, target)
        try:
            result = harness.run_qat(cfg, run_dir)
            return {"mode": grid.mode, "target": label,
                    "bitwidth": _row_bits(grid, target),
                    "top1": result["top1"], "topk": result["topk"],
                    "status": "ok"}
        except Exception as exc:  # row-level failure, grid continues
            return {"mode": grid.mode, "target": label,
                    "bitwidth": _row_bits(grid, target),
                    "top1": "", "topk": "", "status": f"error:{exc}"}

    os.makedirs(out_dir, exist_ok=True)
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(run_one, i, label, target)
                       for i, (label, target) in enumerate(rows_spec)]
            rows = [f.result() for f in futures]
    else:
        rows = [run_one(i, label, target) for i, (label, target) in enumerate(rows_spec)]

    path = os.path.join(out_dir, "grid.csv")
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=GRID_COLUMNS)
        writer.writeheader()
        writer.writerows(rows)
    return rows


def _row_bits(grid, target):
    if target == "fp":
        return "fp"
    if target == "all":
        return str(grid.target_bits if grid.mode == "only-one" else grid.base_bits)
    if grid.mode == "leave-one-out":
        return "fp"
    return str(grid.target_bits)


def _slug(label):
    return "".join(ch if ch.isalnum() else "-" for ch in label)
