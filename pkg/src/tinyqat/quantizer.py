"""Uniform fake quantization with learnable per-group scales.

The quantizer maps x to ``s * round(clip(x/s, -Q_N, Q_P))`` (round half to
even).  Its backward rule is the straight-through estimator for the input
(upstream gated by a closed-interval in-range indicator) and the analytic
piecewise form for the scale:

    round(x/s) - x/s   strictly inside the range
    -Q_N               at or below the lower clip
     Q_P               at or above the upper clip

Scale gradients can additionally be rescaled by ``1/sqrt(Q_P * ||x||_1)``
(magnitude-aware gradient scaling) after backward, before the optimizer
step.  ``build_quant_policy`` assigns one learnable scale per quantization
group: per-head tensors inside attention, per-layer elsewhere, with the
first (embedding) and last (classifier) sites pinned to 8 bits.
"""

from dataclasses import dataclass

import numpy as np

from . import kernels
from .tensor import Tensor, custom_gradient

MIN_BITS = 2
MAX_BITS = 8
SCALE_FLOOR = 1e-9

UNSIGNED_ACT_KINDS = ("ffn.fc2", "attn.probs")  # post-gelu / post-softmax inputs
FORCED_8BIT_KINDS = ("embed", "classifier")


class UnsupportedBitwidthError(ValueError):
    pass


class InvalidScaleError(ValueError):
    pass


class PolicyError(KeyError):
    pass


def levels(bits, signed):
    """Number of negative/positive grid levels (Q_N, Q_P) for a bitwidth."""
    if not MIN_BITS <= bits <= MAX_BITS:
        raise UnsupportedBitwidthError(f"bitwidth must be in [2, 8], got {bits}")
    if signed:
        return 2 ** (bits - 1), 2 ** (bits - 1) - 1
    return 0, 2 ** bits - 1


def fake_quantize(x, scale, q_n, q_p):
    """Quantize a tensor onto the grid {-s*Q_N, ..., s*Q_P}.

    Differentiable in both x (straight-through) and the scale (analytic
    piecewise gradient, summed over the group).
    """
    s_value = float(scale.data) if isinstance(scale, Tensor) else float(scale)
    if s_value <= 0.0:
        raise InvalidScaleError(f"scale must be positive, got {s_value}")
    saved = {}

    def forward(xa, sa):
        out, ind, sg = kernels.quantize_parts(xa, float(sa), q_n, q_p)
        saved["ind"], saved["sg"] = ind, sg
        return out

    def backward(g, xa, sa):
        return g * saved["ind"], np.sum(g * saved["sg"])

    return custom_gradient(forward, backward)(x, scale)


def ste_input_grad(x, s, q_n, q_p, upstream):
    """Straight-through input gradient: upstream gated by the in-range mask."""
    x = np.asarray(x, dtype=np.float64)
    v = x / s
    return np.asarray(upstream, dtype=np.float64) * ((v >= -q_n) & (v <= q_p))


def scale_grad(x, s, q_n, q_p):
    """Analytic per-element gradient of the quantized value w.r.t. the scale."""
    _, _, sg = kernels.quantize_parts(np.asarray(x, dtype=np.float64), s, q_n, q_p)
    return sg


def grad_scale_factor(w, q_p, max_factor=1e6):
    """Gradient rescaling g = 1/sqrt(Q_P * ||w||_1) for one quantization group.

    An all-zero group would divide by zero; the factor is clamped to
    ``max_factor`` instead.
    """
    l1 = float(np.abs(np.asarray(w, dtype=np.float64)).sum())
    denom = q_p * l1
    if denom <= 0.0:
        return float(max_factor)
    return min(1.0 / np.sqrt(denom), float(max_factor))


def init_scale(w, q_p):
    """Initial scale 2*mean(|w|)/sqrt(Q_P), floored to keep s strictly positive."""
    mean_abs = float(np.abs(np.asarray(w, dtype=np.float64)).mean())
    return max(2.0 * mean_abs / np.sqrt(q_p), SCALE_FLOOR)


@dataclass(frozen=True)
class QuantizerSpec:
    """Static description of one quantization group."""

    bits: int
    signed: bool
    q_n: int
    q_p: int
    granularity: str  # per-layer | per-module | per-head-tensor
    grad_scaling: bool = True

    @classmethod
    def create(cls, bits, signed, granularity, grad_scaling=True):
        q_n, q_p = levels(bits, signed)
        return cls(bits, signed, q_n, q_p, granularity, grad_scaling)

    def __post_init__(self):
        if (self.q_n, self.q_p) != levels(self.bits, self.signed):
            raise ValueError("level counts inconsistent with bitwidth/signedness")


class QuantizerState:
    """Learnable scale for one quantization group, plus per-step capture.

    ``grad_scale_stat`` holds Q_P * ||x||_1 of the tensor most recently
    quantized through this state; the training loop turns it into the
    multiplicative factor applied to the scale gradient.
    """

    def __init__(self, owner, scale_value=1.0, initialized=True):
        self.owner = owner
        self.scale = Tensor(np.float64(scale_value), requires_grad=True)
        self.initialized = initialized
        self.grad_scale_stat = None

    @property
    def scale_value(self):
        return float(self.scale.data)


class QuantPolicy:
    """Mapping from quantization-site key to (spec, state)."""

    def __init__(self, max_grad_scale=1e6):
        self.specs = {}
        self.states = {}
        self.max_grad_scale = max_grad_scale

    def add(self, key, spec, state):
        if key in self.specs:
            raise PolicyError(f"duplicate quantization group for {key}")
        self.specs[key] = spec
        self.states[key] = state

    def __contains__(self, key):
        return key in self.specs

    def __len__(self):
        return len(self.specs)

    def keys(self):
        return self.specs.keys()

    def quantize(self, key, x):
        """Fake-quantize tensor x through the group registered under key."""
        if key not in self.specs:
            raise PolicyError(f"no quantizer registered for {key}")
        spec, state = self.specs[key], self.states[key]
        if not state.initialized:
            state.scale.data = np.float64(init_scale(x.data, spec.q_p))
            state.initialized = True
        if spec.grad_scaling:
            state.grad_scale_stat = spec.q_p * float(np.abs(x.data).sum())
        return fake_quantize(x, state.scale, spec.q_n, spec.q_p)

    def scale_items(self):
        return [(key, self.specs[key], self.states[key]) for key in self.specs]

    def apply_grad_scaling(self):
        """Multiply stored scale gradients by 1/sqrt(Q_P*||x||_1), in place."""
        for _key, spec, state in self.scale_items():
            if not spec.grad_scaling or state.scale.grad is None:
                continue
            stat = state.grad_scale_stat
            if stat is None:
                continue
            if stat <= 0.0:
                factor = self.max_grad_scale
            else:
                factor = min(1.0 / np.sqrt(stat), self.max_grad_scale)
            state.scale.grad = state.scale.grad * factor

    def clamp_scales(self, floor=SCALE_FLOOR):
        for state in self.states.values():
            if float(state.scale.data) < floor:
                state.scale.data = np.float64(floor)

    def scale_tensors(self):
        return [state.scale for state in self.states.values()]

    def to_json(self):
        entries = []
        for key in self.specs:
            spec, state = self.specs[key], self.states[key]
            entries.append({
                "site": key,
                "bits": spec.bits,
                "signed": spec.signed,
                "q_n": spec.q_n,
                "q_p": spec.q_p,
                "granularity": spec.granularity,
                "grad_scaling": spec.grad_scaling,
                "scale": state.scale_value,
            })
        return entries


def resolve_bits(site, global_bits, overrides=None):
    """Bitwidth for one site: override beats global, first/last pinned to 8.

    Returns None when the site stays full precision.
    """
    bits = global_bits
    if overrides:
        if site.key in overrides:
            bits = overrides[site.key]
        elif site.kind in overrides:
            bits = overrides[site.kind]
    if bits is None:
        return None
    if site.kind in FORCED_8BIT_KINDS:
        return 8
    return bits


def build_quant_policy(model, global_bits, overrides=None, quantize_activations=True,
                       grad_scaling=True, include_attention_probs=False,
                       max_grad_scale=1e6):
    """Assign one quantizer group per site of the model.

    Weights are signed; activations are unsigned after gelu/softmax and
    signed elsewhere.  Attention weights get per-head-tensor scales, all
    other groups per-layer scales.  Sites resolved to ``None`` bits stay
    full precision and get no group.
    """
    policy = QuantPolicy(max_grad_scale=max_grad_scale)
    for site in model.quant_sites(include_attention_probs=include_attention_probs):
        bits = resolve_bits(site, global_bits, overrides)
        if bits is None:
            continue
        if site.site == "weight":
            signed = True
            granularity = "per-head-tensor" if site.head is not None else "per-layer"
            w = model.params.get(site.key)
            if w is None:
                raise PolicyError(f"model has no weight tensor for {site.key}")
            spec = QuantizerSpec.create(bits, signed, granularity, grad_scaling)
            state = QuantizerState(site.key, init_scale(w.data, spec.q_p))
        else:
            if not quantize_activations:
                continue
            signed = site.kind not in UNSIGNED_ACT_KINDS
            spec = QuantizerSpec.create(bits, signed, "per-layer", grad_scaling)
            state = QuantizerState(site.key, 1.0, initialized=False)
        policy.add(site.key, spec, state)
    return policy
