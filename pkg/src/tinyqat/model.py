"""Tiny encoder-only transformer where every linear weight and matmul input
is a quantization site.

Block structure (post-norm residuals):

    X' = LN(X + MHSA(X))        X_out = LN(X' + FFN(X'))

with FFN = fc2(gelu(fc1(.))).  Attention projections are stored per head so
each head's query/key/value/output slice can carry its own quantizer scale.
Token embedding plus a learned positional table feed the blocks; mean
pooling over tokens feeds a linear classification head.  Embedding and
classifier sites are pinned to 8 bits by the quantization policy.
"""

import json
import os
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .seeding import substream
from .tensor import (Tensor, concat, embedding_lookup, gelu, layer_norm,
                     matmul, mean_axis, permute, reshape, softmax_rows,
                     transpose_last2)

ATTN_WEIGHT_KINDS = ("attn.q", "attn.k", "attn.v", "attn.proj")
WEIGHT_KINDS = ATTN_WEIGHT_KINDS + ("ffn.fc1", "ffn.fc2", "embed", "classifier")


@dataclass(frozen=True)
class TransformerConfig:
    layers: int = 2
    heads: int = 2
    dim: int = 32
    ffn_ratio: int = 2
    vocab: int = 128
    classes: int = 4
    seq_len: int = 32

    def __post_init__(self):
        if self.layers < 0 or min(self.heads, self.dim, self.ffn_ratio,
                                  self.vocab, self.classes, self.seq_len) < 1:
            raise ValueError("all transformer dimensions must be positive")
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} not divisible by heads {self.heads}")

    @property
    def head_dim(self):
        return self.dim // self.heads

    @property
    def pad_id(self):
        # one reserved row past the vocabulary for crop padding
        return self.vocab

    def to_dict(self):
        return {"layers": self.layers, "heads": self.heads, "dim": self.dim,
                "ffn_ratio": self.ffn_ratio, "vocab": self.vocab,
                "classes": self.classes, "seq_len": self.seq_len}


@dataclass(frozen=True)
class ModulePath:
    """Address of one quantization site: weight matrix or matmul input."""

    kind: str
    layer: Optional[int] = None
    head: Optional[int] = None
    site: str = "weight"

    def __post_init__(self):
        if self.site not in ("weight", "input"):
            raise ValueError(f"unknown site type {self.site!r}")
        head_allowed = self.site == "weight" and self.kind in ATTN_WEIGHT_KINDS
        if (self.head is not None) != head_allowed:
            raise ValueError(f"head index not valid for {self.kind}.{self.site}")

    @property
    def key(self):
        parts = []
        if self.layer is not None:
            parts.append(f"layer{self.layer}")
        parts.append(self.kind)
        if self.head is not None:
            parts.append(f"h{self.head}")
        parts.append(self.site)
        return ".".join(parts)

    def __str__(self):
        return self.key


def enumerate_quant_sites(config, include_attention_probs=False):
    """Every weight and matmul-input quantization site, duplicate-free.

    This is the universe that policies and sensitivity grids partition.
    """
    sites = [ModulePath("embed")]
    for l in range(config.layers):
        for kind in ATTN_WEIGHT_KINDS:
            for h in range(config.heads):
                sites.append(ModulePath(kind, layer=l, head=h))
        sites.append(ModulePath("ffn.fc1", layer=l))
        sites.append(ModulePath("ffn.fc2", layer=l))
        sites.append(ModulePath("attn", layer=l, site="input"))
        if include_attention_probs:
            sites.append(ModulePath("attn.scores", layer=l, site="input"))
            sites.append(ModulePath("attn.probs", layer=l, site="input"))
        sites.append(ModulePath("attn.proj", layer=l, site="input"))
        sites.append(ModulePath("ffn.fc1", layer=l, site="input"))
        sites.append(ModulePath("ffn.fc2", layer=l, site="input"))
    sites.append(ModulePath("classifier"))
    sites.append(ModulePath("classifier", site="input"))
    return sites


class TinyTransformer:
    """Desk-scale transformer classifier over token sequences."""

    def __init__(self, config, seed=0):
        self.config = config
        self.params = {}
        rng = substream(seed, "init")
        d, dk, c = config.dim, config.head_dim, config.classes
        hidden = config.ffn_ratio * d

        def weight(name, shape, std=0.05):
            self.params[name] = Tensor(rng.normal(0.0, std, size=shape),
                                       requires_grad=True)

        def zeros(name, shape):
            self.params[name] = Tensor(np.zeros(shape), requires_grad=True)

        def ones(name, shape):
            self.params[name] = Tensor(np.ones(shape), requires_grad=True)

        weight("embed.weight", (config.vocab + 1, d), std=0.1)
        weight("pos.weight", (config.seq_len, d), std=0.1)
        for l in range(config.layers):
            for kind in ("attn.q", "attn.k", "attn.v"):
                for h in range(config.heads):
                    weight(f"layer{l}.{kind}.h{h}.weight", (d, dk))
                zeros(f"layer{l}.{kind}.bias", (d,))
            for h in range(config.heads):
                weight(f"layer{l}.attn.proj.h{h}.weight", (dk, d))
            zeros(f"layer{l}.attn.proj.bias", (d,))
            ones(f"layer{l}.ln1.gamma", (d,))
            zeros(f"layer{l}.ln1.beta", (d,))
            weight(f"layer{l}.ffn.fc1.weight", (d, hidden))
            zeros(f"layer{l}.ffn.fc1.bias", (hidden,))
            weight(f"layer{l}.ffn.fc2.weight", (hidden, d))
            zeros(f"layer{l}.ffn.fc2.bias", (d,))
            ones(f"layer{l}.ln2.gamma", (d,))
            zeros(f"layer{l}.ln2.beta", (d,))
        weight("classifier.weight", (d, c))
        zeros("classifier.bias", (c,))

    # -- quantization plumbing ------------------------------------------------

    def quant_sites(self, include_attention_probs=False):
        return enumerate_quant_sites(self.config,
                                     include_attention_probs=include_attention_probs)

    def _weight(self, key, policy):
        w = self.params[key]
        if policy is not None and key in policy:
            return policy.quantize(key, w)
        return w

    def _activation(self, key, x, policy, capture, layer):
        if capture is not None:
            capture.record(layer, key, float(np.abs(x.data).mean()))
        if policy is not None and key in policy:
            return policy.quantize(key, x)
        return x

    # -- forward passes -------------------------------------------------------

    def mhsa(self, layer, x, policy=None, capture=None):
        """Multi-head self-attention for one layer, pre-residual output.

        Per-head weight slices are quantized individually, then concatenated
        so each projection runs as a single matmul; attention itself runs
        batched over a (batch, heads, tokens, head_dim) layout.
        """
        cfg = self.config
        heads, dk = cfg.heads, cfg.head_dim
        inv_sqrt_dk = 1.0 / np.sqrt(dk)
        prefix = f"layer{layer}.attn"
        xq = self._activation(f"{prefix}.input", x, policy, capture, layer)
        n_tokens = x.shape[-2]
        batched = []
        for kind in ("q", "k", "v"):
            w = concat([self._weight(f"{prefix}.{kind}.h{h}.weight", policy)
                        for h in range(heads)], axis=1)
            proj = matmul(xq, w) + self.params[f"{prefix}.{kind}.bias"]
            split = reshape(proj, (-1, n_tokens, heads, dk))
            batched.append(permute(split, (0, 2, 1, 3)))
        q, k, v = batched
        scores = matmul(q, transpose_last2(k)) * inv_sqrt_dk
        scores = self._activation(f"{prefix}.scores.input", scores, policy, None,
                                  layer)
        probs = softmax_rows(scores)
        probs = self._activation(f"{prefix}.probs.input", probs, policy, None,
                                 layer)
        merged = reshape(permute(matmul(probs, v), (0, 2, 1, 3)),
                         (-1, n_tokens, heads * dk))
        merged = self._activation(f"{prefix}.proj.input", merged, policy, capture,
                                  layer)
        out_w = concat([self._weight(f"{prefix}.proj.h{h}.weight", policy)
                        for h in range(heads)], axis=0)
        out = matmul(merged, out_w) + self.params[f"{prefix}.proj.bias"]
        if x.ndim == 2:  # unbatched input keeps its unbatched shape
            out = reshape(out, (n_tokens, heads * dk))
        return out

    def block(self, layer, x, policy=None, capture=None):
        """One transformer layer: attention and FFN, each behind a post-norm."""
        attn = self.mhsa(layer, x, policy, capture)
        x = layer_norm(x + attn, self.params[f"layer{layer}.ln1.gamma"],
                       self.params[f"layer{layer}.ln1.beta"])
        h = self._activation(f"layer{layer}.ffn.fc1.input", x, policy, capture, layer)
        h = matmul(h, self._weight(f"layer{layer}.ffn.fc1.weight", policy)) \
            + self.params[f"layer{layer}.ffn.fc1.bias"]
        h = gelu(h)
        h = self._activation(f"layer{layer}.ffn.fc2.input", h, policy, capture, layer)
        h = matmul(h, self._weight(f"layer{layer}.ffn.fc2.weight", policy)) \
            + self.params[f"layer{layer}.ffn.fc2.bias"]
        return layer_norm(x + h, self.params[f"layer{layer}.ln2.gamma"],
                          self.params[f"layer{layer}.ln2.beta"])

    def forward(self, tokens, policy=None, capture=None):
        """Logits for a (batch, seq_len) array of token ids."""
        tokens = np.asarray(tokens)
        if tokens.ndim != 2 or tokens.shape[1] != self.config.seq_len:
            raise ValueError(
                f"tokens must have shape (batch, {self.config.seq_len})"
            )
        if tokens.min() < 0 or tokens.max() > self.config.pad_id:
            raise ValueError("token id out of range")
        table = self._weight("embed.weight", policy)
        x = embedding_lookup(table, tokens) + self.params["pos.weight"]
        for l in range(self.config.layers):
            x = self.block(l, x, policy, capture)
        pooled = mean_axis(x, 1)
        pooled = self._activation("classifier.input", pooled, policy, capture, None)
        return matmul(pooled, self._weight("classifier.weight", policy)) \
            + self.params["classifier.bias"]

    # -- parameter access -----------------------------------------------------

    def trainable(self):
        return list(self.params.items())

    def state_arrays(self):
        return {name: p.data for name, p in self.params.items()}

    def load_state(self, arrays):
        for name, p in self.params.items():
            if name not in arrays:
                raise KeyError(f"checkpoint missing parameter {name}")
            arr = np.asarray(arrays[name], dtype=np.float64)
            if arr.shape != p.data.shape:
                raise ValueError(f"checkpoint shape mismatch for {name}")
            p.data = arr.copy()


def save_checkpoint(base_path, arrays):
    """Write parameters as a flat float64 blob plus a JSON sidecar.

    The sidecar lists (name, shape, offset) with offsets counted in float64
    elements; the round trip is bit exact.
    """
    entries = []
    blobs = []
    offset = 0
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr, dtype=np.float64)
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(arr.ravel())
        offset += arr.size
    flat = np.concatenate(blobs) if blobs else np.empty(0)
    with open(base_path + ".bin", "wb") as f:
        f.write(flat.tobytes())
    with open(base_path + ".json", "w") as f:
        json.dump({"dtype": "float64", "order": "C", "tensors": entries}, f, indent=1)


def load_checkpoint(base_path):
    with open(base_path + ".json") as f:
        sidecar = json.load(f)
    flat = np.fromfile(base_path + ".bin", dtype=np.float64)
    arrays = {}
    for entry in sidecar["tensors"]:
        shape = tuple(entry["shape"])
        size = int(np.prod(shape)) if shape else 1
        chunk = flat[entry["offset"]:entry["offset"] + size]
        arrays[entry["name"]] = chunk.reshape(shape).copy()
    return arrays


def checkpoint_exists(base_path):
    return os.path.exists(base_path + ".bin") and os.path.exists(base_path + ".json")
