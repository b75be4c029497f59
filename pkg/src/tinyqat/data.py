"""Synthetic sequence-classification task: planted token motifs over noise.

Each sample is a uniform-random token sequence with one class-defining
motif planted at a random position; the class is decodable by spotting the
motif.  Deterministic given (spec, seed): data, motifs and crop draws each
come from their own named RNG substream.
"""

import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .seeding import substream


@dataclass(frozen=True)
class SyntheticTaskSpec:
    vocab: int = 128
    seq_len: int = 32
    classes: int = 4
    motif_len: int = 4
    train_size: int = 1024
    eval_size: int = 256
    noise_rate: float = 0.0  # per-token probability of corrupting a motif token

    def __post_init__(self):
        if self.motif_len > self.seq_len:
            raise ValueError("motif longer than the sequence")
        if min(self.vocab, self.seq_len, self.classes, self.motif_len) < 1:
            raise ValueError("task dimensions must be positive")
        if not 0.0 <= self.noise_rate <= 1.0:
            raise ValueError("noise_rate must be in [0, 1]")

    def to_dict(self):
        return {"vocab": self.vocab, "seq_len": self.seq_len,
                "classes": self.classes, "motif_len": self.motif_len,
                "train_size": self.train_size, "eval_size": self.eval_size,
                "noise_rate": self.noise_rate}


@dataclass
class Sample:
    sample_id: str
    tokens: np.ndarray
    label: int
    motif_pos: int


def class_motifs(spec, seed):
    """One distinct motif per class, drawn from the 'motifs' substream.

    When the vocabulary is large enough the motifs use disjoint token sets
    (slices of a shuffled vocabulary), which keeps classes cleanly
    separable; otherwise they are distinct random tuples.
    """
    rng = substream(seed, "motifs")
    if spec.classes * spec.motif_len <= spec.vocab:
        shuffled = rng.permutation(spec.vocab)
        return [np.asarray(shuffled[c * spec.motif_len:(c + 1) * spec.motif_len],
                           dtype=np.int64)
                for c in range(spec.classes)]
    motifs = []
    seen = set()
    for _ in range(spec.classes):
        while True:
            m = tuple(int(t) for t in rng.integers(0, spec.vocab, size=spec.motif_len))
            if m not in seen:
                seen.add(m)
                motifs.append(np.array(m, dtype=np.int64))
                break
    return motifs


def _generate_split(spec, motifs, rng, size, prefix):
    samples = []
    for i in range(size):
        label = i % spec.classes
        tokens = rng.integers(0, spec.vocab, size=spec.seq_len)
        pos = int(rng.integers(0, spec.seq_len - spec.motif_len + 1))
        motif = motifs[label].copy()
        if spec.noise_rate > 0.0:
            corrupt = rng.random(spec.motif_len) < spec.noise_rate
            motif[corrupt] = rng.integers(0, spec.vocab, size=int(corrupt.sum()))
        tokens[pos:pos + spec.motif_len] = motif
        samples.append(Sample(f"{prefix}-{i}", tokens.astype(np.int64), label, pos))
    return samples


def generate_task(spec, seed):
    """Deterministic (train, eval) splits; eval uses a disjoint seed substream."""
    motifs = class_motifs(spec, seed)
    train = _generate_split(spec, motifs, substream(seed, "data-train"),
                            spec.train_size, "train")
    evalset = _generate_split(spec, motifs, substream(seed, "data-eval"),
                              spec.eval_size, "eval")
    return train, evalset


def tokens_matrix(samples):
    return np.stack([s.tokens for s in samples])


def labels_vector(samples):
    return np.array([s.label for s in samples], dtype=np.int64)


def crop_tokens(tokens, offset, length, seq_len, pad_id):
    """Contiguous window [offset, offset+length) left-aligned, padded to seq_len."""
    if offset < 0 or offset + length > len(tokens):
        raise ValueError("crop window out of bounds")
    out = np.full(seq_len, pad_id, dtype=np.int64)
    out[:length] = tokens[offset:offset + length]
    return out


def save_dataset(path, samples):
    with open(path, "w") as f:
        for s in samples:
            f.write(json.dumps({"id": s.sample_id, "label": int(s.label),
                                "tokens": [int(t) for t in s.tokens],
                                "motif_pos": int(s.motif_pos)}) + "\n")


def load_dataset(path):
    samples = []
    with open(path) as f:
        for line in f:
            if not line.strip():
                continue
            rec = json.loads(line)
            samples.append(Sample(rec["id"], np.asarray(rec["tokens"], dtype=np.int64),
                                  int(rec["label"]), int(rec["motif_pos"])))
    return samples
