"""Experiment orchestration: configs, teacher pretraining, soft-label cache
construction, the QAT loop, and run-directory bookkeeping.

A run directory contains:

    config.json       exact echo of the experiment config (written first)
    policy.json       quantizer placement: site, bits, signedness, scale
    diagnostics.csv   per-iteration training metrics
    metrics.json      final deterministic metrics (byte-identical across
                      repeat runs with the same config and seed)
    timing.json       wall-clock seconds (kept out of metrics.json so the
                      latter stays reproducible byte for byte)
    model.bin/.json   checkpoint (last completed epoch; the last good one
                      survives an abort)
"""

import csv
import dataclasses
import json
import math
import os
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .data import (SyntheticTaskSpec, crop_tokens, generate_task, labels_vector,
                   tokens_matrix)
from .losses import (CacheMissError, ObrConfig, SoftLabelCache,
                     SoftLabelCacheEntry, kd_loss, lambda_schedule, obr_loss,
                     total_loss)
from .model import (TinyTransformer, TransformerConfig, load_checkpoint,
                    save_checkpoint)
from .optim import AdamW, OptimConfig, lr_at
from .quantizer import build_quant_policy
from .seeding import substream
from .tensor import NonFiniteError, backward, no_grad
from .diagnostics import (ActivationCapture, OscillationTracker,
                          mean_populated_bin_variance)

DIAG_COLUMNS = ("iteration", "oscillating_pct", "sdam", "obr_loss", "kd_loss",
                "lambda", "train_acc", "eval_acc")


class ConfigError(ValueError):
    """Invalid configuration or missing prerequisite files (CLI exit 1)."""


class RunAbort(RuntimeError):
    """Training aborted mid-run; the last good checkpoint is on disk (exit 2)."""


@dataclass
class QuantConfig:
    global_bits: Optional[int] = 4
    overrides: dict = field(default_factory=dict)  # site key or kind -> bits|None
    quantize_activations: bool = True
    quantize_attention_probs: bool = False
    grad_scaling: bool = True
    max_grad_scale: float = 1e6
    scale_floor: float = 1e-9


@dataclass
class KdConfig:
    mode: str = "multi-crop"  # none | vanilla | multi-crop
    crops: int = 4
    crop_len: Optional[int] = None  # default: seq_len // 2
    cache_path: Optional[str] = None
    teacher_checkpoint: Optional[str] = None
    hard_label_fallback: bool = False

    def __post_init__(self):
        if self.mode not in ("none", "vanilla", "multi-crop"):
            raise ConfigError(f"unknown kd mode {self.mode!r}")
        if self.crops < 1:
            raise ConfigError("crops must be >= 1")


@dataclass
class OscSettings:
    momentum: float = 0.01
    threshold: float = 0.005


@dataclass
class ExperimentConfig:
    seed: int = 0
    epochs: int = 30
    batch_size: int = 32
    topk: int = 2
    eval_every: int = 1
    init_checkpoint: Optional[str] = None
    model: TransformerConfig = field(default_factory=TransformerConfig)
    data: SyntheticTaskSpec = field(default_factory=SyntheticTaskSpec)
    quant: QuantConfig = field(default_factory=QuantConfig)
    kd: KdConfig = field(default_factory=KdConfig)
    obr: ObrConfig = field(default_factory=ObrConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    osc: OscSettings = field(default_factory=OscSettings)

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, doc):
        return _build_config(cls, doc, "config")


_SECTION_TYPES = {
    "model": TransformerConfig,
    "data": SyntheticTaskSpec,
    "quant": QuantConfig,
    "kd": KdConfig,
    "obr": ObrConfig,
    "optim": OptimConfig,
    "osc": OscSettings,
}


def _build_config(cls, doc, path):
    if not isinstance(doc, dict):
        raise ConfigError(f"{path} must be a JSON object")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(doc) - names)
    if unknown:
        raise ConfigError(f"unknown keys in {path}: {unknown}")
    kwargs = {}
    for key, value in doc.items():
        if key in _SECTION_TYPES and cls is ExperimentConfig:
            kwargs[key] = _build_config(_SECTION_TYPES[key], value, f"{path}.{key}")
        else:
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {path}: {exc}") from exc


def load_config(path):
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    with open(path) as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
    return ExperimentConfig.from_dict(doc)


def replace_quant_plan(config, global_bits, overrides):
    quant = dataclasses.replace(config.quant, global_bits=global_bits,
                                overrides=dict(overrides))
    return dataclasses.replace(config, quant=quant)


def teacher_config(config, epochs=40, lr=1e-3):
    """Full-precision, hard-label variant of a config, for teacher training.

    Teachers train from scratch, so they get a longer schedule and a higher
    peak learning rate than the fine-tuning defaults used for students.
    """
    return dataclasses.replace(
        config,
        epochs=epochs,
        quant=dataclasses.replace(config.quant, global_bits=None, overrides={}),
        kd=dataclasses.replace(config.kd, mode="none", hard_label_fallback=True),
        obr=dataclasses.replace(config.obr, lambda_end=0.0),
        optim=dataclasses.replace(config.optim, lr=lr),
        init_checkpoint=config.init_checkpoint,
    )


# ---------------------------------------------------------------------------
# inference helpers


def _softmax_np(z):
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _one_hot(labels, classes):
    out = np.zeros((len(labels), classes))
    out[np.arange(len(labels)), labels] = 1.0
    return out


def _batched_logits(model, tokens, policy, batch_size=256):
    chunks = []
    with no_grad():
        for start in range(0, len(tokens), batch_size):
            out = model.forward(tokens[start:start + batch_size], policy)
            chunks.append(out.data)
    return np.concatenate(chunks, axis=0)


def evaluate(model, policy, samples, batch_size=256, topk=2):
    """(top-1 %, top-k %) accuracy of the (possibly quantized) model."""
    logits = _batched_logits(model, tokens_matrix(samples), policy, batch_size)
    labels = labels_vector(samples)
    top1 = 100.0 * float((logits.argmax(axis=-1) == labels).mean())
    order = np.argsort(logits, axis=-1)[:, ::-1][:, :topk]
    topk_acc = 100.0 * float((order == labels[:, None]).any(axis=-1).mean())
    return top1, topk_acc


def build_soft_label_cache(config, teacher_checkpoint, out_path, crops=None,
                           crop_len=None):
    """Teacher soft labels for M random crops of every training sample.

    Crop offsets come from their own RNG substream so training-side draws
    stay untouched.  Each cache line stores the crop coordinates with the
    teacher distribution, letting training replay the identical crop.
    """
    train, _ = generate_task(config.data, config.seed)
    teacher = TinyTransformer(config.model, seed=config.seed)
    teacher.load_state(load_checkpoint(teacher_checkpoint))
    m = config.kd.crops if crops is None else crops
    length = crop_len or config.kd.crop_len or config.model.seq_len // 2
    if not 1 <= length <= config.model.seq_len:
        raise ConfigError(f"crop length {length} outside [1, seq_len]")
    rng = substream(config.seed, "crops")
    keys = []
    crops_tokens = []
    for sample in train:
        for j in range(m):
            offset = int(rng.integers(0, config.model.seq_len - length + 1))
            keys.append((sample.sample_id, j, offset))
            crops_tokens.append(crop_tokens(sample.tokens, offset, length,
                                            config.model.seq_len,
                                            config.model.pad_id))
    logits = _batched_logits(teacher, np.stack(crops_tokens), policy=None)
    probs = _softmax_np(logits)
    cache = SoftLabelCache()
    for (sid, j, offset), p in zip(keys, probs):
        cache.add(SoftLabelCacheEntry(sample_id=sid, crop_index=j, offset=offset,
                                      length=length, probs=p))
    cache.save(out_path)
    return cache


# ---------------------------------------------------------------------------
# the training engine


def _validate_run_inputs(config):
    if config.model.vocab != config.data.vocab:
        raise ConfigError("model.vocab and data.vocab must match")
    if config.model.seq_len != config.data.seq_len:
        raise ConfigError("model.seq_len and data.seq_len must match")
    if config.model.classes != config.data.classes:
        raise ConfigError("model.classes and data.classes must match")
    kd = config.kd
    if kd.mode == "none" and not kd.hard_label_fallback:
        raise ConfigError(
            "kd mode 'none' requires hard_label_fallback=true (ground-truth "
            "cross-entropy ablation); distillation is the default objective"
        )
    if kd.mode == "vanilla" and not kd.teacher_checkpoint:
        raise ConfigError("kd mode 'vanilla' needs kd.teacher_checkpoint")
    if kd.mode == "multi-crop" and not kd.cache_path:
        raise ConfigError("kd mode 'multi-crop' needs kd.cache_path")


def _weight_groups(model, policy):
    groups = []
    for key, spec, state in policy.scale_items():
        if key.endswith(".weight"):
            groups.append((key, model.params[key], spec, state))
    return groups


def _decay_filter(name):
    if name.startswith("scale:") or name.endswith(".bias"):
        return False
    return ".ln" not in name


def run_qat(config, out_dir):
    """Train one (possibly quantized, possibly distilled) model; see module
    docstring for the run-directory layout.  Returns the metrics dict."""
    _validate_run_inputs(config)
    os.makedirs(out_dir, exist_ok=True)
    started = time.perf_counter()
    with open(os.path.join(out_dir, "config.json"), "w") as f:
        json.dump(config.to_dict(), f, indent=2)
        f.write("\n")

    train, evalset = generate_task(config.data, config.seed)
    model = TinyTransformer(config.model, seed=config.seed)
    if config.init_checkpoint:
        model.load_state(load_checkpoint(config.init_checkpoint))
    policy = build_quant_policy(
        model, config.quant.global_bits, config.quant.overrides,
        quantize_activations=config.quant.quantize_activations,
        grad_scaling=config.quant.grad_scaling,
        include_attention_probs=config.quant.quantize_attention_probs,
        max_grad_scale=config.quant.max_grad_scale)
    with open(os.path.join(out_dir, "policy.json"), "w") as f:
        json.dump(policy.to_json(), f, indent=1)
        f.write("\n")

    teacher = None
    cache = None
    if config.kd.mode == "vanilla":
        teacher = TinyTransformer(config.model, seed=config.seed)
        try:
            teacher.load_state(load_checkpoint(config.kd.teacher_checkpoint))
        except FileNotFoundError as exc:
            raise ConfigError(f"teacher checkpoint missing: {exc}") from exc
    elif config.kd.mode == "multi-crop":
        if not os.path.exists(config.kd.cache_path):
            raise ConfigError(f"soft-label cache missing: {config.kd.cache_path}")
        cache = SoftLabelCache.load(config.kd.cache_path)

    if config.kd.mode == "multi-crop":
        items = [(i, j) for i in range(len(train)) for j in range(config.kd.crops)]
    else:
        items = list(range(len(train)))
    steps_per_epoch = math.ceil(len(items) / config.batch_size)
    total_steps = config.epochs * steps_per_epoch

    named = list(model.trainable())
    named += [(f"scale:{key}", state.scale) for key, _spec, state
              in policy.scale_items()]
    opt = AdamW(named, config.optim, decay_filter=_decay_filter)
    tracker = OscillationTracker(config.osc.momentum, config.osc.threshold)
    groups = _weight_groups(model, policy)
    for key, w, spec, state in groups:
        tracker.observe(key, w.data, state.scale_value, spec.q_n, spec.q_p)

    def batch_inputs(batch_items):
        if config.kd.mode == "multi-crop":
            tokens, probs, labels = [], [], []
            for i, j in batch_items:
                sample = train[i]
                entry = cache.get(sample.sample_id, j)
                tokens.append(crop_tokens(sample.tokens, entry.offset, entry.length,
                                          config.model.seq_len,
                                          config.model.pad_id))
                probs.append(entry.probs)
                labels.append(sample.label)
            return np.stack(tokens), np.stack(probs), np.array(labels)
        samples = [train[i] for i in batch_items]
        tokens = tokens_matrix(samples)
        labels = labels_vector(samples)
        if config.kd.mode == "vanilla":
            with no_grad():
                probs = _softmax_np(teacher.forward(tokens, None).data)
        else:
            probs = _one_hot(labels, config.model.classes)
        return tokens, probs, labels

    # calibrate activation scales on the first training batch, in data order
    if any(not state.initialized for state in policy.states.values()):
        first = items[:config.batch_size]
        tokens0, _, _ = batch_inputs(first)
        with no_grad():
            model.forward(tokens0, policy)

    eval_top1, eval_topk = evaluate(model, policy, evalset, topk=config.topk)
    shuffle_rng = substream(config.seed, "shuffle")
    capture = ActivationCapture()
    diag_path = os.path.join(out_dir, "diagnostics.csv")
    diag_file = open(diag_path, "w", newline="")
    diag = csv.writer(diag_file)
    diag.writerow(DIAG_COLUMNS)
    save_checkpoint(os.path.join(out_dir, "model"), model.state_arrays())

    step = 0
    last_sdam = 0.0
    try:
        for epoch in range(config.epochs):
            order = shuffle_rng.permutation(len(items))
            for start in range(0, len(items), config.batch_size):
                batch_items = [items[k] for k in order[start:start + config.batch_size]]
                tokens, probs, labels = batch_inputs(batch_items)
                opt.zero_grad()
                capture.reset()
                logits = model.forward(tokens, policy, capture)
                kd = kd_loss(logits, probs)
                lam = lambda_schedule(step, total_steps, config.obr.lambda_end)
                obr_value = 0.0
                obr_term = None
                if lam > 0.0 and groups:
                    obr_term = obr_loss(
                        _obr_groups(groups),
                        min_bin_population=config.obr.min_bin_population,
                        norm=config.obr.norm)
                    obr_value = float(obr_term.data)
                loss = total_loss(kd, obr_term, lam)
                backward(loss)
                policy.apply_grad_scaling()
                opt.step(lr_at(step, total_steps, config.optim))
                policy.clamp_scales(config.quant.scale_floor)
                for key, w, spec, state in groups:
                    tracker.observe(key, w.data, state.scale_value, spec.q_n,
                                    spec.q_p)
                train_acc = 100.0 * float((logits.data.argmax(axis=-1) == labels
                                           ).mean())
                last_sdam = capture.sdam()
                diag.writerow([step, tracker.oscillating_fraction(), last_sdam,
                               obr_value, float(kd.data), lam, train_acc,
                               eval_top1])
                step += 1
            if (epoch + 1) % config.eval_every == 0 or epoch == config.epochs - 1:
                eval_top1, eval_topk = evaluate(model, policy, evalset,
                                                topk=config.topk)
            save_checkpoint(os.path.join(out_dir, "model"), model.state_arrays())
    except (NonFiniteError, CacheMissError) as exc:
        diag_file.close()
        with open(os.path.join(out_dir, "abort.json"), "w") as f:
            json.dump({"error": type(exc).__name__, "message": str(exc),
                       "step": step}, f, indent=2)
        raise RunAbort(f"{type(exc).__name__}: {exc}") from exc
    diag_file.close()

    bin_variance = mean_populated_bin_variance(
        [(w.data, state.scale_value, spec.q_n, spec.q_p)
         for _key, w, spec, state in groups],
        min_population=config.obr.min_bin_population)
    metrics = {
        "top1": eval_top1,
        "topk": eval_topk,
        "oscillating_pct_final": tracker.oscillating_fraction(),
        "sdam_final": last_sdam,
        "mean_bin_variance_final": bin_variance,
    }
    with open(os.path.join(out_dir, "metrics.json"), "w") as f:
        json.dump(metrics, f, indent=2)
        f.write("\n")
    # refresh the policy echo so it records the learned scales
    with open(os.path.join(out_dir, "policy.json"), "w") as f:
        json.dump(policy.to_json(), f, indent=1)
        f.write("\n")
    with open(os.path.join(out_dir, "timing.json"), "w") as f:
        json.dump({"wall_seconds": time.perf_counter() - started}, f, indent=2)
        f.write("\n")
    return metrics


def _obr_groups(groups):
    from . import kernels
    out = []
    for _key, w, spec, state in groups:
        s = state.scale_value
        w_q = kernels.quantize_values(w.data, s, spec.q_n, spec.q_p)
        out.append((w, w_q, s, spec.q_n, spec.q_p))
    return out


def train_teacher(config, out_dir):
    """Train the full-precision teacher (hard labels, no quantization)."""
    return run_qat(teacher_config(config), out_dir)


# ---------------------------------------------------------------------------
# reporting


REPORT_COLUMNS = ("run", "kd_mode", "bits", "lambda_end", "top1", "topk",
                  "oscillating_pct_final", "sdam_final")


def collect_report(runs_dir):
    """Aggregate metrics of every completed run directory under runs_dir."""
    rows = []
    for name in sorted(os.listdir(runs_dir)):
        run_dir = os.path.join(runs_dir, name)
        metrics_path = os.path.join(run_dir, "metrics.json")
        config_path = os.path.join(run_dir, "config.json")
        if not (os.path.isfile(metrics_path) and os.path.isfile(config_path)):
            continue
        with open(metrics_path) as f:
            metrics = json.load(f)
        with open(config_path) as f:
            cfg = json.load(f)
        rows.append({
            "run": name,
            "kd_mode": cfg.get("kd", {}).get("mode", ""),
            "bits": cfg.get("quant", {}).get("global_bits", ""),
            "lambda_end": cfg.get("obr", {}).get("lambda_end", ""),
            "top1": metrics.get("top1", ""),
            "topk": metrics.get("topk", ""),
            "oscillating_pct_final": metrics.get("oscillating_pct_final", ""),
            "sdam_final": metrics.get("sdam_final", ""),
        })
    return rows


def write_report(rows, out_path=None):
    lines = ["\t".join(REPORT_COLUMNS)]
    for row in rows:
        lines.append("\t".join(str(row[c]) for c in REPORT_COLUMNS))
    text = "\n".join(lines) + "\n"
    if out_path:
        with open(out_path, "w") as f:
            f.write(text)
    return text
