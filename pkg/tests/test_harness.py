import dataclasses
import json
import os

import numpy as np
import pytest

import tinyqat.harness as H
from tinyqat.data import SyntheticTaskSpec, crop_tokens, generate_task
from tinyqat.harness import (ConfigError, ExperimentConfig, KdConfig,
                             QuantConfig, RunAbort, build_soft_label_cache,
                             evaluate, load_config, run_qat, teacher_config,
                             train_teacher)
from tinyqat.losses import SoftLabelCache, kd_loss, mckd_loss
from tinyqat.model import TinyTransformer, TransformerConfig, load_checkpoint
from tinyqat.optim import OptimConfig
from tinyqat.tensor import Tensor, no_grad


def tiny_config(**kw):
    base = ExperimentConfig(
        seed=3, epochs=2, batch_size=16,
        model=TransformerConfig(layers=1, heads=1, dim=8, ffn_ratio=2, vocab=16,
                                classes=2, seq_len=8),
        data=SyntheticTaskSpec(vocab=16, seq_len=8, classes=2, motif_len=3,
                               train_size=32, eval_size=16),
        quant=QuantConfig(global_bits=3),
        kd=KdConfig(mode="none", hard_label_fallback=True),
        optim=OptimConfig(lr=1e-3),
    )
    return dataclasses.replace(base, **kw)


# -- config handling ---------------------------------------------------------------

def test_config_roundtrip_identity():
    cfg = tiny_config()
    assert ExperimentConfig.from_dict(cfg.to_dict()) == cfg
    as_json = json.dumps(cfg.to_dict())
    assert ExperimentConfig.from_dict(json.loads(as_json)) == cfg


def test_config_rejects_unknown_keys():
    doc = tiny_config().to_dict()
    doc["learning_rate"] = 1.0
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict(doc)
    doc = tiny_config().to_dict()
    doc["optim"]["momentum"] = 0.9
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict(doc)


def test_load_config_errors(tmp_path):
    with pytest.raises(ConfigError):
        load_config(str(tmp_path / "missing.json"))
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigError):
        load_config(str(bad))


def test_kd_mode_validation(tmp_path):
    cfg = tiny_config(kd=KdConfig(mode="none", hard_label_fallback=False))
    with pytest.raises(ConfigError):
        run_qat(cfg, str(tmp_path / "r"))
    cfg = tiny_config(kd=KdConfig(mode="vanilla"))
    with pytest.raises(ConfigError):
        run_qat(cfg, str(tmp_path / "r2"))
    cfg = tiny_config(kd=KdConfig(mode="multi-crop"))
    with pytest.raises(ConfigError):
        run_qat(cfg, str(tmp_path / "r3"))


def test_model_data_consistency_checked(tmp_path):
    cfg = tiny_config(data=SyntheticTaskSpec(vocab=32, seq_len=8, classes=2,
                                             motif_len=3, train_size=32,
                                             eval_size=16))
    with pytest.raises(ConfigError):
        run_qat(cfg, str(tmp_path / "r"))


# -- run directory protocol ----------------------------------------------------------

def test_run_directory_contents(tmp_path):
    out = str(tmp_path / "run")
    metrics = run_qat(tiny_config(), out)
    for name in ("config.json", "policy.json", "diagnostics.csv", "metrics.json",
                 "timing.json", "model.bin", "model.json"):
        assert os.path.exists(os.path.join(out, name)), name
    echoed = load_config(os.path.join(out, "config.json"))
    assert echoed == tiny_config()
    with open(os.path.join(out, "metrics.json")) as f:
        assert json.load(f) == metrics
    assert set(metrics) == {"top1", "topk", "oscillating_pct_final",
                            "sdam_final", "mean_bin_variance_final"}
    with open(os.path.join(out, "diagnostics.csv")) as f:
        header = f.readline().strip()
    assert header == "iteration,oscillating_pct,sdam,obr_loss,kd_loss,lambda,train_acc,eval_acc"


def test_policy_echo_lists_quantizers(tmp_path):
    out = str(tmp_path / "run")
    run_qat(tiny_config(), out)
    with open(os.path.join(out, "policy.json")) as f:
        entries = json.load(f)
    sites = {e["site"] for e in entries}
    assert "layer0.attn.q.h0.weight" in sites
    assert all(e["scale"] > 0 for e in entries)
    by_site = {e["site"]: e for e in entries}
    assert by_site["embed.weight"]["bits"] == 8
    assert by_site["layer0.ffn.fc1.weight"]["bits"] == 3


def test_identical_runs_are_byte_identical(tmp_path):
    out1, out2 = str(tmp_path / "a"), str(tmp_path / "b")
    run_qat(tiny_config(), out1)
    run_qat(tiny_config(), out2)
    for name in ("metrics.json", "diagnostics.csv", "config.json", "model.bin"):
        with open(os.path.join(out1, name), "rb") as f:
            b1 = f.read()
        with open(os.path.join(out2, name), "rb") as f:
            b2 = f.read()
        assert b1 == b2, name


def test_lambda_zero_never_touches_regularizer(tmp_path, monkeypatch):
    out1 = str(tmp_path / "normal")
    run_qat(tiny_config(), out1)

    def boom(*a, **k):
        raise AssertionError("obr_loss must not run when lambda stays 0")

    monkeypatch.setattr(H, "obr_loss", boom)
    out2 = str(tmp_path / "disabled")
    run_qat(tiny_config(), out2)
    for name in ("metrics.json", "diagnostics.csv"):
        with open(os.path.join(out1, name), "rb") as f:
            b1 = f.read()
        with open(os.path.join(out2, name), "rb") as f:
            b2 = f.read()
        assert b1 == b2


def test_fp_run_reports_no_oscillation(tmp_path):
    metrics = train_teacher(tiny_config(), str(tmp_path / "t"))
    assert metrics["oscillating_pct_final"] == 0.0
    assert metrics["mean_bin_variance_final"] == 0.0


def test_teacher_config_derivation():
    derived = teacher_config(tiny_config(), epochs=7, lr=2e-3)
    assert derived.quant.global_bits is None
    assert derived.kd.mode == "none" and derived.kd.hard_label_fallback
    assert derived.epochs == 7
    assert derived.optim.lr == 2e-3
    assert derived.obr.lambda_end == 0.0


# -- soft-label cache -----------------------------------------------------------------

@pytest.fixture(scope="module")
def tiny_teacher(tmp_path_factory):
    out = str(tmp_path_factory.mktemp("teacher") / "run")
    cfg = tiny_config()
    train_teacher(cfg, out)
    return cfg, os.path.join(out, "model")


def test_cache_build_counts_and_distributions(tiny_teacher, tmp_path):
    cfg, ckpt = tiny_teacher
    path = str(tmp_path / "cache.jsonl")
    cache = build_soft_label_cache(cfg, ckpt, path, crops=3)
    assert len(cache) == cfg.data.train_size * 3
    assert cache.crops_per_sample == 3
    for entry in cache.entries.values():
        assert abs(entry.probs.sum() - 1.0) < 1e-9
        assert entry.length == cfg.model.seq_len // 2


def test_cache_full_crop_equals_plain_inference(tiny_teacher, tmp_path):
    cfg, ckpt = tiny_teacher
    path = str(tmp_path / "cache.jsonl")
    cache = build_soft_label_cache(cfg, ckpt, path, crops=1,
                                   crop_len=cfg.model.seq_len)
    teacher = TinyTransformer(cfg.model, seed=cfg.seed)
    teacher.load_state(load_checkpoint(ckpt))
    train, _ = generate_task(cfg.data, cfg.seed)
    with no_grad():
        logits = teacher.forward(np.stack([s.tokens for s in train])).data
    e = np.exp(logits - logits.max(-1, keepdims=True))
    probs = e / e.sum(-1, keepdims=True)
    for i, sample in enumerate(train):
        entry = cache.get(sample.sample_id, 0)
        assert entry.offset == 0
        np.testing.assert_allclose(entry.probs, probs[i], atol=1e-12)


def test_cached_vs_live_mckd_loss(tiny_teacher, tmp_path):
    cfg, ckpt = tiny_teacher
    path = str(tmp_path / "cache.jsonl")
    build_soft_label_cache(cfg, ckpt, path, crops=2)
    cache = SoftLabelCache.load(path)
    teacher = TinyTransformer(cfg.model, seed=cfg.seed)
    teacher.load_state(load_checkpoint(ckpt))
    student = TinyTransformer(cfg.model, seed=cfg.seed + 1)
    train, _ = generate_task(cfg.data, cfg.seed)
    batch = train[:8]
    m = 2
    tokens, live_probs = [], []
    with no_grad():
        for sample in batch:
            for j in range(m):
                entry = cache.get(sample.sample_id, j)
                crop = crop_tokens(sample.tokens, entry.offset, entry.length,
                                   cfg.model.seq_len, cfg.model.pad_id)
                tokens.append(crop)
                z = teacher.forward(crop[None, :]).data[0]
                ez = np.exp(z - z.max())
                live_probs.append(ez / ez.sum())
        logits = student.forward(np.stack(tokens)).data
    cached = mckd_loss(Tensor(logits.reshape(8, m, -1)),
                       [s.sample_id for s in batch], cache).item()
    live = kd_loss(Tensor(logits), np.stack(live_probs)).item()
    assert abs(cached - live) < 1e-6


def test_mckd_run_and_cache_miss_abort(tiny_teacher, tmp_path):
    cfg, ckpt = tiny_teacher
    path = str(tmp_path / "cache.jsonl")
    build_soft_label_cache(cfg, ckpt, path, crops=2)
    student_cfg = dataclasses.replace(
        tiny_config(), epochs=1,
        kd=KdConfig(mode="multi-crop", crops=2, cache_path=path),
        init_checkpoint=ckpt)
    out = str(tmp_path / "student")
    metrics = run_qat(student_cfg, out)
    assert 0.0 <= metrics["top1"] <= 100.0

    # truncated cache: run starts, then aborts with the checkpoint preserved
    lines = open(path).read().splitlines()
    short = str(tmp_path / "short.jsonl")
    with open(short, "w") as f:
        f.write("\n".join(lines[: len(lines) // 4]) + "\n")
    bad_cfg = dataclasses.replace(student_cfg,
                                  kd=KdConfig(mode="multi-crop", crops=2,
                                              cache_path=short))
    out2 = str(tmp_path / "aborted")
    with pytest.raises(RunAbort):
        run_qat(bad_cfg, out2)
    assert os.path.exists(os.path.join(out2, "abort.json"))
    assert os.path.exists(os.path.join(out2, "model.bin"))
    assert not os.path.exists(os.path.join(out2, "metrics.json"))


def test_vanilla_kd_run(tiny_teacher, tmp_path):
    cfg, ckpt = tiny_teacher
    student_cfg = dataclasses.replace(
        tiny_config(), epochs=1,
        kd=KdConfig(mode="vanilla", teacher_checkpoint=ckpt),
        init_checkpoint=ckpt)
    metrics = run_qat(student_cfg, str(tmp_path / "vanilla"))
    assert "top1" in metrics


def test_missing_teacher_checkpoint_is_config_error(tmp_path):
    cfg = tiny_config(kd=KdConfig(mode="vanilla",
                                  teacher_checkpoint=str(tmp_path / "nope")))
    with pytest.raises(ConfigError):
        run_qat(cfg, str(tmp_path / "x"))


# -- evaluation and reporting ---------------------------------------------------------

def test_evaluate_perfect_and_random_bounds():
    cfg = tiny_config()
    model = TinyTransformer(cfg.model, seed=0)
    train, evalset = generate_task(cfg.data, cfg.seed)
    top1, topk = evaluate(model, None, evalset, topk=2)
    assert 0.0 <= top1 <= topk <= 100.0


def test_report_collection(tmp_path):
    runs = tmp_path / "runs"
    run_qat(tiny_config(), str(runs / "run_a"))
    run_qat(tiny_config(obr=dataclasses.replace(tiny_config().obr,
                                                lambda_end=0.1)),
            str(runs / "run_b"))
    (runs / "not_a_run").mkdir()
    rows = H.collect_report(str(runs))
    assert [r["run"] for r in rows] == ["run_a", "run_b"]
    assert rows[0]["lambda_end"] == 0.0 and rows[1]["lambda_end"] == 0.1
    text = H.write_report(rows)
    lines = text.strip().split("\n")
    assert lines[0].startswith("run\tkd_mode\tbits\tlambda_end\ttop1")
    assert len(lines) == 3
