"""Acceptance criteria, one test each; every test prints one PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v -s`` to see the lines inline; they
are also repeated in the terminal summary.
"""

import json
import subprocess
import sys
import time

import numpy as np
import pytest

from conftest import caption_examples, randomize_lora, record_acceptance, toy_config
from desta.adapter import CnnAdapterConfig, QformerConfig, ModalityAdapter
from desta.captions import generate_captions, generate_dataset, load_prompts, load_templates
from desta.captions.records import to_json_line
from desta.captions.validation import load_lexicon, normalize_for_containment, validate_caption
from desta.encoder import EncoderOutput
from desta.evaluation import InstanceResult, aggregate, zero_shot_metrics
from desta.gradcheck import check_gradients_by_component
from desta.lora import LoRAConfig
from desta.model import AdapterSettings, ModelConfig, SpeechLM
from desta.runtime import frozen_digest_arrays
from desta.synthetic import make_metadata
from desta.tensor import conv1d_length, no_grad
from desta.trainer import TrainerConfig, batch_loss, component_of, cosine_lr, count_trainable_params, fit


# ---------------------------------------------------------------------------
# 1. gradient integrity


def test_01_gradient_integrity(tokenizer):
    model = SpeechLM(toy_config(tokenizer, rank=4), tokenizer)
    # B starts at zero, which would make every A gradient vanish; perturb both
    # B and the layer logits so no component is checked at a degenerate point
    randomize_lora(model, seed=3)
    rng = np.random.default_rng(3)
    model.adapter.layer_weights.logits.data[...] = rng.normal(0.0, 0.5, size=4)
    recs = make_metadata(2, seed=5)
    exs = caption_examples(model, recs, ["A speaker says hi.", "A low voice, fast pace."])
    start = time.perf_counter()
    res = check_gradients_by_component(lambda: batch_loss(model, exs),
                                       [(n, p) for n, p in model.named_parameters() if not p.frozen],
                                       component_of, samples_per_component=20)
    elapsed = time.perf_counter() - start
    per = {}
    for r in res:
        c = per.setdefault(r["component"], [0, 0.0])
        c[0] += 1
        c[1] = max(c[1], r["strict_rel_error"])
    sizes = {c: sum(p.data.size for n, p in model.named_parameters() if not p.frozen and component_of(n) == c)
             for c in per}
    enough = all(per[c][0] >= min(20, sizes[c]) for c in per)
    worst = max(v[1] for v in per.values())
    ok = worst < 1e-4 and elapsed < 120 and enough and set(per) == {"layer_weights", "adapter", "projection", "lora"}
    detail = ", ".join(f"{c} n={v[0]} max_rel={v[1]:.1e}" for c, v in sorted(per.items()))
    record_acceptance(1, "gradient integrity", ok, f"{detail}; {elapsed:.1f}s")
    assert ok


# ---------------------------------------------------------------------------
# 2. LoRA removal


def _random_inputs(model, n, seed):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        feats = rng.normal(size=(50, 8))
        ids = rng.integers(0, 256, size=int(rng.integers(3, 24))).tolist()
        out.append((model.encode(feats), ids))
    return out


def test_02_lora_removal(tokenizer):
    base = SpeechLM(toy_config(tokenizer, lora=False), tokenizer)
    trained = SpeechLM(toy_config(tokenizer), tokenizer)
    randomize_lora(trained, seed=11, std=0.5)
    fresh = SpeechLM(toy_config(tokenizer), tokenizer)
    inputs = _random_inputs(base, 100, seed=2)
    worst_zero = worst_fresh = 0.0
    changed = 0
    with no_grad():
        for i, (enc, ids) in enumerate(inputs):
            ref = base.logits(enc, ids).data
            trained.set_lora_scale(0.0)
            worst_zero = max(worst_zero, float(np.max(np.abs(trained.logits(enc, ids).data - ref))))
            trained.set_lora_scale(1.0)
            changed += bool(np.any(trained.logits(enc, ids).data != ref))
            fresh.set_lora_scale([0.25, 0.5, 1.0][i % 3])
            worst_fresh = max(worst_fresh, float(np.max(np.abs(fresh.logits(enc, ids).data - ref))))
    # the s=1 comparison guards against a LoRA branch that is silently inert
    ok = worst_zero == 0.0 and worst_fresh == 0.0 and changed == 100
    record_acceptance(2, "LoRA removal", ok,
                      f"max|diff| s=0: {worst_zero:g}, fresh B=0: {worst_fresh:g} over 100 inputs; "
                      f"s=1 differs on {changed}/100")
    assert ok


# ---------------------------------------------------------------------------
# 3. frozen contract


def test_03_frozen_contract(tokenizer):
    model = SpeechLM(toy_config(tokenizer, kind="cnn"), tokenizer)
    recs = make_metadata(4, seed=7)
    exs = caption_examples(model, recs, [r.transcript for r in recs])
    before = frozen_digest_arrays(model)
    trainable_before = model.trainable_state()
    result = fit(exs, model, TrainerConfig(lr_max=1e-2, batch_size=4, overfit_one_batch=True, max_steps=500))
    after = frozen_digest_arrays(model)
    moved = sum(not np.array_equal(v, model.trainable_state()[k]) for k, v in trainable_before.items())
    scopes = {k.split(".")[0] for k in before}
    ok = result.step == 500 and before == after and scopes == {"encoder", "lm"} and moved > 0
    record_acceptance(3, "frozen contract", ok,
                      f"{len(before)} frozen arrays in {sorted(scopes)} byte-identical after {result.step} steps; "
                      f"{moved} trainable arrays moved")
    assert ok


# ---------------------------------------------------------------------------
# 4. shape contracts


def _enc(frames, dim=16, layers=4):
    return EncoderOutput(np.random.default_rng(frames).normal(size=(layers, frames, dim)))


def test_04_shape_contracts():
    rng = np.random.default_rng(0)
    cnn_cfg = CnnAdapterConfig(in_dim=16, mid_dim=24, out_dim=32, kernel=5, stride=5, padding=0, num_layers=2)
    cnn = ModalityAdapter("cnn", 4, cnn_cfg, rng)
    q = ModalityAdapter("qformer", 4, QformerConfig(in_dim=16, d_model=32, out_dim=32, num_queries=64), rng)
    lines, ok = [], True
    with no_grad():
        for t in (25, 100, 305, 1500):
            expect = conv1d_length(conv1d_length(t, 5, 5, 0), 5, 5, 0)
            got = cnn(_enc(t)).shape
            ok &= got == (expect, 32)
            lines.append(f"cnn T={t}->{got[0]}")
        ok &= cnn(_enc(1500)).shape[0] == 60
        for t in (7, 64, 100, 1500):
            got = q(_enc(t)).shape
            ok &= got == (64, 32)
            lines.append(f"qformer T={t}->{got[0]}")
    record_acceptance(4, "shape contracts", bool(ok), ", ".join(lines))
    assert ok


# ---------------------------------------------------------------------------
# 5. overfit smoke


def test_05_overfit_smoke(tokenizer):
    # 32 queries and rank 8 at lr 2e-2: the smallest setting that converged
    # reliably in 500 steps on this batch (see the decisions ledger)
    cfg = ModelConfig(
        encoder=toy_config(tokenizer).encoder,
        adapter=AdapterSettings(kind="qformer", qformer_dim=32, num_queries=32),
        lm=toy_config(tokenizer).lm,
        lora=LoRAConfig(rank=8, alpha=8.0),
    )
    model = SpeechLM(cfg, tokenizer)
    recs = make_metadata(4, seed=7)
    caps = [generate_captions(r, load_prompts(), load_templates(), n=1, seed=0)[0].caption for r in recs]
    exs = caption_examples(model, recs, caps)
    start = time.perf_counter()
    result = fit(exs, model, TrainerConfig(lr_max=2e-2, lr_min=2e-3, batch_size=4, overfit_one_batch=True,
                                           max_steps=500, stop_loss=0.1))
    hits = 0
    for ex, cap in zip(exs, caps):
        out = model.generate(ex.adapter_input, ex.transcript_tokens + ex.prompt_tokens, len(ex.target_tokens) + 8)
        hits += tokenizer.decode(out) == cap
    elapsed = time.perf_counter() - start
    final = result.losses[-1]
    ok = final < 0.1 and result.step <= 500 and hits >= 3 and elapsed < 300
    record_acceptance(5, "overfit smoke", ok,
                      f"loss {final:.4f} after {result.step} steps, {hits}/4 verbatim, {elapsed:.0f}s")
    assert ok


# ---------------------------------------------------------------------------
# 6. metric replay

SWEEP_ROWS = [  # (alpha, published success, accuracy, following)
    (0.75, 38.25, 71.00, 53.88),
    (0.50, 69.75, 70.72, 98.63),
    (0.25, 68.83, 68.63, 100.00),
    (0.00, 62.63, 62.63, 100.00),
]
# Qformer + speech-text alignment row and the "# Instances" weights
INSTRUCT_SEEN = {"CON": (95.00, 9), "SEM": (67.50, 2), "PAR": (74.38, 4), "DEG": (71.25, 6), "SPK": (59.00, 3)}
INSTRUCT_UNSEEN = {"CON": (74.50, 2), "SEM": (75.75, 4), "PAR": (20.33, 3), "DEG": (57.54, 13), "SPK": (46.50, 2)}
INSTRUCT_TARGETS = {"seen": 80.15, "unseen": 56.42, "all": 67.63}
N_REPLAY = 100_000


def replay_table3(accuracy, following, n=N_REPLAY):
    follow = round(following / 100 * n)
    correct = round(accuracy / 100 * follow)
    responses = ([{"text": "yes", "label": "yes"}] * correct + [{"text": "yes", "label": "no"}] * (follow - correct)
                 + [{"text": "I think so", "label": "yes"}] * (n - follow))
    return zero_shot_metrics(responses)


def replay_table1():
    results = []
    for split, row in (("seen", INSTRUCT_SEEN), ("unseen", INSTRUCT_UNSEEN)):
        for dim, (acc, count) in row.items():
            results += [InstanceResult(f"{split}-{dim}-{i}", dim, split, acc) for i in range(count)]
    rep = aggregate(results)
    return {"seen": rep.split_average["seen"], "unseen": rep.split_average["unseen"], "all": rep.overall_average}


def test_06_metric_replay():
    checks = []
    for alpha, target, acc, fol in SWEEP_ROWS:
        got = replay_table3(acc, fol).success_rate
        checks.append((f"sweep a={alpha:.2f}", got, target))
    for key, got in replay_table1().items():
        checks.append((f"instruct {key}", got, INSTRUCT_TARGETS[key]))
    bad = [c for c in checks if abs(c[1] - c[2]) > 0.05]
    ok = not bad
    detail = f"{len(checks) - len(bad)}/{len(checks)} within 0.05"
    if bad:
        detail += "; off: " + ", ".join(f"{n} {g:.2f} vs {t:.2f}" for n, g, t in bad)
        detail += " (published rows are arithmetically inconsistent here; see decisions ledger)"
    record_acceptance(6, "metric replay", ok, detail)
    assert ok, detail


# ---------------------------------------------------------------------------
# 7. pipeline determinism and safety


def test_07_pipeline_determinism_and_safety():
    recs = make_metadata(40, seed=9)
    prompts, templates = load_prompts(), load_templates()
    runs = []
    for _ in range(2):
        caps, _ = generate_dataset(recs, prompts, templates, n=3, seed=123)
        runs.append("".join(to_json_line(c) + "\n" for c in caps).encode())
    identical = runs[0] == runs[1]
    caps, _ = generate_dataset(recs, prompts, templates, n=3, seed=123)
    by_id = {r.audio_id: r for r in recs}
    lex = load_lexicon()
    no_tx = no_tx_rejected = contra = contra_rejected = 0
    for c in caps:
        rec = by_id[c.audio_id]
        stripped = normalize_for_containment(c.caption).replace(normalize_for_containment(rec.transcript), "")
        no_tx += 1
        no_tx_rejected += not validate_caption(stripped, rec).passed
        for term in lex["gender"].get(rec.gender, ()):
            contra += 1
            contra_rejected += not validate_caption(f"{c.caption} The voice is clearly {term}.", rec).passed
    ok = identical and no_tx and contra and no_tx_rejected == no_tx and contra_rejected == contra
    record_acceptance(7, "pipeline determinism and safety", ok,
                      f"byte-identical={identical} ({len(runs[0])} bytes); transcript-removed rejected "
                      f"{no_tx_rejected}/{no_tx}; gender-contradiction rejected {contra_rejected}/{contra}")
    assert ok


# ---------------------------------------------------------------------------
# 8. cosine schedule


def test_08_cosine_schedule():
    cfg = TrainerConfig(lr_max=3e-4, lr_min=1e-5, warmup_steps=0)
    total = 1000
    start, end, mid = cosine_lr(0, total, cfg), cosine_lr(total, total, cfg), cosine_lr(total // 2, total, cfg)
    ok = start == cfg.lr_max and end == cfg.lr_min and abs(mid - (cfg.lr_max + cfg.lr_min) / 2) < 1e-12
    record_acceptance(8, "cosine schedule", ok, f"lr(0)={start!r} lr(T)={end!r} lr(T/2)={mid!r}")
    assert ok


# ---------------------------------------------------------------------------
# 9. parameter accounting

# Hand count for the toy config: encoder L=4 D=16; Q-former d=32, 64 queries,
# 2 blocks, 4 heads, FFN 4x, attention without bias; LM d=32, 2 layers; r=4.
#   layer_weights             4
#   queries                   64*32                              = 2048
#   per block  3 LayerNorms   3*(32+32)                          = 192
#              self-attn      4*32*32                            = 4096
#              cross-attn     q,o 2*32*32 + k,v 2*16*32          = 3072
#              FFN            32*128+128 + 128*32+32             = 8352
#              block total                                       = 15712
#   two blocks                                                   = 31424
#   ln_out                    32+32                              = 64
#   adapter body              2048+31424+64                      = 33536
#   projection                32*32+32                           = 1056
#   LoRA                      2 layers * 3 targets * 4 * (32+32) = 1536
#   total                                                        = 36132
HAND_QFORMER = {"layer_weights": 4, "adapter": 33536, "projection": 1056, "lora": 1536, "total": 36132}
# CNN variant (mid 32, kernel 5, 2 convs 16->16->32):
#   conv0 16*16*5+16 = 1296, conv1 32*16*5+32 = 2592 -> 3888
HAND_CNN = {"layer_weights": 4, "adapter": 3888, "projection": 1056, "lora": 1536, "total": 6484}


def test_09_parameter_accounting(tokenizer):
    got_q = count_trainable_params(SpeechLM(toy_config(tokenizer), tokenizer))
    got_c = count_trainable_params(SpeechLM(toy_config(tokenizer, kind="cnn"), tokenizer))
    lora_formula = 2 * 3 * 4 * (32 + 32)
    ok = got_q == HAND_QFORMER and got_c == HAND_CNN and got_q["lora"] == lora_formula
    record_acceptance(9, "parameter accounting", ok, f"qformer {got_q}; cnn total {got_c['total']}")
    assert ok


# ---------------------------------------------------------------------------
# 10. end-to-end desk demo


def _cli(*args):
    return subprocess.run([sys.executable, "-m", "desta.cli", *map(str, args)], capture_output=True, text=True)


def test_10_end_to_end_demo(tmp_path):
    start = time.perf_counter()
    steps = [
        ("make-toy", "--out-dir", tmp_path, "--n", 24),
        ("caption-gen", "--config", tmp_path / "config.yaml", "--out", tmp_path / "manifest.jsonl"),
        ("train", "--config", tmp_path / "config.yaml", "--manifest", tmp_path / "manifest.jsonl",
         "--out-dir", tmp_path / "run", "--epochs", 5),
        ("eval", "--config", tmp_path / "config.yaml", "--checkpoint", tmp_path / "run" / "epoch5.ckpt",
         "--out-dir", tmp_path / "eval", "--sweep"),
    ]
    codes = []
    for s in steps:
        proc = _cli(*s)
        codes.append(proc.returncode)
        if proc.returncode:
            break
    elapsed = time.perf_counter() - start
    rows = []
    sweep = tmp_path / "eval" / "sweep.jsonl"
    if sweep.exists():
        rows = [json.loads(line) for line in sweep.read_text().splitlines()]
    identity = all(
        abs(r["success_rate"] - (r["accuracy"] or 0.0) * r["following_rate"] / 100) < 1e-9 for r in rows)
    header = (tmp_path / "eval" / "sweep.txt").read_text().splitlines()[0].split() if rows else []
    ok = (codes == [0, 0, 0, 0] and elapsed < 900 and [r["scale"] for r in rows] == [1.0, 0.75, 0.5, 0.25, 0.0]
          and identity and header[:2] == ["alpha", "Success"])
    record_acceptance(10, "end-to-end desk demo", ok,
                      f"exit codes {codes}, {len(rows)} sweep rows, identity holds={identity}, {elapsed:.0f}s")
    assert ok
