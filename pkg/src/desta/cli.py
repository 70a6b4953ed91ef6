"""Command-line entry point.

Subcommands: ``caption-gen``, ``train``, ``eval`` and ``make-toy``.

Exit codes: 0 success, 1 usage or input error, 2 data-quality failure,
3 numeric failure (non-finite loss).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import yaml

from . import checkpoint as ckpt
from .captions import (DatasetManifest, OfflineParaphraser, RecordError, RemoteGenerator, compute_manifest_stats,
                       format_stats_table, generate_dataset, load_prompts, load_templates, read_jsonl, write_jsonl)
from .captions.generators import ENDPOINT_ENV, GeneratorError
from .captions.records import CaptionRecord, MetadataRecord
from .config import ConfigError, ProjectConfig, dump_config, load_config
from .encoder import TranscriptStore
from .evaluation import (DEFAULT_SCALES, TaskError, aggregate, evaluate_tasks, format_eval_table, format_sweep_table,
                         lora_scale_sweep, read_tasks, sweep_records)
from .runtime import EncodingCache, FeatureSource, Responder, build_examples, build_model
from .seeding import derive_seed
from .trainer import FrozenParameterChanged, NonFiniteLossError, assemble_input, fit, load_trainable

log = logging.getLogger("desta")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


def _load_cfg(args) -> ProjectConfig:
    cfg = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    log.info("resolved config: %s", dump_config(cfg))
    return cfg


def _require_file(path, what: str) -> Path:
    if path is None:
        raise UsageError(f"missing {what} path")
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{what} not found: {p}")
    return p


def _metadata(args, cfg: ProjectConfig) -> list[MetadataRecord]:
    path = _require_file(getattr(args, "metadata", None) or cfg.paths.metadata, "metadata")
    return read_jsonl(path, MetadataRecord)


def _features(args, cfg: ProjectConfig, metadata: list[MetadataRecord]) -> FeatureSource:
    fdir = getattr(args, "features_dir", None) or cfg.paths.features_dir
    return FeatureSource({m.audio_id: m for m in metadata}, cfg.encoder.frames, cfg.encoder.feature_dim,
                         fdir, derive_seed(cfg.seed, "features"))


# ---------------------------------------------------------------------------


def cmd_caption_gen(args) -> int:
    cfg = _load_cfg(args)
    metadata = read_jsonl(_require_file(args.metadata or cfg.paths.metadata, "metadata"), MetadataRecord)
    pcfg = cfg.pipeline
    if pcfg.generator == "remote":
        generator = RemoteGenerator(os.environ.get(ENDPOINT_ENV) or pcfg.endpoint, pcfg.timeout_s, pcfg.retries)
    else:
        generator = OfflineParaphraser()
    n = args.n if args.n is not None else pcfg.captions_per_audio
    captions, skips = generate_dataset(metadata, load_prompts(pcfg.prompts_path), load_templates(pcfg.templates_path),
                                       n=n, generator=generator, seed=derive_seed(cfg.seed, "pipeline"))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_jsonl(out, captions)
    manifest = DatasetManifest.from_metadata(captions, metadata)
    stats = compute_manifest_stats(manifest)
    per_source = {src: m.stats for src, m in manifest.split_by_source().items()}
    summary = {"stats": stats.as_dict(), "sources": manifest.sources,
               "per_source": {k: v.as_dict() for k, v in per_source.items()},
               "requested": n * len(metadata), "skipped": len(skips),
               "skips": [list(e) for e in skips.entries]}
    Path(str(out) + ".stats.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(format_stats_table({**per_source, "Total": stats}))
    print(json.dumps({"stats": stats.as_dict(), "skipped": len(skips)}, sort_keys=True))
    requested = max(1, n * len(metadata))
    if len(skips) / requested > pcfg.max_skip_ratio:
        print(f"error: {len(skips)}/{requested} draws skipped (max ratio {pcfg.max_skip_ratio})", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


def _instruct_examples(model, tasks, store, encodings):
    prefix_len = model.prefix_length()
    out = []
    for t in sorted(tasks, key=lambda t: t.instance_id):
        if t.split != "seen":
            continue
        for s in t.samples:
            out.append(assemble_input(encodings(s.audio_id), store.lookup(s.audio_id), s.instruction, s.label,
                                      tokenizer=model.tokenizer, prefix_len=prefix_len,
                                      max_seq_len=model.lm.config.max_seq_len, audio_id=s.audio_id))
    return out


def cmd_train(args) -> int:
    cfg = _load_cfg(args)
    if args.adapter:
        cfg.adapter = replace(cfg.adapter, kind=args.adapter)
    profile = "trainer_instruct" if args.tasks else "trainer"
    if args.tasks is None:
        _require_file(args.manifest, "manifest")
    metadata = _metadata(args, cfg)
    store = TranscriptStore.from_records(metadata)
    model = build_model(cfg)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(dump_config(cfg) + "\n", encoding="utf-8")
    ckpt.save_parameters(out / "backbone.ckpt", [(n, p) for n, p in model.named_parameters() if p.frozen],
                         meta={"kind": "backbone"})
    encodings = EncodingCache(model, _features(args, cfg, metadata))
    if args.tasks:
        examples = _instruct_examples(model, read_tasks(_require_file(args.tasks, "tasks")), store, encodings)
    else:
        captions = read_jsonl(args.manifest, CaptionRecord)
        sec = getattr(cfg, profile)
        examples = build_examples(model, captions, store, encodings, sec.caption_prompts,
                                  derive_seed(cfg.seed, "examples"))
    if not examples:
        raise UsageError("no training examples")
    overrides = {}
    for key in ("lr_max", "batch_size", "epochs", "max_steps"):
        value = getattr(args, key, None)
        if value is not None:
            overrides[key] = value
    if args.overfit_one_batch:
        overrides.setdefault("max_steps", 500)
        overrides["stop_loss"] = args.target_loss
        overrides["overfit_one_batch"] = True
        overrides.setdefault("lr_min", 0.0)
    tcfg = cfg.trainer_config(profile, **overrides)

    def progress(rec):
        if rec["step"] % 25 == 0:
            log.info("step %d lr %.3g loss %.4f grad_norm %.3f", rec["step"], rec["lr"], rec["loss"], rec["grad_norm"])

    if args.init:
        load_trainable(_require_file(args.init, "init checkpoint"), model)
    result = fit(examples, model, tcfg, out_dir=out, resume=args.resume, on_step=progress)
    if not result.losses:
        raise UsageError("no optimisation steps were run (resumed past the configured epochs?)")
    final = result.losses[-1]
    summary = {"steps": result.step, "epochs": result.epoch, "final_loss": final,
               "checkpoints": [str(p) for p in result.checkpoints], "num_examples": len(examples)}
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    print(json.dumps(summary))
    if args.overfit_one_batch and not final < args.target_loss:
        print(f"error: overfit loss {final:.4f} did not reach {args.target_loss}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


def _parse_scales(text: str) -> list[float]:
    try:
        scales = [float(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise UsageError(f"cannot parse scales {text!r}") from None
    return scales


def _check_scale(s: float) -> None:
    if not 0.0 <= s <= 1.0:
        raise UsageError(f"LoRA scale {s} outside [0, 1]")


def cmd_eval(args) -> int:
    cfg = _load_cfg(args)
    scales = None
    if args.sweep is not None:
        scales = _parse_scales(args.sweep) if args.sweep else list(DEFAULT_SCALES)
        for s in scales:
            _check_scale(s)
    if args.lora_scale is not None:
        _check_scale(args.lora_scale)
    tasks = read_tasks(_require_file(args.tasks or cfg.paths.tasks, "tasks"))
    metadata = _metadata(args, cfg)
    store = TranscriptStore.from_records(metadata)
    model = build_model(cfg)
    if args.checkpoint:
        load_trainable(_require_file(args.checkpoint, "checkpoint"), model)
    encodings = EncodingCache(model, _features(args, cfg, metadata))
    respond = Responder(model, store, encodings, cfg.eval.max_new_tokens)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if scales is not None:
        rows = lora_scale_sweep(model, tasks, scales, respond)
        for s, r in rows:
            if r.identity_gap() > 1e-9:
                raise ArithmeticError(f"success != accuracy * following / 100 at scale {s}")
        write_jsonl_dicts(out / "sweep.jsonl", sweep_records(rows))
        table = format_sweep_table(rows)
        (out / "sweep.txt").write_text(table + "\n", encoding="utf-8")
        print(table)
        return EXIT_OK
    model.set_lora_scale(args.lora_scale if args.lora_scale is not None else cfg.lora.test_scale)
    report = aggregate(evaluate_tasks(tasks, respond))
    (out / "report.json").write_text(json.dumps(report.as_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    table = format_eval_table(report, cfg.adapter.kind)
    (out / "report.txt").write_text(table + "\n", encoding="utf-8")
    print(table)
    return EXIT_OK


def write_jsonl_dicts(path: Path, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in rows:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


TOY_CONFIG = {
    "seed": 0,
    "encoder": {"num_layers": 4, "dim": 16, "frames": 50, "feature_dim": 8},
    "adapter": {"kind": "qformer", "qformer_dim": 32, "num_queries": 32, "num_blocks": 2, "num_heads": 4},
    "lm": {"num_layers": 2, "num_heads": 4, "d_model": 32, "max_seq_len": 256},
    "lora": {"rank": 8, "alpha": 8.0},
    "trainer": {"lr_max": 0.01, "lr_min": 0.0005, "epochs": 5, "batch_size": 12},
    "trainer_instruct": {"lr_max": 0.005, "lr_min": 0.0005, "epochs": 2, "batch_size": 12},
    "eval": {"max_new_tokens": 12},
}


def cmd_make_toy(args) -> int:
    from .synthetic import write_toy_corpus

    cfg = dict(TOY_CONFIG, seed=args.seed)
    out = Path(args.out_dir)
    paths = write_toy_corpus(out, n=args.n, seed=args.seed, frames=cfg["encoder"]["frames"],
                             feature_dim=cfg["encoder"]["feature_dim"])
    cfg["paths"] = {"metadata": str(paths["metadata"]), "features_dir": str(paths["features"]),
                    "tasks": str(paths["tasks"])}
    (out / "config.yaml").write_text(yaml.safe_dump(cfg, sort_keys=False), encoding="utf-8")
    print(json.dumps({k: str(v) for k, v in paths.items()} | {"config": str(out / "config.yaml")}))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="desta", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="YAML project config")
        sp.add_argument("--seed", type=int, help="override the config seed")

    sp = sub.add_parser("caption-gen", help="generate a caption manifest from metadata")
    common(sp)
    sp.add_argument("--metadata")
    sp.add_argument("--out", required=True)
    sp.add_argument("--n", type=int, help="captions per audio")
    sp.set_defaults(func=cmd_caption_gen)

    sp = sub.add_parser("train", help="train adapter + LoRA on a caption manifest")
    common(sp)
    sp.add_argument("--manifest")
    sp.add_argument("--tasks", help="train on the seen split of a task manifest (instruction profile)")
    sp.add_argument("--metadata")
    sp.add_argument("--features-dir")
    sp.add_argument("--out-dir", required=True)
    sp.add_argument("--adapter", choices=["cnn", "qformer"])
    sp.add_argument("--resume", help="continue a run: trainable weights, optimizer state and step counter")
    sp.add_argument("--init", help="start from the trainable weights of a checkpoint with a fresh optimizer")
    sp.add_argument("--overfit-one-batch", action="store_true")
    sp.add_argument("--target-loss", type=float, default=0.1)
    sp.add_argument("--lr", dest="lr_max", type=float)
    sp.add_argument("--batch-size", type=int)
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--max-steps", type=int)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="exact-match evaluation or LoRA-scale sweep")
    common(sp)
    sp.add_argument("--checkpoint")
    sp.add_argument("--tasks")
    sp.add_argument("--metadata")
    sp.add_argument("--features-dir")
    sp.add_argument("--out-dir", required=True)
    g = sp.add_mutually_exclusive_group()
    g.add_argument("--lora-scale", type=float)
    g.add_argument("--sweep", nargs="?", const="", help="comma-separated scales (default 1.0,0.75,0.5,0.25,0.0)")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("make-toy", help="write a synthetic toy corpus and config")
    sp.add_argument("--out-dir", required=True)
    sp.add_argument("--n", type=int, default=24)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_make_toy)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except NonFiniteLossError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FrozenParameterChanged, ArithmeticError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except GeneratorError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (UsageError, ConfigError, RecordError, TaskError, FileNotFoundError, KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
