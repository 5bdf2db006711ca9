"""Command-line entry points.

Exit codes: 0 success, 1 runtime failure, 2 configuration or usage error.
"""
from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from . import config as config_mod
from . import pipeline
from .evaluation import evaluate, per_sample_csv
from .model import MicroDiT
from .sampling import BRANCHES, sample_many, unique_branches
from .synthdata import World, manifest_digest
from .tensorfile import FormatError, atomic_write
from .training import TrainingData, trainable_names


class UsageError(Exception):
    pass


def _load_config(args) -> config_mod.RunConfig:
    cfg = config_mod.load(args.config) if args.config else config_mod.RunConfig()
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.out is not None:
        cfg = replace(cfg, paths=replace(cfg.paths, out=args.out))
    return cfg


def _out(cfg) -> Path:
    return Path(cfg.paths.out)


def _corpus(cfg):
    return pipeline.load_corpus(_out(cfg) / "corpus", cfg)


# -- commands -------------------------------------------------------------
def cmd_defaults(args) -> int:
    print(config_mod.reference_text(), end="")
    return 0


def cmd_gen_data(args) -> int:
    cfg = _load_config(args)
    from .synthdata import generate_corpus

    corpus = generate_corpus(cfg.seed, cfg.world, cfg.data.count)
    text = pipeline.save_corpus(corpus, _out(cfg) / "corpus", cfg.hash())
    print(f"generated count={len(corpus.samples)} seed={cfg.seed} config_hash={cfg.hash()} "
          f"manifest_sha256={manifest_digest(text)}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args)
    if args.stage not in (0, 1, 2):
        raise UsageError(f"--stage must be 0, 1 or 2, got {args.stage}")
    out = _out(cfg)
    if args.resume is None and args.stage > 0 and not pipeline.stage_path(out, args.stage - 1).exists():
        raise pipeline.MissingStageError(
            f"stage {args.stage} requires the stage-{args.stage - 1} checkpoint "
            f"{pipeline.stage_path(out, args.stage - 1)}; run train --stage {args.stage - 1} first")
    corpus = _corpus(cfg)
    train_idx, _ = pipeline.split(cfg, corpus)
    data = TrainingData.from_corpus(corpus, train_idx)
    model = MicroDiT(cfg.model_config())
    model_names = trainable_names(model, args.stage)
    report: dict[str, list[int]] = {}
    for n, prm in model.named_parameters():
        counts = report.setdefault(_group(n), [0, 0])
        counts[1] += prm.data.size
        counts[0] += prm.data.size if n in model_names else 0
    print(f"stage {args.stage} trainable parameters by group (trainable/total):")
    for g, (k, total) in sorted(report.items()):
        print(f"  {g}\t{k}/{total}")
    if args.verbose:
        for n in sorted(model_names):
            print(f"  trainable {n}")
    model, opt = pipeline.train_stage(cfg, data, out, args.stage, resume=args.resume, log=print,
                                      halt_at=args.halt_at)
    print(f"stage {args.stage}: step {opt.step}/{cfg.steps(args.stage)} "
          f"metrics={out / f'stage{args.stage}_metrics.tsv'}")
    return 0


def _group(name: str) -> str:
    parts = name.split(".")
    return parts[2] if parts[0] == "blocks" else parts[0]


def _parse_tokens(text: str | None):
    if text is None or text.strip().lower() in ("", "none"):
        return None
    try:
        return [int(t) for t in text.split(",")]
    except ValueError:
        raise UsageError(f"--text must be comma-separated integers, got {text!r}") from None


def _index(corpus, i: int | None, what: str):
    if i is None:
        return None
    if not 0 <= i < len(corpus.samples):
        raise IndexError(f"{what} index {i} not in corpus (0..{len(corpus.samples) - 1})")
    return corpus.samples[i]


def _sidecar(cfg, sc, seed, cond, extra: dict) -> str:
    sched = sc.schedule
    bi = unique_branches(cond)
    collapsed = [BRANCHES[b] for b in range(4) if bi[b] != b]
    lines = {
        "seed": seed,
        "num_steps": sc.num_steps,
        "switch_u": sched.switch_u,
        "early_lambdas": ",".join(map(str, sched.config_early.as_tuple())),
        "late_lambdas": ",".join(map(str, sched.config_late.as_tuple())),
        "presence": ",".join(k for k, p in zip("TIA", cond.presence) if p) or "none",
        "branches_per_step": len(set(bi)),
        "collapsed_branches": ",".join(collapsed) or "none",
        "zero_guidance_terms": ",".join(name for name, (a, b) in
                                        zip(("lambda_a", "lambda_img", "lambda_txt"), ((0, 1), (1, 2), (2, 3)))
                                        if bi[a] == bi[b]) or "none",
        "config_hash": cfg.hash(),
    }
    lines.update(extra)
    return "".join(f"{k} = {v}\n" for k, v in lines.items())


def cmd_sample(args) -> int:
    cfg = _load_config(args)
    out = _out(cfg)
    path = Path(args.checkpoint) if args.checkpoint else pipeline.stage_path(out, 2)
    model = ckpt.restore_model(ckpt.load(path, cfg.model_config()))
    corpus = _corpus(cfg)
    sc = cfg.sampler()
    dest = out / "samples"
    dest.mkdir(parents=True, exist_ok=True)
    if args.held_out:
        _, eval_idx = pipeline.split(cfg, corpus)
        conds = [pipeline.condition_set(corpus, corpus.samples[i]) for i in eval_idx]
        seeds = [sc.seed + i for i in eval_idx]
        names = [f"heldout_{i:05d}" for i in eval_idx]
        indices = list(eval_idx)
    else:
        ref = _index(corpus, args.ref_index, "reference")
        aud = _index(corpus, args.audio_index, "audio")
        from .conditioning import ConditionSet

        conds = [ConditionSet(
            text=_parse_tokens(args.text),
            reference_latents=corpus.normalize(ref.reference_latents).astype(np.float32) if ref else None,
            audio=aud.audio_features.astype(np.float32) if aud else None,
        )]
        seeds = [sc.seed]
        names = [args.name]
        indices = [args.audio_index if args.audio_index is not None else
                   args.ref_index if args.ref_index is not None else -1]
    z = sample_many(model, conds, sc, seeds=seeds)
    videos = corpus.denormalize(z)
    for name, video, cond, seed, idx in zip(names, videos, conds, seeds, indices):
        extra = {"checkpoint": path, "corpus_index": idx}
        side = _sidecar(cfg, sc, seed, cond, extra)
        pipeline.save_video(dest / f"{name}.bin", video, side)
        atomic_write(dest / f"{name}.txt", side)
    print(f"wrote {len(names)} video(s) to {dest}")
    return 0


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    paths = [Path(p) for p in args.videos]
    if not paths:
        raise UsageError("no videos to evaluate")
    corpus = _corpus(cfg)
    videos, samples = [], []
    for p in paths:
        video, header = pipeline.load_video(p)
        meta = dict(line.split(" = ", 1) for line in header.splitlines() if " = " in line)
        idx = int(meta.get("corpus_index", -1))
        if idx < 0:
            raise ValueError(f"{p} does not name a corpus sample to score against")
        videos.append(video)
        samples.append(_index(corpus, idx, "manifest"))
    report, rows = evaluate(videos, samples, World(cfg.world), seed=cfg.seed)
    dest = Path(args.report_dir) if args.report_dir else _out(cfg) / "eval"
    dest.mkdir(parents=True, exist_ok=True)
    header = f"# config_hash={cfg.hash()}\n"
    atomic_write(dest / "report.tsv", header + report.to_tsv())
    atomic_write(dest / "report.txt", header + report.to_kv())
    atomic_write(dest / "per_sample.csv", per_sample_csv(rows))
    print(report.to_kv(), end="")
    return 0


def cmd_inspect(args) -> int:
    ck = ckpt.load(args.path)
    print(f"format_version = {ckpt.FORMAT_VERSION}")
    print(f"stage = {ck.stage}")
    print(f"step = {ck.step}")
    print(f"config_hash = {ck.config_hash}")
    print(f"model_config_hash = {ckpt.model_config_hash(ck.model_config)}")
    print(f"parameters = {sum(a.size for a in ck.params.values())} in {len(ck.params)} tensors")
    print(f"optimizer_moments = {len(ck.opt.m)} tensors")
    if args.verbose:
        for name, arr in ck.params.items():
            print(f"  {name}\t{arr.dtype}\t{'x'.join(map(str, arr.shape))}")
    return 0


# -- entry point ----------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value run configuration")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--out", help="run directory (overrides paths.out)")

    ap = argparse.ArgumentParser(prog="tridit", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    sub.add_parser("defaults", help="print every config key with its default").set_defaults(fn=cmd_defaults)

    p = sub.add_parser("gen-data", parents=[common], help="write the synthetic corpus")
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", parents=[common], help="train one stage")
    p.add_argument("--stage", type=int, required=True)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--halt-at", type=int, default=0, help="stop after this many steps (split runs)")
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("sample", parents=[common], help="sample latent videos")
    p.add_argument("--checkpoint", help="defaults to <out>/stage2.ckpt")
    p.add_argument("--text", help="comma-separated token ids, or 'none'")
    p.add_argument("--ref-index", type=int, help="corpus sample whose references condition the video")
    p.add_argument("--audio-index", type=int, help="corpus sample whose audio drives the video")
    p.add_argument("--held-out", action="store_true", help="sample every held-out condition (TIA)")
    p.add_argument("--name", default="sample")
    p.set_defaults(fn=cmd_sample)

    p = sub.add_parser("eval", parents=[common], help="score sampled videos")
    p.add_argument("videos", nargs="*")
    p.add_argument("--report-dir")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("inspect-ckpt", help="summarize a checkpoint")
    p.add_argument("path")
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(fn=cmd_inspect)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (config_mod.ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (pipeline.MissingStageError, ckpt.CheckpointError, FormatError, FileNotFoundError, IndexError,
            ValueError, FloatingPointError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
