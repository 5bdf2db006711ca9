"""Run orchestration shared by the CLI, the scripts and the acceptance suite."""
from __future__ import annotations

import os
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import checkpoint as ckpt
from . import tensorfile
from .conditioning import ConditionSet
from .config import RunConfig
from .evaluation import EvalReport, evaluate, mask_iou
from .model import MicroDiT
from .numerics import no_grad
from .sampling import sample_many
from .synthdata import Corpus, SyntheticSample, World, generate_corpus, parse_manifest
from .training import AdamState, TrainingData, apply_freeze_policy, train

SAMPLE_MAGIC = b"TRIDITSM"
VIDEO_MAGIC = b"TRIDITVD"
MANIFEST = "manifest.tsv"


class MissingStageError(RuntimeError):
    pass


# -- corpus on disk -------------------------------------------------------
def sample_path(corpus_dir, index: int) -> Path:
    return Path(corpus_dir) / f"sample_{index:05d}.bin"


def save_sample(path, s: SyntheticSample, config_hash: str = "") -> None:
    header = "\n".join([
        f"identity={s.identity}", f"background={s.background}", f"position={s.position}", f"seed={s.seed}",
        "text_tokens=" + ",".join(map(str, s.text_tokens)),
        "reference_backgrounds=" + ",".join(map(str, s.reference_backgrounds)),
        f"config_hash={config_hash}",
    ])
    tensors = {"video": s.video, "reference_latents": s.reference_latents, "audio_envelope": s.audio_envelope,
               "audio_features": s.audio_features, "face_masks": s.face_masks, "trajectory": s.trajectory}
    tensorfile.save(path, SAMPLE_MAGIC, 1, header, tensors)


def load_sample(path) -> SyntheticSample:
    _, header, t = tensorfile.load(path, SAMPLE_MAGIC)
    meta = dict(line.split("=", 1) for line in header.splitlines())

    def ints(key):
        return tuple(int(v) for v in meta[key].split(",") if v)

    return SyntheticSample(
        video=t["video"], text_tokens=ints("text_tokens"), reference_latents=t["reference_latents"],
        audio_envelope=t["audio_envelope"], audio_features=t["audio_features"], face_masks=t["face_masks"],
        identity=int(meta["identity"]), background=int(meta["background"]), position=int(meta["position"]),
        trajectory=t["trajectory"], seed=int(meta["seed"]), reference_backgrounds=ints("reference_backgrounds"),
    )


def save_corpus(corpus: Corpus, corpus_dir, config_hash: str) -> str:
    """Write one file per sample plus the manifest; returns the manifest text."""
    os.makedirs(corpus_dir, exist_ok=True)
    for i, s in enumerate(corpus.samples):
        save_sample(sample_path(corpus_dir, i), s, config_hash)
    text = corpus.manifest_text(config_hash)
    tensorfile.atomic_write(Path(corpus_dir) / MANIFEST, text.encode("utf-8"))
    return text


def load_corpus(corpus_dir, cfg: RunConfig) -> Corpus:
    path = Path(corpus_dir) / MANIFEST
    if not path.exists():
        raise FileNotFoundError(f"no corpus manifest at {path}; run gen-data first")
    meta = parse_manifest(path.read_text(encoding="utf-8"))
    samples = [load_sample(sample_path(corpus_dir, row[0])) for row in meta["rows"]]
    return Corpus(cfg=cfg.world, seed=int(meta.get("seed", cfg.seed)), samples=samples,
                  mean=meta["mean"], std=meta["std"])


def ensure_corpus(cfg: RunConfig, out_dir) -> Corpus:
    corpus_dir = Path(out_dir) / "corpus"
    manifest = corpus_dir / MANIFEST
    if manifest.exists() and parse_manifest(manifest.read_text()).get("config_hash") == cfg.hash():
        return load_corpus(corpus_dir, cfg)
    corpus = generate_corpus(cfg.seed, cfg.world, cfg.data.count)
    save_corpus(corpus, corpus_dir, cfg.hash())
    return corpus


def split(cfg: RunConfig, corpus: Corpus) -> tuple[list[int], list[int]]:
    return corpus.split(cfg.data.eval_count, cfg.data.split_seed)


# -- conditions -----------------------------------------------------------
def condition_set(corpus: Corpus, s: SyntheticSample, text=True, image=True, audio=True) -> ConditionSet:
    return ConditionSet(
        text=tuple(s.text_tokens) if text else None,
        reference_latents=corpus.normalize(s.reference_latents).astype(np.float32) if image else None,
        audio=s.audio_features.astype(np.float32) if audio else None,
    )


# -- training -------------------------------------------------------------
def stage_path(out_dir, stage: int) -> Path:
    return Path(out_dir) / f"stage{stage}.ckpt"


def init_stage_model(cfg: RunConfig, out_dir, stage: int) -> MicroDiT:
    if stage == 0:
        return MicroDiT(cfg.model_config())
    prev = stage_path(out_dir, stage - 1)
    if not prev.exists():
        raise MissingStageError(f"stage {stage} requires a stage-{stage - 1} checkpoint at {prev}")
    return ckpt.restore_model(ckpt.load(prev, cfg.model_config()))


def train_stage(cfg: RunConfig, data: TrainingData, out_dir, stage: int, resume=None,
                log: Callable[[str], None] | None = None, halt_at: int = 0) -> tuple[MicroDiT, AdamState]:
    """Train one stage, checkpointing every ``checkpoint_every`` steps and at the end.

    The final checkpoint lands at ``stage{N}.ckpt`` once the full budget is done.
    """
    plan = cfg.plan(stage, halt_at=halt_at)
    if resume is not None:
        ck = ckpt.load(resume, cfg.model_config())
        if ck.stage != stage:
            raise ValueError(f"resume checkpoint is from stage {ck.stage}, not {stage}")
        model, opt = ckpt.restore_model(ck), ck.opt
    else:
        model, opt = init_stage_model(cfg, out_dir, stage), AdamState()
    trainable = apply_freeze_policy(model, stage)
    if log is not None:
        counts = sum(p.data.size for n, p in model.named_parameters() if n in trainable)
        log(f"stage {stage}: {len(trainable)} trainable tensors, {counts} trainable parameters")
    os.makedirs(out_dir, exist_ok=True)
    log_path = Path(out_dir) / f"stage{stage}_metrics.tsv"
    every = cfg.train.checkpoint_every

    def snapshot(path):
        ck = ckpt.from_model(model, opt, stage, plan.fingerprint(), plan.seed, cfg.hash())
        ck.extra["stage_hash"] = cfg.stage_hash(stage)
        ckpt.save(path, ck)

    with open(log_path, "a", encoding="utf-8") as fh:
        if fh.tell() == 0:
            fh.write("step\tstage\ttask\tL_FM\tL_mask\ttotal\tgrad_norm\n")

        def on_step(report):
            if report.step % every == 0 and report.step < plan.steps:
                snapshot(Path(out_dir) / f"stage{stage}_step{report.step:06d}.ckpt")

        opt = train(model, data, plan, opt, log=fh, on_step=on_step)
    if opt.step >= plan.steps:
        snapshot(stage_path(out_dir, stage))
    else:
        snapshot(Path(out_dir) / f"stage{stage}_step{opt.step:06d}.ckpt")
    return model, opt


# -- held-out evaluation ----------------------------------------------------
@dataclass
class HeldOutResult:
    report: EvalReport
    rows: list
    videos: np.ndarray        # raw space
    mask_iou: float
    sample_seconds: float


def predict_masks(model: MicroDiT, corpus: Corpus, samples: list[SyntheticSample]) -> np.ndarray:
    """Mask-head prediction on clean latents (t = 1, u = 0) with full TIA conditioning."""
    from .conditioning import encode_batch

    z1 = np.stack([corpus.normalize(s.video) for s in samples]).astype(np.float32)
    conds = [condition_set(corpus, s) for s in samples]
    out = []
    with no_grad():
        for r in sorted({len(s.reference_latents) for s in samples}):
            idx = [i for i, s in enumerate(samples) if len(s.reference_latents) == r]
            res = model.forward_batch(z1[idx], np.ones(len(idx)), encode_batch([conds[i] for i in idx], model))
            out.append((idx, res.mask.data))
    masks = np.zeros((len(samples), *z1.shape[1:4]), dtype=np.float32)
    for idx, m in out:
        masks[idx] = m
    return masks


def evaluate_held_out(model: MicroDiT, cfg: RunConfig, corpus: Corpus, eval_idx: list[int],
                      seed: int | None = None) -> HeldOutResult:
    world = World(cfg.world)
    samples = [corpus.samples[i] for i in eval_idx]
    conds = [condition_set(corpus, s) for s in samples]
    sc = cfg.sampler(seed)
    t0 = time.perf_counter()
    z = sample_many(model, conds, sc, seeds=[sc.seed + i for i in eval_idx])
    elapsed = time.perf_counter() - t0
    videos = corpus.denormalize(z)
    report, rows = evaluate(list(videos), samples, world, seed=sc.seed)
    masks = predict_masks(model, corpus, samples)
    iou = float(np.mean([mask_iou(masks[i], s.face_masks) for i, s in enumerate(samples)]))
    return HeldOutResult(report, rows, videos, iou, elapsed)


def save_video(path, video: np.ndarray, header: str) -> None:
    tensorfile.save(path, VIDEO_MAGIC, 1, header, {"video": np.asarray(video, dtype=np.float32)})


def load_video(path) -> tuple[np.ndarray, str]:
    _, header, t = tensorfile.load(path, VIDEO_MAGIC)
    return t["video"], header


def _read_kv(path: Path) -> dict[str, str]:
    if not path.exists():
        return {}
    return dict(line.split(" = ", 1) for line in path.read_text().splitlines() if " = " in line)


def _write_kv(path: Path, kv: dict) -> None:
    tensorfile.atomic_write(path, "".join(f"{k} = {v}\n" for k, v in kv.items()))


def _stage_checkpoint_matches(path: Path, cfg: RunConfig, stage: int) -> bool:
    return path.exists() and ckpt.load(path).extra.get("stage_hash") == cfg.stage_hash(stage)


def run_all(cfg: RunConfig, out_dir, log: Callable[[str], None] = print, reuse_from=()) -> HeldOutResult:
    """Corpus, three training stages and held-out evaluation.

    Finished stage checkpoints whose lineage matches are reused, from
    ``out_dir`` or copied from any directory in ``reuse_from``. Wall-clock
    seconds of every step actually performed are kept in ``timings.txt``.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    timings_path = out_dir / "timings.txt"
    timings = _read_kv(timings_path)
    t0 = time.perf_counter()
    corpus = ensure_corpus(cfg, out_dir)
    timings.setdefault("corpus_seconds", f"{time.perf_counter() - t0:.1f}")
    train_idx, eval_idx = split(cfg, corpus)
    data = TrainingData.from_corpus(corpus, train_idx)
    stale = False
    for stage in (0, 1, 2):
        path = stage_path(out_dir, stage)
        if not stale and _stage_checkpoint_matches(path, cfg, stage):
            log(f"stage {stage}: reusing {path}")
            continue
        donor = next((Path(d) / path.name for d in reuse_from
                      if not stale and _stage_checkpoint_matches(Path(d) / path.name, cfg, stage)), None)
        if donor is not None:
            tensorfile.atomic_write(path, donor.read_bytes())
            donor_timings = _read_kv(donor.parent / "timings.txt")
            if f"stage{stage}_seconds" in donor_timings:
                timings[f"stage{stage}_seconds"] = donor_timings[f"stage{stage}_seconds"]
            log(f"stage {stage}: copied matching checkpoint from {donor}")
            continue
        stale = True
        for old in out_dir.glob(f"stage{stage}_*"):
            old.unlink()
        t0 = time.perf_counter()
        train_stage(cfg, data, out_dir, stage, log=log)
        timings[f"stage{stage}_seconds"] = f"{time.perf_counter() - t0:.1f}"
        log(f"stage {stage}: {cfg.steps(stage)} steps in {timings[f'stage{stage}_seconds']}s")
        _write_kv(timings_path, timings)
    model = ckpt.restore_model(ckpt.load(stage_path(out_dir, 2), cfg.model_config()))
    result = evaluate_held_out(model, cfg, corpus, eval_idx)
    timings["sample_eval_seconds"] = f"{result.sample_seconds:.1f}"
    _write_kv(timings_path, timings)
    summary = {"config_hash": cfg.hash(), **{k: v for k, v in result.report.__dict__.items()},
               "mask_iou": result.mask_iou}
    _write_kv(out_dir / "heldout_report.txt", summary)
    return result


def total_seconds(out_dir) -> float:
    """Sum of recorded wall-clock phases of a run directory."""
    return sum(float(v) for v in _read_kv(Path(out_dir) / "timings.txt").values())


def cached_report(out_dir, cfg: RunConfig) -> dict[str, str] | None:
    kv = _read_kv(Path(out_dir) / "heldout_report.txt")
    return kv if kv.get("config_hash") == cfg.hash() else None
