"""Synthetic-world metrics: identity distance, text (background) match, A/V sync.

All metrics work on raw (de-normalized) latent videos and locate the avatar
from identity-channel energy, never from the model's own mask.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, asdict

import numpy as np

from .synthdata import World

ENERGY_FLOOR = 0.1  # fraction of a clean face's identity energy


@dataclass
class EvalReport:
    identity_score: float
    identity_score_random: float
    text_match: float
    sync_corr: float
    sync_corr_shuffled: float
    n_samples: int
    flagged: int = 0
    shuffle_seed: int = 0

    def to_kv(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in asdict(self).items())

    def to_tsv(self) -> str:
        d = asdict(self)
        return "\t".join(d) + "\n" + "\t".join(str(v) for v in d.values()) + "\n"


def _window_energy(frame: np.ndarray, size: int) -> np.ndarray:
    e = (frame[..., 0] ** 2 + frame[..., 1] ** 2)
    h, w = e.shape
    c = np.zeros((h + 1, w + 1))
    c[1:, 1:] = e.cumsum(0).cumsum(1)
    return c[size:, size:] - c[:-size, size:] - c[size:, :-size] + c[:-size, :-size]


def locate_avatar(video: np.ndarray, world: World) -> tuple[np.ndarray, np.ndarray]:
    """Per-frame face top-left (argmax of windowed identity energy) and that energy."""
    fs = world.cfg.face_size
    video = np.asarray(video)
    if video.ndim == 3:
        video = video[None]
    pos = np.zeros((len(video), 2), dtype=np.int64)
    energy = np.zeros(len(video))
    for i, frame in enumerate(video):
        e = _window_energy(frame, fs)
        r, c = np.unravel_index(int(np.argmax(e)), e.shape)
        pos[i] = (r, c)
        energy[i] = e[r, c]
    return pos, energy


def _clean_energy(world: World) -> float:
    fs = world.cfg.face_size
    return float(fs * fs * 2)  # signatures have unit RMS


def signatures(video: np.ndarray, world: World) -> tuple[np.ndarray, np.ndarray]:
    """Identity-channel block at the located face, flattened per frame; plus a found flag."""
    fs = world.cfg.face_size
    video = np.asarray(video)
    if video.ndim == 3:
        video = video[None]
    pos, energy = locate_avatar(video, world)
    sig = np.stack([video[i, r:r + fs, c:c + fs, 0:2].ravel() for i, (r, c) in enumerate(pos)])
    return sig, energy >= ENERGY_FLOOR * _clean_energy(world)


def decode_identity(frame: np.ndarray, world: World) -> int:
    sig, _ = signatures(frame, world)
    table = world.identity_table.reshape(world.cfg.num_identities, -1)
    return int(np.argmin(((table - sig[0]) ** 2).sum(-1)))


def worst_identity_score(world: World) -> float:
    return 2.0 * float(np.sqrt(_clean_energy(world)))


def identity_score(video: np.ndarray, reference_latents: np.ndarray, world: World) -> tuple[float, bool]:
    """Mean distance between generated-frame signatures and the mean reference signature.

    Returns (score, flagged); flagged samples get the worst-case score.
    """
    vsig, vfound = signatures(video, world)
    rsig, rfound = signatures(reference_latents, world)
    if not vfound.all() or not rfound.any():
        return worst_identity_score(world), True
    ref = rsig[rfound].mean(axis=0)
    return float(np.linalg.norm(vsig - ref, axis=1).mean()), False


def mouth_series(video: np.ndarray, world: World) -> np.ndarray:
    cfg = world.cfg
    pos, _ = locate_avatar(video, world)
    mr, mc = cfg.mouth_offset
    ms = cfg.mouth_size
    return np.array([video[i, r + mr:r + mr + ms, c + mc:c + mc + ms, 3].mean() for i, (r, c) in enumerate(pos)])


def pearson(x: np.ndarray, y: np.ndarray) -> tuple[float, bool]:
    """Pearson correlation; (0.0, True) when either series is constant."""
    x = np.asarray(x, dtype=np.float64) - np.mean(x)
    y = np.asarray(y, dtype=np.float64) - np.mean(y)
    sx, sy = np.sqrt((x * x).sum()), np.sqrt((y * y).sum())
    if sx < 1e-12 or sy < 1e-12:
        return 0.0, True
    return float(np.clip((x * y).sum() / (sx * sy), -1.0, 1.0)), False


def sync_correlation(video: np.ndarray, envelope: np.ndarray, world: World) -> tuple[float, bool]:
    if len(envelope) != len(video):
        raise ValueError("envelope length must equal frame count")
    if len(video) < 3:
        raise ValueError("sync correlation needs at least 3 frames")
    return pearson(mouth_series(video, world), envelope)


def decode_background(video: np.ndarray, world: World) -> int:
    cfg = world.cfg
    video = np.asarray(video)
    if video.ndim == 3:
        video = video[None]
    pos, _ = locate_avatar(video, world)
    outside = np.ones(video.shape[:3], dtype=bool)
    fs = cfg.face_size
    for i, (r, c) in enumerate(pos):
        outside[i, r:r + fs, c:c + fs] = False
    level = video[..., 2][outside].mean()
    return int(np.argmin(np.abs(world.background_values - level)))


def text_match(video: np.ndarray, text_tokens, world: World) -> float:
    want = int(text_tokens[1]) - world.cfg.num_identities
    return float(decode_background(video, world) == want)


def shuffled(envelope: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    return np.asarray(envelope)[rng.permutation(len(envelope))]


@dataclass
class SampleMetrics:
    index: int
    identity_score: float
    identity_score_random: float
    text_match: float
    sync_corr: float
    sync_corr_shuffled: float
    flagged: bool


def evaluate(videos, samples, world: World, seed: int = 0, random_refs=None) -> tuple[EvalReport, list[SampleMetrics]]:
    """Score raw ``videos`` against their source ``samples`` (same order).

    ``random_refs[i]`` is a reference set of a different identity for the
    random-reference identity control; drawn from the world when omitted.
    """
    if len(videos) == 0:
        raise ValueError("no videos to evaluate")
    if len(videos) != len(samples):
        raise ValueError(f"{len(videos)} videos for {len(samples)} manifest entries")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 3]))
    rows = []
    for i, (video, s) in enumerate(zip(videos, samples)):
        if random_refs is None:
            other = int(rng.choice([k for k in range(world.cfg.num_identities) if k != s.identity]))
            rref = world.render_frame(other, s.background, 0, 0, world.cfg.mouth_base)[None]
        else:
            rref = random_refs[i]
        ident, flag = identity_score(video, s.reference_latents, world)
        ident_r, _ = identity_score(video, rref, world)
        sc, _ = sync_correlation(video, s.audio_envelope, world)
        sc_sh, _ = sync_correlation(video, shuffled(s.audio_envelope, rng), world)
        rows.append(SampleMetrics(i, ident, ident_r, text_match(video, s.text_tokens, world), sc, sc_sh, flag))
    report = EvalReport(
        identity_score=float(np.mean([r.identity_score for r in rows])),
        identity_score_random=float(np.mean([r.identity_score_random for r in rows])),
        text_match=float(np.mean([r.text_match for r in rows])),
        sync_corr=float(np.mean([r.sync_corr for r in rows])),
        sync_corr_shuffled=float(np.mean([r.sync_corr_shuffled for r in rows])),
        n_samples=len(rows),
        flagged=int(sum(r.flagged for r in rows)),
        shuffle_seed=int(seed),
    )
    return report, rows


def per_sample_csv(rows: list[SampleMetrics]) -> str:
    buf = io.StringIO()
    fields = list(asdict(rows[0])) if rows else [f for f in SampleMetrics.__dataclass_fields__]
    w = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow(asdict(r))
    return buf.getvalue()


def mask_iou(pred: np.ndarray, gt: np.ndarray, threshold: float = 0.5) -> float:
    p = np.asarray(pred) > threshold
    g = np.asarray(gt).astype(bool)
    union = np.logical_or(p, g).sum()
    return float(np.logical_and(p, g).sum() / union) if union else 1.0
