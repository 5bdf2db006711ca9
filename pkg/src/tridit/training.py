"""Losses, freeze policy, task curriculum and the AdamW training loop."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict
from typing import Callable, Sequence, TextIO

import numpy as np

from . import numerics as nx
from .conditioning import ConditionSet, encode_batch
from .model import MASK_EPS, MicroDiT
from .numerics import Tensor

TEXT_TO_VIDEO = "text_to_video"
SUBJECT_PRESERVATION = "subject_preservation"
AUDIO_VISUAL_SYNC = "audio_visual_sync"

LOG_COLUMNS = ("step", "stage", "task", "L_FM", "L_mask", "total", "grad_norm")


@dataclass(frozen=True)
class TrainPlan:
    stage: int = 0
    steps: int = 5000
    lr: float = 1e-3
    weight_decay: float = 0.0
    mask_loss_weight: float = 0.1
    audio_task_ratio_start: float = 0.2
    audio_task_ratio_end: float = 0.5
    seed: int = 0
    batch_size: int = 4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip: float = 1.0
    text_dropout: float = 0.1
    image_dropout: float = 0.1
    halt_at: int = 0

    def __post_init__(self):
        if self.stage not in (0, 1, 2):
            raise ValueError(f"unknown stage {self.stage}")
        if self.steps <= 0 or self.batch_size <= 0:
            raise ValueError("steps and batch_size must be positive")
        if self.lr < 0 or self.weight_decay < 0 or self.mask_loss_weight < 0:
            raise ValueError("lr, weight_decay and mask_loss_weight must be non-negative")
        if not 0.0 <= self.audio_task_ratio_start <= self.audio_task_ratio_end <= 1.0:
            raise ValueError("need 0 <= ratio_start <= ratio_end <= 1")

    def fingerprint(self) -> str:
        d = asdict(self)
        d.pop("halt_at")
        return ";".join(f"{k}={d[k]!r}" for k in sorted(d))


# -- objective ------------------------------------------------------------
def interpolate(z0, z1, t):
    """z_t = (1 - t) z0 + t z1; ``t`` scalar or one value per leading item."""
    z0, z1 = np.asarray(z0), np.asarray(z1)
    if z0.shape != z1.shape:
        raise ValueError(f"shape mismatch {z0.shape} vs {z1.shape}")
    t_arr = np.asarray(t, dtype=np.float64)
    if np.any(t_arr < 0.0) or np.any(t_arr > 1.0):
        raise ValueError(f"t must lie in [0, 1], got {t}")
    if t_arr.ndim == 1:
        t_arr = t_arr.reshape(-1, *([1] * (z0.ndim - 1)))
    return ((1.0 - t_arr) * z0 + t_arr * z1).astype(z0.dtype)


def flow_matching_loss(v_pred: Tensor, z0, z1) -> Tensor:
    target = np.asarray(z1) - np.asarray(z0)
    v_pred = nx.as_tensor(v_pred)
    if tuple(v_pred.shape) != target.shape:
        raise ValueError(f"velocity shape {v_pred.shape} != target shape {target.shape}")
    resid = v_pred - target.astype(v_pred.dtype)
    return (resid * resid).mean()


def size_aware_mask_loss(m_pred, m_gt) -> Tensor:
    """Per-frame ``hw / sum(M_gt) * BCE``, averaged over frames.

    ``m_pred`` and ``m_gt`` are [..., h, w]; every ground-truth frame needs at
    least one positive pixel.
    """
    m_pred = nx.as_tensor(m_pred)
    gt = np.asarray(m_gt, dtype=m_pred.dtype)
    if gt.shape != tuple(m_pred.shape):
        raise ValueError(f"mask shape {m_pred.shape} != ground truth {gt.shape}")
    h, w = gt.shape[-2:]
    positives = gt.sum(axis=(-2, -1))
    if np.any(positives <= 0):
        raise ValueError("ground-truth mask frame without positive pixels")
    weight = (h * w) / positives                               # [...]
    p = nx.clamp(m_pred, MASK_EPS, 1.0 - MASK_EPS)
    bce = -(Tensor(gt) * nx.log(p) + Tensor(1.0 - gt) * nx.log(1.0 - p))
    per_frame = bce.mean(axis=(-2, -1))
    return (per_frame * Tensor(weight.astype(m_pred.dtype))).mean()


def total_loss(out, z0, z1, task: str, face_mask=None, beta: float = 0.1) -> tuple[Tensor, dict]:
    """L_FM plus ``beta * L_mask`` on audio-visual sync batches."""
    l_fm = flow_matching_loss(out.velocity, z0, z1)
    parts = {"L_FM": float(l_fm.data), "L_mask": 0.0}
    if task == AUDIO_VISUAL_SYNC:
        if face_mask is None:
            raise ValueError("audio-visual sync batch needs a face mask")
        l_mask = size_aware_mask_loss(out.mask, face_mask)
        parts["L_mask"] = float(l_mask.data)
        total = l_fm + l_mask * beta if beta else l_fm
    else:
        total = l_fm
    parts["total"] = float(total.data)
    return total, parts


# -- curriculum -----------------------------------------------------------
def curriculum_ratio(step: int, total_steps: int, plan: TrainPlan) -> float:
    """Probability of drawing the audio-visual sync task (linear ramp)."""
    if total_steps <= 0:
        raise ValueError("total_steps must be positive")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    a, b = plan.audio_task_ratio_start, plan.audio_task_ratio_end
    if step == total_steps:
        return b
    return a + (b - a) * (step / total_steps)


def draw_task(p_sync: float, rng: np.random.Generator) -> str:
    return AUDIO_VISUAL_SYNC if rng.random() < p_sync else SUBJECT_PRESERVATION


# -- freezing -------------------------------------------------------------
def is_self_attention(name: str) -> bool:
    return ".self_attn." in name


def is_audio_module(name: str) -> bool:
    return ".audio_attn." in name or name.startswith(("audio_proj.", "audio_window_pos", "null_audio"))


def is_mask_head(name: str) -> bool:
    return ".mask_head." in name


def trainable_names(model: MicroDiT, stage: int) -> set[str]:
    names = [n for n, _ in model.named_parameters()]
    if stage == 0:
        return set(names)
    if stage == 1:
        return {n for n in names if is_self_attention(n)}
    if stage == 2:
        return {n for n in names if is_self_attention(n) or is_audio_module(n) or is_mask_head(n)}
    raise ValueError(f"unknown stage {stage}")


def apply_freeze_policy(model: MicroDiT, stage: int) -> set[str]:
    keep = trainable_names(model, stage)
    for name, p in model.named_parameters():
        p.requires_grad = name in keep
        p.grad = None
    return keep


# -- optimizer ------------------------------------------------------------
@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    total = math.sqrt(sum(float(np.dot(g.ravel().astype(np.float64), g.ravel().astype(np.float64)))
                          for g in grads.values()))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-6)
        for g in grads.values():
            g *= scale
    return total


def adamw_update(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState, plan: TrainPlan) -> None:
    state.step += 1
    b1, b2 = plan.beta1, plan.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name in sorted(grads):
        p, g = params[name], grads[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + plan.adam_eps)
        if plan.weight_decay:
            update = update + plan.weight_decay * p.data
        p.data = (p.data - plan.lr * update).astype(p.dtype)


# -- batches --------------------------------------------------------------
@dataclass(frozen=True)
class TrainBatch:
    z1: np.ndarray                 # [B, f, h, w, d] normalized data latents
    conds: tuple[ConditionSet, ...]
    face_mask: np.ndarray | None   # [B, f, h, w]
    task: str

    def __post_init__(self):
        if self.task == AUDIO_VISUAL_SYNC and self.face_mask is None:
            raise ValueError("audio-visual sync batch needs face masks")
        if len(self.conds) != self.z1.shape[0]:
            raise ValueError("one condition set per latent")


@dataclass
class TrainingData:
    """Normalized training arrays, grouped by reference count."""

    videos: np.ndarray              # [N, f, h, w, d]
    text: list[tuple[int, ...]]
    references: list[np.ndarray]    # each [R, h, w, d]
    audio: np.ndarray               # [N, f, audio_feat_dim]
    masks: np.ndarray               # [N, f, h, w]

    @classmethod
    def from_corpus(cls, corpus, indices: Sequence[int]) -> "TrainingData":
        s = [corpus.samples[i] for i in indices]
        return cls(
            videos=np.stack([corpus.normalize(x.video) for x in s]).astype(np.float32),
            text=[tuple(x.text_tokens) for x in s],
            references=[corpus.normalize(x.reference_latents).astype(np.float32) for x in s],
            audio=np.stack([x.audio_features for x in s]).astype(np.float32),
            masks=np.stack([x.face_masks for x in s]),
        )

    def __len__(self):
        return len(self.videos)

    def buckets(self) -> dict[int, np.ndarray]:
        counts = np.array([len(r) for r in self.references])
        return {int(r): np.flatnonzero(counts == r) for r in np.unique(counts)}


def step_rng(seed: int, step: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(step), 7]))


def assemble_batch(data: TrainingData, plan: TrainPlan, step: int, rng: np.random.Generator) -> TrainBatch:
    """Draw the task and the samples for one step.

    Stage 1 and 2 batches share a reference count so no padding is needed.
    """
    B = plan.batch_size
    if plan.stage == 0:
        task = TEXT_TO_VIDEO
        idx = rng.choice(len(data), size=B, replace=len(data) < B)
    else:
        if plan.stage == 1:
            task = SUBJECT_PRESERVATION
        else:
            task = draw_task(curriculum_ratio(step, plan.steps, plan), rng)
        buckets = data.buckets()
        keys = sorted(buckets)
        sizes = np.array([len(buckets[k]) for k in keys], dtype=np.float64)
        bucket = buckets[keys[rng.choice(len(keys), p=sizes / sizes.sum())]]
        idx = rng.choice(bucket, size=B, replace=len(bucket) < B)

    conds = []
    for i in idx:
        text = None if rng.random() < plan.text_dropout else data.text[i]
        refs = None
        audio = None
        if plan.stage > 0 and rng.random() >= plan.image_dropout:
            refs = data.references[i]
        if task == AUDIO_VISUAL_SYNC:
            audio = data.audio[i]
        conds.append(ConditionSet(text=text, reference_latents=refs, audio=audio))
    masks = data.masks[idx] if task == AUDIO_VISUAL_SYNC else None
    return TrainBatch(z1=data.videos[idx], conds=tuple(conds), face_mask=masks, task=task)


# -- step and loop --------------------------------------------------------
@dataclass
class StepReport:
    step: int
    stage: int
    task: str
    L_FM: float
    L_mask: float
    total: float
    grad_norm: float

    def tsv(self) -> str:
        return (f"{self.step}\t{self.stage}\t{self.task}\t{self.L_FM:.6g}\t{self.L_mask:.6g}"
                f"\t{self.total:.6g}\t{self.grad_norm:.6g}")


def train_step(model: MicroDiT, batch: TrainBatch, plan: TrainPlan, opt_state: AdamState,
               rng: np.random.Generator, trainable: set[str] | None = None) -> tuple[StepReport, AdamState]:
    """One AdamW step on the trainable set; t ~ U[0,1], z0 ~ N(0, I) from ``rng``."""
    if trainable is None:
        trainable = apply_freeze_policy(model, plan.stage)
    B = batch.z1.shape[0]
    t = rng.uniform(0.0, 1.0, size=B)
    z0 = rng.standard_normal(batch.z1.shape).astype(batch.z1.dtype)
    zt = interpolate(z0, batch.z1, t)

    params = dict(model.named_parameters())
    model.zero_grad()
    out = model.forward_batch(zt, t, encode_batch(batch.conds, model))
    loss, parts = total_loss(out, z0, batch.z1, batch.task, batch.face_mask, plan.mask_loss_weight)
    if not math.isfinite(parts["total"]):
        raise FloatingPointError(
            f"non-finite loss at step {opt_state.step}: t={t.tolist()} task={batch.task} parts={parts}")
    loss.backward()
    grads = {n: params[n].grad for n in trainable if params[n].grad is not None}
    gnorm = clip_grad_norm(grads, plan.grad_clip)
    adamw_update(params, grads, opt_state, plan)
    model.zero_grad()
    report = StepReport(step=opt_state.step, stage=plan.stage, task=batch.task, L_FM=parts["L_FM"],
                        L_mask=parts["L_mask"], total=parts["total"], grad_norm=gnorm)
    return report, opt_state


def train(model: MicroDiT, data: TrainingData, plan: TrainPlan, opt_state: AdamState | None = None,
          log: TextIO | None = None, on_step: Callable[[StepReport], None] | None = None) -> AdamState:
    """Run from ``opt_state.step`` up to ``plan.steps`` (or ``plan.halt_at``).

    Everything random in step ``k`` derives from ``(plan.seed, k)``, so a run
    resumed from a checkpoint continues bit-identically.
    """
    opt_state = opt_state or AdamState()
    trainable = apply_freeze_policy(model, plan.stage)
    stop = plan.steps if not plan.halt_at else min(plan.halt_at, plan.steps)
    while opt_state.step < stop:
        k = opt_state.step
        rng = step_rng(plan.seed, k)
        batch = assemble_batch(data, plan, k, rng)
        report, opt_state = train_step(model, batch, plan, opt_state, rng, trainable)
        if log is not None:
            log.write(report.tsv() + "\n")
            log.flush()
        if on_step is not None:
            on_step(report)
    return opt_state
