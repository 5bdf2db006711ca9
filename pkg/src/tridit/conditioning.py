"""Condition sets, null substitution, audio windowing and batch collation."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import numerics as nx
from .model import AUDIO_WINDOW, MAX_REFERENCES, ModelConfig, _NEG
from .numerics import Tensor


@dataclass
class ConditionSet:
    """Raw conditions; any slot may be ``None`` (absent)."""

    text: Sequence[int] | None = None
    reference_latents: np.ndarray | None = None  # [R, h, w, d]
    audio: np.ndarray | None = None              # [f, audio_feat_dim]

    def __post_init__(self):
        if self.text is not None:
            self.text = tuple(int(t) for t in self.text)
            if not self.text:
                raise ValueError("text token sequence must be non-empty (use None for absent)")
        if self.reference_latents is not None:
            refs = np.asarray(self.reference_latents)
            if refs.ndim == 3:
                refs = refs[None]
            if refs.ndim != 4:
                raise ValueError(f"reference latents must be [R, h, w, d], got {refs.shape}")
            if refs.shape[0] > MAX_REFERENCES:
                raise ValueError(f"at most {MAX_REFERENCES} references, got {refs.shape[0]}")
            self.reference_latents = refs if refs.shape[0] else None
        if self.audio is not None:
            audio = np.asarray(self.audio)
            if audio.ndim != 2 or audio.shape[0] == 0:
                raise ValueError(f"audio must be a non-empty [f, feat] array, got {audio.shape}")
            self.audio = audio

    @property
    def presence(self) -> tuple[bool, bool, bool]:
        return (self.text is not None, self.reference_latents is not None, self.audio is not None)

    def without(self, *, text: bool = False, image: bool = False, audio: bool = False) -> "ConditionSet":
        return ConditionSet(
            text=None if text else self.text,
            reference_latents=None if image else self.reference_latents,
            audio=None if audio else self.audio,
        )


@dataclass
class EncodedConditions:
    text_kv: Tensor          # [L, d_model]
    reference_slots: Tensor  # [R', h, w, d], R' >= 1
    audio_windows: Tensor    # [f, n, d_model]
    presence: tuple[bool, bool, bool] = (True, True, True)


def window_audio(audio, n: int = AUDIO_WINDOW):
    """Stack a centred window of ``n`` frames per row, zero-padded at the ends.

    Works on numpy arrays and on tensors (differentiable).
    """
    if n % 2 != 1:
        raise ValueError(f"window length must be odd, got {n}")
    half = n // 2
    if isinstance(audio, Tensor):
        f = audio.shape[0]
        if f == 0:
            raise ValueError("empty audio")
        pad = nx.zeros((half, *audio.shape[1:]), dtype=audio.dtype)
        padded = nx.concat([pad, audio, pad], axis=0)
        return nx.stack([padded[k:k + f] for k in range(n)], axis=1)
    audio = np.asarray(audio)
    if audio.ndim < 1 or audio.shape[0] == 0:
        raise ValueError("empty audio")
    f = audio.shape[0]
    padded = np.concatenate([np.zeros((half, *audio.shape[1:]), audio.dtype), audio,
                             np.zeros((half, *audio.shape[1:]), audio.dtype)], axis=0)
    return np.stack([padded[k:k + f] for k in range(n)], axis=1)


def append_references(z_t, refs):
    """[z_t; refs] along the frame axis: video first, references at the end."""
    if isinstance(z_t, Tensor) or isinstance(refs, Tensor):
        if tuple(z_t.shape[1:]) != tuple(refs.shape[1:]):
            raise ValueError(f"reference shape {refs.shape[1:]} != frame shape {z_t.shape[1:]}")
        return nx.concat([nx.as_tensor(z_t), nx.as_tensor(refs)], axis=0)
    z_t, refs = np.asarray(z_t), np.asarray(refs)
    if z_t.shape[1:] != refs.shape[1:]:
        raise ValueError(f"reference shape {refs.shape[1:]} != frame shape {z_t.shape[1:]}")
    return np.concatenate([z_t, refs], axis=0)


def extract_video(seq, frames: int):
    return seq[:frames]


def encode_text(model, tokens: Sequence[int] | None) -> Tensor:
    if tokens is None:
        return model.null_text
    if len(tokens) > model.cfg.max_text_len:
        raise ValueError(f"text longer than max_text_len={model.cfg.max_text_len}")
    return model.text_embed(np.asarray(tokens))


def encode_audio(model, audio: np.ndarray | None) -> Tensor:
    cfg: ModelConfig = model.cfg
    dtype = model.in_proj.weight.dtype
    if audio is None:
        ones = Tensor(np.ones((cfg.frames, 1), dtype=dtype))
        feats = ones * model.null_audio
    else:
        if audio.shape != (cfg.frames, cfg.audio_feat_dim):
            raise ValueError(f"audio shape {audio.shape} != ({cfg.frames}, {cfg.audio_feat_dim})")
        feats = Tensor(audio.astype(dtype))
    windows = window_audio(feats)
    return model.audio_proj(windows) + model.audio_window_pos


def substitute_nulls(cond: ConditionSet, model) -> EncodedConditions:
    """Encode every slot, replacing absent ones by the model's learned nulls."""
    cfg: ModelConfig = model.cfg
    dtype = model.in_proj.weight.dtype
    if cond.reference_latents is None:
        refs = model.null_image
    else:
        r = cond.reference_latents
        if r.shape[1:] != (cfg.height, cfg.width, cfg.latent_channels):
            raise ValueError(f"reference frame shape {r.shape[1:]} does not match model config")
        refs = Tensor(r.astype(dtype))
    return EncodedConditions(
        text_kv=encode_text(model, cond.text),
        reference_slots=refs,
        audio_windows=encode_audio(model, cond.audio),
        presence=cond.presence,
    )


@dataclass
class ConditionBatch:
    text: Tensor              # [B, L, d_model]
    text_bias: np.ndarray | None
    references: Tensor        # [B, R, h, w, d]
    self_bias: np.ndarray | None
    audio: Tensor             # [B, f, n, d_model]
    num_refs: list[int] = field(default_factory=list)

    def check(self, cfg: ModelConfig, batch: int) -> None:
        if self.text.shape[0] != batch or self.references.shape[0] != batch or self.audio.shape[0] != batch:
            raise ValueError("condition batch size does not match latent batch")
        if self.text.shape[-1] != cfg.d_model:
            raise ValueError(f"text width {self.text.shape[-1]} != d_model {cfg.d_model}")
        if tuple(self.references.shape[2:]) != (cfg.height, cfg.width, cfg.latent_channels):
            raise ValueError(f"reference shape {self.references.shape[2:]} does not match model config")
        if tuple(self.audio.shape[1:]) != (cfg.frames, AUDIO_WINDOW, cfg.d_model):
            raise ValueError(f"audio windows {self.audio.shape[1:]} do not match model config")


def _pad_stack(items: list[Tensor], length: int) -> tuple[Tensor, np.ndarray | None]:
    lengths = [it.shape[0] for it in items]
    if all(n == length for n in lengths):
        return nx.stack(items, axis=0), None
    padded = []
    valid = np.zeros((len(items), length), dtype=bool)
    for i, it in enumerate(items):
        n = it.shape[0]
        valid[i, :n] = True
        if n < length:
            it = nx.concat([it, nx.zeros((length - n, *it.shape[1:]), dtype=it.dtype)], axis=0)
        padded.append(it)
    return nx.stack(padded, axis=0), valid


def collate(encoded: list[EncodedConditions], frames: int | None = None,
            tokens_per_frame: int | None = None) -> ConditionBatch:
    """Stack per-sample encodings, padding text and references with masked slots."""
    if not encoded:
        raise ValueError("empty condition batch")
    dtype = encoded[0].text_kv.dtype
    L = max(e.text_kv.shape[0] for e in encoded)
    text, tvalid = _pad_stack([e.text_kv for e in encoded], L)
    text_bias = None
    if tvalid is not None:
        text_bias = np.where(tvalid, 0.0, _NEG).astype(dtype)[:, None, None, :]

    R = max(e.reference_slots.shape[0] for e in encoded)
    refs, rvalid = _pad_stack([e.reference_slots for e in encoded], R)
    self_bias = None
    if rvalid is not None:
        h, w = refs.shape[2], refs.shape[3]
        f = frames if frames is not None else encoded[0].audio_windows.shape[0]
        hw = tokens_per_frame if tokens_per_frame is not None else h * w
        key_valid = np.concatenate([np.ones((len(encoded), f * hw), bool), np.repeat(rvalid, hw, axis=1)], axis=1)
        self_bias = np.where(key_valid, 0.0, _NEG).astype(dtype)[:, None, None, :]

    audio = nx.stack([e.audio_windows for e in encoded], axis=0)
    return ConditionBatch(text=text, text_bias=text_bias, references=refs, self_bias=self_bias,
                          audio=audio, num_refs=[e.reference_slots.shape[0] for e in encoded])


def encode_batch(conds: Sequence[ConditionSet], model) -> ConditionBatch:
    return collate([substitute_nulls(c, model) for c in conds])
