"""Micro diffusion transformer predicting a flow-matching velocity field.

Token layout per sample: ``f*h*w`` video tokens followed by ``R*h*w``
reference tokens. Each block runs joint self-attention over all tokens
(the first ``local_heads`` heads carry a fixed distance penalty),
cross-attention to text, frame-local cross-attention to windowed audio
(video tokens only) and an MLP. The last ``mask_head_blocks`` blocks carry a
per-token mask head reading the hidden state right after audio attention.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import numpy as np

from . import numerics as nx
from .nn import Embedding, LayerNorm, Linear, MLP, Module, param
from .numerics import Tensor

MASK_EPS = 1e-7
AUDIO_WINDOW = 5
MAX_REFERENCES = 4
LOCAL_FRAME_WEIGHT = 4.0  # one frame step costs as much as two pixels
_NEG = -1e9


@dataclass(frozen=True)
class ModelConfig:
    num_blocks: int = 4
    d_model: int = 64
    num_heads: int = 4
    latent_channels: int = 4
    frames: int = 4
    height: int = 8
    width: int = 8
    text_vocab: int = 73
    max_text_len: int = 8
    audio_feat_dim: int = 16
    mlp_ratio: int = 4
    time_dim: int = 64
    init_seed: int = 0
    local_heads: int = 2
    local_slope: float = 1.0

    def __post_init__(self):
        for key in ("num_blocks", "d_model", "num_heads", "latent_channels", "frames",
                    "height", "width", "text_vocab", "max_text_len", "audio_feat_dim",
                    "mlp_ratio", "time_dim"):
            if getattr(self, key) <= 0:
                raise ValueError(f"{key} must be positive, got {getattr(self, key)}")
        if self.d_model % self.num_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by num_heads={self.num_heads}")
        if not 0 <= self.local_heads <= self.num_heads:
            raise ValueError(f"local_heads must lie in [0, num_heads], got {self.local_heads}")
        if not (math.isfinite(self.local_slope) and self.local_slope >= 0):
            raise ValueError(f"local_slope must be finite and non-negative, got {self.local_slope}")

    @property
    def mask_head_blocks(self) -> int:
        return min(4, self.num_blocks)

    @property
    def tokens_per_frame(self) -> int:
        return self.height * self.width

    @property
    def video_shape(self) -> tuple[int, int, int, int]:
        return (self.frames, self.height, self.width, self.latent_channels)

    def to_dict(self) -> dict:
        return asdict(self)


def timestep_embedding(t: np.ndarray, dim: int, dtype) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    args = 1000.0 * np.asarray(t, dtype=np.float64)[:, None] * freqs[None, :]
    return np.concatenate([np.cos(args), np.sin(args)], axis=-1).astype(dtype)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    *lead, s, d = x.shape
    x = x.reshape(*lead, s, heads, d // heads)
    n = x.ndim
    axes = tuple(range(n - 3)) + (n - 2, n - 3, n - 1)
    return x.transpose(axes)


def _merge_heads(x: Tensor) -> Tensor:
    *lead, h, s, dh = x.shape
    n = x.ndim
    axes = tuple(range(n - 3)) + (n - 2, n - 3, n - 1)
    return x.transpose(axes).reshape(*lead, s, h * dh)


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor, bias=None) -> Tensor:
    """softmax(q k^T / sqrt(d_k) + bias) v over the last two axes."""
    q = q * (1.0 / math.sqrt(q.shape[-1]))
    scores = q @ nx.swap_last(k)
    if bias is not None:
        scores = scores + bias
    return nx.softmax(scores, axis=-1) @ v


class Attention(Module):
    def __init__(self, rng: np.random.Generator, dim: int, heads: int, kv_dim: int | None = None):
        self.heads = heads
        self.norm = LayerNorm(dim)
        self.q = Linear(rng, dim, dim)
        self.k = Linear(rng, kv_dim or dim, dim)
        self.v = Linear(rng, kv_dim or dim, dim)
        self.o = Linear(rng, dim, dim)

    def __call__(self, x: Tensor, context: Tensor | None = None, bias=None) -> Tensor:
        """Residual branch only (caller adds it to ``x``)."""
        xn = self.norm(x)
        ctx = xn if context is None else context
        q = _split_heads(self.q(xn), self.heads)
        k = _split_heads(self.k(ctx), self.heads)
        v = _split_heads(self.v(ctx), self.heads)
        return self.o(_merge_heads(scaled_dot_attention(q, k, v, bias)))


class Block(Module):
    def __init__(self, rng: np.random.Generator, cfg: ModelConfig, with_mask_head: bool):
        d = cfg.d_model
        self.self_attn = Attention(rng, d, cfg.num_heads)
        self.text_attn = Attention(rng, d, cfg.num_heads)
        self.audio_attn = Attention(rng, d, cfg.num_heads)
        self.mlp = MLP(rng, d, cfg.mlp_ratio * d)
        self.mask_head = Linear(rng, d, 1, zero=True) if with_mask_head else None


@dataclass
class ForwardOutput:
    velocity: Tensor           # [B, f, h, w, d]
    mask: Tensor               # [B, f, h, w]
    mask_logits: list[Tensor]  # K x [B, f*h*w, 1]


class MicroDiT(Module):
    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.init_seed)
        d = cfg.d_model
        self.in_proj = Linear(rng, cfg.latent_channels, d)
        self.pos_frame = Embedding(rng, cfg.frames + MAX_REFERENCES, d)
        self.pos_row = Embedding(rng, cfg.height, d)
        self.pos_col = Embedding(rng, cfg.width, d)
        self.ref_type = param(rng.normal(0.0, 0.02, d))
        self.time_fc1 = Linear(rng, cfg.time_dim, d)
        self.time_fc2 = Linear(rng, d, d)
        self.text_embed = Embedding(rng, cfg.text_vocab, d, std=1.0)
        self.audio_proj = Linear(rng, cfg.audio_feat_dim, d)
        self.audio_window_pos = param(rng.normal(0.0, 0.02, (AUDIO_WINDOW, d)))
        self.null_text = param(rng.normal(0.0, 1.0, (1, d)))
        self.null_image = param(rng.normal(0.0, 0.02, (1, cfg.height, cfg.width, cfg.latent_channels)))
        self.null_audio = param(rng.normal(0.0, 0.02, cfg.audio_feat_dim))
        first_head = cfg.num_blocks - cfg.mask_head_blocks
        self.blocks = [Block(rng, cfg, with_mask_head=i >= first_head) for i in range(cfg.num_blocks)]
        self.out_norm = LayerNorm(d)
        self.out_proj = Linear(rng, d, cfg.latent_channels, zero=True)
        self._pos_ids: dict[int, tuple[np.ndarray, ...]] = {}
        self._local_bias: dict[tuple[int, str], np.ndarray] = {}

    # -- helpers ----------------------------------------------------------
    def _position_ids(self, num_refs: int):
        if num_refs not in self._pos_ids:
            cfg = self.cfg
            nf = cfg.frames + num_refs
            frame = np.repeat(np.arange(nf), cfg.tokens_per_frame)
            row = np.tile(np.repeat(np.arange(cfg.height), cfg.width), nf)
            col = np.tile(np.arange(cfg.width), nf * cfg.height)
            is_ref = (frame >= cfg.frames).astype(nx.default_dtype())[:, None]
            self._pos_ids[num_refs] = (frame, row, col, is_ref)
        return self._pos_ids[num_refs]

    def locality_bias(self, num_refs: int) -> np.ndarray | None:
        """Self-attention logit offsets [1, heads, S, S]; None when no head is local.

        Head ``i < local_heads`` subtracts ``local_slope / 4**i`` times the squared
        distance between tokens over (frame, row, col), with reference slots
        counted as frames f, f+1, ... The remaining heads are unbiased.
        """
        cfg = self.cfg
        if cfg.local_heads == 0 or cfg.local_slope == 0:
            return None
        dtype = self.in_proj.weight.dtype
        key = (num_refs, np.dtype(dtype).str)
        if key not in self._local_bias:
            frame, row, col, _ = self._position_ids(num_refs)
            d2 = (LOCAL_FRAME_WEIGHT * (frame[:, None] - frame[None]) ** 2
                  + (row[:, None] - row[None]) ** 2 + (col[:, None] - col[None]) ** 2)
            slopes = np.zeros(cfg.num_heads)
            slopes[:cfg.local_heads] = cfg.local_slope / 4.0 ** np.arange(cfg.local_heads)
            bias = -slopes[:, None, None] * d2[None]
            self._local_bias[key] = bias[None].astype(dtype)
        return self._local_bias[key]

    def positional(self, num_refs: int) -> Tensor:
        frame, row, col, is_ref = self._position_ids(num_refs)
        pos = self.pos_frame(frame) + self.pos_row(row) + self.pos_col(col)
        return pos + nx.Tensor(is_ref.astype(pos.dtype)) * self.ref_type

    def time_embed(self, t: np.ndarray) -> Tensor:
        emb = Tensor(timestep_embedding(t, self.cfg.time_dim, self.in_proj.weight.dtype))
        return self.time_fc2(nx.silu(self.time_fc1(emb)))

    def predict_mask(self, hiddens: list[Tensor], heads: list[Linear] | None = None) -> tuple[Tensor, list[Tensor]]:
        """Average of per-block sigmoid mask heads, clamped to (eps, 1-eps).

        ``hiddens`` are [B, f*h*w, d_model] video-token states captured right
        after each block's audio cross-attention.
        """
        if heads is None:
            heads = [b.mask_head for b in self.blocks if b.mask_head is not None]
        if len(heads) != len(hiddens):
            raise ValueError(f"{len(hiddens)} hidden states for {len(heads)} mask heads")
        logits = [head(h) for head, h in zip(heads, hiddens)]
        probs = nx.sigmoid(logits[0])
        for lg in logits[1:]:
            probs = probs + nx.sigmoid(lg)
        probs = probs * (1.0 / len(logits))
        cfg = self.cfg
        b = hiddens[0].shape[0]
        mask = nx.clamp(probs, MASK_EPS, 1.0 - MASK_EPS).reshape(b, cfg.frames, cfg.height, cfg.width)
        return mask, logits

    # -- forward ----------------------------------------------------------
    def forward(self, z_t, t, cond, ablate_self_attention: bool = False) -> tuple[Tensor, Tensor]:
        """Single-sample forward: ``z_t`` [f,h,w,d], scalar ``t``.

        Returns (velocity [f,h,w,d], mask [f,h,w]).
        """
        from .conditioning import collate

        z = np.asarray(z_t.data if isinstance(z_t, Tensor) else z_t)
        if z.shape != self.cfg.video_shape:
            raise ValueError(f"z_t shape {z.shape} != video shape {self.cfg.video_shape}")
        out = self.forward_batch(z[None], np.array([t]), collate([cond]),
                                 ablate_self_attention=ablate_self_attention)
        v = out.velocity.reshape(*self.cfg.video_shape)
        m = out.mask.reshape(self.cfg.frames, self.cfg.height, self.cfg.width)
        return v, m

    def forward_batch(self, z_t, t, batch, ablate_self_attention: bool = False,
                      capture: dict | None = None) -> ForwardOutput:
        cfg = self.cfg
        z = z_t if isinstance(z_t, Tensor) else Tensor(np.asarray(z_t, dtype=self.in_proj.weight.dtype))
        t = np.asarray(t, dtype=np.float64).reshape(-1)
        B = z.shape[0]
        if z.shape[1:] != cfg.video_shape:
            raise ValueError(f"z_t shape {z.shape[1:]} != video shape {cfg.video_shape}")
        if t.shape[0] != B:
            raise ValueError(f"{t.shape[0]} timesteps for batch of {B}")
        if np.any(t < 0.0) or np.any(t > 1.0):
            raise ValueError(f"t must lie in [0, 1], got {t}")
        batch.check(cfg, B)

        R = batch.references.shape[1]
        hw = cfg.tokens_per_frame
        nv = cfg.frames * hw
        seq = nx.concat([z, batch.references], axis=1)
        S = (cfg.frames + R) * hw
        x = self.in_proj(seq.reshape(B, S, cfg.latent_channels))
        x = x + self.positional(R)
        x = x + self.time_embed(t).reshape(B, 1, cfg.d_model)

        self_bias = self.locality_bias(R)
        if batch.self_bias is not None:
            self_bias = batch.self_bias if self_bias is None else self_bias + batch.self_bias

        hiddens: list[Tensor] = []
        ref_pad = None
        for i, blk in enumerate(self.blocks):
            if not ablate_self_attention:
                x = x + blk.self_attn(x, bias=self_bias)
            x = x + blk.text_attn(x, context=batch.text, bias=batch.text_bias)
            xv = x[:, :nv]
            q = xv.reshape(B, cfg.frames, hw, cfg.d_model)
            a = blk.audio_attn(q, context=batch.audio).reshape(B, nv, cfg.d_model)
            if R:
                if ref_pad is None:
                    ref_pad = nx.zeros((B, S - nv, cfg.d_model), dtype=a.dtype)
                a = nx.concat([a, ref_pad], axis=1)
            x = x + a
            if blk.mask_head is not None:
                hiddens.append(x[:, :nv])
            if capture is not None:
                capture[f"block{i}.after_audio"] = x
            x = x + blk.mlp(x)

        out = self.out_proj(self.out_norm(x[:, :nv]))
        velocity = out.reshape(B, *cfg.video_shape)
        mask, logits = self.predict_mask(hiddens)
        return ForwardOutput(velocity=velocity, mask=mask, mask_logits=logits)

    # -- bookkeeping ------------------------------------------------------
    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters())
