"""Procedural latent-space videos of a talking avatar.

Channel layout of every latent frame ``[h, w, 4]``:

* 0-1: identity signature, one colour per identity filling the ``face_size``
  square block and zero elsewhere;
* 2: background level, constant over the frame;
* 3: mouth intensity, ``base + coupling * envelope[i]`` on the mouth block, 0 elsewhere.

Identity colours, background levels and the audio lift are fixed tables (the
lift is drawn from ``WorldConfig.table_seed``); everything else in a sample
comes from the sample seed.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, asdict, field
from functools import cached_property

import numpy as np


@dataclass(frozen=True)
class WorldConfig:
    frames: int = 4
    height: int = 8
    width: int = 8
    channels: int = 4
    num_identities: int = 16
    num_backgrounds: int = 8
    face_size: int = 2
    mouth_size: int = 1
    motion_amplitude: int = 2
    audio_coupling: float = 1.0
    mouth_base: float = 0.0
    audio_feat_dim: int = 16
    max_references: int = 3
    table_seed: int = 20250901

    def __post_init__(self):
        if self.channels != 4:
            raise ValueError("the synthetic world uses exactly 4 latent channels")
        if self.face_size > min(self.height, self.width) / 2:
            raise ValueError("face_size must be <= min(h, w)/2")
        if not 0 < self.mouth_size < self.face_size:
            raise ValueError("need 0 < mouth_size < face_size")
        if not 0.0 < self.audio_coupling <= 1.0:
            raise ValueError("audio_coupling must lie in (0, 1]")
        if self.frames < 1 or self.num_identities < 2 or self.num_backgrounds < 2:
            raise ValueError("need frames >= 1, >= 2 identities and >= 2 backgrounds")
        if not 1 <= self.max_references <= 4:
            raise ValueError("max_references must lie in [1, 4]")
        if self.motion_amplitude < 0:
            raise ValueError("motion_amplitude must be >= 0")

    @property
    def positions_per_axis(self) -> tuple[int, int]:
        return self.height - self.face_size + 1, self.width - self.face_size + 1

    @property
    def num_positions(self) -> int:
        ph, pw = self.positions_per_axis
        return ph * pw

    @property
    def text_vocab(self) -> int:
        return self.num_identities + self.num_backgrounds + self.num_positions

    @property
    def mouth_offset(self) -> tuple[int, int]:
        """Top-left of the mouth block relative to the face block (bottom row, centred)."""
        return self.face_size - self.mouth_size, (self.face_size - self.mouth_size) // 2

    def to_dict(self) -> dict:
        return asdict(self)


class World:
    """Fixed lookup tables for a :class:`WorldConfig`."""

    def __init__(self, cfg: WorldConfig):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.table_seed)
        fs = cfg.face_size
        # one colour per identity over channels 0-1, evenly spaced on a circle:
        # equal energy keeps energy-argmax localization unbiased
        ang = 2 * np.pi * np.arange(cfg.num_identities) / cfg.num_identities
        colour = np.sqrt(2.0) * np.stack([np.cos(ang), np.sin(ang)], axis=-1)
        self.identity_table = np.broadcast_to(colour[:, None, None, :], (cfg.num_identities, fs, fs, 2)).copy()
        self.background_values = np.linspace(-1.0, 1.0, cfg.num_backgrounds)
        self.audio_lift = rng.normal(size=(2, cfg.audio_feat_dim))

    @cached_property
    def signature_distances(self) -> np.ndarray:
        flat = self.identity_table.reshape(self.cfg.num_identities, -1)
        return np.sqrt(((flat[:, None] - flat[None]) ** 2).sum(-1))

    @property
    def mean_inter_identity_distance(self) -> float:
        d = self.signature_distances
        n = d.shape[0]
        return float(d[~np.eye(n, dtype=bool)].mean())

    def position_code(self, row: int, col: int) -> int:
        return row * self.cfg.positions_per_axis[1] + col

    def text_tokens(self, identity: int, background: int, position: int) -> tuple[int, int, int]:
        c = self.cfg
        return identity, c.num_identities + background, c.num_identities + c.num_backgrounds + position

    def audio_features(self, envelope: np.ndarray) -> np.ndarray:
        """Lift the scalar envelope to ``audio_feat_dim`` with the fixed projection."""
        return envelope[:, None] * self.audio_lift[0][None] + self.audio_lift[1][None]

    def render_frame(self, identity: int, background: int, row: int, col: int, mouth: float) -> np.ndarray:
        c = self.cfg
        fs, ms = c.face_size, c.mouth_size
        frame = np.zeros((c.height, c.width, c.channels))
        frame[..., 2] = self.background_values[background]
        frame[row:row + fs, col:col + fs, 0:2] = self.identity_table[identity]
        mr, mc = c.mouth_offset
        frame[row + mr:row + mr + ms, col + mc:col + mc + ms, 3] = mouth
        return frame

    def face_mask(self, row: int, col: int) -> np.ndarray:
        c = self.cfg
        m = np.zeros((c.height, c.width), dtype=bool)
        m[row:row + c.face_size, col:col + c.face_size] = True
        return m


@dataclass
class SyntheticSample:
    video: np.ndarray             # [f, h, w, d], raw (unstandardized)
    text_tokens: tuple[int, int, int]
    reference_latents: np.ndarray  # [R, h, w, d]
    audio_envelope: np.ndarray    # [f] in [0, 1]
    audio_features: np.ndarray    # [f, audio_feat_dim]
    face_masks: np.ndarray        # [f, h, w] bool
    identity: int
    background: int
    position: int
    trajectory: np.ndarray        # [f, 2] face top-left per frame
    seed: int
    reference_backgrounds: tuple[int, ...] = field(default=())


def smooth_envelope(rng: np.random.Generator, frames: int) -> np.ndarray:
    """Two random low-frequency sinusoids, min-max scaled to [0, 1]."""
    i = np.arange(frames)
    sig = np.zeros(frames)
    for _ in range(2):
        freq = rng.uniform(0.3, 1.2)
        sig += rng.uniform(0.5, 1.0) * np.sin(freq * i + rng.uniform(0, 2 * np.pi))
    sig += 0.1 * rng.normal(size=frames)
    span = sig.max() - sig.min()
    if span < 1e-9:
        return np.full(frames, 0.5) if frames == 1 else np.linspace(0.0, 1.0, frames)
    return (sig - sig.min()) / span


def random_walk(rng: np.random.Generator, cfg: WorldConfig, start: tuple[int, int]) -> np.ndarray:
    ph, pw = cfg.positions_per_axis
    a = cfg.motion_amplitude
    pos = np.empty((cfg.frames, 2), dtype=np.int64)
    pos[0] = start
    for i in range(1, cfg.frames):
        step = rng.integers(-a, a + 1, size=2)
        pos[i] = np.clip(pos[i - 1] + step, 0, [ph - 1, pw - 1])
    return pos


def generate_sample(seed: int, cfg: WorldConfig, world: World | None = None) -> SyntheticSample:
    world = world or World(cfg)
    rng = np.random.default_rng(seed)
    ph, pw = cfg.positions_per_axis
    identity = int(rng.integers(cfg.num_identities))
    background = int(rng.integers(cfg.num_backgrounds))
    start = (int(rng.integers(ph)), int(rng.integers(pw)))
    traj = random_walk(rng, cfg, start)
    env = smooth_envelope(rng, cfg.frames)

    video = np.stack([
        world.render_frame(identity, background, r, c, cfg.mouth_base + cfg.audio_coupling * env[i])
        for i, (r, c) in enumerate(traj)
    ])
    masks = np.stack([world.face_mask(r, c) for r, c in traj])

    n_refs = int(rng.integers(1, cfg.max_references + 1))
    others = [b for b in range(cfg.num_backgrounds) if b != background]
    ref_bgs, refs = [], []
    for _ in range(n_refs):
        bg = int(rng.choice(others))
        r, c = int(rng.integers(ph)), int(rng.integers(pw))
        refs.append(world.render_frame(identity, bg, r, c, cfg.mouth_base))
        ref_bgs.append(bg)

    position = world.position_code(*start)
    return SyntheticSample(
        video=video,
        text_tokens=world.text_tokens(identity, background, position),
        reference_latents=np.stack(refs),
        audio_envelope=env,
        audio_features=world.audio_features(env),
        face_masks=masks,
        identity=identity,
        background=background,
        position=position,
        trajectory=traj,
        seed=int(seed),
        reference_backgrounds=tuple(ref_bgs),
    )


def sample_seed(seed: int, index: int) -> int:
    """Deterministic per-index seed stream."""
    return int(np.random.SeedSequence([int(seed), int(index)]).generate_state(1, dtype=np.uint32)[0])


MANIFEST_COLUMNS = ("index", "identity", "background", "position", "R", "seed")


@dataclass
class Corpus:
    cfg: WorldConfig
    seed: int
    samples: list[SyntheticSample]
    mean: np.ndarray  # per-channel, raw space
    std: np.ndarray

    def normalize(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) / self.std

    def denormalize(self, x: np.ndarray) -> np.ndarray:
        return x * self.std + self.mean

    def manifest_rows(self) -> list[tuple[int, ...]]:
        return [(i, s.identity, s.background, s.position, len(s.reference_latents), s.seed)
                for i, s in enumerate(self.samples)]

    def manifest_text(self, config_hash: str = "") -> str:
        lines = [
            f"# seed={self.seed} count={len(self.samples)} config_hash={config_hash}",
            "# mean=" + ",".join(repr(float(v)) for v in self.mean),
            "# std=" + ",".join(repr(float(v)) for v in self.std),
            "\t".join(MANIFEST_COLUMNS),
        ]
        lines += ["\t".join(str(v) for v in row) for row in self.manifest_rows()]
        return "\n".join(lines) + "\n"

    def split(self, eval_count: int, split_seed: int) -> tuple[list[int], list[int]]:
        """Seeded disjoint (train, eval) index lists."""
        n = len(self.samples)
        if not 0 < eval_count < n:
            raise ValueError(f"eval_count must be in (0, {n})")
        perm = np.random.default_rng(split_seed).permutation(n)
        return sorted(perm[eval_count:].tolist()), sorted(perm[:eval_count].tolist())


def generate_corpus(seed: int, cfg: WorldConfig, count: int, per_channel: bool = False) -> Corpus:
    """``count`` samples plus standardization statistics.

    By default one mean and std cover all channels, which keeps the sparse
    face and mouth values on the same scale as the background; with
    ``per_channel`` every channel is standardized separately.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    world = World(cfg)
    samples = [generate_sample(sample_seed(seed, i), cfg, world) for i in range(count)]
    videos = np.stack([s.video for s in samples])
    if per_channel:
        mean = videos.mean(axis=(0, 1, 2, 3))
        std = videos.std(axis=(0, 1, 2, 3))
    else:
        mean = np.full(cfg.channels, videos.mean())
        std = np.full(cfg.channels, videos.std())
    std = np.where(std > 1e-8, std, 1.0)
    return Corpus(cfg=cfg, seed=seed, samples=samples, mean=mean, std=std)


def parse_manifest(text: str) -> dict:
    """Inverse of :meth:`Corpus.manifest_text` (header stats + rows)."""
    meta: dict = {"rows": []}
    header_seen = False
    for line in text.splitlines():
        if not line.strip():
            continue
        if line.startswith("#"):
            body = line[1:].strip()
            if body.startswith("mean="):
                meta["mean"] = np.array([float(v) for v in body[5:].split(",")])
            elif body.startswith("std="):
                meta["std"] = np.array([float(v) for v in body[4:].split(",")])
            else:
                for part in body.split():
                    k, _, v = part.partition("=")
                    meta[k] = v
            continue
        if not header_seen:
            cols = tuple(line.split("\t"))
            if cols != MANIFEST_COLUMNS:
                raise ValueError(f"unexpected manifest columns {cols}")
            header_seen = True
            continue
        meta["rows"].append(tuple(int(v) for v in line.split("\t")))
    return meta


def manifest_digest(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()
