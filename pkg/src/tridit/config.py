"""Flat ``key = value`` run configuration.

Keys are ``section.field``; sections map onto the dataclass configs of the
other modules. Model geometry (frames, size, channels, vocab, audio width)
follows the world so the two can never disagree.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, fields, replace, asdict

from .model import ModelConfig
from .sampling import GuidanceConfig, GuidanceSchedule, SamplerConfig
from .synthdata import WorldConfig
from .training import TrainPlan


class ConfigError(ValueError):
    """Invalid configuration file or value (CLI exit code 2)."""


_TRAIN_KEYS = ("lr", "weight_decay", "mask_loss_weight", "audio_task_ratio_start", "audio_task_ratio_end",
               "batch_size", "beta1", "beta2", "adam_eps", "grad_clip", "text_dropout", "image_dropout")


@dataclass(frozen=True)
class TrainSettings:
    steps_stage0: int = 5000
    steps_stage1: int = 2000
    steps_stage2: int = 2000
    checkpoint_every: int = 500
    lr: float = 1e-3
    weight_decay: float = 0.0
    mask_loss_weight: float = 0.1
    audio_task_ratio_start: float = 0.2
    audio_task_ratio_end: float = 0.5
    batch_size: int = 4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip: float = 1.0
    text_dropout: float = 0.1
    image_dropout: float = 0.1


@dataclass(frozen=True)
class DataSettings:
    count: int = 576
    eval_count: int = 64
    split_seed: int = 0


@dataclass(frozen=True)
class SampleSettings:
    num_steps: int = 50
    early_lambda_txt: float = 5.0
    early_lambda_img: float = 1.5
    early_lambda_a: float = 1.0
    late_lambda_txt: float = 1.5
    late_lambda_img: float = 4.0
    late_lambda_a: float = 4.0
    switch_u: float = 0.98


@dataclass(frozen=True)
class ModelSettings:
    num_blocks: int = 4
    d_model: int = 64
    num_heads: int = 4
    max_text_len: int = 8
    mlp_ratio: int = 4
    time_dim: int = 64
    init_seed: int = 0
    local_heads: int = 2
    local_slope: float = 1.0


@dataclass(frozen=True)
class Paths:
    out: str = "runs/default"


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    world: WorldConfig = field(default_factory=WorldConfig)
    model: ModelSettings = field(default_factory=ModelSettings)
    train: TrainSettings = field(default_factory=TrainSettings)
    data: DataSettings = field(default_factory=DataSettings)
    sample: SampleSettings = field(default_factory=SampleSettings)
    paths: Paths = field(default_factory=Paths)

    def validated(self) -> "RunConfig":
        self.model_config()
        for stage in (0, 1, 2):
            self.plan(stage)
        self.sampler()
        if self.train.checkpoint_every <= 0:
            raise ValueError("train.checkpoint_every must be positive")
        if not 0 < self.data.eval_count < self.data.count:
            raise ValueError("need 0 < data.eval_count < data.count")
        return self

    def model_config(self) -> ModelConfig:
        w = self.world
        return ModelConfig(latent_channels=w.channels, frames=w.frames, height=w.height, width=w.width,
                           text_vocab=w.text_vocab, audio_feat_dim=w.audio_feat_dim, **asdict(self.model))

    def steps(self, stage: int) -> int:
        return (self.train.steps_stage0, self.train.steps_stage1, self.train.steps_stage2)[stage]

    def plan(self, stage: int, halt_at: int = 0) -> TrainPlan:
        kw = {k: getattr(self.train, k) for k in _TRAIN_KEYS}
        return TrainPlan(stage=stage, steps=self.steps(stage), seed=self.seed + 1000 * stage, halt_at=halt_at, **kw)

    def sampler(self, seed: int | None = None) -> SamplerConfig:
        s = self.sample
        sched = GuidanceSchedule(
            config_early=GuidanceConfig(s.early_lambda_txt, s.early_lambda_img, s.early_lambda_a),
            config_late=GuidanceConfig(s.late_lambda_txt, s.late_lambda_img, s.late_lambda_a),
            switch_u=s.switch_u,
        )
        return SamplerConfig(num_steps=s.num_steps, seed=self.seed if seed is None else seed, schedule=sched)

    def flat(self) -> dict[str, object]:
        out: dict[str, object] = {"seed": self.seed}
        for sec in _SECTIONS:
            for f in fields(getattr(self, sec)):
                out[f"{sec}.{f.name}"] = getattr(getattr(self, sec), f.name)
        return out

    def to_text(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in self.flat().items())

    def hash(self) -> str:
        """Lineage hash; ``paths`` does not affect results and is excluded."""
        text = "".join(f"{k} = {v!r}\n" for k, v in self.flat().items() if not k.startswith("paths."))
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    def stage_hash(self, stage: int) -> str:
        """Hash of the settings that can influence checkpoints up to ``stage``.

        Sampling settings, output paths, later-stage budgets and the
        stage-2-only loss settings are left out, so runs that differ only
        there can share earlier-stage checkpoints.
        """
        skip = {"train.steps_stage1", "train.steps_stage2"}
        if stage >= 1:
            skip -= {"train.steps_stage1"}
        if stage >= 2:
            skip -= {"train.steps_stage2"}
        else:
            skip |= {"train.mask_loss_weight", "train.audio_task_ratio_start", "train.audio_task_ratio_end"}
        items = [(k, v) for k, v in self.flat().items()
                 if k not in skip and not k.startswith(("paths.", "sample.", "train.checkpoint_every"))]
        text = "".join(f"{k} = {v!r}\n" for k, v in items) + f"stage = {stage}\n"
        return hashlib.sha256(text.encode()).hexdigest()[:16]


_SECTIONS = ("world", "model", "train", "data", "sample", "paths")

_DOCS = {
    "seed": "master seed: corpus, training streams and sampling noise",
    "world": "synthetic latent world (geometry, identities, motion, audio coupling)",
    "model": "transformer width and depth; geometry follows the world section",
    "train": "per-stage step budgets, optimizer and loss settings",
    "data": "corpus size and held-out split",
    "sample": "Euler steps and the two guidance configurations",
    "paths": "output directory",
}


def _coerce(raw: str, like, key: str):
    try:
        if isinstance(like, bool):
            if raw.lower() not in ("true", "false", "1", "0"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1")
        if isinstance(like, int):
            return int(raw)
        if isinstance(like, float):
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r} (expected {type(like).__name__})") from None


def parse(text: str, base: RunConfig | None = None) -> RunConfig:
    """Parse config text over ``base`` (defaults); unknown keys are errors."""
    base = base or RunConfig()
    known = base.flat()
    updates: dict[str, dict] = {sec: {} for sec in _SECTIONS}
    seed = base.seed
    for lineno, line in enumerate(text.splitlines(), 1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        key, sep, raw = body.partition("=")
        key, raw = key.strip(), raw.strip()
        if not sep or not key:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line.strip()!r}")
        if key not in known:
            raise ConfigError(f"unknown config key {key!r} (line {lineno})")
        value = _coerce(raw, known[key], key)
        if key == "seed":
            seed = value
        else:
            sec, name = key.split(".", 1)
            updates[sec][name] = value
    try:
        return RunConfig(seed=seed, **{sec: replace(getattr(base, sec), **updates[sec]) for sec in _SECTIONS}) \
            .validated()
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc


def load(path) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        return parse(fh.read())


def reference_text(cfg: RunConfig | None = None) -> str:
    """Every key with its default, grouped by section."""
    cfg = cfg or RunConfig()
    flat = cfg.flat()
    lines = ["# run configuration reference: every key and its default", "",
             f"# {_DOCS['seed']}", f"seed = {cfg.seed}"]
    for sec in _SECTIONS:
        lines += ["", f"# [{sec}] {_DOCS[sec]}"]
        lines += [f"{k} = {v}" for k, v in flat.items() if k.startswith(sec + ".")]
    return "\n".join(lines) + "\n"
