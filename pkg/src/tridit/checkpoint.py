"""Binary checkpoints: model parameters, AdamW moments, step and RNG seed."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import tensorfile
from .model import MicroDiT, ModelConfig
from .training import AdamState

MAGIC = b"TRIDITCK"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def canonical_model_config(cfg: ModelConfig) -> str:
    return ";".join(f"{k}={v!r}" for k, v in sorted(cfg.to_dict().items()))


def model_config_hash(cfg: ModelConfig) -> str:
    return hashlib.sha256(canonical_model_config(cfg).encode()).hexdigest()[:16]


@dataclass
class Checkpoint:
    model_config: ModelConfig
    params: dict[str, np.ndarray]
    opt: AdamState
    stage: int
    plan_fingerprint: str = ""
    seed: int = 0
    config_hash: str = ""
    extra: dict[str, str] = field(default_factory=dict)

    @property
    def step(self) -> int:
        return self.opt.step


def from_model(model: MicroDiT, opt: AdamState | None, stage: int, plan_fingerprint: str = "",
               seed: int = 0, config_hash: str = "") -> Checkpoint:
    return Checkpoint(model_config=model.cfg, params={n: p.data.copy() for n, p in model.named_parameters()},
                      opt=opt or AdamState(), stage=stage, plan_fingerprint=plan_fingerprint,
                      seed=seed, config_hash=config_hash)


def _header(ck: Checkpoint) -> str:
    lines = [
        f"format_version={FORMAT_VERSION}",
        f"model_config={canonical_model_config(ck.model_config)}",
        f"model_config_hash={model_config_hash(ck.model_config)}",
        f"config_hash={ck.config_hash}",
        f"stage={ck.stage}",
        f"step={ck.opt.step}",
        f"rng_seed={ck.seed}",
        f"plan={ck.plan_fingerprint}",
    ]
    lines += [f"extra.{k}={v}" for k, v in sorted(ck.extra.items())]
    return "\n".join(lines)


def encode(ck: Checkpoint) -> bytes:
    tensors: dict[str, np.ndarray] = {}
    for name, arr in ck.params.items():
        tensors[f"param/{name}"] = arr
    for name in sorted(ck.opt.m):
        tensors[f"adam.m/{name}"] = ck.opt.m[name]
        tensors[f"adam.v/{name}"] = ck.opt.v[name]
    return tensorfile.encode(MAGIC, FORMAT_VERSION, _header(ck), tensors)


def save(path, ck: Checkpoint) -> None:
    tensorfile.atomic_write(path, encode(ck))


def _parse_model_config(text: str) -> ModelConfig:
    kinds = {k: type(v) for k, v in ModelConfig().to_dict().items()}
    kv = {}
    for part in text.split(";"):
        k, _, v = part.partition("=")
        if k not in kinds:
            raise CheckpointError(f"unknown model_config key {k!r}")
        kv[k] = kinds[k](v)
    return ModelConfig(**kv)


def decode(blob: bytes, expect_config: ModelConfig | None = None) -> Checkpoint:
    try:
        version, header, tensors = tensorfile.decode(blob, MAGIC)
    except tensorfile.FormatError as exc:
        raise CheckpointError(str(exc)) from exc
    if version != FORMAT_VERSION:
        raise CheckpointError(f"checkpoint format_version {version} != supported {FORMAT_VERSION}")
    meta = dict(line.split("=", 1) for line in header.splitlines())
    cfg = _parse_model_config(meta["model_config"])
    if expect_config is not None and cfg != expect_config:
        raise CheckpointError(f"checkpoint model_config {cfg} does not match expected {expect_config}")
    params, m, v = {}, {}, {}
    for key, arr in tensors.items():
        kind, _, name = key.partition("/")
        {"param": params, "adam.m": m, "adam.v": v}[kind][name] = arr
    opt = AdamState(step=int(meta["step"]), m=m, v=v)
    extra = {k[6:]: val for k, val in meta.items() if k.startswith("extra.")}
    return Checkpoint(model_config=cfg, params=params, opt=opt, stage=int(meta["stage"]),
                      plan_fingerprint=meta.get("plan", ""), seed=int(meta.get("rng_seed", 0)),
                      config_hash=meta.get("config_hash", ""), extra=extra)


def load(path, expect_config: ModelConfig | None = None) -> Checkpoint:
    with open(path, "rb") as fh:
        return decode(fh.read(), expect_config)


def restore_model(ck: Checkpoint) -> MicroDiT:
    model = MicroDiT(ck.model_config)
    model.load_state_dict(ck.params)
    return model


def parameter_digest(model_or_params) -> dict[str, str]:
    """sha256 per parameter, for bit-exact freeze checks."""
    items = model_or_params.named_parameters() if hasattr(model_or_params, "named_parameters") \
        else model_or_params.items()
    out = {}
    for name, p in items:
        arr = p.data if hasattr(p, "data") and not isinstance(p, np.ndarray) else p
        out[name] = hashlib.sha256(np.ascontiguousarray(arr).tobytes()).hexdigest()
    return out
