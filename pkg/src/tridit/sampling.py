"""Euler ODE sampling with nested three-modality guidance.

Two clocks are used. Flow time ``tau`` runs from 0 (noise) to 1 (data) and
drives the integrator and the model; denoising time ``u = 1 - tau`` runs
from 1 to 0 and drives the guidance schedule. Step ``k`` covers
``tau in [k/N, (k+1)/N]`` and is governed by the guidance configuration in
force at the denoising time it lands on, ``u = 1 - (k+1)/N``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import numerics as nx
from .conditioning import ConditionSet, collate, substitute_nulls

BRANCHES = ("TIA", "TI", "T", "none")


@dataclass(frozen=True)
class GuidanceConfig:
    lambda_txt: float
    lambda_img: float
    lambda_a: float

    def __post_init__(self):
        for k in ("lambda_txt", "lambda_img", "lambda_a"):
            v = getattr(self, k)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"{k} must be finite and non-negative, got {v}")

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.lambda_txt, self.lambda_img, self.lambda_a)


@dataclass(frozen=True)
class GuidanceSchedule:
    config_early: GuidanceConfig = GuidanceConfig(5.0, 1.5, 1.0)
    config_late: GuidanceConfig = GuidanceConfig(1.5, 4.0, 4.0)
    switch_u: float = 0.98

    def __post_init__(self):
        if not 0.0 < self.switch_u < 1.0:
            raise ValueError(f"switch_u must lie strictly in (0, 1), got {self.switch_u}")


@dataclass(frozen=True)
class SamplerConfig:
    num_steps: int = 50
    seed: int = 0
    schedule: GuidanceSchedule = field(default_factory=GuidanceSchedule)

    def __post_init__(self):
        if self.num_steps < 1:
            raise ValueError("num_steps must be >= 1")


def cfg_combine(v_full, v_ti, v_t, v_null, g: GuidanceConfig):
    """lambda_a (TIA - TI) + lambda_img (TI - T) + lambda_txt (T - none) + none."""
    shapes = {np.shape(v) for v in (v_full, v_ti, v_t, v_null)}
    if len(shapes) != 1:
        raise ValueError(f"branch velocity shapes differ: {sorted(shapes)}")
    return (g.lambda_a * (v_full - v_ti)
            + g.lambda_img * (v_ti - v_t)
            + g.lambda_txt * (v_t - v_null)
            + v_null)


def select_guidance(u: float, schedule: GuidanceSchedule) -> GuidanceConfig:
    """Early (text/image-dominant) configuration for ``u >= switch_u``."""
    return schedule.config_early if u >= schedule.switch_u else schedule.config_late


def branch_conditions(cond: ConditionSet) -> list[ConditionSet]:
    """(TIA, TI, T, none): null audio, then image, then text."""
    tia = cond
    ti = tia.without(audio=True)
    t = ti.without(image=True)
    none = t.without(text=True)
    return [tia, ti, t, none]


def unique_branches(cond: ConditionSet) -> list[int]:
    """Index of the first identical branch for each of the four branches.

    Nulling an already-absent modality yields the same condition set, so that
    branch reuses the earlier velocity and its guidance difference is exactly 0.
    """
    presences = [b.presence for b in branch_conditions(cond)]
    return [presences.index(p) for p in presences]


def initial_noise(seed: int, shape, dtype=np.float32) -> np.ndarray:
    return np.random.default_rng(np.random.SeedSequence([int(seed), 11])).standard_normal(shape).astype(dtype)


def step_times(k: int, n: int) -> tuple[float, float, float, float]:
    tau0, tau1 = k / n, (k + 1) / n
    return tau0, tau1, 1.0 - tau0, 1.0 - tau1


GuidedVelocity = Callable[[np.ndarray, float, GuidanceConfig], np.ndarray]


def integrate(z0: np.ndarray, guided_velocity: GuidedVelocity, sc: SamplerConfig,
              on_step: Callable[[dict], None] | None = None) -> np.ndarray:
    """Explicit Euler from tau=0 to tau=1 in ``num_steps`` uniform steps."""
    n = sc.num_steps
    z = np.array(z0, copy=True)
    dt = 1.0 / n
    for k in range(n):
        tau0, tau1, u0, u1 = step_times(k, n)
        g = select_guidance(u1, sc.schedule)
        v = guided_velocity(z, tau0, g)
        if on_step is not None:
            on_step({"step": k, "tau": tau0, "u": u0, "tau_end": tau1, "u_end": u1,
                     "config": g, "early": g is sc.schedule.config_early, "z": z})
        z = (z + dt * v).astype(z.dtype)
    return z


class _BranchPlan:
    """Encoded unique branches for a list of condition sets, grouped by reference count."""

    def __init__(self, model, conds: Sequence[ConditionSet]):
        self.branch_index = [unique_branches(c) for c in conds]
        encoded = []
        owners = []  # (cond index, branch index)
        with nx.no_grad():
            for i, c in enumerate(conds):
                for b, bc in enumerate(branch_conditions(c)):
                    if self.branch_index[i][b] == b:
                        encoded.append(substitute_nulls(bc, model))
                        owners.append((i, b))
        groups: dict[int, list[int]] = {}
        for j, e in enumerate(encoded):
            groups.setdefault(e.reference_slots.shape[0], []).append(j)
        self.groups = []
        for r in sorted(groups):
            members = groups[r]
            self.groups.append(([owners[j] for j in members], collate([encoded[j] for j in members])))
        self.num_evaluations = len(encoded)


def sample_many(model, conds: Sequence[ConditionSet], sc: SamplerConfig, seeds: Sequence[int] | None = None,
                chunk: int = 64, on_step: Callable[[dict], None] | None = None) -> np.ndarray:
    """Sample one video per condition set; returns [N, f, h, w, d] (video frames only).

    Reference latents enter every model evaluation as clean conditioning and
    are never integrated.
    """
    cfg = model.cfg
    n = len(conds)
    if n == 0:
        raise ValueError("no condition sets to sample")
    if seeds is None:
        seeds = [sc.seed + i for i in range(n)]
    dtype = model.in_proj.weight.dtype
    z = np.stack([initial_noise(s, cfg.video_shape, dtype) for s in seeds])
    plan = _BranchPlan(model, conds)
    v_branch = np.zeros((n, 4, *cfg.video_shape), dtype=dtype)
    steps = sc.num_steps
    dt = 1.0 / steps
    for k in range(steps):
        tau0, tau1, u0, u1 = step_times(k, steps)
        g = select_guidance(u1, sc.schedule)
        with nx.no_grad():
            for owners, batch in plan.groups:
                idx = np.array([i for i, _ in owners])
                for lo in range(0, len(owners), chunk):
                    sl = slice(lo, lo + chunk)
                    sub = _slice_batch(batch, sl)
                    out = model.forward_batch(z[idx[sl]], np.full(len(idx[sl]), tau0), sub)
                    for (i, b), v in zip(owners[sl], out.velocity.data):
                        v_branch[i, b] = v
        for i in range(n):
            bi = plan.branch_index[i]
            vs = [v_branch[i, bi[b]] for b in range(4)]
            v = cfg_combine(*vs, g)
            if on_step is not None:
                on_step({"step": k, "index": i, "tau": tau0, "u": u0, "tau_end": tau1, "u_end": u1,
                         "config": g, "early": g is sc.schedule.config_early,
                         "branches": len(set(bi)), "z": z[i].copy()})
            z[i] = z[i] + dt * v
    return z


def _slice_batch(batch, sl: slice):
    from .conditioning import ConditionBatch

    def cut(a):
        return None if a is None else a[sl]

    return ConditionBatch(
        text=nx.Tensor(batch.text.data[sl]), text_bias=cut(batch.text_bias),
        references=nx.Tensor(batch.references.data[sl]), self_bias=cut(batch.self_bias),
        audio=nx.Tensor(batch.audio.data[sl]), num_refs=batch.num_refs[sl],
    )


def sample(model, cond: ConditionSet, sc: SamplerConfig, on_step: Callable[[dict], None] | None = None) -> np.ndarray:
    """Single-condition sampler; returns [f, h, w, d]."""
    return sample_many(model, [cond], sc, seeds=[sc.seed], on_step=on_step)[0]


def sample_with_branches(branch_velocity: Callable[[np.ndarray, float], Sequence[np.ndarray]],
                         z0: np.ndarray, sc: SamplerConfig,
                         on_step: Callable[[dict], None] | None = None) -> np.ndarray:
    """Guided Euler sampling over an arbitrary four-branch velocity function.

    ``branch_velocity(z, tau)`` returns the (TIA, TI, T, none) velocities.
    """
    def guided(z, tau, g):
        return cfg_combine(*branch_velocity(z, tau), g)

    return integrate(z0, guided, sc, on_step)
