"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

The behavioral criteria (8, 9, 12) share one pipeline run per loss weight,
kept under ``runs/acceptance``. A finished run is reused when its config
hash matches; set ``TRIDIT_FRESH=1`` to retrain from scratch.
"""
from __future__ import annotations

import math
import os
import shutil
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from tridit import config, pipeline
from tridit import numerics as nx
from tridit.checkpoint import parameter_digest
from tridit.conditioning import ConditionSet, encode_batch
from tridit.model import MASK_EPS, MicroDiT, ModelConfig
from tridit.numerics import Tensor
from tridit.sampling import (GuidanceConfig, GuidanceSchedule, SamplerConfig, cfg_combine, sample,
                             sample_with_branches, select_guidance)
from tridit.synthdata import World, WorldConfig, generate_corpus
from tridit.training import (AUDIO_VISUAL_SYNC, TEXT_TO_VIDEO, AdamState, TrainBatch, TrainPlan, TrainingData,
                             apply_freeze_policy, curriculum_ratio, draw_task, is_audio_module, is_mask_head,
                             is_self_attention, size_aware_mask_loss, train, train_step)

RUN_ROOT = Path(__file__).resolve().parent.parent / "runs" / "acceptance"

# tolerances, as stated by the criteria
GRAD_REL_TOL = 1e-4
GRAD_PROBES = 50
GRAD_SECONDS = 120
CFG_TOL = 1e-12
ORACLE_TOL = 1e-6
MASK_LOSS_TOL = 1e-6
MASK_TRUTH_MAX = 1e-5
FREEZE_STEPS = 200
CURRICULUM_DRAWS = 10_000
CURRICULUM_TOL = 0.03
OVERFIT_STEPS = 2000
OVERFIT_FRACTION = 0.05
OVERFIT_SECONDS = 600
SYNC_MIN = 0.5
SYNC_MARGIN = 0.3
PIPELINE_SECONDS = 3600
IDENTITY_MARGIN_FRACTION = 0.5
IOU_MIN = 0.5


def report(n: int, ok: bool, detail: str) -> None:
    print(f"\ncriterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


def _tia(cfg: ModelConfig, rng, refs: int = 1) -> ConditionSet:
    return ConditionSet(
        text=rng.integers(cfg.text_vocab, size=3),
        reference_latents=rng.normal(size=(refs, cfg.height, cfg.width, cfg.latent_channels)),
        audio=rng.normal(size=(cfg.frames, cfg.audio_feat_dim)),
    )


# -- 1 ----------------------------------------------------------------------
def test_01_gradient_correctness():
    start = time.perf_counter()
    rng = np.random.default_rng(0)
    cfg = ModelConfig()
    with nx.default_dtype_as(np.float64):
        model = MicroDiT(cfg).astype(np.float64)
        # the zero-initialised output and mask heads would hide upstream gradients
        model.out_proj.weight.data = rng.normal(0, 0.2, model.out_proj.weight.shape)
        for blk in model.blocks:
            blk.mask_head.weight.data = rng.normal(0, 0.2, blk.mask_head.weight.shape)
        batch_conds = [_tia(cfg, rng, 2)]
        z = rng.normal(size=(1, *cfg.video_shape))
        target = rng.normal(size=z.shape)
        gt = np.zeros((1, cfg.frames, cfg.height, cfg.width))
        gt[..., 2:4, 3:5] = 1

        def loss():
            out = model.forward_batch(z, np.array([0.37]), encode_batch(batch_conds, model))
            fm = ((out.velocity - Tensor(target)) ** 2).mean()
            return fm + size_aware_mask_loss(out.mask, gt) * 0.1

        model.zero_grad()
        loss().backward()
        params = dict(model.named_parameters())
        names = sorted(params)
        worst = 0.0
        eps = 1e-5
        for _ in range(GRAD_PROBES):
            name = names[rng.integers(len(names))]
            p = params[name]
            idx = tuple(int(rng.integers(s)) for s in p.data.shape)
            old = p.data[idx]
            with nx.no_grad():
                p.data[idx] = old + eps
                hi = float(loss().data)
                p.data[idx] = old - eps
                lo = float(loss().data)
                p.data[idx] = old
            num = (hi - lo) / (2 * eps)
            ana = float(p.grad[idx])
            scale = max(abs(num), abs(ana))
            # gradients below 1e-9 carry no signal at this step size; compare absolutely
            rel = abs(num - ana) / scale if scale > 1e-9 else abs(num - ana)
            worst = max(worst, rel)
    elapsed = time.perf_counter() - start
    ok = worst < GRAD_REL_TOL and elapsed < GRAD_SECONDS
    report(1, ok, f"max rel err {worst:.2e} over {GRAD_PROBES} probes in {elapsed:.0f}s")
    assert worst < GRAD_REL_TOL
    assert elapsed < GRAD_SECONDS


# -- 2 ----------------------------------------------------------------------
def test_02_cfg_telescoping_and_neutrality():
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(100):
        vs = [rng.normal(size=(4, 8, 8, 4)) * rng.uniform(0.1, 10) for _ in range(4)]
        out = cfg_combine(*vs, GuidanceConfig(1.0, 1.0, 1.0))
        worst = max(worst, float(np.abs(out - vs[0]).max() / (1 + np.abs(vs).max())))

    cfg = ModelConfig(num_blocks=2)
    model = MicroDiT(cfg)
    model.out_proj.weight.data = rng.normal(0, 0.2, model.out_proj.weight.shape).astype(np.float32)
    ti = _tia(cfg, rng).without(audio=True)
    outs = []
    for la in (0.0, 1.0, 9.0):
        sched = GuidanceSchedule(GuidanceConfig(5.0, 1.5, la), GuidanceConfig(1.5, 4.0, la))
        outs.append(sample(model, ti, SamplerConfig(num_steps=6, seed=4, schedule=sched)))
    invariant = all(np.array_equal(outs[0], o) for o in outs[1:])
    ok = worst < CFG_TOL and invariant
    report(2, ok, f"max telescoping err {worst:.1e}; absent-audio sample bit-invariant to lambda_a: {invariant}")
    assert worst < CFG_TOL
    assert invariant


# -- 3 ----------------------------------------------------------------------
def test_03_oracle_path_sampling():
    rng = np.random.default_rng(3)
    errs = {}
    for n in (1, 7, 50):
        z0, z1 = rng.normal(size=(4, 8, 8, 4)), rng.normal(size=(4, 8, 8, 4))
        v = z1 - z0
        out = sample_with_branches(lambda z, tau: [v, v, v, v], z0, SamplerConfig(num_steps=n))
        errs[n] = float(np.abs(out - z1).max())
    ok = max(errs.values()) < ORACLE_TOL
    report(3, ok, "max abs err " + ", ".join(f"N={n}: {e:.1e}" for n, e in errs.items()))
    assert ok


# -- 4 ----------------------------------------------------------------------
def test_04_size_aware_mask_loss():
    gt = np.zeros((2, 2))
    gt[1, 0] = 1
    single = size_aware_mask_loss(Tensor(np.full((2, 2), 0.5), dtype=np.float64), gt).item()
    full_gt = np.ones((3, 3))
    pred = np.full((3, 3), 0.2)
    full = size_aware_mask_loss(Tensor(pred, dtype=np.float64), full_gt).item()
    plain_bce = -math.log(0.2)
    gt3 = np.zeros((4, 8, 8))
    gt3[:, 2:4, 5:7] = 1
    at_truth = size_aware_mask_loss(Tensor(np.clip(gt3, MASK_EPS, 1 - MASK_EPS), dtype=np.float64), gt3).item()
    ok = abs(single - 4 * math.log(2)) <= MASK_LOSS_TOL and full == plain_bce and at_truth < MASK_TRUTH_MAX
    report(4, ok, f"single pixel {single:.9f} vs 4 ln2 {4 * math.log(2):.9f}; full-mask weight exact: "
                  f"{full == plain_bce}; loss at truth {at_truth:.2e}")
    assert abs(single - 4 * math.log(2)) <= MASK_LOSS_TOL
    assert full == plain_bce
    assert at_truth < MASK_TRUTH_MAX


# -- 5 ----------------------------------------------------------------------
def test_05_freeze_policy():
    corpus = generate_corpus(5, WorldConfig(), 64)
    data = TrainingData.from_corpus(corpus, range(64))
    model = MicroDiT(ModelConfig())
    # the output projection starts at zero and is frozen in stage 1, so stage 1
    # only sees gradients once stage 0 has moved it, as in the real curriculum
    train(model, data, TrainPlan(stage=0, steps=20, seed=4))
    before = parameter_digest(model)
    train(model, data, TrainPlan(stage=1, steps=FREEZE_STEPS, seed=5))
    mid = parameter_digest(model)
    guarded = [n for n in before if ".text_attn." in n or ".mlp." in n or "embed" in n
               or n.startswith(("pos_", "in_proj", "null_text", "null_image", "ref_type"))]
    s1_changed = {n for n in before if before[n] != mid[n]}
    s1_ok = bool(guarded) and not any(before[n] != mid[n] for n in guarded) \
        and bool(s1_changed) and all(is_self_attention(n) for n in s1_changed)

    train(model, data, TrainPlan(stage=2, steps=FREEZE_STEPS, seed=6))
    after = parameter_digest(model)
    s2_changed = {n for n in mid if mid[n] != after[n]}
    allowed = {n for n in mid if is_self_attention(n) or is_audio_module(n) or is_mask_head(n)}
    s2_ok = bool(s2_changed) and s2_changed <= allowed and "null_audio" in s2_changed
    ok = s1_ok and s2_ok
    report(5, ok, f"stage 1 changed {len(s1_changed)} tensors (all self-attention, {len(guarded)} guarded "
                  f"unchanged); stage 2 changed {len(s2_changed)} tensors, all within the allowed set")
    assert s1_ok
    assert s2_ok


# -- 6 ----------------------------------------------------------------------
def test_06_curriculum():
    plan = TrainPlan(stage=2, steps=2000)
    r0, r1 = curriculum_ratio(0, 2000, plan), curriculum_ratio(2000, 2000, plan)
    devs = []
    for p in (0.2, 0.35, 0.5):
        rng = np.random.default_rng(int(p * 100))
        hits = sum(draw_task(p, rng) == AUDIO_VISUAL_SYNC for _ in range(CURRICULUM_DRAWS))
        devs.append(abs(hits / CURRICULUM_DRAWS - p))
    ok = r0 == 0.2 and r1 == 0.5 and max(devs) <= CURRICULUM_TOL
    report(6, ok, f"ratio(0)={r0!r} ratio(total)={r1!r}; max draw deviation {max(devs):.4f}")
    assert r0 == 0.2 and r1 == 0.5
    assert max(devs) <= CURRICULUM_TOL


# -- 7 ----------------------------------------------------------------------
def _overfit_run(batch: TrainBatch, plan: TrainPlan) -> list[float]:
    """Repeat one fixed batch, including its noise and times, until the loss target or the budget."""
    model = MicroDiT(ModelConfig())
    trainable = apply_freeze_policy(model, 0)
    opt = AdamState()
    trace = []
    for _ in range(OVERFIT_STEPS):
        rep, opt = train_step(model, batch, plan, opt, np.random.default_rng(77), trainable)
        trace.append(rep.L_FM)
        if rep.L_FM < OVERFIT_FRACTION * trace[0]:
            break
    return trace


def test_07_end_to_end_overfit():
    start = time.perf_counter()
    corpus = generate_corpus(7, WorldConfig(), 8)
    data = TrainingData.from_corpus(corpus, range(4))
    batch = TrainBatch(z1=data.videos, conds=tuple(ConditionSet(text=t) for t in data.text), face_mask=None,
                       task=TEXT_TO_VIDEO)
    plan = TrainPlan(stage=0, steps=OVERFIT_STEPS, seed=7)
    a = _overfit_run(batch, plan)
    b = _overfit_run(batch, plan)
    elapsed = time.perf_counter() - start
    reached = a[-1] < OVERFIT_FRACTION * a[0]
    ok = reached and a == b and elapsed < OVERFIT_SECONDS
    report(7, ok, f"L_FM {a[0]:.4f} -> {a[-1]:.5f} ({a[-1] / a[0]:.2%}) in {len(a)} steps; "
                  f"identical traces: {a == b}; {elapsed:.0f}s for both runs")
    assert reached
    assert a == b
    assert elapsed < OVERFIT_SECONDS


# -- 8, 9, 12: shared pipeline runs -------------------------------------------
def _run(name: str, cfg: config.RunConfig, reuse_from=()) -> dict[str, float]:
    out = RUN_ROOT / name
    if os.environ.get("TRIDIT_FRESH") == "1" and out.exists():
        shutil.rmtree(out)
    cached = pipeline.cached_report(out, cfg)
    if cached is None:
        pipeline.run_all(cfg, out, log=lambda m: print(f"[{name}] {m}", flush=True), reuse_from=reuse_from)
        cached = pipeline.cached_report(out, cfg)
    vals = {k: float(v) for k, v in cached.items() if k != "config_hash"}
    vals["total_seconds"] = pipeline.total_seconds(out)
    return vals


@pytest.fixture(scope="session")
def main_run():
    return _run("main", config.RunConfig())


@pytest.fixture(scope="session")
def beta0_run(main_run):
    base = config.RunConfig()
    cfg = replace(base, train=replace(base.train, mask_loss_weight=0.0))
    return _run("beta0", cfg, reuse_from=[RUN_ROOT / "main"])


def test_08_audio_visual_sync(main_run):
    r = main_run
    margin = r["sync_corr"] - r["sync_corr_shuffled"]
    ok = r["sync_corr"] >= SYNC_MIN and margin >= SYNC_MARGIN and r["total_seconds"] <= PIPELINE_SECONDS
    report(8, ok, f"sync_corr {r['sync_corr']:.3f} (shuffled {r['sync_corr_shuffled']:.3f}, margin {margin:.3f}) "
                  f"on {int(r['n_samples'])} held-out; pipeline {r['total_seconds'] / 60:.1f} min")
    assert r["sync_corr"] >= SYNC_MIN
    assert margin >= SYNC_MARGIN
    assert r["total_seconds"] <= PIPELINE_SECONDS


def test_09_identity_preservation(main_run):
    r = main_run
    oracle = World(WorldConfig()).mean_inter_identity_distance
    margin = r["identity_score_random"] - r["identity_score"]
    ok = margin >= IDENTITY_MARGIN_FRACTION * oracle
    report(9, ok, f"identity true {r['identity_score']:.3f} vs random {r['identity_score_random']:.3f}: "
                  f"margin {margin:.3f}, need >= {IDENTITY_MARGIN_FRACTION * oracle:.3f}")
    assert ok


def test_10_time_adaptive_schedule():
    s = GuidanceSchedule()
    early = all(select_guidance(u, s) is s.config_early for u in (1.0, 0.99, 0.98))
    late = all(select_guidance(u, s) is s.config_late for u in (0.9799, 0.5, 0.0))
    flags = []
    sample_with_branches(lambda z, t: [z, z, z, z], np.zeros(3), SamplerConfig(num_steps=50),
                         on_step=lambda info: flags.append(info["early"]))
    want = math.ceil(0.02 * 50)
    ok = early and late and sum(flags) == want and len(flags) == 50
    report(10, ok, f"boundary selection correct: {early and late}; early steps {sum(flags)}/{len(flags)}, want {want}")
    assert early and late
    assert sum(flags) == want


def test_11_persistence(tmp_path):
    from tridit import checkpoint as ckpt

    corpus = generate_corpus(11, WorldConfig(), 24)
    data = TrainingData.from_corpus(corpus, range(24))
    k = 10
    whole = MicroDiT(ModelConfig())
    trace_whole = []
    opt_whole = train(whole, data, TrainPlan(stage=0, steps=2 * k, seed=11), on_step=lambda r: trace_whole.append(r.tsv()))

    split = MicroDiT(ModelConfig())
    trace_split = []
    opt = train(split, data, TrainPlan(stage=0, steps=2 * k, seed=11, halt_at=k), on_step=lambda r: trace_split.append(r.tsv()))
    ckpt.save(tmp_path / "mid.ckpt", ckpt.from_model(split, opt, 0, seed=11))
    resumed_ck = ckpt.load(tmp_path / "mid.ckpt", ModelConfig())
    ckpt.save(tmp_path / "mid2.ckpt", resumed_ck)
    roundtrip = (tmp_path / "mid.ckpt").read_bytes() == (tmp_path / "mid2.ckpt").read_bytes()
    resumed = ckpt.restore_model(resumed_ck)
    train(resumed, data, TrainPlan(stage=0, steps=2 * k, seed=11), opt_state=resumed_ck.opt,
          on_step=lambda r: trace_split.append(r.tsv()))
    same_params = parameter_digest(resumed) == parameter_digest(whole)
    same_trace = trace_split == trace_whole
    ckpt.save(tmp_path / "a.ckpt", ckpt.from_model(whole, opt_whole, 0, seed=11))
    ckpt.save(tmp_path / "b.ckpt", ckpt.from_model(resumed, resumed_ck.opt, 0, seed=11))
    same_files = (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    ok = roundtrip and same_params and same_trace and same_files
    report(11, ok, f"save/load/save identical: {roundtrip}; split run {k}+{k} == unbroken {2 * k}: "
                   f"trace {same_trace}, params {same_params}, checkpoint bytes {same_files}")
    assert roundtrip
    assert same_trace and same_params and same_files


def test_12_focus_by_predicting(main_run, beta0_run):
    iou = main_run["mask_iou"]
    s1, s0 = main_run["sync_corr"], beta0_run["sync_corr"]
    ok = iou > IOU_MIN and s1 >= s0
    report(12, ok, f"mask IoU (beta 0.1) {iou:.3f} (beta 0: {beta0_run['mask_iou']:.3f}); "
                   f"sync_corr beta 0.1 {s1:.3f} vs beta 0 {s0:.3f}")
    assert iou > IOU_MIN
    assert s1 >= s0
