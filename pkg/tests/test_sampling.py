import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from tridit.conditioning import ConditionSet
from tridit.model import MicroDiT
from tridit.sampling import (GuidanceConfig, GuidanceSchedule, SamplerConfig, branch_conditions, cfg_combine,
                             initial_noise, sample, sample_many, sample_with_branches, select_guidance,
                             unique_branches)

arrays = hnp.arrays(np.float64, (2, 3), elements=st.floats(-100, 100))


@given(arrays, arrays, arrays, arrays)
def test_unit_scales_telescope_to_full(a, b, c, d):
    out = cfg_combine(a, b, c, d, GuidanceConfig(1.0, 1.0, 1.0))
    np.testing.assert_allclose(out, a, atol=1e-9 * (1 + np.abs([a, b, c, d]).max()))


@given(arrays, arrays, st.floats(0, 10), st.floats(0, 10))
def test_zero_scales_give_null(a, d, x, y):
    out = cfg_combine(a, a, a, d, GuidanceConfig(0.0, x, y))
    np.testing.assert_array_equal(out, d)


def test_combine_rejects_shape_mismatch():
    with pytest.raises(ValueError):
        cfg_combine(np.zeros(2), np.zeros(2), np.zeros(3), np.zeros(2), GuidanceConfig(1, 1, 1))


def test_guidance_config_validation():
    with pytest.raises(ValueError):
        GuidanceConfig(-1.0, 1.0, 1.0)
    with pytest.raises(ValueError):
        GuidanceConfig(1.0, float("nan"), 1.0)
    with pytest.raises(ValueError):
        GuidanceSchedule(switch_u=1.0)


def test_select_guidance_boundaries():
    s = GuidanceSchedule()
    for u in (1.0, 0.99, 0.98):
        assert select_guidance(u, s) is s.config_early
    for u in (0.9799, 0.5, 0.0):
        assert select_guidance(u, s) is s.config_late


def test_branch_nulling_order():
    c = ConditionSet(text=[1], reference_latents=np.zeros((1, 8, 8, 4)), audio=np.zeros((4, 16)))
    assert [b.presence for b in branch_conditions(c)] == [
        (True, True, True), (True, True, False), (True, False, False), (False, False, False)]


def test_unique_branches_collapse_absent_modalities():
    c = ConditionSet(text=[1], reference_latents=np.zeros((1, 8, 8, 4)))
    assert unique_branches(c) == [0, 0, 2, 3]
    assert unique_branches(ConditionSet(text=[1], audio=np.zeros((4, 16)))) == [0, 1, 1, 3]
    assert unique_branches(ConditionSet()) == [0, 0, 0, 0]


@pytest.mark.parametrize("n", [1, 7, 50])
def test_oracle_velocity_reaches_target(n):
    rng = np.random.default_rng(n)
    z0, z1 = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
    v = z1 - z0
    out = sample_with_branches(lambda z, tau: [v, v, v, v], z0, SamplerConfig(num_steps=n))
    assert np.abs(out - z1).max() < 1e-6


def test_early_steps_counted():
    seen = []
    sample_with_branches(lambda z, t: [z] * 4, np.zeros(2), SamplerConfig(num_steps=50),
                         on_step=lambda info: seen.append(info["early"]))
    assert sum(seen) == 1 and seen[0]


def test_initial_noise_seeded():
    np.testing.assert_array_equal(initial_noise(3, (2, 2)), initial_noise(3, (2, 2)))
    assert not np.array_equal(initial_noise(3, (2, 2)), initial_noise(4, (2, 2)))


def _model_and_cond(tiny_cfg, audio=True):
    rng = np.random.default_rng(0)
    model = MicroDiT(tiny_cfg)
    model.out_proj.weight.data = rng.normal(size=model.out_proj.weight.shape).astype(np.float32)
    cond = ConditionSet(text=[1, 2], reference_latents=rng.normal(size=(1, 4, 4, 4)),
                        audio=rng.normal(size=(tiny_cfg.frames, tiny_cfg.audio_feat_dim)) if audio else None)
    return model, cond


def test_absent_audio_sample_invariant_to_audio_scale(tiny_cfg):
    model, cond = _model_and_cond(tiny_cfg, audio=False)
    outs = []
    for la in (0.0, 1.0, 7.5):
        sched = GuidanceSchedule(GuidanceConfig(2.0, 1.5, la), GuidanceConfig(1.0, 3.0, la))
        outs.append(sample(model, cond, SamplerConfig(num_steps=4, seed=1, schedule=sched)))
    np.testing.assert_array_equal(outs[0], outs[1])
    np.testing.assert_array_equal(outs[0], outs[2])


def test_branch_counts_reported(tiny_cfg):
    model, cond = _model_and_cond(tiny_cfg)
    counts = []
    sample(model, cond, SamplerConfig(num_steps=2), on_step=lambda i: counts.append(i["branches"]))
    assert counts == [4, 4]
    counts.clear()
    sample(model, cond.without(audio=True), SamplerConfig(num_steps=2), on_step=lambda i: counts.append(i["branches"]))
    assert counts == [3, 3]


def test_batched_sampling_matches_single(tiny_cfg):
    model, cond = _model_and_cond(tiny_cfg)
    other = ConditionSet(text=[3], reference_latents=np.ones((2, 4, 4, 4)))
    sc = SamplerConfig(num_steps=3, seed=5)
    both = sample_many(model, [cond, other], sc, seeds=[5, 6])
    np.testing.assert_allclose(both[0], sample(model, cond, sc), atol=1e-5)


def test_sampling_repeatable(tiny_cfg):
    model, cond = _model_and_cond(tiny_cfg)
    sc = SamplerConfig(num_steps=3, seed=2)
    np.testing.assert_array_equal(sample(model, cond, sc), sample(model, cond, sc))
