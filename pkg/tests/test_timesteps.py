import numpy as np
import pytest
from scipy import stats

from flashlab.timesteps import (
    DEFAULT_ANCHOR_BETAS,
    anchor_indices,
    betas_from_anchors,
    build_pi,
    default_phase_plan,
    inference_grid,
    phase_lookup,
    preset_distribution,
    preset_plan,
    sample_timestep,
)


def chis_square_pvalue(counts, probs):
    """Chi-square p-value with low-expectation bins merged (expected >= 5)."""
    n = counts.sum()
    expected = probs * n
    keep = expected >= 5.0
    obs = np.append(counts[keep], counts[~keep].sum())
    exp = np.append(expected[keep], expected[~keep].sum())
    if exp[-1] == 0.0:
        assert obs[-1] == 0
        obs, exp = obs[:-1], exp[:-1]
    if len(obs) < 2:
        return 1.0
    return stats.chisquare(obs, exp).pvalue


def test_build_pi_one_hot_concentrates():
    betas = np.zeros(32)
    betas[-1] = 1.0
    dist = build_pi(32, betas)
    assert dist.prob_of_atom(32) >= 0.999
    assert abs(dist.probs.sum() - 1.0) < 1e-12


def test_build_pi_warmup_symmetry():
    dist = build_pi(32, betas_from_anchors(32, (0.5, 0.5, 0.0, 0.0)))
    assert abs(dist.prob_of_atom(8) - dist.prob_of_atom(16)) < 1e-12


def test_build_pi_uniform_close_to_uniform():
    dist = build_pi(32, np.full(32, 1.0 / 32))
    assert np.abs(dist.probs - 1.0 / 32).max() < 1e-3


def test_build_pi_validation():
    with pytest.raises(ValueError):
        build_pi(30, np.ones(30))
    with pytest.raises(ValueError):
        build_pi(32, np.zeros(32))
    with pytest.raises(ValueError):
        build_pi(32, -np.ones(32))


def test_sample_one_hot_always_that_atom():
    betas = np.zeros(32)
    betas[15] = 1.0
    dist = build_pi(32, betas)
    rng = np.random.default_rng(0)
    for _ in range(50):
        i, t = sample_timestep(dist, rng)
        assert i == 16 and t == 0.5


def test_sample_warmup_frequencies():
    dist = preset_distribution("warmup", 32)
    rng = np.random.default_rng(1)
    draws = rng.choice(dist.k, size=100_000, p=dist.probs)
    counts = np.bincount(draws, minlength=32)
    f_quarter = counts[7] / 100_000
    f_half = counts[15] / 100_000
    assert abs(f_quarter - 0.5) < 0.01
    assert abs(f_half - 0.5) < 0.01
    assert (counts.sum() - counts[7] - counts[15]) / 100_000 < 0.005


def test_phase3_modal_atom_is_full_noise():
    dist = preset_distribution("phase3", 32)
    assert int(np.argmax(dist.probs)) + 1 == 32


@pytest.mark.parametrize("preset", ["warmup", "phase1", "phase2", "phase3",
                                    "uniform", "gaussian", "sharp"])
def test_sampler_chi_square_for_presets(preset):
    dist = preset_distribution(preset, 32)
    rng = np.random.default_rng(hash(preset) % 2**32)
    draws = rng.choice(dist.k, size=100_000, p=dist.probs)
    counts = np.bincount(draws, minlength=dist.k).astype(float)
    assert chis_square_pvalue(counts, dist.probs) > 0.01


@pytest.mark.parametrize("preset", ["phase1", "phase2", "phase3", "sharp"])
def test_anchor_dominance_post_warmup(preset):
    dist = preset_distribution(preset, 32)
    anchors = set(anchor_indices(32))
    anchor_p = min(dist.prob_of_atom(i) for i in anchors)
    non_anchor_p = max(dist.prob_of_atom(i) for i in range(1, 33) if i not in anchors)
    assert anchor_p > non_anchor_p


def test_default_plan_lambda_ramp_and_boundaries():
    plan = default_phase_plan(32, shift_every=5000)
    dist, la, ld = phase_lookup(plan, 0)
    assert (la, ld) == (0.0, 0.0)
    assert dist.prob_of_atom(8) > 0.4
    _, la, ld = phase_lookup(plan, 19999)
    assert (la, ld) == (0.3, 0.7)
    # boundaries are left-closed: the new phase applies exactly at its start
    _, la, _ = phase_lookup(plan, 5000)
    assert la == 0.1
    _, la, _ = phase_lookup(plan, 4999)
    assert la == 0.0


def test_phase_lookup_validation():
    plan = default_phase_plan(32)
    with pytest.raises(ValueError):
        phase_lookup(plan, -1)


def test_anchor_k_mass_monotone_across_default_phases():
    plan = default_phase_plan(32)
    masses = [phase_lookup(plan, p.start_iter)[0].prob_of_atom(32) for p in plan.phases]
    assert all(b >= a for a, b in zip(masses, masses[1:]))


def test_plan_validation():
    from flashlab.timesteps import Phase, PhasePlan

    with pytest.raises(ValueError):
        PhasePlan(phases=(), k=32)
    with pytest.raises(ValueError):
        PhasePlan(phases=(Phase(5, (0.5, 0.5, 0, 0), 0, 0),), k=32)
    with pytest.raises(ValueError):
        PhasePlan(phases=(Phase(0, (0, 0, 0, 0.5), 0, 0),
                          Phase(10, (0.5, 0.5, 0, 0), 0, 0)), k=32)


def test_inference_grid():
    assert inference_grid(1, 32) == [1.0]
    assert inference_grid(2, 32) == [1.0, 0.5]
    assert inference_grid(4, 32) == [1.0, 0.75, 0.5, 0.25]
    with pytest.raises(ValueError):
        inference_grid(3, 32)
    with pytest.raises(ValueError):
        inference_grid(4, 30)


def test_default_anchor_values_match_plan():
    plan = default_phase_plan(32)
    assert tuple(plan.phases[1].anchor_betas) == DEFAULT_ANCHOR_BETAS[1]
    assert plan.phases[0].beta_floor == 0.0
    assert plan.phases[1].beta_floor == 0.01


def test_preset_plans():
    for name in ("ours", "sharp", "uniform", "gaussian"):
        plan = preset_plan(name, 32)
        dist, _, _ = phase_lookup(plan, 12_000)
        assert abs(dist.probs.sum() - 1.0) < 1e-12
    uni = preset_plan("uniform", 32)
    d0, _, _ = phase_lookup(uni, 0)
    d3, _, _ = phase_lookup(uni, 16_000)
    assert np.array_equal(d0.probs, d3.probs)
    sharp = preset_plan("sharp", 32)
    d, _, _ = phase_lookup(sharp, 16_000)
    assert np.count_nonzero(d.probs) == 4
    with pytest.raises(ValueError):
        preset_plan("nope", 32)


def test_sharp_samples_exactly_four_atoms():
    dist = preset_distribution("sharp", 32)
    assert np.count_nonzero(dist.probs) == 4
    ours = preset_distribution("phase3", 32)
    assert np.count_nonzero(ours.probs) == 32
