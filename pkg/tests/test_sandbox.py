import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conformal_friq.sandbox import (
    MAX_SHIFT_LEVEL,
    Fidelity,
    SandboxProblem,
    draw_posterior_samples,
    draw_truth,
    instance_noise_std,
    instance_seed,
    make_problem,
    observe,
    posterior_law,
    recover,
    rng_stream,
    shifted_problem,
)


def flat_problem(h=4, w=4, mean=0.0, std=1.0, noise=0.5, **kw):
    d = h * w
    return SandboxProblem(np.full((h, w), mean), np.full((h, w), std), noise, np.arange(d), **kw)


def grid_posterior(mu0, s0, y, sigma, n=200_001):
    """Posterior mean and std of one pixel by brute-force quadrature."""
    half = 12 * s0
    x = np.linspace(mu0 - half, mu0 + half, n)
    logp = -0.5 * ((x - mu0) / s0) ** 2 - 0.5 * ((y - x) / sigma) ** 2
    p = np.exp(logp - logp.max())
    p /= p.sum()
    m = float(np.sum(p * x))
    return m, math.sqrt(float(np.sum(p * (x - m) ** 2)))


def test_rng_streams_are_keyed():
    a = rng_stream(5, 1, 2).random(3)
    np.testing.assert_array_equal(a, rng_stream(5, 1, 2).random(3))
    assert not np.array_equal(a, rng_stream(5, 2, 1).random(3))
    assert instance_seed(0, 1) != instance_seed(0, 2)
    assert 0 <= instance_seed(2**64 - 1, 7) < 2**63


def test_problem_validation():
    with pytest.raises(ValueError):
        flat_problem(std=0.0)
    with pytest.raises(ValueError):
        flat_problem(noise=-1.0)
    with pytest.raises(ValueError):
        SandboxProblem(np.zeros((2, 2)), np.ones((2, 2)), 1.0, np.array([0, 1, 1, 2]))
    with pytest.raises(ValueError):
        flat_problem(rates=(4, 4))


def test_masks_nested_and_sized(problem):
    d = problem.size
    prev = None
    for r in sorted(problem.rates, reverse=True):
        m = problem.mask(r)
        assert len(m) == math.ceil(d / r)
        if prev is not None:
            assert set(prev) <= set(m)
        prev = m
    assert sorted(problem.mask(1)) == list(range(d))
    with pytest.raises(KeyError):
        problem.mask(3)


def test_masks_favour_center(problem):
    h, w = problem.shape
    yy, xx = np.unravel_index(problem.mask(16), problem.shape)
    dist = np.hypot(yy - (h - 1) / 2, xx - (w - 1) / 2)
    all_y, all_x = np.mgrid[0:h, 0:w]
    assert dist.mean() < np.hypot(all_y - (h - 1) / 2, all_x - (w - 1) / 2).mean()


def test_draw_truth_degenerate_and_deterministic(problem):
    p = flat_problem(mean=0.3, std=1e-12)
    np.testing.assert_allclose(draw_truth(p, 1), 0.3, atol=1e-6)
    np.testing.assert_array_equal(draw_truth(problem, 9), draw_truth(problem, 9))
    assert not np.array_equal(draw_truth(problem, 9), draw_truth(problem, 10))


def test_draw_truth_moments():
    p = flat_problem(h=1, w=1, mean=0.7, std=0.4)
    x = np.array([draw_truth(p, s)[0, 0] for s in range(20_000)])
    assert abs(x.mean() - 0.7) < 4 * 0.4 / math.sqrt(len(x))
    assert abs(x.std() / 0.4 - 1) < 0.03


def test_observe_noiseless_and_full():
    p = flat_problem(noise=0.0)
    x = draw_truth(p, 3)
    obs = observe(p, x, 1, 3)
    assert len(obs.values) == p.size
    np.testing.assert_array_equal(obs.values, x.ravel()[obs.mask])
    with pytest.raises(KeyError):
        observe(p, x, 5, 3)
    with pytest.raises(ValueError):
        observe(p, np.zeros((2, 2)), 1, 3)


def test_observe_nested_noise_reuse(problem):
    x = draw_truth(problem, 4)
    o8, o4 = observe(problem, x, 8, 4), observe(problem, x, 4, 4)
    assert o8.noise_std == o4.noise_std == instance_noise_std(problem, 4)
    np.testing.assert_array_equal(o4.values[: len(o8.values)], o8.values)
    np.testing.assert_array_equal(o4.mask[: len(o8.mask)], o8.mask)


def test_posterior_equal_precision():
    p = flat_problem(std=0.5, noise=0.5)
    obs = observe(p, draw_truth(p, 0), 2, 0)
    m, s = posterior_law(p, obs)
    seen = np.zeros(p.size, bool)
    seen[obs.mask] = True
    np.testing.assert_allclose(m.ravel()[obs.mask], obs.values / 2, atol=1e-15)
    np.testing.assert_allclose(s.ravel()[seen] ** 2, 0.25 / 2, atol=1e-15)
    np.testing.assert_array_equal(m.ravel()[~seen], 0.0)
    np.testing.assert_array_equal(s.ravel()[~seen], 0.5)


def test_posterior_matches_quadrature(problem):
    x = draw_truth(problem, 21)
    obs = observe(problem, x, 4, 21)
    m, s = posterior_law(problem, obs)
    for k in range(0, len(obs.mask), 37):
        j = obs.mask[k]
        mu0, s0 = problem.prior_mean.ravel()[j], problem.prior_std.ravel()[j]
        gm, gs = grid_posterior(mu0, s0, obs.values[k], obs.noise_std)
        assert m.ravel()[j] == pytest.approx(gm, abs=1e-4)
        assert s.ravel()[j] == pytest.approx(gs, abs=1e-4)


def test_posterior_contraction_and_monotone(problem):
    x = draw_truth(problem, 8)
    prev = None
    for r in (16, 8, 4, 2, 1):
        obs = observe(problem, x, r, 8)
        _, s = posterior_law(problem, obs)
        assert np.all(s.ravel()[obs.mask] < problem.prior_std.ravel()[obs.mask])
        if prev is not None:
            assert np.all(s <= prev)
        prev = s


def test_zero_noise_posterior():
    p = flat_problem(noise=0.0)
    obs = observe(p, draw_truth(p, 2), 1, 2)
    m, s = posterior_law(p, obs)
    np.testing.assert_array_equal(m.ravel()[obs.mask], obs.values)
    assert np.all(s == 0)


def test_samples_degenerate_and_errors():
    p = flat_problem(std=1e-12)
    obs = observe(p, draw_truth(p, 1), 1, 1)
    m, _ = posterior_law(p, obs)
    smp = draw_posterior_samples(p, obs, 3, 1)
    assert smp.shape == (3, 4, 4)
    np.testing.assert_allclose(smp, np.broadcast_to(m, smp.shape), atol=1e-9)
    with pytest.raises(ValueError):
        draw_posterior_samples(p, obs, 0, 1)


@pytest.mark.parametrize("fidelity,scale,shift", [(Fidelity.exact(), 1.0, 0.0), (Fidelity.inflated(2), 2.0, 0.0), (Fidelity.biased(0.5), 1.0, 0.5)])
def test_sample_moments(fidelity, scale, shift):
    p = SandboxProblem(np.zeros((1, 1)), np.ones((1, 1)), 1.0, np.arange(1), fidelity=fidelity)
    obs = observe(p, draw_truth(p, 0), 1, 0)
    m, s = posterior_law(p, obs)
    smp = draw_posterior_samples(p, obs, 100_000, 0).ravel()
    assert smp.std() == pytest.approx(scale * s[0, 0], rel=0.03)
    assert abs(smp.mean() - (m[0, 0] + shift * s[0, 0])) < 4 * scale * s[0, 0] / math.sqrt(smp.size)


def test_fidelity_parse_roundtrip():
    for f in (Fidelity.exact(), Fidelity.inflated(2), Fidelity.biased(-0.25)):
        assert Fidelity.parse(str(f)) == f
    with pytest.raises(ValueError):
        Fidelity.parse("noisy(1)")
    with pytest.raises(ValueError):
        Fidelity.inflated(0)


def test_recover(problem):
    x = draw_truth(problem, 5)
    obs = observe(problem, x, 4, 5)
    m, s = posterior_law(problem, obs)
    np.testing.assert_array_equal(recover(problem, obs, 0, 5), m)
    np.testing.assert_array_equal(recover(problem, obs, 1, 5), recover(problem, obs, 1, 5))
    big = recover(problem, obs, 10_000, 5)
    assert np.all(np.abs(big - m) <= 4 * s / 100 + 1e-12)
    # recovery draws are disjoint from the bound samples
    assert not np.allclose(recover(problem, obs, 1, 5), draw_posterior_samples(problem, obs, 1, 5)[0])
    with pytest.raises(ValueError):
        recover(problem, obs, -1, 5)


def test_shifted_problem(problem):
    assert shifted_problem(problem, 0) is problem
    p10 = shifted_problem(problem, 10)
    assert p10.noise_std == pytest.approx(1.5 * problem.noise_std)
    np.testing.assert_allclose(p10.prior_mean, problem.prior_mean + 0.2 * problem.prior_std)
    for bad in (-1, MAX_SHIFT_LEVEL + 1, 2.5):
        with pytest.raises(ValueError):
            shifted_problem(problem, bad)


def test_fingerprint(problem):
    assert problem.same_as(make_problem())
    assert not problem.same_as(problem.replace(noise_std=0.5))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**63 - 1), st.sampled_from([16, 8, 4, 2, 1]))
def test_observation_determinism(seed, rate):
    p = flat_problem(h=6, w=6, noise_spread=0.3, rates=(16, 8, 4, 2, 1))
    x = draw_truth(p, seed)
    a, b = observe(p, x, rate, seed), observe(p, x, rate, seed)
    np.testing.assert_array_equal(a.values, b.values)
    assert a.noise_std > 0
