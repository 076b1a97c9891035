import math

import numpy as np
import pytest

from auctionope import sim
from auctionope.core import Metric
from auctionope.errors import InvalidConfig
from auctionope.sim import (
    AuctionConfig,
    ConstantPolicy,
    LinearPolicy,
    default_config,
    default_policies,
    expected_rewards,
    exact_policy_value,
    generate_log,
    run_ab_test,
    simulate_round,
    true_policy_value,
    win_probability,
)


def flat_config(d=2, **kw):
    return AuctionConfig(dimension=d, conversion_weights=(0.0,) * d, value_weights=(0.0,) * d, **kw)


# --- config ------------------------------------------------------------------


@pytest.mark.parametrize(
    "kw",
    [
        dict(dimension=0, conversion_weights=(), value_weights=()),
        dict(dimension=2, conversion_weights=(1.0,), value_weights=(1.0, 1.0)),
        dict(dimension=1, conversion_weights=(1.0,), value_weights=(1.0,), competitor_scale=0.0),
        dict(dimension=1, conversion_weights=(1.0,), value_weights=(1.0,), noise_sd=-1.0),
        dict(dimension=1, conversion_weights=(1.0,), value_weights=(1.0,), context_seed_distribution="beta"),
    ],
)
def test_config_rejects_invalid(kw):
    with pytest.raises(InvalidConfig):
        AuctionConfig(**kw)


def test_config_from_dict_rejects_unknown_key():
    d = default_config().to_dict()
    d["reserve"] = 1.0
    with pytest.raises(InvalidConfig):
        AuctionConfig.from_dict(d)


def test_scenario_toml_round_trip(tmp_path):
    cfg, pols = default_config(3), default_policies()
    path = sim.dump_scenario(cfg, pols, tmp_path / "s.toml")
    cfg2, pols2, _ = sim.load_scenario(path)
    assert cfg2 == cfg
    assert pols2 == pols


def test_policy_dimension_checked():
    with pytest.raises(InvalidConfig):
        LinearPolicy(weights=(1.0, 2.0)).payment(np.zeros((3, 4)))


# --- single rounds -----------------------------------------------------------


def test_zero_payment_gives_zero_rewards():
    cfg = default_config()
    r = simulate_round(cfg, np.full(6, 0.5), 0.0, np.random.default_rng(0))
    assert r.as_array().tolist() == [0.0, 0.0, 0.0, 0.0]


def test_simulate_round_deterministic():
    cfg = default_config()
    a = simulate_round(cfg, np.full(6, 0.5), 1.2, np.random.default_rng(3))
    b = simulate_round(cfg, np.full(6, 0.5), 1.2, np.random.default_rng(3))
    assert a == b


def test_certain_win_round_monte_carlo():
    # huge bid always wins; resources ~ Poisson(softplus(0)) = Poisson(ln 2)
    cfg = flat_config(1)
    rng = np.random.default_rng(5)
    draws = np.array([simulate_round(cfg, [0.3], 1e9, rng).as_array() for _ in range(20_000)])
    assert np.all(draws[:, 0] == 1e9)
    assert np.all(draws[:, 1] == 1.0)
    assert np.all(draws[:, 3] == 0.0)
    se = math.sqrt(math.log(2) / len(draws))
    assert abs(draws[:, 2].mean() - math.log(2)) < 4 * se


def test_rewards_zero_exactly_when_lost():
    log = generate_log(default_config(), default_policies()["X"], 3000, rng_seed=1)
    lost = log.rewards[:, 1] == 0
    assert lost.any() and (~lost).any()
    assert np.all(log.rewards[lost] == 0)
    assert np.all(log.rewards[~lost, 0] == log.actions[~lost])


# --- logs ------------------------------------------------------------------


def test_generate_log_size():
    log = generate_log(default_config(), default_policies()["Y"], 5, rng_seed=0)
    assert len(log) == 5
    assert log.contexts.shape == (5, 6)


def test_constant_noiseless_policy_logs_exact_payment():
    log = generate_log(default_config(), ConstantPolicy(payment_value=1.3), 40, rng_seed=2)
    assert np.all(log.actions == 1.3)
    assert np.all(np.isnan(log.propensities))


def test_generate_log_seeded_determinism():
    pol = LinearPolicy(noise_sd=0.1, weights=(0.1,) * 6, intercept=1.0)
    a = generate_log(default_config(), pol, 500, rng_seed=42)
    b = generate_log(default_config(), pol, 500, rng_seed=42)
    assert a.equals(b)


def test_noisy_log_has_positive_propensities():
    log = generate_log(default_config(), default_policies()["Z"], 2000, rng_seed=4)
    assert np.all(log.propensities > 0)
    assert np.all(log.actions >= 0)


def test_log_prefix_stable_across_block_boundary():
    # records are drawn blockwise, so a longer log extends a shorter one
    cfg, pol = default_config(), default_policies()["X"]
    short = generate_log(cfg, pol, 5000, rng_seed=9)
    long = generate_log(cfg, pol, 9000, rng_seed=9)
    assert np.array_equal(long.actions[:5000], short.actions)
    assert np.array_equal(long.rewards[:5000], short.rewards)


# --- policy values ---------------------------------------------------------


def test_true_policy_value_requires_enough_draws():
    with pytest.raises(ValueError):
        true_policy_value(default_config(), ConstantPolicy(payment_value=1.0), n_mc=999)


def test_losing_policy_value_is_zero():
    v = true_policy_value(default_config(), ConstantPolicy(payment_value=0.0), n_mc=1000)
    assert v.mean.as_array().tolist() == [0.0] * 4
    assert v.se.as_array().tolist() == [0.0] * 4


def test_se_scales_with_sqrt_n():
    cfg, pol = default_config(), default_policies()["X"]
    ratios = []
    for r in range(50):
        s1 = true_policy_value(cfg, pol, 1000, rng_seed=r).se.as_array()
        s2 = true_policy_value(cfg, pol, 2000, rng_seed=1000 + r).se.as_array()
        ratios.append(s2 / s1)
    mean_ratio = np.mean(ratios, axis=0)
    assert np.all(np.abs(mean_ratio / (1 / math.sqrt(2)) - 1) < 0.2)


def test_certain_win_policy_value():
    cfg = flat_config(2)
    v = true_policy_value(cfg, ConstantPolicy(payment_value=50.0), n_mc=5000, rng_seed=1)
    assert abs(v.mean.cost - 50.0) <= 3 * v.se.cost + 1e-12
    assert abs(v.mean.reach - 1.0) <= 3 * v.se.reach + 1e-12


def test_win_probability_monotone_monte_carlo():
    cfg = default_config()
    lo = true_policy_value(cfg, ConstantPolicy(payment_value=0.8), 100_000, rng_seed=3)
    hi = true_policy_value(cfg, ConstantPolicy(payment_value=1.2), 100_000, rng_seed=3)
    se = math.hypot(lo.se.reach, hi.se.reach)
    assert hi.mean.reach - lo.mean.reach > -3 * se
    p = np.linspace(0, 5, 200)
    assert np.all(np.diff(win_probability(cfg, p)) >= 0)


def test_closed_form_matches_monte_carlo():
    cfg, pol = default_config(), default_policies()["Z"]
    mc = true_policy_value(cfg, pol, 200_000, rng_seed=8)
    exact = exact_policy_value(cfg, pol, 200_000, rng_seed=8).as_array()
    assert np.all(np.abs(mc.mean.as_array() - exact) < 4 * mc.se.as_array())


def test_expected_rewards_at_median_rival_bid():
    cfg = flat_config(1)
    out = expected_rewards(cfg, [[0.0]], [1.0])[0]
    assert out[1] == pytest.approx(0.5)
    assert out[0] == pytest.approx(0.5)
    assert out[2] == pytest.approx(0.5 * math.log(2))


# --- A/B tests -------------------------------------------------------------


def test_aa_test_is_rarely_significant():
    cfg, pol = default_config(), default_policies()["X"]
    passes = 0
    for seed in range(20):
        res = run_ab_test(cfg, pol, pol, 10_000, rng_seed=seed)
        passes += sum(l.p_value > 0.01 for l in res.lifts) >= 3
    assert passes >= 18


def test_zero_pay_treatment_cost_lift():
    res = run_ab_test(default_config(), default_policies()["X"], ConstantPolicy(payment_value=0.0), 500, rng_seed=1)
    cost = next(l for l in res.lifts if l.metric is Metric.COST)
    assert cost.lift_percent == pytest.approx(-100.0)


def test_ab_test_deterministic():
    cfg, pols = default_config(), default_policies()
    a = run_ab_test(cfg, pols["X"], pols["Y"], 800, rng_seed=6)
    b = run_ab_test(cfg, pols["X"], pols["Y"], 800, rng_seed=6)
    assert a.lifts == b.lifts
    assert a.control.equals(b.control) and a.treatment.equals(b.treatment)
