import math

import numpy as np
import pytest

from auctionope.core import EPS_Q, METRICS, LoggedDataset, Metric, make_binning
from auctionope.errors import AllWeightsZero, MissingRewardModel, NonDifferentiableKernel
from auctionope.estimators import (
    ContinuousOpeInput,
    DiscreteOpeInput,
    OpeArrays,
    continuous_estimate,
    continuous_estimate_gradient,
    continuous_variant_estimate,
    cross_fit_reward_curve,
    cross_fit_reward_matrix,
    dm,
    dr,
    effective_sample_size,
    evaluate_all,
    gaussian_bin_probs,
    importance_weights,
    ipw,
    sndr,
    snipw,
)
from auctionope.models import KernelSpec, TreeParams
from auctionope.sim import default_config, default_policies, generate_log

from conftest import make_dataset


def arrays(w, r, q_logged=None, q_policy=None, clip=None):
    w = np.asarray(w, dtype=float)
    return OpeArrays(np.asarray(r, dtype=float), w, np.ones_like(w), q_logged, q_policy, clip)


def one_record(action=1.0, reward=1.0, propensity=1.0, d=1):
    r = np.zeros((1, 4))
    r[0, 3] = reward
    return LoggedDataset(np.zeros((1, d)), np.array([action]), r, np.array([propensity]), dimension=d)


# --- weights --------------------------------------------------------------


def test_identical_policies_give_unit_weights(small_dataset):
    binning = make_binning(small_dataset, 4)
    P = np.random.default_rng(0).dirichlet(np.ones(4), size=len(small_dataset))
    inp = DiscreteOpeInput(small_dataset, binning, P, P)
    assert np.allclose(importance_weights(inp), 1.0)


def test_one_hot_against_uniform_weight_and_clipping(small_dataset):
    binning = make_binning(small_dataset, 4)
    n = len(small_dataset)
    pe = np.zeros((n, 4))
    pe[np.arange(n), binning.assign(small_dataset.actions)] = 1.0
    pb = np.full((n, 4), 0.25)
    assert np.allclose(importance_weights(DiscreteOpeInput(small_dataset, binning, pb, pe)), 4.0)
    clipped = DiscreteOpeInput(small_dataset, binning, pb, pe, clip_lambda=2.0)
    assert np.allclose(importance_weights(clipped), 2.0)
    assert ipw(clipped).clipped_fraction == 1.0


def test_clipped_fraction_counts_records():
    rep = ipw(arrays([4.0, 1.0, 1.0, 1.0], [1, 1, 1, 1], clip=2.0))
    assert rep.clipped_fraction == pytest.approx(1 / 4)


def test_infinite_lambda_changes_nothing(small_dataset):
    a = arrays([0.5, 3.0, 9.0], [1.0, 2.0, 0.5])
    b = arrays([0.5, 3.0, 9.0], [1.0, 2.0, 0.5], clip=math.inf)
    assert ipw(a).value == ipw(b).value
    assert snipw(a).value == snipw(b).value


def test_behavior_probability_floored():
    a = OpeArrays(np.array([1.0]), np.array([1.0]), np.array([0.0]))
    assert a.weights()[0][0] == 1 / EPS_Q


def test_effective_sample_size():
    assert effective_sample_size(np.ones(7)) == 7
    assert effective_sample_size([1.0, 0.0, 0.0]) == 1


# --- IPW / SNIPW ------------------------------------------------------------


def test_ipw_hand_example():
    assert ipw(arrays([2.0, 0.0], [1.0, 0.0])).value == pytest.approx(1.0, abs=1e-9)


def test_ipw_unit_weights_is_mean(small_dataset):
    binning = make_binning(small_dataset, 5)
    P = np.full((len(small_dataset), 5), 0.2)
    for m in METRICS:
        rep = ipw(DiscreteOpeInput(small_dataset, binning, P, P, metric=m))
        assert rep.value == pytest.approx(small_dataset.metric(m).mean(), abs=1e-12)


def test_ipw_zero_rewards():
    assert ipw(arrays([3.0, 0.2, 7.0], [0, 0, 0])).value == 0.0


def test_snipw_hand_example():
    assert snipw(arrays([2.0, 0.0], [1.0, 0.0])).value == pytest.approx(1.0, abs=1e-9)


@pytest.mark.parametrize("c", [0.01, 1.0, 37.0])
def test_snipw_equal_weights_is_mean(c):
    r = [0.3, 1.2, 4.0, 0.0]
    assert snipw(arrays([c] * 4, r)).value == pytest.approx(np.mean(r), rel=1e-12)


def test_snipw_all_zero_weights():
    with pytest.raises(AllWeightsZero):
        snipw(arrays([0.0, 0.0], [1.0, 2.0]))


# --- DM / DR / SNDR --------------------------------------------------------


def test_dm_constant_model(small_dataset):
    binning = make_binning(small_dataset, 3)
    n = len(small_dataset)
    pe = np.random.default_rng(1).dirichlet(np.ones(3), size=n)
    rep = dm(DiscreteOpeInput(small_dataset, binning, np.full((n, 3), 1 / 3), pe, np.full((n, 3), 2.5)))
    assert rep.value == pytest.approx(2.5, abs=1e-12)


def test_dm_two_bin_hand_example():
    ds = make_dataset(n=6, d=2)
    binning = make_binning(ds, 2)
    pe = np.tile([0.7, 0.3], (6, 1))
    q = np.tile([1.0, 0.0], (6, 1))
    assert dm(DiscreteOpeInput(ds, binning, np.full((6, 2), 0.5), pe, q)).value == pytest.approx(0.7, abs=1e-9)


def test_dm_one_hot_policy(small_dataset):
    binning = make_binning(small_dataset, 4)
    n = len(small_dataset)
    q = np.random.default_rng(2).uniform(size=(n, 4))
    pe = np.tile(np.eye(4)[2], (n, 1))
    assert dm(DiscreteOpeInput(small_dataset, binning, np.full((n, 4), 0.25), pe, q)).value == pytest.approx(q[:, 2].mean())


def test_missing_reward_model():
    for est in (dm, dr, sndr):
        with pytest.raises(MissingRewardModel):
            est(arrays([1.0], [1.0]))


def test_dr_with_zero_model_equals_ipw():
    rng = np.random.default_rng(3)
    w, r = rng.exponential(size=30), rng.exponential(size=30)
    z = np.zeros(30)
    assert dr(arrays(w, r, z, z)).value == ipw(arrays(w, r)).value


def test_dr_unit_weights():
    rng = np.random.default_rng(4)
    r, ql, qp = rng.uniform(size=(3, 20))
    assert dr(arrays(np.ones(20), r, ql, qp)).value == pytest.approx(np.mean(qp + r - ql), abs=1e-12)


def test_zero_residuals_reduce_to_dm():
    rng = np.random.default_rng(5)
    w, r, qp = rng.exponential(size=20), rng.uniform(size=20), rng.uniform(size=20)
    a = arrays(w, r, r.copy(), qp)
    assert dr(a).value == dm(a).value
    assert sndr(a).value == dm(a).value


def test_sndr_equal_weights_equals_dr():
    rng = np.random.default_rng(6)
    r, ql, qp = rng.uniform(size=(3, 15))
    a = arrays(np.ones(15), r, ql, qp)
    assert sndr(a).value == pytest.approx(dr(a).value, abs=1e-12)


def test_sndr_single_record_hand_example():
    assert sndr(arrays([5.0], [2.0], [0.0], [0.0])).value == pytest.approx(2.0, abs=1e-9)


# --- reward models --------------------------------------------------------


def test_cross_fit_reward_matrix_shape_and_determinism():
    log = generate_log(default_config(), default_policies()["X"], 400, rng_seed=1)
    binning = make_binning(log, 5)
    params = TreeParams(num_trees=5)
    a = cross_fit_reward_matrix(log, binning, Metric.REACH, params, rng_seed=3)
    b = cross_fit_reward_matrix(log, binning, Metric.REACH, params, rng_seed=3)
    assert a.shape == (400, 5)
    assert np.array_equal(a, b)
    assert a.min() >= 0 and a.max() <= 1


def test_cross_fit_reward_curve_tracks_constant_target():
    log = generate_log(default_config(), default_policies()["X"], 300, rng_seed=2)
    rewards = log.rewards.copy()
    rewards[:, 1] = 1.0
    ds = LoggedDataset(log.contexts, log.actions, rewards, log.propensities, dimension=6)
    ql, qp = cross_fit_reward_curve(ds, Metric.REACH, log.actions + 0.3, TreeParams(num_trees=3))
    assert np.allclose(ql, 1.0) and np.allclose(qp, 1.0)


# --- continuous -----------------------------------------------------------


def test_continuous_single_record_gaussian():
    inp = ContinuousOpeInput(one_record(), np.array([1.0]), np.array([1.0]), KernelSpec("gaussian", 1.0))
    assert continuous_estimate(inp).value == pytest.approx(1 / math.sqrt(2 * math.pi), abs=1e-9)


def test_continuous_zero_rewards():
    ds = make_dataset()
    rew = ds.rewards.copy()
    rew[:] = 0
    ds0 = LoggedDataset(ds.contexts, ds.actions, rew, ds.propensities, dimension=3)
    inp = ContinuousOpeInput(ds0, ds.actions + 0.1, ds.propensities, KernelSpec("gaussian", 0.5))
    assert continuous_estimate(inp).value == 0.0


def test_continuous_compact_support():
    inp = ContinuousOpeInput(one_record(action=1.0), np.array([2.5]), np.array([1.0]), KernelSpec("epanechnikov", 1.0))
    assert continuous_estimate(inp).value == 0.0


def test_continuous_linear_in_rewards(small_dataset):
    ds = small_dataset
    inp = ContinuousOpeInput(ds, ds.actions * 1.1, ds.propensities, KernelSpec("triangular", 0.4))
    scaled = LoggedDataset(ds.contexts, ds.actions, 3.0 * ds.rewards, ds.propensities, dimension=3)
    v = continuous_estimate(inp).value
    v3 = continuous_estimate(ContinuousOpeInput(scaled, inp.evaluation_actions, ds.propensities, inp.kernel)).value
    assert v3 == pytest.approx(3 * v, rel=1e-12)


def test_gradient_zero_at_logged_action(small_dataset):
    ds = small_dataset
    inp = ContinuousOpeInput(ds, ds.actions, ds.propensities, KernelSpec("gaussian", 0.3))
    assert np.all(continuous_estimate_gradient(inp) == 0.0)


@pytest.mark.parametrize("seed", range(3))
def test_gradient_matches_finite_differences(seed):
    ds = make_dataset(n=50, seed=seed)
    rng = np.random.default_rng(seed)
    tau = ds.actions + rng.normal(scale=0.3, size=50)
    inp = ContinuousOpeInput(ds, tau, ds.propensities, KernelSpec("gaussian", 0.4))
    grad = continuous_estimate_gradient(inp)
    eps = 1e-6
    fd = np.empty(50)
    for i in range(50):
        up, dn = tau.copy(), tau.copy()
        up[i] += eps
        dn[i] -= eps
        fd[i] = (continuous_estimate(inp.with_actions(up)).value - continuous_estimate(inp.with_actions(dn)).value) / (2 * eps)
    assert np.linalg.norm(grad - fd) < 1e-5 * np.linalg.norm(fd)


def test_gradient_requires_gaussian(small_dataset):
    inp = ContinuousOpeInput(small_dataset, small_dataset.actions, small_dataset.propensities, KernelSpec("uniform", 1.0))
    with pytest.raises(NonDifferentiableKernel):
        continuous_estimate_gradient(inp)


def test_continuous_variants_identities(small_dataset):
    ds = small_dataset
    inp = ContinuousOpeInput(ds, ds.actions + 0.05, ds.propensities, KernelSpec("gaussian", 0.5))
    y = ds.metric(Metric.RETURNS)
    zero = np.zeros(len(ds))
    base = continuous_variant_estimate(inp).value
    assert continuous_variant_estimate(inp, "continuous_dr", zero, zero).value == pytest.approx(base, rel=1e-12)
    # a reward model that is exact at the logged actions leaves only the model term
    qp = np.random.default_rng(0).uniform(size=len(ds))
    for v in ("continuous_dr", "continuous_sndr"):
        assert continuous_variant_estimate(inp, v, y, qp).value == pytest.approx(qp.mean(), rel=1e-12)
    sn = continuous_variant_estimate(inp, "continuous_snipw").value
    assert y.min() <= sn <= y.max()
    with pytest.raises(MissingRewardModel):
        continuous_variant_estimate(inp, "continuous_sndr")


def test_continuous_snipw_no_overlap():
    inp = ContinuousOpeInput(one_record(action=0.0), np.array([5.0]), np.array([1.0]), KernelSpec("epanechnikov", 1.0))
    with pytest.raises(AllWeightsZero):
        continuous_variant_estimate(inp, "continuous_snipw")


# --- bins and full table ----------------------------------------------------


def test_gaussian_bin_probs_rows_sum_to_one():
    log = generate_log(default_config(), default_policies()["Y"], 200, rng_seed=0)
    binning = make_binning(log, 8)
    P = gaussian_bin_probs(default_policies()["Z"], log.contexts, binning)
    assert P.shape == (200, 8)
    assert np.allclose(P.sum(axis=1), 1.0)


def _table_inputs(n=600):
    pols = default_policies()
    log = generate_log(default_config(), pols["X"], n, rng_seed=3)
    binning = make_binning(log, 6)
    return log, pols, binning


def test_evaluate_all_full_table():
    log, pols, binning = _table_inputs()
    q = {m: cross_fit_reward_matrix(log, binning, m, TreeParams(num_trees=3)) for m in METRICS}
    cells = evaluate_all(log, pols["Y"], pols["X"], binning, q, KernelSpec("gaussian", 0.3))
    assert len(cells) == 24
    assert all(c.ok for c in cells)
    assert [(c.estimator, c.metric) for c in cells[:5]] == [("ipw", m.value) for m in METRICS] + [("snipw", "cost")]


def test_evaluate_all_missing_reward_model():
    log, pols, binning = _table_inputs()
    cells = evaluate_all(log, pols["Y"], pols["X"], binning, None, KernelSpec("gaussian", 0.3))
    bad = [c for c in cells if not c.ok]
    assert len(bad) == 12
    assert {c.estimator for c in bad} == {"dm", "dr", "sndr"}
    assert all("MissingRewardModel" in c.error for c in bad)


def test_evaluate_all_same_policy_ipw_is_sample_mean():
    log, pols, binning = _table_inputs()
    cells = evaluate_all(log, pols["X"], pols["X"], binning, estimators=("ipw",))
    for c in cells:
        assert c.report.value == pytest.approx(log.metric(c.metric).mean(), rel=1e-12)


def test_evaluate_all_deterministic_across_threads(monkeypatch):
    log, pols, binning = _table_inputs(300)
    runs = []
    for threads in ("1", "4"):
        monkeypatch.setenv("OPE_THREADS", threads)
        cells = evaluate_all(log, pols["Y"], pols["X"], binning, None, KernelSpec("gaussian", 0.3))
        runs.append([c.to_dict() for c in cells])
    assert runs[0] == runs[1]
