"""Experiment procedures over the simulated three-test setup.

Test-1 compares policies X and Y, Test-2 compares X and Z, Test-3
compares Y and Z directly.  The procedures here estimate the treatment
policies of Tests 1 and 2 from their control logs, replay Test-3
counterfactually from the logs of Tests 1 and 2, and learn a new payment
policy from a control log.  The CLI scenarios and the acceptance suite
both call them.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import _rng
from ._parallel import pmap
from .core import METRICS, BinningScheme, LiftResult, LoggedDataset, Metric, Side, make_binning, mape
from .estimators import (
    CONTINUOUS_VARIANTS,
    DISCRETE,
    DISCRETE_ESTIMATORS,
    ContinuousOpeInput,
    DiscreteOpeInput,
    continuous_variant_estimate,
    cross_fit_reward_curve,
    cross_fit_reward_matrix,
)
from .learn import (
    EstimatorConfig,
    LossTrace,
    OptPalConfig,
    TuneConfig,
    TuneResult,
    counterfactual_test,
    init_optpal,
    train_optpal,
    tune_continuous,
)
from .models import KernelSpec, MlpPolicy, ProxyPolicy, TreeParams, fit_proxy
from .sim import (
    AbTestResult,
    AuctionConfig,
    ModelPolicy,
    PolicySpec,
    default_config,
    default_policies,
    exact_policy_value,
    run_ab_test,
)

TESTS = {"test-1": ("X", "Y"), "test-2": ("X", "Z"), "test-3": ("Y", "Z")}
EVALUATED = ("test-1", "test-2")


@dataclass(frozen=True, eq=False)
class Settings:
    """Everything a scenario needs besides its seed."""

    config: AuctionConfig = field(default_factory=default_config)
    policies: Mapping[str, PolicySpec] = field(default_factory=default_policies)
    n_per_side: int = 5000
    num_bins: int = 10
    proxy_params: TreeParams = field(default_factory=lambda: TreeParams(num_trees=30, max_depth=10, min_leaf=5))
    reward_params: TreeParams = field(default_factory=lambda: TreeParams(num_trees=20, max_depth=8, min_leaf=10))
    tune: TuneConfig = field(default_factory=lambda: TuneConfig(("gaussian",), -2.0, 0.0, 12))
    tuning_replicates: int = 3
    oracle_contexts: int = 100_000
    oracle_seed: int = 12345
    alpha: float = 0.05
    # OptPaL
    optpal_n: int = 10_000
    optpal_bandwidth: float = 0.2
    optpal: OptPalConfig = field(default_factory=lambda: OptPalConfig(learning_rate=0.2))

    def params(self, base: TreeParams, *tags) -> TreeParams:
        return TreeParams(**{**base.to_dict(), "rng_seed": _rng.derive_seed(base.rng_seed, *tags)})


def simulate_tests(settings: Settings, seed: int, names: Sequence[str] = tuple(TESTS)) -> dict[str, AbTestResult]:
    out = {}
    for name in names:
        ctrl, trt = TESTS[name]
        out[name] = run_ab_test(
            settings.config,
            settings.policies[ctrl],
            settings.policies[trt],
            settings.n_per_side,
            _rng.derive_seed(seed, name),
            control_id=ctrl,
            treatment_id=trt,
        )
    return out


def oracle_values(settings: Settings, names: Sequence[str] | None = None) -> dict[str, np.ndarray]:
    """Exact value (cost, reach, resources, returns) of each named policy without logging noise."""
    names = names or list(settings.policies)
    return {
        k: exact_policy_value(settings.config, settings.policies[k], settings.oracle_contexts, settings.oracle_seed)
        .as_array()
        for k in names
    }


# ---------------------------------------------------------------------------
# estimating one test's treatment from its control log
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class PreparedTest:
    """Control log of one test plus every model fitted for evaluating its treatment."""

    name: str
    log: LoggedDataset
    binning: BinningScheme
    behavior_proxy: ProxyPolicy | None
    evaluation_proxy: ProxyPolicy
    reward_matrices: dict[Metric, np.ndarray | None]
    tau: np.ndarray
    curves: dict[Metric, tuple[np.ndarray, np.ndarray]]

    def continuous_input(self, metric: Metric, kernel: KernelSpec) -> ContinuousOpeInput:
        return ContinuousOpeInput(self.log, self.tau, self.log.propensities, kernel, metric, "logged")

    def discrete(self, estimator: str, metric: Metric) -> float:
        inp = DiscreteOpeInput(
            self.log,
            self.binning,
            self.behavior_proxy.bin_probs,
            self.evaluation_proxy.bin_probs,
            self.reward_matrices[metric],
            None,
            metric,
        )
        return DISCRETE[estimator](inp).value

    def continuous(self, variant: str, metric: Metric, kernel: KernelSpec) -> float:
        return continuous_variant_estimate(self.continuous_input(metric, kernel), variant, *self.curves[metric]).value


def prepare_test(settings: Settings, ab: AbTestResult, name: str, seed: int, discrete: bool = True) -> PreparedTest:
    """Fit proxies on both arms (shared binning) and cross-fitted reward models on the control arm.

    With ``discrete=False`` only what the continuous variants need is fitted.
    """
    log, trt = ab.control, ab.treatment
    binning = make_binning(log, settings.num_bins)
    behavior = (
        fit_proxy(log, binning, settings.params(settings.proxy_params, seed, name, "b"), regressor=False)
        if discrete
        else None
    )
    evaluation = fit_proxy(
        trt, binning, settings.params(settings.proxy_params, seed, name, "e"), classifier=discrete
    )
    tau = evaluation.payment(log.contexts)

    def fit(metric):
        rp = settings.params(settings.reward_params, seed, name, metric.value)
        mat = cross_fit_reward_matrix(log, binning, metric, rp, rng_seed=rp.rng_seed) if discrete else None
        curve = cross_fit_reward_curve(log, metric, tau, rp, rng_seed=rp.rng_seed)
        return mat, curve

    fitted = [fit(m) for m in METRICS]
    return PreparedTest(
        name,
        log,
        binning,
        behavior,
        evaluation,
        {m: f[0] for m, f in zip(METRICS, fitted)},
        tau,
        {m: f[1] for m, f in zip(METRICS, fitted)},
    )


def _truths(settings: Settings, oracle: Mapping[str, np.ndarray], tests: Sequence[str], metric: Metric) -> list[float]:
    return [float(oracle[TESTS[t][1]][metric.index]) for t in tests]


def tuning_tests(settings: Settings, seed: int) -> list[PreparedTest]:
    """Tests 1 and 2 from ``settings.tuning_replicates`` replicates independent of ``seed``'s logs.

    Only the continuous variants are tuned, so no discrete models are fitted.
    """
    jobs = []
    for r in range(settings.tuning_replicates):
        rseed = _rng.derive_seed(seed, "tuning", r)
        tests = simulate_tests(settings, rseed, EVALUATED)
        jobs.extend((tests[t], t, rseed) for t in EVALUATED)
    return pmap(lambda job: prepare_test(settings, *job, discrete=False), jobs)


def tune_kernels(
    settings: Settings,
    prepared: Sequence[PreparedTest],
    oracle: Mapping[str, np.ndarray],
    variants: Sequence[str] = CONTINUOUS_VARIANTS,
) -> dict[tuple[str, Metric], TuneResult]:
    """Tuned kernel per (continuous variant, metric) against the oracle value of each test's treatment."""
    out = {}
    for variant in variants:
        for m in METRICS:
            truths = _truths(settings, oracle, [p.name for p in prepared], m)
            data = [
                (p.continuous_input(m, KernelSpec()), t, *p.curves[m]) for p, t in zip(prepared, truths)
            ]
            out[(variant, m)] = tune_continuous(data, settings.tune, variant=variant)
    return out


@dataclass
class MapeTable:
    """MAPE per (estimator, metric) over the evaluated tests, plus the raw estimates."""

    mape: dict[tuple[str, str], float]
    estimates: dict[tuple[str, str, str], float]  # (test, estimator, metric)
    truths: dict[tuple[str, str], float]  # (test, metric)
    kernels: dict[tuple[str, str], KernelSpec]

    def family_best(self, estimators: Sequence[str], metric: Metric | str) -> tuple[str, float]:
        m = Metric(metric)
        cands = [(self.mape[(e, m.value)], i, e) for i, e in enumerate(estimators) if (e, m.value) in self.mape]
        val, _, est = min(cands)
        return est, val

    def wins(self) -> dict[str, bool]:
        """Per metric: best continuous MAPE strictly below best discrete MAPE."""
        out = {}
        for m in METRICS:
            _, d = self.family_best(DISCRETE_ESTIMATORS, m)
            _, c = self.family_best(CONTINUOUS_VARIANTS, m)
            out[m.value] = bool(c < d)
        return out


def discrete_vs_continuous(settings: Settings, seed: int, variants: Sequence[str] = CONTINUOUS_VARIANTS) -> MapeTable:
    """Estimate Y (Test-1) and Z (Test-2) from the X logs with every estimator.

    Continuous kernels are tuned per (variant, metric) on an independent
    replicate of Tests 1 and 2, so the scored logs never inform tuning.
    """
    oracle = oracle_values(settings)
    kernels = tune_kernels(settings, tuning_tests(settings, seed), oracle, variants)

    tests = simulate_tests(settings, seed, EVALUATED)
    prep = pmap(lambda t: prepare_test(settings, tests[t], t, seed), EVALUATED)
    estimates, truths, table = {}, {}, {}
    for m in METRICS:
        tr = _truths(settings, oracle, EVALUATED, m)
        for t, v in zip(EVALUATED, tr):
            truths[(t, m.value)] = v
        for est in DISCRETE_ESTIMATORS:
            vals = [p.discrete(est, m) for p in prep]
            for t, v in zip(EVALUATED, vals):
                estimates[(t, est, m.value)] = v
            table[(est, m.value)] = mape(vals, tr)
        for var in variants:
            kern = kernels[(var, m)].best
            vals = [p.continuous(var, m, kern) for p in prep]
            for t, v in zip(EVALUATED, vals):
                estimates[(t, var, m.value)] = v
            table[(var, m.value)] = mape(vals, tr)
    return MapeTable(table, estimates, truths, {(v, m.value): kernels[(v, m)].best for v, m in kernels})


# ---------------------------------------------------------------------------
# counterfactual Test-3
# ---------------------------------------------------------------------------


@dataclass
class CounterfactualResult:
    estimated: dict[str, list[LiftResult]]  # estimator -> lifts of Z over Y'
    actual: list[LiftResult]  # observed Test-3 lifts
    kernels: dict[str, KernelSpec]

    def sign_matches(self, estimator: str) -> dict[str, bool]:
        return {
            e.metric: bool(np.sign(e.lift_percent) == np.sign(a.lift_percent))
            for e, a in zip(self.estimated[estimator], self.actual)
        }


def counterfactual_yz(
    settings: Settings,
    seed: int,
    estimators: Sequence[str] = ("continuous_sndr", "continuous", "sndr"),
) -> CounterfactualResult:
    """Replay Test-3 (Y vs Z) from Tests 1 and 2.

    A proxy of Y is learned from Test-1's treatment arm and replaces
    policy X on the control arm of Test-2; the resulting lifts of Z over
    the re-estimated control are compared with a real Test-3.
    """
    oracle = oracle_values(settings)
    variants = [e for e in estimators if e in CONTINUOUS_VARIANTS]
    tuned = tune_kernels(settings, tuning_tests(settings, seed), oracle, variants)

    tests = simulate_tests(settings, seed)
    t1, t2 = tests["test-1"], tests["test-2"]
    log = t2.control
    binning = make_binning(log, settings.num_bins)
    y_proxy = fit_proxy(t1.treatment, binning, settings.params(settings.proxy_params, seed, "cf", "y"), name="Y'")
    x_proxy = None
    estimated = {}
    for est in estimators:
        if est in CONTINUOUS_VARIANTS:
            cfg = EstimatorConfig(
                est,
                kernels={m.value: tuned[(est, m)].best for m in METRICS},
                alpha=settings.alpha,
                reward_params=settings.params(settings.reward_params, seed, "cf", est),
                rng_seed=_rng.derive_seed(seed, "cf", est),
            )
        else:
            if x_proxy is None:
                x_proxy = fit_proxy(
                    log, binning, settings.params(settings.proxy_params, seed, "cf", "x"), regressor=False
                )
            models = None
            if est in ("dm", "dr", "sndr"):
                models = {}
                for m in METRICS:
                    rp = settings.params(settings.reward_params, seed, "cf", m.value)
                    models[m.value] = cross_fit_reward_matrix(log, binning, m, rp, rng_seed=rp.rng_seed)
            cfg = EstimatorConfig(
                est, binning=binning, behavior_policy=x_proxy, reward_models=models, alpha=settings.alpha
            )
        estimated[est] = counterfactual_test((log, t2.treatment), y_proxy, Side.CONTROL, cfg)
    kernels = {f"{v}/{m.value}": tuned[(v, m)].best for v, m in tuned}
    return CounterfactualResult(estimated, tests["test-3"].lifts, kernels)


# ---------------------------------------------------------------------------
# OptPaL on Test-2
# ---------------------------------------------------------------------------


@dataclass
class OptPalResult:
    policy: MlpPolicy
    trace: LossTrace
    oracle_w: np.ndarray
    oracle_x: np.ndarray
    estimated_profit_w: float
    estimated_profit_x: float

    @property
    def profit_w(self) -> float:
        return float(self.oracle_w[Metric.RETURNS.index] - self.oracle_w[Metric.COST.index])

    @property
    def profit_x(self) -> float:
        return float(self.oracle_x[Metric.RETURNS.index] - self.oracle_x[Metric.COST.index])


def estimated_profit(log: LoggedDataset, actions, kernel: KernelSpec) -> float:
    base = ContinuousOpeInput(log, actions, log.propensities, kernel, Metric.RETURNS)
    r = continuous_variant_estimate(base).value
    c = continuous_variant_estimate(base.with_metric(Metric.COST)).value
    return r - c


def learn_policy(
    log: LoggedDataset, kernel: KernelSpec, config: OptPalConfig, init_seed: int = 0
) -> tuple[MlpPolicy, LossTrace]:
    """Train a payment network on ``log`` with the same kernel for the Cost and Returns estimates."""
    tmpl = ContinuousOpeInput(log, np.zeros(len(log)), log.propensities, kernel, Metric.COST)
    return train_optpal(log, tmpl, tmpl.with_metric(Metric.RETURNS), init_optpal(log, init_seed), config)


def optpal_test2(settings: Settings, seed: int) -> OptPalResult:
    """Learn policy W from the X arm of a simulated Test-2 and score W and X with the oracle."""
    x = settings.policies["X"]
    ab = run_ab_test(
        settings.config,
        x,
        settings.policies["Z"],
        settings.optpal_n,
        _rng.derive_seed(seed, "test-2", "optpal"),
        control_id="X",
        treatment_id="Z",
    )
    log = ab.control
    kernel = KernelSpec("gaussian", settings.optpal_bandwidth)
    config = OptPalConfig(**{**settings.optpal.to_dict(), "rng_seed": _rng.derive_seed(seed, "optpal")})
    net, trace = learn_policy(log, kernel, config, config.rng_seed)
    w = ModelPolicy(model=net)
    oracle_w = exact_policy_value(settings.config, w, settings.oracle_contexts, settings.oracle_seed).as_array()
    oracle_x = oracle_values(settings, ["X"])["X"]
    return OptPalResult(
        net,
        trace,
        oracle_w,
        oracle_x,
        estimated_profit(log, w.payment(log.contexts), kernel),
        estimated_profit(log, x.payment(log.contexts), kernel),
    )
