"""Policy learning and estimator tuning.

``train_optpal`` fits a payment network by full-batch gradient descent on
the negative estimated profit, with both the Returns and the Cost values
coming from the differentiable continuous estimator.  ``tune_continuous``
picks the kernel and bandwidth of that estimator against known policy
values, and ``counterfactual_test`` re-estimates one side of an A/B test
under a replacement policy.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import _rng
from ._parallel import pmap
from .core import (
    BinningScheme,
    LiftResult,
    LoggedDataset,
    Metric,
    METRICS,
    Side,
    as_metric,
    lift_with_ci,
    mape,
)
from .errors import DimensionMismatch, EmptyGrid, InvalidConfig, NonDifferentiableKernel
from .estimators import (
    ALL_ESTIMATORS,
    CONTINUOUS_VARIANTS,
    DISCRETE,
    ContinuousOpeInput,
    DiscreteOpeInput,
    EstimateReport,
    _bin_source,
    behavior_densities,
    continuous_estimate,
    continuous_estimate_gradient,
    continuous_variant_estimate,
    cross_fit_reward_curve,
    policy_actions,
)
from .models.kernels import KERNEL_KINDS, KernelSpec
from .models.trees import TreeParams
from .models.mlp import MlpPolicy, init_mlp, mlp_backward, mlp_forward, softplus_inverse

# ---------------------------------------------------------------------------
# OptPaL
# ---------------------------------------------------------------------------

LOSSES = ("profit",)


@dataclass(frozen=True)
class OptPalConfig:
    learning_rate: float = 0.05
    max_iterations: int = 1000
    window: int = 10
    rel_tolerance: float = 1e-6
    rng_seed: int = 0
    loss: str = "profit"
    max_retries: int = 5

    def __post_init__(self):
        if not self.learning_rate >= 0 or not math.isfinite(self.learning_rate):
            raise InvalidConfig("learning_rate must be a finite number >= 0")
        if self.max_iterations < 1:
            raise InvalidConfig("max_iterations must be >= 1")
        if self.window < 1:
            raise InvalidConfig("window must be >= 1")
        if not self.rel_tolerance > 0:
            raise InvalidConfig("rel_tolerance must be > 0")
        if self.loss not in LOSSES:
            raise InvalidConfig(f"unknown loss {self.loss!r}; expected one of {LOSSES}")
        if self.max_retries < 0:
            raise InvalidConfig("max_retries must be >= 0")

    def to_dict(self) -> dict:
        return {
            "learning_rate": self.learning_rate,
            "max_iterations": self.max_iterations,
            "window": self.window,
            "rel_tolerance": self.rel_tolerance,
            "rng_seed": self.rng_seed,
            "loss": self.loss,
            "max_retries": self.max_retries,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "OptPalConfig":
        conv = d.get("convergence", {})
        known = {k: d[k] for k in ("learning_rate", "max_iterations", "rng_seed", "loss", "max_retries") if k in d}
        for k in ("window", "rel_tolerance"):
            if k in conv:
                known[k] = conv[k]
            elif k in d:
                known[k] = d[k]
        unknown = set(d) - set(known) - {"convergence", "window", "rel_tolerance"}
        if unknown:
            raise InvalidConfig(f"unknown OptPaL settings {sorted(unknown)}")
        return cls(**known)


@dataclass
class LossTrace:
    """Per-iteration loss of the accepted run (index 0 is the initial loss)."""

    losses: np.ndarray
    learning_rate: float
    retries: int
    converged: bool

    @property
    def initial(self) -> float:
        return float(self.losses[0])

    @property
    def final(self) -> float:
        return float(self.losses[-1])

    def __len__(self) -> int:
        return len(self.losses)


def _check_template(ope: ContinuousOpeInput, dataset: LoggedDataset, name: str) -> None:
    if not ope.kernel.differentiable:
        raise NonDifferentiableKernel(f"{name}: {ope.kernel.kind} kernel has no gradient")
    if len(ope.dataset) != len(dataset):
        raise DimensionMismatch(f"{name} covers {len(ope.dataset)} records, dataset has {len(dataset)}")


def optpal_loss(
    policy: MlpPolicy, dataset: LoggedDataset, cost_ope: ContinuousOpeInput, returns_ope: ContinuousOpeInput
) -> float:
    """``-(v_returns - v_cost)`` with the evaluation actions set by ``policy``."""
    P = mlp_forward(policy, dataset.contexts)
    v_r = continuous_estimate(returns_ope.with_actions(P)).value
    v_c = continuous_estimate(cost_ope.with_actions(P)).value
    return -(v_r - v_c)


def optpal_gradient(
    policy: MlpPolicy, dataset: LoggedDataset, cost_ope: ContinuousOpeInput, returns_ope: ContinuousOpeInput
) -> tuple[float, np.ndarray]:
    """Loss and its gradient with respect to the flat parameter vector."""
    P = mlp_forward(policy, dataset.contexts)
    r_in, c_in = returns_ope.with_actions(P), cost_ope.with_actions(P)
    loss = -(continuous_estimate(r_in).value - continuous_estimate(c_in).value)
    upstream = continuous_estimate_gradient(c_in) - continuous_estimate_gradient(r_in)
    return loss, mlp_backward(policy, dataset.contexts, upstream).flat()


def _converged(losses: list[float], window: int, tol: float) -> bool:
    if len(losses) <= window:
        return False
    recent = np.asarray(losses[-window - 1 :])
    prev = np.abs(recent[:-1])
    rel = np.abs(np.diff(recent)) / np.maximum(prev, 1e-300)
    return bool(rel.max() < tol)


def _descend(policy, dataset, cost_ope, returns_ope, alpha, config) -> tuple[MlpPolicy, list[float], bool]:
    net = policy.copy()
    theta = net.get_params()
    losses: list[float] = []
    converged = False
    for _ in range(config.max_iterations):
        loss, grad = optpal_gradient(net, dataset, cost_ope, returns_ope)
        losses.append(loss)
        if _converged(losses, config.window, config.rel_tolerance):
            converged = True
            break
        theta = theta - alpha * grad
        net.set_params(theta)
    else:
        losses.append(optpal_loss(net, dataset, cost_ope, returns_ope))
    return net, losses, converged


def train_optpal(
    dataset: LoggedDataset,
    cost_ope: ContinuousOpeInput,
    returns_ope: ContinuousOpeInput,
    mlp: MlpPolicy,
    config: OptPalConfig | None = None,
) -> tuple[MlpPolicy, LossTrace]:
    """Learn a payment network that maximizes estimated profit on a log.

    Parameters
    ----------
    dataset : LoggedDataset
        Training log; its contexts feed the network.
    cost_ope, returns_ope : ContinuousOpeInput
        Estimator templates (dataset, behavior densities, Gaussian kernel).
        Their evaluation actions are replaced by the network output at
        every iteration.
    mlp : MlpPolicy
        Starting network, left untouched.
    config : OptPalConfig

    Returns
    -------
    (MlpPolicy, LossTrace)
        If the final loss of a run exceeds its initial loss the step size
        is halved and training restarts from ``mlp``, at most
        ``config.max_retries`` times; the last run is returned either way.
    """
    config = config or OptPalConfig()
    if mlp.dimension != dataset.dimension:
        raise DimensionMismatch(f"network expects d={mlp.dimension}, log has d={dataset.dimension}")
    _check_template(cost_ope, dataset, "cost_ope")
    _check_template(returns_ope, dataset, "returns_ope")
    cost_ope = cost_ope.with_metric(Metric.COST)
    returns_ope = returns_ope.with_metric(Metric.RETURNS)

    alpha = config.learning_rate
    retries = 0
    while True:
        net, losses, converged = _descend(mlp, dataset, cost_ope, returns_ope, alpha, config)
        if losses[-1] <= losses[0] or retries >= config.max_retries:
            break
        retries += 1
        alpha /= 2.0
    return net, LossTrace(np.asarray(losses), alpha, retries, converged)


def init_optpal(dataset: LoggedDataset, rng_seed: int = 0, max_draws: int = 50) -> MlpPolicy:
    """Glorot-initialised network whose output bias starts at the mean logged payment.

    Starting inside the logged action range keeps the kernel weights, and
    with them the gradient, away from zero.  Draws in which some hidden
    ReLU is inactive on more than 90% of the logged contexts are rejected,
    since such a unit never recovers and the network can collapse to a
    constant payment.
    """
    mean_action = float(np.mean(dataset.actions))
    bias = softplus_inverse(max(mean_action, 1e-3))
    X = dataset.contexts
    net = None
    for draw in range(max_draws):
        net = init_mlp(dataset.dimension, _rng.derive_seed(rng_seed, "init", draw), output_bias=bias)
        h, alive = X, True
        for W, b in zip(net.weights[:-1], net.biases[:-1]):
            h = np.maximum(h @ W + b, 0.0)
            alive &= bool(np.all(np.mean(h > 0, axis=0) >= 0.1))
        if alive:
            break
    return net


# ---------------------------------------------------------------------------
# kernel / bandwidth search
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TuneConfig:
    """Grid over ``kernel_candidates`` x ``count`` bandwidths ``10**linspace(log_min, log_max)``.

    ``budget`` caps the total number of trials; whatever the grid leaves
    over is spent on random log-uniform refinement within one grid step of
    the incumbent.
    """

    kernel_candidates: tuple[str, ...] = ("gaussian",)
    log_min: float = -2.0
    log_max: float = 0.0
    count: int = 12
    budget: int | None = None
    rng_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "kernel_candidates", tuple(self.kernel_candidates))
        for k in self.kernel_candidates:
            if k not in KERNEL_KINDS:
                raise InvalidConfig(f"unknown kernel {k!r}")
        if self.count >= 2 and not self.log_min < self.log_max:
            raise InvalidConfig("log_min must be < log_max")
        if self.budget is not None and self.budget < 1:
            raise InvalidConfig("budget must be >= 1")

    @property
    def bandwidths(self) -> np.ndarray:
        if self.count < 1:
            return np.zeros(0)
        if self.count == 1:
            return np.array([10.0**self.log_min])
        return 10.0 ** np.linspace(self.log_min, self.log_max, self.count)

    @property
    def step(self) -> float:
        return (self.log_max - self.log_min) / (self.count - 1) if self.count > 1 else 0.0

    def to_dict(self) -> dict:
        return {
            "kernel_candidates": list(self.kernel_candidates),
            "log_min": self.log_min,
            "log_max": self.log_max,
            "count": self.count,
            "budget": self.budget,
            "rng_seed": self.rng_seed,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "TuneConfig":
        grid = d.get("bandwidth_grid", {})
        args = dict(
            kernel_candidates=tuple(d.get("kernel_candidates", ("gaussian",))),
            log_min=float(grid.get("log_min", d.get("log_min", -2.0))),
            log_max=float(grid.get("log_max", d.get("log_max", 0.0))),
            count=int(grid.get("count", d.get("count", 12))),
            budget=d.get("budget"),
            rng_seed=int(d.get("rng_seed", 0)),
        )
        return cls(**args)


@dataclass(frozen=True)
class Trial:
    index: int
    phase: str  # "grid" or "refine"
    kernel: str
    bandwidth: float
    mape: float

    def to_dict(self) -> dict:
        return {
            "trial": self.index,
            "phase": self.phase,
            "kernel": self.kernel,
            "bandwidth": self.bandwidth,
            "mape": self.mape,
        }


@dataclass
class TuneResult:
    best: KernelSpec
    best_mape: float
    trials: list[Trial] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "best": self.best.to_dict(),
            "best_mape": self.best_mape,
            "trials": [t.to_dict() for t in self.trials],
        }


def _objective(inputs, models, truths: np.ndarray, spec: KernelSpec, variant: str) -> float:
    est = [
        continuous_variant_estimate(inp.with_kernel(spec), variant, *qs).value for inp, qs in zip(inputs, models)
    ]
    return mape(est, truths)


def _better(a: Trial, b: Trial | None) -> bool:
    """Lower MAPE wins; equal MAPE goes to the larger bandwidth."""
    if b is None:
        return True
    if a.mape != b.mape:
        return a.mape < b.mape
    return a.bandwidth > b.bandwidth


def tune_continuous(
    datasets: Sequence[tuple],
    config: TuneConfig | None = None,
    metric: Metric | str | None = None,
    variant: str = "continuous",
) -> TuneResult:
    """Pick the kernel and bandwidth with the lowest MAPE against known values.

    Parameters
    ----------
    datasets : sequence of (ContinuousOpeInput, float[, q_logged, q_policy])
        Estimator inputs with the true value of the evaluated policy.  The
        doubly robust variants also need reward-model values for the
        input's metric.
    config : TuneConfig
    metric : Metric, optional
        Overrides the metric of every input.
    variant : str
        One of ``CONTINUOUS_VARIANTS``.
    """
    config = config or TuneConfig()
    if not datasets:
        raise ValueError("need at least one (input, oracle value) pair")
    if variant not in CONTINUOUS_VARIANTS:
        raise InvalidConfig(f"unknown continuous variant {variant!r}")
    inputs = [d[0] if metric is None else d[0].with_metric(metric) for d in datasets]
    models = [tuple(d[2:4]) if len(d) >= 4 else (None, None) for d in datasets]
    truths = np.asarray([float(d[1]) for d in datasets])
    if not np.all(np.isfinite(truths)):
        raise ValueError("oracle values must be finite")
    grid = [(k, float(h)) for k in config.kernel_candidates for h in config.bandwidths]
    if not grid:
        raise EmptyGrid("no (kernel, bandwidth) candidates to try")
    budget = config.budget if config.budget is not None else len(grid)
    grid = grid[:budget]

    def score(cand):
        kind, h = cand
        return _objective(inputs, models, truths, KernelSpec(kind, h), variant)

    trials = [Trial(i, "grid", k, h, s) for i, ((k, h), s) in enumerate(zip(grid, pmap(score, grid)))]
    best = None
    for t in trials:
        if _better(t, best):
            best = t

    n_refine = budget - len(grid)
    if n_refine > 0 and config.step > 0:
        rng = _rng.stream(config.rng_seed, _rng.TUNING)
        centre = math.log10(best.bandwidth)
        lo, hi = centre - config.step, centre + config.step
        cands = [(best.kernel, float(10.0 ** rng.uniform(lo, hi))) for _ in range(n_refine)]
        scores = pmap(score, cands)
        for (k, h), s in zip(cands, scores):
            t = Trial(len(trials), "refine", k, h, s)
            trials.append(t)
            if _better(t, best):
                best = t
    return TuneResult(KernelSpec(best.kernel, best.bandwidth), best.mape, trials)


# ---------------------------------------------------------------------------
# counterfactual A/B tests
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class EstimatorConfig:
    """How the replaced side is re-estimated.

    ``estimator`` is one of the discrete names or a continuous variant.
    Discrete estimators need ``binning`` and ``behavior_policy`` (a proxy
    with a classifier, or a simulator policy with known noise) and, for
    DM/DR/SNDR, per-metric ``reward_models``.  Continuous variants need
    per-metric ``kernels`` and use logged propensities, falling back to
    ``density_model``; their doubly robust forms fit a cross-fitted reward
    curve with ``reward_params``.
    """

    estimator: str = "continuous"
    kernels: Mapping[str, KernelSpec] | KernelSpec | None = None
    binning: BinningScheme | None = None
    behavior_policy: object = None
    reward_models: Mapping[str, np.ndarray] | None = None
    density_model: object = None
    clip_lambda: float | None = None
    alpha: float = 0.05
    reward_params: TreeParams | None = None  # forest for the continuous DR variants
    rng_seed: int = 0

    def __post_init__(self):
        if self.estimator not in ALL_ESTIMATORS + CONTINUOUS_VARIANTS:
            raise InvalidConfig(f"unknown estimator {self.estimator!r}")

    def kernel_for(self, metric: Metric) -> KernelSpec:
        k = self.kernels
        if isinstance(k, Mapping):
            k = {as_metric(key): v for key, v in k.items()}.get(metric)
        if k is None:
            raise InvalidConfig(f"no kernel configured for metric {metric.value}")
        return k


def estimate_side(
    dataset: LoggedDataset, replacement, config: EstimatorConfig, metrics: Sequence[Metric] = METRICS
) -> list[EstimateReport]:
    """Value of ``replacement`` on each metric, estimated from ``dataset``."""
    if getattr(replacement, "dimension", dataset.dimension) != dataset.dimension:
        raise DimensionMismatch("replacement policy dimension does not match the log")
    if config.estimator in CONTINUOUS_VARIANTS:
        tau = policy_actions(replacement, dataset.contexts)
        q, src = behavior_densities(dataset, config.density_model)
        out = []
        for m in metrics:
            curves = (None, None)
            if config.estimator.endswith("dr"):
                params = config.reward_params or TreeParams(rng_seed=config.rng_seed)
                curves = cross_fit_reward_curve(dataset, m, tau, params, rng_seed=config.rng_seed)
            inp = ContinuousOpeInput(dataset, tau, q, config.kernel_for(m), m, src)
            out.append(continuous_variant_estimate(inp, config.estimator, *curves))
        return out
    if config.binning is None or config.behavior_policy is None:
        raise InvalidConfig("discrete estimators need a binning and a behavior policy")
    pe = _bin_source(replacement, config.binning)(dataset.contexts)
    pb = _bin_source(config.behavior_policy, config.binning)(dataset.contexts)
    models = {as_metric(k): v for k, v in (config.reward_models or {}).items()}
    fn = DISCRETE[config.estimator]
    return [
        fn(DiscreteOpeInput(dataset, config.binning, pb, pe, models.get(m), config.clip_lambda, m)) for m in metrics
    ]


def counterfactual_test(
    logged_test: tuple[LoggedDataset, LoggedDataset],
    replacement,
    side_to_replace: Side | str,
    config: EstimatorConfig | None = None,
) -> list[LiftResult]:
    """Lifts of an A/B test after swapping one side's policy for ``replacement``.

    The replaced side's per-record estimator contributions stand in for
    its observed rewards; the other side keeps its observations.  Lifts
    and Welch intervals then follow :func:`core.lift_with_ci`.
    """
    config = config or EstimatorConfig()
    control, treatment = logged_test
    side = Side(side_to_replace)
    replaced = control if side == Side.CONTROL else treatment
    reports = estimate_side(replaced, replacement, config)
    out = []
    for m, rep in zip(METRICS, reports):
        est = rep.round_rewards
        if side == Side.CONTROL:
            out.append(lift_with_ci(treatment.metric(m), est, config.alpha, m))
        else:
            out.append(lift_with_ci(est, control.metric(m), config.alpha, m))
    return out
