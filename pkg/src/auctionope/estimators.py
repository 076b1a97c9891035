"""Off-policy estimators.

Discrete family (actions grouped into bins): IPW, SNIPW, DM, DR, SNDR,
all with optional weight clipping ``w -> min(lambda, w)``.  Continuous
family: the kernel-smoothed estimator

    v = 1/(n h) * sum_i K((tau(x_i) - t_i) / h) * y_i / Q_i

and its gradient with respect to each evaluation action ``tau(x_i)``.

Every estimator also returns its per-record contributions
(``EstimateReport.round_rewards``), whose mean is the estimate.  They feed
the confidence intervals of counterfactual lifts.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy import special

from . import _rng
from ._parallel import pmap
from .core import EPS_Q, METRICS, BinningScheme, LoggedDataset, Metric, as_metric
from .errors import (
    AllWeightsZero,
    DimensionMismatch,
    MissingRewardModel,
    NonDifferentiableKernel,
    OpeError,
)
from .models.kernels import KernelSpec
from .models.trees import REGRESSION, TreeParams, fit_tree_ensemble

DISCRETE_ESTIMATORS = ("ipw", "snipw", "dm", "dr", "sndr")
ALL_ESTIMATORS = DISCRETE_ESTIMATORS + ("continuous",)


@dataclass(frozen=True)
class EstimateReport:
    value: float
    effective_sample_size: float
    clipped_fraction: float
    n: int
    estimator_name: str
    metric: str
    propensity_source: str = "model"
    round_rewards: np.ndarray = field(default=None, repr=False, compare=False)

    def to_dict(self) -> dict:
        return {
            "estimator_name": self.estimator_name,
            "metric": self.metric,
            "value": self.value,
            "effective_sample_size": self.effective_sample_size,
            "clipped_fraction": self.clipped_fraction,
            "n": self.n,
            "propensity_source": self.propensity_source,
        }


def effective_sample_size(weights) -> float:
    w = np.asarray(weights, dtype=np.float64)
    s2 = float(np.dot(w, w))
    return float(w.sum() ** 2 / s2) if s2 > 0 else 0.0


def clip_weights(weights, clip_lambda: float | None) -> tuple[np.ndarray, float]:
    w = np.asarray(weights, dtype=np.float64)
    if clip_lambda is None or np.isinf(clip_lambda):
        return w, 0.0
    if not clip_lambda > 0:
        raise ValueError("clip_lambda must be > 0")
    return np.minimum(w, clip_lambda), float(np.mean(w > clip_lambda))


# ---------------------------------------------------------------------------
# discrete inputs
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class OpeArrays:
    """Per-record quantities shared by the discrete estimators.

    Attributes
    ----------
    rewards : (n,) observed reward ``r_i`` of one metric.
    pe_logged : (n,) evaluation probability of the logged action ``pi_e(a_i|x_i)``.
    pb_logged : (n,) behavior probability ``pi_b(a_i|x_i)`` (floored at ``EPS_Q`` here).
    q_logged : (n,) ``q(x_i, a_i)``, optional.
    q_policy : (n,) ``q(x_i, pi_e) = E_{a~pi_e}[q(x_i, a)]``, optional.

    Probabilities may equally be densities; the estimators only use ratios.
    """

    rewards: np.ndarray
    pe_logged: np.ndarray
    pb_logged: np.ndarray
    q_logged: np.ndarray | None = None
    q_policy: np.ndarray | None = None
    clip_lambda: float | None = None
    metric: str = "reward"
    propensity_source: str = "model"

    def __post_init__(self):
        r = np.asarray(self.rewards, dtype=np.float64).reshape(-1)
        n = r.shape[0]
        fields = {"rewards": r}
        for name in ("pe_logged", "pb_logged", "q_logged", "q_policy"):
            v = getattr(self, name)
            if v is None:
                continue
            v = np.asarray(v, dtype=np.float64).reshape(-1)
            if v.shape[0] != n:
                raise DimensionMismatch(f"{name} has length {v.shape[0]}, expected {n}")
            fields[name] = v
        fields["pb_logged"] = np.maximum(fields["pb_logged"], EPS_Q)
        if self.clip_lambda is not None and not self.clip_lambda > 0:
            raise ValueError("clip_lambda must be > 0")
        for k, v in fields.items():
            object.__setattr__(self, k, v)

    @property
    def n(self) -> int:
        return self.rewards.shape[0]

    def weights(self) -> tuple[np.ndarray, float]:
        return clip_weights(self.pe_logged / self.pb_logged, self.clip_lambda)


ProbSource = np.ndarray | Callable[[np.ndarray], np.ndarray]


def _eval_probs(src: ProbSource, contexts: np.ndarray, n: int, B: int, name: str) -> np.ndarray:
    if callable(src):
        src = src(contexts)
    P = np.asarray(src, dtype=np.float64)
    if P.shape != (n, B):
        raise DimensionMismatch(f"{name} must have shape ({n}, {B}), got {P.shape}")
    return P


@dataclass(frozen=True, eq=False)
class DiscreteOpeInput:
    """Logged data plus bin distributions of both policies.

    ``behavior_policy`` / ``evaluation_policy`` are (n, B) probability
    matrices or callables mapping contexts to one.  ``reward_model`` is the
    (n, B) table ``q(x_i, bin)`` (see :func:`cross_fit_reward_matrix`).
    """

    dataset: LoggedDataset
    binning: BinningScheme
    behavior_policy: ProbSource
    evaluation_policy: ProbSource
    reward_model: np.ndarray | None = None
    clip_lambda: float | None = None
    metric: Metric | str = Metric.RETURNS
    propensity_source: str = "model"

    def __post_init__(self):
        n, B = len(self.dataset), self.binning.num_bins
        X = self.dataset.contexts
        object.__setattr__(self, "behavior_policy", _eval_probs(self.behavior_policy, X, n, B, "behavior_policy"))
        object.__setattr__(
            self, "evaluation_policy", _eval_probs(self.evaluation_policy, X, n, B, "evaluation_policy")
        )
        if self.reward_model is not None:
            q = np.asarray(self.reward_model, dtype=np.float64)
            if q.shape != (n, B):
                raise DimensionMismatch(f"reward_model must have shape ({n}, {B}), got {q.shape}")
            object.__setattr__(self, "reward_model", q)
        if self.clip_lambda is not None and not self.clip_lambda > 0:
            raise ValueError("clip_lambda must be > 0")
        object.__setattr__(self, "metric", as_metric(self.metric))

    @property
    def bins(self) -> np.ndarray:
        return self.binning.assign(self.dataset.actions)

    def arrays(self) -> OpeArrays:
        rows = np.arange(len(self.dataset))
        bins = self.bins
        q_logged = q_policy = None
        if self.reward_model is not None:
            q_logged = self.reward_model[rows, bins]
            q_policy = (self.reward_model * self.evaluation_policy).sum(axis=1)
        return OpeArrays(
            rewards=self.dataset.metric(self.metric),
            pe_logged=self.evaluation_policy[rows, bins],
            pb_logged=self.behavior_policy[rows, bins],
            q_logged=q_logged,
            q_policy=q_policy,
            clip_lambda=self.clip_lambda,
            metric=self.metric.value,
            propensity_source=self.propensity_source,
        )


def _arrays(inp: DiscreteOpeInput | OpeArrays) -> OpeArrays:
    return inp.arrays() if isinstance(inp, DiscreteOpeInput) else inp


def importance_weights(inp: DiscreteOpeInput | OpeArrays) -> np.ndarray:
    """``min(lambda, pi_e(a_i|x_i) / pi_b(a_i|x_i))`` per record."""
    return _arrays(inp).weights()[0]


def _report(name, a: OpeArrays, rounds, w, clipped, value=None) -> EstimateReport:
    return EstimateReport(
        value=float(np.mean(rounds)) if value is None else value,
        effective_sample_size=effective_sample_size(w),
        clipped_fraction=clipped,
        n=a.n,
        estimator_name=name,
        metric=a.metric,
        propensity_source=a.propensity_source,
        round_rewards=rounds,
    )


def _need_model(a: OpeArrays, name: str):
    if a.q_logged is None or a.q_policy is None:
        raise MissingRewardModel(f"{name} requires a reward model")


def ipw(inp: DiscreteOpeInput | OpeArrays) -> EstimateReport:
    a = _arrays(inp)
    w, clipped = a.weights()
    return _report("ipw", a, w * a.rewards, w, clipped)


def snipw(inp: DiscreteOpeInput | OpeArrays) -> EstimateReport:
    a = _arrays(inp)
    w, clipped = a.weights()
    mean_w = w.mean()
    if not mean_w > 0:
        raise AllWeightsZero("sum of importance weights is zero")
    rounds = w * a.rewards / mean_w
    # a convex combination of the rewards; clamp away rounding drift
    value = float(np.clip(np.mean(rounds), a.rewards.min(), a.rewards.max()))
    return _report("snipw", a, rounds, w, clipped, value)


def dm(inp: DiscreteOpeInput | OpeArrays) -> EstimateReport:
    a = _arrays(inp)
    _need_model(a, "DM")
    return _report("dm", a, a.q_policy.copy(), np.ones(a.n), 0.0)


def dr(inp: DiscreteOpeInput | OpeArrays) -> EstimateReport:
    a = _arrays(inp)
    _need_model(a, "DR")
    w, clipped = a.weights()
    return _report("dr", a, a.q_policy + w * (a.rewards - a.q_logged), w, clipped)


def sndr(inp: DiscreteOpeInput | OpeArrays) -> EstimateReport:
    a = _arrays(inp)
    _need_model(a, "SNDR")
    w, clipped = a.weights()
    mean_w = w.mean()
    if not mean_w > 0:
        raise AllWeightsZero("sum of importance weights is zero")
    return _report("sndr", a, a.q_policy + w * (a.rewards - a.q_logged) / mean_w, w, clipped)


DISCRETE = {"ipw": ipw, "snipw": snipw, "dm": dm, "dr": dr, "sndr": sndr}


# ---------------------------------------------------------------------------
# reward model
# ---------------------------------------------------------------------------


def reward_features(contexts: np.ndarray, bins: np.ndarray, num_bins: int) -> np.ndarray:
    onehot = np.zeros((contexts.shape[0], num_bins))
    onehot[np.arange(contexts.shape[0]), bins] = 1.0
    return np.hstack([contexts, onehot])


def cross_fit_reward_matrix(
    dataset: LoggedDataset,
    binning: BinningScheme,
    metric: Metric | str,
    params: TreeParams | None = None,
    folds: int = 2,
    rng_seed: int = 0,
) -> np.ndarray:
    """Out-of-fold table ``q(x_i, bin)`` of shape (n, B).

    A regression forest is trained on ``context + one_hot(bin)`` for each
    fold's complement and applied to the held-out fold for every bin.
    ``folds=1`` trains and predicts on the full data.
    """
    params = params or TreeParams(rng_seed=rng_seed)
    n, B = len(dataset), binning.num_bins
    y = dataset.metric(metric)
    bins = binning.assign(dataset.actions)
    feats = reward_features(dataset.contexts, bins, B)
    out = np.empty((n, B))
    if folds <= 1 or n < 2 * folds:
        fold_of = np.zeros(n, dtype=np.int64)
        folds = 1
    else:
        perm = _rng.stream(rng_seed, _rng.CROSS_FIT).permutation(n)
        fold_of = np.empty(n, dtype=np.int64)
        fold_of[perm] = np.arange(n) % folds
    for k in range(folds):
        test = np.flatnonzero(fold_of == k)
        train = np.flatnonzero(fold_of != k) if folds > 1 else test
        model = fit_tree_ensemble(
            feats[train],
            y[train],
            REGRESSION,
            TreeParams(**{**params.to_dict(), "rng_seed": _rng.derive_seed(params.rng_seed, "fold", k)}),
        )
        Xt = dataset.contexts[test]
        grid = np.repeat(Xt, B, axis=0)
        gbins = np.tile(np.arange(B), test.size)
        out[test] = model.predict(reward_features(grid, gbins, B)).reshape(test.size, B)
    return out


# ---------------------------------------------------------------------------
# continuous estimator
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ContinuousOpeInput:
    """Logged data, evaluation actions ``tau(x_i)`` and behavior densities ``Q_i``."""

    dataset: LoggedDataset
    evaluation_actions: np.ndarray
    behavior_density: np.ndarray
    kernel: KernelSpec = field(default_factory=KernelSpec)
    metric: Metric | str = Metric.RETURNS
    propensity_source: str = "logged"

    def __post_init__(self):
        n = len(self.dataset)
        tau = np.asarray(self.evaluation_actions, dtype=np.float64).reshape(-1)
        q = np.asarray(self.behavior_density, dtype=np.float64).reshape(-1)
        if tau.shape[0] != n or q.shape[0] != n:
            raise DimensionMismatch("need one evaluation action and one behavior density per record")
        object.__setattr__(self, "evaluation_actions", tau)
        object.__setattr__(self, "behavior_density", q)
        object.__setattr__(self, "metric", as_metric(self.metric))

    @classmethod
    def build(
        cls,
        dataset: LoggedDataset,
        policy,
        kernel: KernelSpec,
        metric: Metric | str = Metric.RETURNS,
        density_model=None,
    ) -> "ContinuousOpeInput":
        """Evaluate ``policy`` on the logged contexts and pick ``Q_i`` per record.

        Logged propensities are used where present; the remaining records
        fall back to ``density_model.conditional``.
        """
        tau = policy_actions(policy, dataset.contexts)
        q, source = behavior_densities(dataset, density_model)
        return cls(dataset, tau, q, kernel, metric, source)

    def with_actions(self, actions) -> "ContinuousOpeInput":
        return ContinuousOpeInput(
            self.dataset, actions, self.behavior_density, self.kernel, self.metric, self.propensity_source
        )

    def with_kernel(self, kernel: KernelSpec) -> "ContinuousOpeInput":
        return ContinuousOpeInput(
            self.dataset, self.evaluation_actions, self.behavior_density, kernel, self.metric, self.propensity_source
        )

    def with_metric(self, metric) -> "ContinuousOpeInput":
        return ContinuousOpeInput(
            self.dataset, self.evaluation_actions, self.behavior_density, self.kernel, metric, self.propensity_source
        )


def policy_actions(policy, contexts) -> np.ndarray:
    if policy is None:
        raise ValueError("an evaluation policy is required")
    if isinstance(policy, np.ndarray):
        return np.asarray(policy, dtype=np.float64).reshape(-1)
    if hasattr(policy, "payment"):
        return np.asarray(policy.payment(contexts), dtype=np.float64).reshape(-1)
    return np.asarray(policy(contexts), dtype=np.float64).reshape(-1)


def behavior_densities(dataset: LoggedDataset, density_model=None) -> tuple[np.ndarray, str]:
    known = dataset.has_propensities
    q = dataset.propensities.copy()
    if known.all():
        return q, "logged"
    if density_model is None:
        raise OpeError(
            f"{int((~known).sum())} records lack logged propensities and no density model was supplied"
        )
    missing = ~known
    q[missing] = density_model.conditional(dataset.contexts[missing], dataset.actions[missing])
    return q, "model" if not known.any() else "mixed"


def continuous_estimate(inp: ContinuousOpeInput) -> EstimateReport:
    h = inp.kernel.bandwidth
    u = (inp.evaluation_actions - inp.dataset.actions) / h
    q = np.maximum(inp.behavior_density, EPS_Q)
    kw = inp.kernel(u) / q
    rounds = kw * inp.dataset.metric(inp.metric) / h
    return EstimateReport(
        value=float(np.mean(rounds)),
        effective_sample_size=effective_sample_size(kw),
        clipped_fraction=float(np.mean(inp.behavior_density < EPS_Q)),
        n=len(inp.dataset),
        estimator_name="continuous",
        metric=inp.metric.value,
        propensity_source=inp.propensity_source,
        round_rewards=rounds,
    )


def continuous_estimate_gradient(inp: ContinuousOpeInput) -> np.ndarray:
    """``d v / d tau(x_i)`` for every record (Gaussian kernel only)."""
    if not inp.kernel.differentiable:
        raise NonDifferentiableKernel(f"{inp.kernel.kind} kernel is not differentiable")
    h = inp.kernel.bandwidth
    n = len(inp.dataset)
    u = (inp.evaluation_actions - inp.dataset.actions) / h
    q = np.maximum(inp.behavior_density, EPS_Q)
    return inp.kernel.derivative(u) * inp.dataset.metric(inp.metric) / (q * n * h * h)


# ---------------------------------------------------------------------------
# kernel-smoothed variants of the discrete estimators
# ---------------------------------------------------------------------------

CONTINUOUS_VARIANTS = ("continuous", "continuous_snipw", "continuous_dr", "continuous_sndr")


def cross_fit_reward_curve(
    dataset: LoggedDataset,
    metric: Metric | str,
    evaluation_actions,
    params: TreeParams | None = None,
    folds: int = 2,
    rng_seed: int = 0,
) -> tuple[np.ndarray, np.ndarray]:
    """Out-of-fold ``q(x_i, t_i)`` and ``q(x_i, tau_i)`` from a forest on ``context + action``."""
    params = params or TreeParams(rng_seed=rng_seed)
    n = len(dataset)
    tau = np.asarray(evaluation_actions, dtype=np.float64).reshape(-1)
    if tau.shape[0] != n:
        raise DimensionMismatch("need one evaluation action per record")
    y = dataset.metric(metric)
    feats = np.hstack([dataset.contexts, dataset.actions[:, None]])
    at_tau = np.hstack([dataset.contexts, tau[:, None]])
    q_logged, q_policy = np.empty(n), np.empty(n)
    if folds <= 1 or n < 2 * folds:
        fold_of = np.zeros(n, dtype=np.int64)
        folds = 1
    else:
        perm = _rng.stream(rng_seed, _rng.CROSS_FIT, 1).permutation(n)
        fold_of = np.empty(n, dtype=np.int64)
        fold_of[perm] = np.arange(n) % folds
    for k in range(folds):
        test = np.flatnonzero(fold_of == k)
        train = np.flatnonzero(fold_of != k) if folds > 1 else test
        model = fit_tree_ensemble(
            feats[train],
            y[train],
            REGRESSION,
            TreeParams(**{**params.to_dict(), "rng_seed": _rng.derive_seed(params.rng_seed, "curve", k)}),
        )
        q_logged[test] = model.predict(feats[test])
        q_policy[test] = model.predict(at_tau[test])
    return q_logged, q_policy


def continuous_variant_estimate(
    inp: ContinuousOpeInput,
    variant: str = "continuous",
    q_logged=None,
    q_policy=None,
) -> EstimateReport:
    """Kernel-smoothed IPW (``"continuous"``), SNIPW, DR or SNDR.

    With kernel weights ``k_i = K((tau_i - t_i)/h) / (h Q_i)`` the variants
    are ``mean(k y)``, ``sum(k y) / sum(k)``,
    ``mean(q(x, tau) + k (y - q(x, t)))`` and the same with ``k``
    normalised to mean one.  The doubly robust forms take the reward model
    at the logged action (``q_logged``) and at the evaluation action
    (``q_policy``).
    """
    if variant == "continuous":
        return continuous_estimate(inp)
    if variant not in CONTINUOUS_VARIANTS:
        raise ValueError(f"unknown continuous variant {variant!r}")
    h = inp.kernel.bandwidth
    u = (inp.evaluation_actions - inp.dataset.actions) / h
    kw = inp.kernel(u) / (np.maximum(inp.behavior_density, EPS_Q) * h)
    y = inp.dataset.metric(inp.metric)
    if variant in ("continuous_snipw", "continuous_sndr"):
        mass = kw.mean()
        if mass <= 0:
            raise AllWeightsZero("all kernel weights are zero")
        w = kw / mass
    else:
        w = kw
    if variant.endswith("dr"):
        if q_logged is None or q_policy is None:
            raise MissingRewardModel(f"{variant} needs reward-model values at logged and evaluation actions")
        rounds = np.asarray(q_policy, dtype=np.float64) + w * (y - np.asarray(q_logged, dtype=np.float64))
    else:
        rounds = w * y
    return EstimateReport(
        value=float(np.mean(rounds)),
        effective_sample_size=effective_sample_size(kw),
        clipped_fraction=float(np.mean(inp.behavior_density < EPS_Q)),
        n=len(inp.dataset),
        estimator_name=variant,
        metric=inp.metric.value,
        propensity_source=inp.propensity_source,
        round_rewards=rounds,
    )


# ---------------------------------------------------------------------------
# exact bin distributions for Gaussian-logged policies
# ---------------------------------------------------------------------------


def gaussian_bin_probs(policy, contexts, binning: BinningScheme) -> np.ndarray:
    """``P(bin | x)`` for a policy that logs ``payment(x) + Normal(0, noise_sd)`` clamped at 0.

    A noiseless policy gives a one-hot row on the bin of its payment.
    """
    X = np.atleast_2d(np.asarray(contexts, dtype=np.float64))
    mean = policy_actions(policy, X)
    sd = float(getattr(policy, "noise_sd", 0.0))
    B = binning.num_bins
    if sd == 0:
        P = np.zeros((X.shape[0], B))
        P[np.arange(X.shape[0]), binning.assign(mean)] = 1.0
        return P
    inner = binning.edges[1:-1]
    cdf = special.ndtr((inner[None, :] - mean[:, None]) / sd)
    cdf = np.hstack([np.zeros((X.shape[0], 1)), cdf, np.ones((X.shape[0], 1))])
    return np.diff(cdf, axis=1)


# ---------------------------------------------------------------------------
# full table
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Cell:
    estimator: str
    metric: str
    report: EstimateReport | None = None
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.report is not None

    def to_dict(self) -> dict:
        d = {"estimator": self.estimator, "metric": self.metric}
        if self.report is not None:
            d.update(self.report.to_dict())
        else:
            d["error"] = self.error
        return d


def _bin_source(policy, binning: BinningScheme):
    """Bin distribution source: a proxy's classifier, or the exact Gaussian bins of a simulator policy."""
    if hasattr(policy, "bin_probs"):
        return policy.bin_probs
    if hasattr(policy, "payment") and hasattr(policy, "noise_sd"):
        return lambda X: gaussian_bin_probs(policy, X, binning)
    return policy


def evaluate_all(
    dataset: LoggedDataset,
    evaluation_policy,
    behavior_policy,
    binning: BinningScheme,
    reward_models: Mapping[str, np.ndarray] | None = None,
    kernels: Mapping[str, KernelSpec] | KernelSpec | None = None,
    density_model=None,
    clip_lambda: float | None = None,
    estimators: Sequence[str] = ALL_ESTIMATORS,
    metrics: Sequence[Metric | str] = METRICS,
) -> list[Cell]:
    """One cell per (estimator, metric), estimators outermost, in the given order.

    ``evaluation_policy`` needs ``bin_probs`` for the discrete estimators
    and ``payment`` for the continuous one (a :class:`ProxyPolicy` has both).
    ``behavior_policy`` provides ``bin_probs``.  Failures are recorded in
    the cell instead of aborting the table.
    """
    metrics = [as_metric(m) for m in metrics]
    reward_models = {as_metric(k): v for k, v in (reward_models or {}).items()}
    if kernels is None or isinstance(kernels, KernelSpec):
        kernels = {m: kernels for m in metrics}
    else:
        kernels = {as_metric(k): v for k, v in kernels.items()}

    discrete_needed = any(e in DISCRETE for e in estimators)
    pe = pb = None
    discrete_error = None
    if discrete_needed:
        try:
            pe = _eval_probs(_bin_source(evaluation_policy, binning), dataset.contexts, len(dataset), binning.num_bins, "pi_e")
            pb = _eval_probs(_bin_source(behavior_policy, binning), dataset.contexts, len(dataset), binning.num_bins, "pi_b")
        except (OpeError, ValueError, AttributeError) as exc:
            discrete_error = f"{type(exc).__name__}: {exc}"

    continuous_base = None
    continuous_error = None
    if "continuous" in estimators:
        try:
            tau = policy_actions(evaluation_policy, dataset.contexts)
            q, src = behavior_densities(dataset, density_model)
            continuous_base = (tau, q, src)
        except (OpeError, ValueError, AttributeError) as exc:
            continuous_error = f"{type(exc).__name__}: {exc}"

    def run(job):
        est, metric = job
        try:
            if est == "continuous":
                if continuous_error:
                    raise OpeError(continuous_error)
                kern = kernels.get(metric)
                if kern is None:
                    raise OpeError(f"no kernel configured for metric {metric.value}")
                tau, q, src = continuous_base
                report = continuous_estimate(ContinuousOpeInput(dataset, tau, q, kern, metric, src))
            else:
                if discrete_error:
                    raise OpeError(discrete_error)
                inp = DiscreteOpeInput(
                    dataset, binning, pb, pe, reward_models.get(metric), clip_lambda, metric
                )
                report = DISCRETE[est](inp)
            return Cell(est, metric.value, report=report)
        except OpeError as exc:
            return Cell(est, metric.value, error=f"{type(exc).__name__}: {exc}")

    jobs = [(e, m) for e in estimators for m in metrics]
    unknown = [e for e in estimators if e not in ALL_ESTIMATORS]
    if unknown:
        raise ValueError(f"unknown estimators {unknown}")
    return pmap(run, jobs)
