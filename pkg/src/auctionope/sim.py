"""Synthetic single-slot first-price auction.

Each round an agent sees a context ``x`` and pays ``p``.  A rival bid
``m ~ LogNormal(log(competitor_scale), 0.5)`` is drawn; the agent wins iff
``p > m``.  A lost round yields all-zero rewards.  A won round yields

* cost = p
* reach = 1
* resources ~ Poisson(softplus(conversion_weights . x))
* returns = resources * max(0, value_weights . x + Normal(0, noise_sd))

Random draws are organised in blocks of :data:`_rng.BLOCK` records with one
stream per (seed, purpose, block), so a longer log extends a shorter one.  The rival bid, conversion count and
value noise of a record are drawn whether or not the round is won, so two
policies simulated with the same seed face the same auctions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np
from scipy import special, stats

from . import _rng
from .core import (
    METRICS,
    LiftResult,
    LoggedDataset,
    RewardVector,
    Side,
    lift_with_ci,
)
from .errors import InvalidConfig

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
import tomli_w

RIVAL_LOG_SD = 0.5
CONTEXT_DISTRIBUTIONS = ("standard_normal", "uniform_unit")


@dataclass(frozen=True)
class AuctionConfig:
    dimension: int
    context_seed_distribution: str = "uniform_unit"
    competitor_scale: float = 1.0
    conversion_weights: tuple[float, ...] = ()
    value_weights: tuple[float, ...] = ()
    noise_sd: float = 0.0
    rng_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "conversion_weights", tuple(float(w) for w in self.conversion_weights))
        object.__setattr__(self, "value_weights", tuple(float(w) for w in self.value_weights))
        if self.dimension < 1:
            raise InvalidConfig("dimension must be >= 1")
        if len(self.conversion_weights) != self.dimension or len(self.value_weights) != self.dimension:
            raise InvalidConfig(
                f"weight vectors must have length {self.dimension} "
                f"(got {len(self.conversion_weights)} and {len(self.value_weights)})"
            )
        if not self.competitor_scale > 0:
            raise InvalidConfig("competitor_scale must be > 0")
        if not self.noise_sd >= 0:
            raise InvalidConfig("noise_sd must be >= 0")
        if self.context_seed_distribution not in CONTEXT_DISTRIBUTIONS:
            raise InvalidConfig(f"context_seed_distribution must be one of {CONTEXT_DISTRIBUTIONS}")
        if not 0 <= int(self.rng_seed) < 2**64:
            raise InvalidConfig("rng_seed must be a 64-bit unsigned integer")

    def to_dict(self) -> dict:
        return {
            "dimension": self.dimension,
            "context_seed_distribution": self.context_seed_distribution,
            "competitor_scale": self.competitor_scale,
            "conversion_weights": list(self.conversion_weights),
            "value_weights": list(self.value_weights),
            "noise_sd": self.noise_sd,
            "rng_seed": self.rng_seed,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "AuctionConfig":
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise InvalidConfig(f"unknown [auction] keys: {sorted(extra)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise InvalidConfig(str(exc)) from None


# ---------------------------------------------------------------------------
# payment policies
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PolicySpec:
    """Base payment policy: ``payment(contexts)`` plus Gaussian logging noise."""

    noise_sd: float = 0.0

    kind = "base"

    def payment(self, contexts) -> np.ndarray:
        raise NotImplementedError

    def check_dimension(self, d: int) -> None:
        pass

    def _base_dict(self) -> dict:
        return {"kind": self.kind, "noise_sd": self.noise_sd}


@dataclass(frozen=True)
class LinearPolicy(PolicySpec):
    weights: tuple[float, ...] = ()
    intercept: float = 0.0
    floor: float = 0.0

    kind = "linear"

    def __post_init__(self):
        object.__setattr__(self, "weights", tuple(float(w) for w in self.weights))
        if self.floor < 0 or self.noise_sd < 0:
            raise InvalidConfig("floor and noise_sd must be >= 0")

    def payment(self, contexts) -> np.ndarray:
        X = np.atleast_2d(np.asarray(contexts, dtype=np.float64))
        self.check_dimension(X.shape[1])
        return np.maximum(X @ np.asarray(self.weights) + self.intercept, self.floor)

    def check_dimension(self, d: int) -> None:
        if len(self.weights) != d:
            raise InvalidConfig(f"linear policy has {len(self.weights)} weights, contexts have dimension {d}")

    def to_dict(self) -> dict:
        return {**self._base_dict(), "weights": list(self.weights), "intercept": self.intercept, "floor": self.floor}


@dataclass(frozen=True)
class ConstantPolicy(PolicySpec):
    payment_value: float = 0.0

    kind = "constant"

    def __post_init__(self):
        if self.payment_value < 0 or self.noise_sd < 0:
            raise InvalidConfig("payment and noise_sd must be >= 0")

    def payment(self, contexts) -> np.ndarray:
        X = np.atleast_2d(np.asarray(contexts, dtype=np.float64))
        return np.full(X.shape[0], float(self.payment_value))

    def to_dict(self) -> dict:
        return {**self._base_dict(), "payment": self.payment_value}


@dataclass(frozen=True)
class ModelPolicy(PolicySpec):
    """Payment given by a fitted model (the MLP or a proxy regressor)."""

    model: object = None
    source: str | None = None  # file the model was loaded from, for TOML round-trips

    kind = "model"

    def payment(self, contexts) -> np.ndarray:
        X = np.atleast_2d(np.asarray(contexts, dtype=np.float64))
        if hasattr(self.model, "payment"):
            p = self.model.payment(X)
        else:
            p = np.asarray(self.model(X), dtype=np.float64)
        return np.maximum(np.asarray(p, dtype=np.float64).reshape(-1), 0.0)

    def check_dimension(self, d: int) -> None:
        md = getattr(self.model, "dimension", d)
        if md != d:
            raise InvalidConfig(f"model expects dimension {md}, contexts have dimension {d}")

    def to_dict(self) -> dict:
        from .models import MlpPolicy

        kind = "mlp" if isinstance(self.model, MlpPolicy) else "proxy"
        if self.source is None:
            raise InvalidConfig("a model policy needs a source path to be serialised")
        return {"kind": kind, "noise_sd": self.noise_sd, "model": str(self.source)}


def policy_from_dict(d: Mapping, base_dir: Path | None = None) -> PolicySpec:
    d = dict(d)
    kind = d.pop("kind", "linear")
    noise = float(d.pop("noise_sd", 0.0))
    try:
        if kind == "linear":
            return LinearPolicy(
                noise_sd=noise,
                weights=tuple(d.pop("weights")),
                intercept=float(d.pop("intercept", 0.0)),
                floor=float(d.pop("floor", 0.0)),
            )
        if kind == "constant":
            return ConstantPolicy(noise_sd=noise, payment_value=float(d.pop("payment")))
        if kind in ("mlp", "proxy"):
            from .models import load_model

            src = Path(d.pop("model"))
            path = src if src.is_absolute() or base_dir is None else base_dir / src
            return ModelPolicy(noise_sd=noise, model=load_model(path), source=str(src))
    except KeyError as exc:
        raise InvalidConfig(f"policy of kind {kind!r} is missing key {exc.args[0]!r}") from None
    raise InvalidConfig(f"unknown policy kind {kind!r}")


# ---------------------------------------------------------------------------
# simulation
# ---------------------------------------------------------------------------


def draw_contexts(config: AuctionConfig, rng: np.random.Generator, n: int) -> np.ndarray:
    if config.context_seed_distribution == "standard_normal":
        return rng.standard_normal((n, config.dimension))
    return rng.random((n, config.dimension))


def _conversion_rate(config: AuctionConfig, X: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, X @ np.asarray(config.conversion_weights))


def _outcomes(config: AuctionConfig, X, payments, rngs) -> np.ndarray:
    """Vectorised rounds drawing rival normals, Poisson counts and value noise from ``rngs``.

    ``rngs`` is three generators, one per draw kind (possibly the same
    object).  Separate generators keep a record's draws independent of how
    many records share its block.
    """
    n = X.shape[0]
    z = rngs[0].standard_normal(n)
    resources = rngs[1].poisson(_conversion_rate(config, X)).astype(np.float64)
    eps = rngs[2].standard_normal(n)
    rival = np.exp(math.log(config.competitor_scale) + RIVAL_LOG_SD * z)
    win = payments > rival
    value = np.maximum(0.0, X @ np.asarray(config.value_weights) + config.noise_sd * eps)
    out = np.zeros((n, 4))
    out[win, 0] = payments[win]
    out[win, 1] = 1.0
    out[win, 2] = resources[win]
    out[win, 3] = resources[win] * value[win]
    return out


def simulate_round(config: AuctionConfig, context, payment: float, rng: np.random.Generator) -> RewardVector:
    """One auction round; consumes three draws from ``rng``."""
    if not payment >= 0:
        raise ValueError("payment must be >= 0")
    X = np.asarray(context, dtype=np.float64).reshape(1, -1)
    if X.shape[1] != config.dimension:
        raise InvalidConfig(f"context has dimension {X.shape[1]}, config expects {config.dimension}")
    return RewardVector.from_array(_outcomes(config, X, np.array([float(payment)]), (rng, rng, rng))[0])


def _blocks(n: int):
    for b, start in enumerate(range(0, n, _rng.BLOCK)):
        yield b, start, min(n, start + _rng.BLOCK)


def _simulate(config: AuctionConfig, policy: PolicySpec, n: int, seed: int, with_noise: bool):
    """Contexts, executed actions, propensities and rewards for ``n`` rounds."""
    d = config.dimension
    policy.check_dimension(d)
    X = np.empty((n, d))
    actions = np.empty(n)
    rewards = np.empty((n, 4))
    for b, lo, hi in _blocks(n):
        m = hi - lo
        X[lo:hi] = draw_contexts(config, _rng.stream(seed, _rng.CONTEXTS, b), m)
        base = np.asarray(policy.payment(X[lo:hi]), dtype=np.float64)
        if with_noise and policy.noise_sd > 0:
            base = base + policy.noise_sd * _rng.stream(seed, _rng.LOGGING_NOISE, b).standard_normal(m)
        actions[lo:hi] = np.maximum(base, 0.0)
        streams = [_rng.stream(seed, _rng.OUTCOMES, 3 * b + k) for k in range(3)]
        rewards[lo:hi] = _outcomes(config, X[lo:hi], actions[lo:hi], streams)
    return X, actions, rewards


def generate_log(
    config: AuctionConfig,
    policy: PolicySpec,
    n: int,
    rng_seed: int | None = None,
    policy_id: str = "policy",
    side: Side | str = Side.CONTROL,
) -> LoggedDataset:
    """Log ``n`` rounds of ``policy`` with its Gaussian logging noise.

    The logged propensity is the Gaussian density of the executed action
    around the policy's payment.  Actions clamped at zero keep the density
    of the unclamped draw evaluated at zero.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    seed = config.rng_seed if rng_seed is None else rng_seed
    X, actions, rewards = _simulate(config, policy, n, seed, with_noise=True)
    if policy.noise_sd > 0:
        mean = np.asarray(policy.payment(X), dtype=np.float64)
        props = stats.norm.pdf(actions, loc=mean, scale=policy.noise_sd)
        props = np.maximum(props, np.finfo(np.float64).tiny)
    else:
        props = np.full(n, np.nan)
    return LoggedDataset(
        contexts=X,
        actions=actions,
        rewards=rewards,
        propensities=props,
        policy_id=policy_id,
        side=side,
        dimension=config.dimension,
    )


@dataclass(frozen=True)
class PolicyValue:
    mean: RewardVector
    se: RewardVector
    n_mc: int

    def to_dict(self) -> dict:
        return {
            "n_mc": self.n_mc,
            "mean": {m.value: self.mean[m] for m in METRICS},
            "se": {m.value: self.se[m] for m in METRICS},
        }


def true_policy_value(
    config: AuctionConfig,
    policy: PolicySpec,
    n_mc: int = 100_000,
    rng_seed: int | None = None,
    with_noise: bool = False,
) -> PolicyValue:
    """Monte-Carlo per-round value of ``policy`` (deterministic payments by default)."""
    if n_mc < 1000:
        raise ValueError("n_mc must be >= 1000")
    seed = config.rng_seed if rng_seed is None else rng_seed
    _, _, rewards = _simulate(config, policy, n_mc, seed, with_noise=with_noise)
    mean = rewards.mean(axis=0)
    se = rewards.std(axis=0, ddof=1) / math.sqrt(n_mc)
    return PolicyValue(RewardVector.from_array(mean), RewardVector.from_array(se), n_mc)


def win_probability(config: AuctionConfig, payments) -> np.ndarray:
    p = np.asarray(payments, dtype=np.float64)
    with np.errstate(divide="ignore"):
        z = (np.log(np.maximum(p, 0.0)) - math.log(config.competitor_scale)) / RIVAL_LOG_SD
    return special.ndtr(z)


def expected_rewards(config: AuctionConfig, contexts, payments) -> np.ndarray:
    """Closed-form ``E[r | x, p]`` for every metric, shape (n, 4)."""
    X = np.atleast_2d(np.asarray(contexts, dtype=np.float64))
    p = np.broadcast_to(np.asarray(payments, dtype=np.float64), (X.shape[0],))
    pw = win_probability(config, p)
    lam = _conversion_rate(config, X)
    mu = X @ np.asarray(config.value_weights)
    s = config.noise_sd
    if s > 0:
        ev = mu * special.ndtr(mu / s) + s * stats.norm.pdf(mu / s)
    else:
        ev = np.maximum(mu, 0.0)
    return np.column_stack([p * pw, pw, pw * lam, pw * lam * ev])


def expected_policy_rewards(config: AuctionConfig, policy: PolicySpec, contexts, with_noise=False, nodes=40):
    """``E[r | x]`` under ``policy``; logging noise integrated by Gauss-Hermite quadrature."""
    X = np.atleast_2d(np.asarray(contexts, dtype=np.float64))
    mean = np.asarray(policy.payment(X), dtype=np.float64)
    if not with_noise or policy.noise_sd == 0:
        return expected_rewards(config, X, mean)
    z, w = np.polynomial.hermite_e.hermegauss(nodes)
    w = w / w.sum()
    out = np.zeros((X.shape[0], 4))
    for zk, wk in zip(z, w):
        out += wk * expected_rewards(config, X, np.maximum(mean + policy.noise_sd * zk, 0.0))
    return out


def exact_policy_value(
    config: AuctionConfig, policy: PolicySpec, n_contexts: int = 200_000, rng_seed: int | None = None, with_noise=False
) -> RewardVector:
    """Policy value with outcomes integrated analytically; only contexts are sampled."""
    seed = config.rng_seed if rng_seed is None else rng_seed
    total = np.zeros(4)
    for b, lo, hi in _blocks(n_contexts):
        X = draw_contexts(config, _rng.stream(seed, _rng.CONTEXTS, b), hi - lo)
        total += expected_policy_rewards(config, policy, X, with_noise=with_noise).sum(axis=0)
    return RewardVector.from_array(total / n_contexts)


# ---------------------------------------------------------------------------
# A/B tests
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AbTestResult:
    control: LoggedDataset
    treatment: LoggedDataset
    lifts: list[LiftResult] = field(default_factory=list)


def lifts_between(control: LoggedDataset, treatment: LoggedDataset, alpha: float = 0.05) -> list[LiftResult]:
    return [lift_with_ci(treatment.metric(m), control.metric(m), alpha, metric=m) for m in METRICS]


def run_ab_test(
    config: AuctionConfig,
    control: PolicySpec,
    treatment: PolicySpec,
    n_per_side: int,
    rng_seed: int | None = None,
    control_id: str = "control",
    treatment_id: str = "treatment",
) -> AbTestResult:
    """Independent logs for both arms plus per-metric lifts."""
    if n_per_side < 2:
        raise ValueError("n_per_side must be >= 2")
    seed = config.rng_seed if rng_seed is None else rng_seed
    ctrl = generate_log(config, control, n_per_side, _rng.derive_seed(seed, "control"), control_id, Side.CONTROL)
    trt = generate_log(
        config, treatment, n_per_side, _rng.derive_seed(seed, "treatment"), treatment_id, Side.TREATMENT
    )
    return AbTestResult(ctrl, trt, lifts_between(ctrl, trt))


# ---------------------------------------------------------------------------
# TOML documents and default scenario
# ---------------------------------------------------------------------------


def load_scenario(path: str | Path) -> tuple[AuctionConfig, dict[str, PolicySpec], dict]:
    """Read ``[auction]`` and ``[policy.<name>]`` tables; returns the raw document too."""
    path = Path(path)
    try:
        doc = tomllib.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise InvalidConfig(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise InvalidConfig(f"{path}: {exc}") from None
    return scenario_from_dict(doc, base_dir=path.parent)


def scenario_from_dict(doc: Mapping, base_dir: Path | None = None):
    config = AuctionConfig.from_dict(doc["auction"]) if "auction" in doc else default_config()
    policies = {name: policy_from_dict(spec, base_dir) for name, spec in doc.get("policy", {}).items()}
    for p in policies.values():
        p.check_dimension(config.dimension)
    return config, policies, dict(doc)


def dump_scenario(config: AuctionConfig, policies: Mapping[str, PolicySpec], path: str | Path, extra: Mapping | None = None):
    doc = dict(extra or {})
    doc["auction"] = config.to_dict()
    doc["policy"] = {name: p.to_dict() for name, p in policies.items()}
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(tomli_w.dumps(doc), encoding="utf-8")
    return path


def default_config(rng_seed: int = 0) -> AuctionConfig:
    """Six context features; the first three drive conversion and value, the rest are noise."""
    return AuctionConfig(
        dimension=6,
        context_seed_distribution="uniform_unit",
        competitor_scale=1.0,
        conversion_weights=(1.5, 0.0, -1.0, 0.0, 0.0, 0.0),
        value_weights=(0.5, 2.5, 0.5, 0.0, 0.0, 0.0),
        noise_sd=0.5,
        rng_seed=rng_seed,
    )


def default_policies() -> dict[str, PolicySpec]:
    """Policies X, Y, Z of the three-test layout (X vs Y, X vs Z, Y vs Z).

    X bids almost flat; Y bids lower; Z scales its bid with the value
    feature.  All three log with Gaussian noise so their logs overlap.
    """
    return {
        "X": LinearPolicy(noise_sd=0.5, weights=(0.2, 0.2, 0.0, 0.0, 0.0, 0.0), intercept=0.9, floor=0.05),
        "Y": LinearPolicy(noise_sd=0.5, weights=(0.1, 0.3, 0.0, 0.0, 0.0, 0.0), intercept=0.75, floor=0.05),
        "Z": LinearPolicy(noise_sd=0.5, weights=(0.0, 0.9, 0.0, 0.0, 0.0, 0.0), intercept=0.7, floor=0.05),
    }
