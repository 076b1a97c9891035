"""Domain types, logged-data model and the lift / MAPE / binning arithmetic.

A logged dataset is stored column-wise (``contexts``, ``actions``,
``rewards``, ``propensities``) because every consumer works on whole
columns; :class:`LoggedRecord` is the per-row view used for construction
and serialization.  Missing propensities are ``NaN`` in the array form and
``None`` in the record form.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import stats

from .errors import (
    DegenerateActions,
    DegenerateSample,
    DimensionMismatch,
    EmptyInput,
    ParseError,
    SchemaError,
    ZeroControl,
    ZeroTruth,
)

# floor applied to every density / probability used as a divisor
EPS_Q = 1e-6


class Metric(str, Enum):
    COST = "cost"
    REACH = "reach"
    RESOURCES = "resources"
    RETURNS = "returns"

    @property
    def index(self) -> int:
        return _METRIC_ORDER.index(self)


_METRIC_ORDER = [Metric.COST, Metric.REACH, Metric.RESOURCES, Metric.RETURNS]
METRICS: tuple[Metric, ...] = tuple(_METRIC_ORDER)


def as_metric(value: "Metric | str") -> Metric:
    if isinstance(value, Metric):
        return value
    try:
        return Metric(str(value).lower())
    except ValueError:
        raise ValueError(f"unknown metric {value!r}; expected one of {[m.value for m in METRICS]}") from None


class Side(str, Enum):
    CONTROL = "control"
    TREATMENT = "treatment"


@dataclass(frozen=True)
class RewardVector:
    cost: float = 0.0
    reach: float = 0.0
    resources: float = 0.0
    returns: float = 0.0

    def __post_init__(self):
        for name in ("cost", "reach", "resources", "returns"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"reward component {name} must be finite and >= 0, got {v}")

    def as_array(self) -> np.ndarray:
        return np.array([self.cost, self.reach, self.resources, self.returns], dtype=np.float64)

    @classmethod
    def from_array(cls, values: Sequence[float]) -> "RewardVector":
        return cls(*(float(v) for v in values))

    def __getitem__(self, metric: "Metric | str") -> float:
        return getattr(self, as_metric(metric).value)


@dataclass(frozen=True)
class LoggedRecord:
    context: tuple[float, ...]
    action: float
    rewards: RewardVector
    logged_propensity: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "context", tuple(float(c) for c in self.context))
        if not all(math.isfinite(c) for c in self.context):
            raise ValueError("context entries must be finite")
        if not math.isfinite(self.action) or self.action < 0:
            raise ValueError(f"action must be finite and >= 0, got {self.action}")
        p = self.logged_propensity
        if p is not None and not (math.isfinite(p) and p > 0):
            raise ValueError(f"logged propensity must be > 0 when present, got {p}")


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class LoggedDataset:
    """Immutable column store of logged interactions ``{(x_i, a_i, r_i)}``.

    Attributes
    ----------
    contexts : ndarray, shape (n, d)
    actions : ndarray, shape (n,)
        Executed payments.
    rewards : ndarray, shape (n, 4)
        Columns ordered as :data:`METRICS`.
    propensities : ndarray, shape (n,)
        Behavior density/probability of the executed action; ``NaN`` when unknown.
    """

    contexts: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    propensities: np.ndarray
    policy_id: str = "unknown"
    side: Side = Side.CONTROL
    dimension: int = field(default=0)

    def __post_init__(self):
        X = np.asarray(self.contexts, dtype=np.float64)
        if X.ndim == 1:
            X = X.reshape(-1, 1) if self.dimension in (0, 1) else X.reshape(-1, self.dimension)
        n = X.shape[0]
        if n == 0:
            raise EmptyInput("a logged dataset needs at least one record")
        d = self.dimension or X.shape[1]
        if d < 1 or X.shape[1] != d:
            raise DimensionMismatch(f"contexts have {X.shape[1]} columns, dataset dimension is {d}")
        a = np.asarray(self.actions, dtype=np.float64).reshape(-1)
        r = np.asarray(self.rewards, dtype=np.float64).reshape(n, -1) if np.size(self.rewards) else None
        if r is None or r.shape != (n, 4):
            raise DimensionMismatch("rewards must have shape (n, 4)")
        if self.propensities is None:
            p = np.full(n, np.nan)
        else:
            p = np.asarray(self.propensities, dtype=np.float64).reshape(-1)
        if a.shape[0] != n or p.shape[0] != n:
            raise DimensionMismatch("actions/propensities length differs from number of contexts")
        if not np.all(np.isfinite(X)):
            raise ValueError("contexts must be finite")
        if not np.all(np.isfinite(a)) or np.any(a < 0):
            raise ValueError("actions must be finite and >= 0")
        if not np.all(np.isfinite(r)) or np.any(r < 0):
            raise ValueError("rewards must be finite and >= 0")
        known = ~np.isnan(p)
        if np.any(p[known] <= 0) or not np.all(np.isfinite(p[known])):
            raise ValueError("logged propensities must be finite and > 0 when present")
        object.__setattr__(self, "contexts", _frozen(X))
        object.__setattr__(self, "actions", _frozen(a))
        object.__setattr__(self, "rewards", _frozen(r))
        object.__setattr__(self, "propensities", _frozen(p))
        object.__setattr__(self, "dimension", int(d))
        object.__setattr__(self, "side", Side(self.side))

    @classmethod
    def from_records(
        cls,
        records: Iterable[LoggedRecord],
        policy_id: str = "unknown",
        side: Side | str = Side.CONTROL,
        dimension: int | None = None,
    ) -> "LoggedDataset":
        records = list(records)
        if not records:
            raise EmptyInput("a logged dataset needs at least one record")
        d = dimension or len(records[0].context)
        for i, rec in enumerate(records):
            if len(rec.context) != d:
                raise DimensionMismatch(f"record {i} has context length {len(rec.context)}, expected {d}")
        return cls(
            contexts=np.array([r.context for r in records], dtype=np.float64).reshape(len(records), d),
            actions=np.array([r.action for r in records]),
            rewards=np.array([r.rewards.as_array() for r in records]),
            propensities=np.array(
                [np.nan if r.logged_propensity is None else r.logged_propensity for r in records]
            ),
            policy_id=policy_id,
            side=side,
            dimension=d,
        )

    def __len__(self) -> int:
        return self.actions.shape[0]

    @property
    def n(self) -> int:
        return len(self)

    @property
    def records(self) -> list[LoggedRecord]:
        return [self.record(i) for i in range(len(self))]

    def record(self, i: int) -> LoggedRecord:
        p = self.propensities[i]
        return LoggedRecord(
            context=tuple(self.contexts[i]),
            action=float(self.actions[i]),
            rewards=RewardVector.from_array(self.rewards[i]),
            logged_propensity=None if np.isnan(p) else float(p),
        )

    def metric(self, metric: Metric | str) -> np.ndarray:
        return self.rewards[:, as_metric(metric).index]

    @property
    def has_propensities(self) -> np.ndarray:
        return ~np.isnan(self.propensities)

    def subset(self, idx: np.ndarray) -> "LoggedDataset":
        return LoggedDataset(
            contexts=self.contexts[idx],
            actions=self.actions[idx],
            rewards=self.rewards[idx],
            propensities=self.propensities[idx],
            policy_id=self.policy_id,
            side=self.side,
            dimension=self.dimension,
        )

    def equals(self, other: "LoggedDataset", atol: float = 0.0) -> bool:
        if self.dimension != other.dimension or len(self) != len(other):
            return False
        pa, pb = self.propensities, other.propensities
        if not np.array_equal(np.isnan(pa), np.isnan(pb)):
            return False
        known = ~np.isnan(pa)
        return bool(
            np.allclose(self.contexts, other.contexts, rtol=0, atol=atol)
            and np.allclose(self.actions, other.actions, rtol=0, atol=atol)
            and np.allclose(self.rewards, other.rewards, rtol=0, atol=atol)
            and np.allclose(pa[known], pb[known], rtol=0, atol=atol)
        )


# ---------------------------------------------------------------------------
# lift, significance, MAPE
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LiftResult:
    metric: Metric
    lift_percent: float
    ci_low: float
    ci_high: float
    p_value: float

    def to_dict(self) -> dict:
        return {
            "metric": self.metric.value,
            "lift_percent": self.lift_percent,
            "ci_low": self.ci_low,
            "ci_high": self.ci_high,
            "p_value": self.p_value,
        }


def compute_lift(treatment_mean: float, control_mean: float) -> float:
    """Percentage change of the treatment metric relative to control."""
    if control_mean == 0:
        raise ZeroControl("control metric is zero; lift is undefined (report N/A)")
    return (treatment_mean - control_mean) / control_mean * 100.0


def lift_with_ci(
    treatment: Sequence[float],
    control: Sequence[float],
    alpha: float = 0.05,
    metric: Metric | str = Metric.RETURNS,
) -> LiftResult:
    """Lift with a Welch t-test confidence interval mapped onto the lift scale.

    The CI for the difference of means is divided by the control mean, so
    ``ci = lift +/- t_crit * se / control_mean * 100``.  Two constant samples
    give a point interval and ``p = 0`` (means differ) or ``p = 1``.
    """
    t = np.asarray(treatment, dtype=np.float64)
    c = np.asarray(control, dtype=np.float64)
    if t.size < 2 or c.size < 2:
        raise DegenerateSample("each side needs at least 2 observations")
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    mt, mc = float(t.mean()), float(c.mean())
    lift = compute_lift(mt, mc)
    vt, vc = t.var(ddof=1) / t.size, c.var(ddof=1) / c.size
    se = math.sqrt(vt + vc)
    if se == 0.0:
        return LiftResult(as_metric(metric), lift, lift, lift, 0.0 if mt != mc else 1.0)
    dof = (vt + vc) ** 2 / ((vt**2 / (t.size - 1) if vt else 0.0) + (vc**2 / (c.size - 1) if vc else 0.0))
    tstat = (mt - mc) / se
    p = float(2.0 * stats.t.sf(abs(tstat), dof))
    half = float(stats.t.ppf(1.0 - alpha / 2.0, dof)) * se / mc * 100.0
    lo, hi = sorted((lift - half, lift + half))
    return LiftResult(as_metric(metric), lift, lo, hi, min(1.0, max(0.0, p)))


def mape(estimates: Sequence[float], ground_truth: Sequence[float]) -> float:
    est = np.asarray(estimates, dtype=np.float64).reshape(-1)
    truth = np.asarray(ground_truth, dtype=np.float64).reshape(-1)
    if est.shape != truth.shape:
        raise DimensionMismatch(f"{est.size} estimates vs {truth.size} ground-truth values")
    if est.size == 0:
        raise EmptyInput("mape of an empty sequence")
    if np.any(truth == 0):
        raise ZeroTruth("ground truth contains a zero; percentage error undefined")
    return float(np.mean(np.abs(est - truth) / np.abs(truth)) * 100.0)


# ---------------------------------------------------------------------------
# action binning
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class BinningScheme:
    """Bins over the action axis; ``edges`` has ``num_bins + 1`` entries.

    Actions below the first or above the last edge fall into the outermost
    bins, so any payment (including those of a new policy) gets a label.
    """

    edges: np.ndarray

    def __post_init__(self):
        e = _frozen(np.asarray(self.edges, dtype=np.float64).reshape(-1))
        if e.size < 3:
            raise ValueError("a binning needs at least 2 bins")
        if not np.all(np.diff(e) > 0):
            raise ValueError("bin edges must be strictly increasing")
        object.__setattr__(self, "edges", e)

    @property
    def num_bins(self) -> int:
        return self.edges.size - 1

    def assign(self, actions) -> np.ndarray:
        a = np.asarray(actions, dtype=np.float64)
        return np.searchsorted(self.edges[1:-1], a, side="right").astype(np.int64)

    @property
    def centers(self) -> np.ndarray:
        return 0.5 * (self.edges[:-1] + self.edges[1:])

    def to_dict(self) -> dict:
        return {"edges": self.edges.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "BinningScheme":
        return cls(np.asarray(d["edges"], dtype=np.float64))


def make_binning(dataset_or_actions, num_bins: int = 10) -> BinningScheme:
    """Equal-frequency bins with edges at midpoints between order statistics.

    With distinct actions, bin ``k`` holds ``floor((k+1)n/B) - floor(kn/B)``
    actions, so counts differ by at most one.  Tied actions never straddle an
    edge; coinciding edges are merged, which can reduce the number of bins.
    """
    actions = dataset_or_actions.actions if isinstance(dataset_or_actions, LoggedDataset) else dataset_or_actions
    a = np.sort(np.asarray(actions, dtype=np.float64).reshape(-1))
    if num_bins < 2:
        raise ValueError("num_bins must be >= 2")
    if a.size == 0:
        raise EmptyInput("no actions to bin")
    if a[0] == a[-1]:
        raise DegenerateActions("all actions are identical; cannot form bins")
    n = a.size
    cuts = [(k * n) // num_bins for k in range(1, num_bins)]
    interior = []
    for c in cuts:
        if c <= 0 or c >= n:
            continue
        lo, hi = a[c - 1], a[c]
        if lo == hi:
            # move the edge above the tie block so ties stay together
            j = np.searchsorted(a, lo, side="right")
            if j >= n:
                continue
            lo, hi = a[j - 1], a[j]
        interior.append(0.5 * (lo + hi))
    interior = np.unique(np.asarray(interior))
    interior = interior[(interior > a[0]) & (interior < a[-1])]
    edges = np.concatenate([[a[0]], interior, [a[-1]]])
    if edges.size < 3:
        # every cut fell inside a tie block; fall back to a single split at the first gap
        j = np.searchsorted(a, a[0], side="right")
        edges = np.array([a[0], 0.5 * (a[j - 1] + a[j]), a[-1]])
    return BinningScheme(edges)


# ---------------------------------------------------------------------------
# dataset serialization
# ---------------------------------------------------------------------------

_REWARD_COLS = ["cost", "reach", "resources", "returns"]


def _fmt(x: float) -> str:
    return repr(float(x))


def write_dataset(dataset: LoggedDataset, path: str | Path, format: str | None = None) -> Path:
    """Write ``dataset`` as JSONL or CSV (format inferred from the suffix when omitted)."""
    path = Path(path)
    fmt = (format or path.suffix.lstrip(".") or "jsonl").lower()
    path.parent.mkdir(parents=True, exist_ok=True)
    if fmt == "jsonl":
        with path.open("w", encoding="utf-8", newline="\n") as fh:
            for i in range(len(dataset)):
                p = dataset.propensities[i]
                row = {
                    "context": [float(v) for v in dataset.contexts[i]],
                    "action": float(dataset.actions[i]),
                    **{k: float(v) for k, v in zip(_REWARD_COLS, dataset.rewards[i])},
                    "propensity": None if np.isnan(p) else float(p),
                }
                fh.write(json.dumps(row) + "\n")
    elif fmt == "csv":
        d = dataset.dimension
        with path.open("w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow([f"x{j}" for j in range(d)] + ["action", *_REWARD_COLS, "propensity"])
            for i in range(len(dataset)):
                p = dataset.propensities[i]
                w.writerow(
                    [_fmt(v) for v in dataset.contexts[i]]
                    + [_fmt(dataset.actions[i])]
                    + [_fmt(v) for v in dataset.rewards[i]]
                    + ["" if np.isnan(p) else _fmt(p)]
                )
    else:
        raise ValueError(f"unsupported dataset format {fmt!r}")
    return path


def read_dataset(
    path: str | Path,
    format: str | None = None,
    policy_id: str | None = None,
    side: Side | str | None = None,
) -> LoggedDataset:
    """Read a JSONL or CSV log.

    ``policy_id`` defaults to the file stem and ``side`` to ``treatment``
    when the stem contains "treatment", else ``control``.
    """
    path = Path(path)
    fmt = (format or path.suffix.lstrip(".") or "jsonl").lower()
    if policy_id is None:
        policy_id = path.stem
    if side is None:
        side = Side.TREATMENT if "treatment" in path.stem.lower() else Side.CONTROL
    if not path.exists():
        raise ParseError(f"no such file: {path}")
    if fmt == "jsonl":
        contexts, actions, rewards, props = [], [], [], []
        with path.open(encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    row = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise ParseError(f"invalid JSON ({exc.msg})", line=lineno) from None
                if not isinstance(row, dict):
                    raise ParseError("record is not a JSON object", line=lineno)
                missing = [k for k in ["context", "action", *_REWARD_COLS] if k not in row]
                if missing:
                    raise SchemaError(f"line {lineno}: record lacks required keys", missing)
                try:
                    contexts.append([float(v) for v in row["context"]])
                    actions.append(float(row["action"]))
                    rewards.append([float(row[k]) for k in _REWARD_COLS])
                    p = row.get("propensity")
                    props.append(np.nan if p is None else float(p))
                except (TypeError, ValueError) as exc:
                    raise ParseError(f"non-numeric field ({exc})", line=lineno) from None
                if contexts and len(contexts[-1]) != len(contexts[0]):
                    raise ParseError(
                        f"context length {len(contexts[-1])} differs from first record ({len(contexts[0])})",
                        line=lineno,
                    )
    elif fmt == "csv":
        with path.open(encoding="utf-8", newline="") as fh:
            reader = csv.reader(fh)
            try:
                header = next(reader)
            except StopIteration:
                raise ParseError("empty CSV file", line=1) from None
            xcols = sorted(
                (c for c in header if c.startswith("x") and c[1:].isdigit()), key=lambda c: int(c[1:])
            )
            required = ["action", *_REWARD_COLS]
            missing = [c for c in required if c not in header]
            if not xcols:
                missing.insert(0, "x0")
            if missing:
                raise SchemaError("CSV header is missing required columns", missing)
            pos = {c: header.index(c) for c in header}
            contexts, actions, rewards, props = [], [], [], []
            for lineno, row in enumerate(reader, start=2):
                if not row:
                    continue
                if len(row) != len(header):
                    raise ParseError(f"expected {len(header)} cells, got {len(row)}", line=lineno)
                try:
                    contexts.append([float(row[pos[c]]) for c in xcols])
                    actions.append(float(row[pos["action"]]))
                    rewards.append([float(row[pos[c]]) for c in _REWARD_COLS])
                    cell = row[pos["propensity"]].strip() if "propensity" in pos else ""
                    props.append(np.nan if cell == "" else float(cell))
                except ValueError as exc:
                    raise ParseError(f"non-numeric cell ({exc})", line=lineno) from None
    else:
        raise ValueError(f"unsupported dataset format {fmt!r}")
    if not actions:
        raise EmptyInput(f"{path} contains no records")
    try:
        return LoggedDataset(
            contexts=np.asarray(contexts, dtype=np.float64),
            actions=np.asarray(actions),
            rewards=np.asarray(rewards),
            propensities=np.asarray(props),
            policy_id=policy_id,
            side=side,
            dimension=len(contexts[0]),
        )
    except ValueError as exc:
        raise ParseError(str(exc)) from None
