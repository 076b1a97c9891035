"""Command-line interface.

Subcommands read TOML configs and JSONL/CSV/JSON inputs and write JSON
reports and CSV plot data.  Errors go to stderr as one JSON object and
map to exit codes: 2 configuration, 3 data, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import sys
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import _rng
from . import experiments as ex
from .core import METRICS, LiftResult, LoggedDataset, Side, as_metric, compute_lift, make_binning, read_dataset, write_dataset
from .errors import DataError, InvalidConfig, MissingArtifact, OpeError, SchemaError
from .estimators import (
    ALL_ESTIMATORS,
    CONTINUOUS_VARIANTS,
    ContinuousOpeInput,
    EstimateReport,
    behavior_densities,
    cross_fit_reward_curve,
    cross_fit_reward_matrix,
    evaluate_all,
    policy_actions,
)
from .learn import (
    EstimatorConfig,
    OptPalConfig,
    TuneConfig,
    counterfactual_test,
    tune_continuous,
)
from .models import KernelSpec, ProxyPolicy, TreeParams, fit_kde, fit_proxy, load_model, save_model
from .sim import default_config, default_policies, load_scenario, lifts_between, run_ab_test

PLOT_COLUMNS = ("metric", "estimator", "value", "ci_low", "ci_high")
SUMMARY_COLUMNS = ("scenario", "metric", "estimator", "value", "ci_low", "ci_high", "truth")
SCENARIOS = ("AbTest", "DiscreteVsContinuous", "EstimatorComparison", "CounterfactualYZ", "OptPal")
MANIFEST = "manifest.json"

# ---------------------------------------------------------------------------
# output helpers
# ---------------------------------------------------------------------------


def _clean(obj):
    """JSON-safe copy: numpy scalars to Python, non-finite floats to null."""
    if isinstance(obj, Enum):
        return obj.value
    if isinstance(obj, Mapping):
        return {str(k.value if isinstance(k, Enum) else k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_clean(v) for v in obj.tolist()]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return x if math.isfinite(x) else None
    return obj


def _cell(x) -> str:
    if x is None:
        return ""
    if isinstance(x, Enum):
        return str(x.value)
    if isinstance(x, (float, np.floating)):
        return repr(float(x)) if math.isfinite(x) else ""
    return str(x)


def write_json(path: Path, obj) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    text = json.dumps(_clean(obj), indent=2, sort_keys=True, allow_nan=False)
    path.write_text(text + "\n", encoding="utf-8")
    return path


def write_csv(path: Path, columns: Sequence[str], rows: Iterable[Sequence]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_cell(v) for v in row])
    return path


def read_csv(path: Path) -> list[dict[str, str]]:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def read_json(path: Path):
    path = Path(path)
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise MissingArtifact(f"file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from None


def read_toml(path: Path) -> dict:
    path = Path(path)
    try:
        return tomllib.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise InvalidConfig(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise InvalidConfig(f"{path}: {exc}") from None


def sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _normal_ci(report: EstimateReport, alpha: float = 0.05) -> tuple[float, float]:
    from scipy import stats

    r = report.round_rewards
    if r is None or r.size < 2:
        return math.nan, math.nan
    half = stats.norm.ppf(1 - alpha / 2) * float(np.std(r, ddof=1)) / math.sqrt(r.size)
    return report.value - half, report.value + half


def _lift_row(name: str, lift: LiftResult) -> tuple:
    return (lift.metric, name, lift.lift_percent, lift.ci_low, lift.ci_high)


class Artifacts:
    """Writes files under ``root`` and remembers them for the manifest."""

    def __init__(self, root: Path):
        self.root = Path(root)
        self.files: list[str] = []

    def _path(self, rel: str) -> Path:
        self.files.append(rel)
        return self.root / rel

    def json(self, rel: str, obj) -> None:
        write_json(self._path(rel), obj)

    def csv(self, rel: str, columns, rows) -> None:
        write_csv(self._path(rel), columns, rows)

    def dataset(self, rel: str, ds: LoggedDataset) -> None:
        write_dataset(ds, self._path(rel))

    def model(self, rel: str, model) -> None:
        save_model(model, self._path(rel))

    def manifest(self, scenario: str, seeds, settings: Mapping, error: Mapping | None = None) -> Path:
        files = [{"path": rel, "sha256": sha256(self.root / rel)} for rel in self.files if (self.root / rel).exists()]
        doc = {
            "scenario": scenario,
            "seeds": list(seeds),
            "settings": settings,
            "status": "error" if error else "ok",
            "files": files,
        }
        if error:
            doc["error"] = error
        return write_json(self.root / MANIFEST, doc)


# ---------------------------------------------------------------------------
# shared input handling
# ---------------------------------------------------------------------------


def _load_dataset(path, side: Side | None = None) -> LoggedDataset:
    path = Path(path)
    if not path.exists():
        raise MissingArtifact(f"log not found: {path}")
    return read_dataset(path, policy_id=path.stem, side=side)


def _find_log(directory: Path, stem: str) -> Path:
    for ext in (".jsonl", ".csv"):
        p = Path(directory) / f"{stem}{ext}"
        if p.exists():
            return p
    raise MissingArtifact(f"no {stem}.jsonl or {stem}.csv in {directory}")


def _load_proxy(path) -> ProxyPolicy:
    model = load_model(path)
    if not isinstance(model, ProxyPolicy):
        raise SchemaError(f"{path} holds a {type(model).__name__}, expected a proxy policy")
    return model


def _load_policy(path):
    """A proxy or a payment network, usable as an evaluation policy."""
    return load_model(path)


def _kernel_doc(doc) -> dict[str, KernelSpec]:
    """Kernels per metric from a tuning result, a metric mapping, or a single kernel."""
    if "kernel" in doc and "metric" in doc:
        return {doc["metric"]: KernelSpec.from_dict(doc["kernel"])}
    if "kind" in doc:
        spec = KernelSpec.from_dict(doc)
        return {m.value: spec for m in METRICS}
    return {as_metric(k).value: KernelSpec.from_dict(v) for k, v in doc.items()}


def _kernels(args) -> dict[str, KernelSpec] | None:
    out: dict[str, KernelSpec] = {}
    if getattr(args, "bandwidth", None) is not None:
        spec = KernelSpec(args.kernel, args.bandwidth)
        out.update({m.value: spec for m in METRICS})
    for path in getattr(args, "kernels", None) or []:
        out.update(_kernel_doc(read_json(path)))
    return out or None


def _estimators(spec: str) -> tuple[str, ...]:
    if spec == "all":
        return ALL_ESTIMATORS
    names = tuple(s.strip() for s in spec.split(",") if s.strip())
    bad = [n for n in names if n not in ALL_ESTIMATORS + CONTINUOUS_VARIANTS]
    if bad or not names:
        raise InvalidConfig(f"unknown estimators {bad or spec!r}")
    return names


def _tree_params(args, *tags) -> TreeParams:
    return TreeParams(
        num_trees=args.trees,
        max_depth=args.max_depth,
        min_leaf=args.min_leaf,
        rng_seed=_rng.derive_seed(args.seed, *tags),
    )


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_simulate(args) -> list[Path]:
    if args.config:
        config, policies, _ = load_scenario(args.config)
    else:
        config, policies = default_config(), default_policies()
    ctrl = args.control or ("control" if "control" in policies else "X")
    trt = args.treatment or ("treatment" if "treatment" in policies else "Y")
    for name in (ctrl, trt):
        if name not in policies:
            raise InvalidConfig(f"policy {name!r} is not defined; available: {sorted(policies)}")
    seed = config.rng_seed if args.seed is None else args.seed
    ab = run_ab_test(config, policies[ctrl], policies[trt], args.n, seed, control_id=ctrl, treatment_id=trt)
    out = Path(args.out)
    ext = ".csv" if args.format == "csv" else ".jsonl"
    paths = [write_dataset(ab.control, out / f"control{ext}"), write_dataset(ab.treatment, out / f"treatment{ext}")]
    paths.append(write_json(out / "lifts.json", {"control": ctrl, "treatment": trt, "lifts": [l.to_dict() for l in ab.lifts]}))
    paths.append(write_csv(out / "lifts.csv", PLOT_COLUMNS, [_lift_row(trt, l) for l in ab.lifts]))
    return paths


def cmd_fit_proxy(args) -> list[Path]:
    log = _load_dataset(args.log)
    binning = make_binning(_load_dataset(args.binning_log) if args.binning_log else log, args.num_bins)
    proxy = fit_proxy(
        log,
        binning,
        _tree_params(args, "fit-proxy"),
        classifier=not args.no_classifier,
        regressor=not args.no_regressor,
        name=args.name or Path(args.log).stem,
    )
    return [save_model(proxy, args.out)]


def cmd_evaluate(args) -> list[Path]:
    log = _load_dataset(args.log)
    pe = _load_policy(args.policy_eval)
    pb = _load_proxy(args.policy_behavior) if args.policy_behavior else None
    estimators = _estimators(args.estimators)
    binning = getattr(pe, "binning", None) or (pb.binning if pb is not None else None)
    if binning is None:
        binning = make_binning(log, args.num_bins)
    if pb is not None and isinstance(pe, ProxyPolicy) and pe.binning is not None:
        pb.check_binning(pe.binning)
    metrics = list(METRICS)
    reward_models = None
    if any(e in ("dm", "dr", "sndr") for e in estimators):
        reward_models = {
            m.value: cross_fit_reward_matrix(log, binning, m, _tree_params(args, "reward", m.value), rng_seed=args.seed)
            for m in metrics
        }
    density = None if log.has_propensities.all() else fit_kde(log)
    kernels = _kernels(args)
    cells = evaluate_all(
        log,
        pe,
        pb if pb is not None else _MissingBehavior(),
        binning,
        reward_models,
        kernels,
        density,
        args.clip,
        [e for e in estimators if e in ALL_ESTIMATORS],
        metrics,
    )
    doc = {
        "config": {
            "log": str(args.log),
            "policy_eval": str(args.policy_eval),
            "policy_behavior": str(args.policy_behavior) if args.policy_behavior else None,
            "estimators": list(estimators),
            "clip_lambda": args.clip,
            "kernels": {k: v.to_dict() for k, v in (kernels or {}).items()},
            "seed": args.seed,
        },
        "reports": [c.to_dict() for c in cells],
    }
    if args.format == "csv":
        rows = []
        for c in cells:
            if c.ok:
                lo, hi = _normal_ci(c.report)
                rows.append((c.metric, c.estimator, c.report.value, lo, hi))
        return [write_csv(Path(args.out), PLOT_COLUMNS, rows)]
    return [write_json(Path(args.out), doc)]


class _MissingBehavior:
    def bin_probs(self, contexts):
        raise InvalidConfig("discrete estimators need --policy-behavior")


def _oracle_value(entry: Mapping, metric) -> float:
    value = entry.get("value")
    if isinstance(value, Mapping):
        if metric.value not in value:
            raise SchemaError(f"oracle entry for {entry.get('log')} has no {metric.value!r} value")
        return float(value[metric.value])
    if value is None:
        raise SchemaError(f"oracle entry for {entry.get('log')} has no value")
    return float(value)


def cmd_tune(args) -> list[Path]:
    metric = as_metric(args.metric)
    config = TuneConfig.from_dict(read_toml(args.config).get("tune", {})) if args.config else TuneConfig()
    if args.seed is not None:
        config = TuneConfig(**{**config.to_dict(), "rng_seed": args.seed})
    oracle_path = Path(args.oracle)
    doc = read_json(oracle_path)
    entries = doc.get("entries") if isinstance(doc, Mapping) else None
    if not entries:
        raise SchemaError(f"{oracle_path} lists no entries")
    logs_dir = Path(args.logs)
    data = []
    for k, entry in enumerate(entries):
        log = _load_dataset(logs_dir / entry["log"])
        policy = _load_policy(oracle_path.parent / entry["policy"])
        tau = policy_actions(policy, log.contexts)
        density = None if log.has_propensities.all() else fit_kde(log)
        q, src = behavior_densities(log, density)
        inp = ContinuousOpeInput(log, tau, q, KernelSpec(), metric, src)
        item = (inp, _oracle_value(entry, metric))
        if args.variant.endswith("dr"):
            params = TreeParams(num_trees=20, max_depth=8, min_leaf=10, rng_seed=_rng.derive_seed(config.rng_seed, k))
            item = item + cross_fit_reward_curve(log, metric, tau, params, rng_seed=params.rng_seed)
        data.append(item)
    result = tune_continuous(data, config, metric, variant=args.variant)
    out = Path(args.out)
    paths = [
        write_json(
            out,
            {
                "metric": metric.value,
                "variant": args.variant,
                "kernel": result.best.to_dict(),
                "best_mape": result.best_mape,
                "config": config.to_dict(),
                "trials": [t.to_dict() for t in result.trials],
            },
        )
    ]
    if args.trials:
        paths.append(
            write_csv(
                Path(args.trials),
                ("trial", "phase", "kernel", "bandwidth", "mape"),
                [(t.index, t.phase, t.kernel, t.bandwidth, t.mape) for t in result.trials],
            )
        )
    return paths


def cmd_counterfactual(args) -> list[Path]:
    test = Path(args.test)
    control = _load_dataset(_find_log(test, "control"), Side.CONTROL)
    treatment = _load_dataset(_find_log(test, "treatment"), Side.TREATMENT)
    side = Side(args.replace_side)
    replaced = control if side == Side.CONTROL else treatment
    replacement = _load_policy(args.with_)
    est = args.estimator
    if est not in ALL_ESTIMATORS + CONTINUOUS_VARIANTS:
        raise InvalidConfig(f"unknown estimator {est!r}")
    if est in CONTINUOUS_VARIANTS:
        kernels = _kernels(args)
        if kernels is None:
            raise InvalidConfig("continuous estimators need --bandwidth or --kernels")
        cfg = EstimatorConfig(
            est,
            kernels=kernels,
            density_model=None if replaced.has_propensities.all() else fit_kde(replaced),
            alpha=args.alpha,
            reward_params=_tree_params(args, "curve"),
            rng_seed=args.seed,
        )
    else:
        binning = getattr(replacement, "binning", None) or make_binning(replaced, args.num_bins)
        behavior = (
            _load_proxy(args.behavior)
            if args.behavior
            else fit_proxy(replaced, binning, _tree_params(args, "behavior"), regressor=False)
        )
        models = None
        if est in ("dm", "dr", "sndr"):
            models = {
                m.value: cross_fit_reward_matrix(replaced, binning, m, _tree_params(args, "reward", m.value), rng_seed=args.seed)
                for m in METRICS
            }
        cfg = EstimatorConfig(
            est, binning=binning, behavior_policy=behavior, reward_models=models, clip_lambda=args.clip, alpha=args.alpha
        )
    lifts = counterfactual_test((control, treatment), replacement, side, cfg)
    observed = lifts_between(control, treatment, args.alpha)
    if args.format == "csv":
        rows = [_lift_row(est, l) for l in lifts] + [_lift_row("observed", l) for l in observed]
        return [write_csv(Path(args.out), PLOT_COLUMNS, rows)]
    doc = {
        "config": {
            "test": str(test),
            "replace_side": side.value,
            "replacement": str(args.with_),
            "estimator": est,
            "seed": args.seed,
        },
        "estimated": [l.to_dict() for l in lifts],
        "observed": [l.to_dict() for l in observed],
    }
    return [write_json(Path(args.out), doc)]


def _optpal_settings(doc: Mapping) -> tuple[OptPalConfig, KernelSpec]:
    config = OptPalConfig.from_dict(doc.get("optpal", {}))
    kdoc = doc.get("kernel", {"kind": "gaussian", "bandwidth": 0.2})
    return config, KernelSpec.from_dict(kdoc)


def cmd_learn_optimal(args) -> list[Path]:
    log = _load_dataset(args.log)
    if not log.has_propensities.all():
        raise DataError("learn-optimal needs logged propensities on every record")
    config, kernel = _optpal_settings(read_toml(args.config) if args.config else {})
    if args.seed is not None:
        config = OptPalConfig(**{**config.to_dict(), "rng_seed": args.seed})
    net, trace = ex.learn_policy(log, kernel, config, config.rng_seed)
    paths = [save_model(net, args.out)]
    if args.trace:
        paths.append(write_csv(Path(args.trace), ("iteration", "loss"), enumerate(trace.losses.tolist())))
    summary = Path(args.out).with_suffix(".training.json")
    paths.append(
        write_json(
            summary,
            {
                "config": config.to_dict(),
                "kernel": kernel.to_dict(),
                "iterations": len(trace) - 1,
                "initial_loss": trace.initial,
                "final_loss": trace.final,
                "learning_rate": trace.learning_rate,
                "retries": trace.retries,
                "converged": trace.converged,
            },
        )
    )
    return paths


# ---------------------------------------------------------------------------
# plans and scenarios
# ---------------------------------------------------------------------------

_SETTING_KEYS = (
    "n_per_side",
    "num_bins",
    "tuning_replicates",
    "oracle_contexts",
    "oracle_seed",
    "alpha",
    "optpal_n",
    "optpal_bandwidth",
)


def settings_from_plan(plan: Mapping, base_dir: Path) -> ex.Settings:
    kwargs = {}
    if "scenario_config" in plan:
        config, policies, _ = load_scenario(base_dir / plan["scenario_config"])
        missing = [p for p in ("X", "Y", "Z") if p not in policies]
        if missing:
            raise InvalidConfig(f"scenario config must define policies X, Y and Z (missing {missing})")
        kwargs.update(config=config, policies=policies)
    overrides = dict(plan.get("settings", {}))
    unknown = set(overrides) - set(_SETTING_KEYS)
    if unknown:
        raise InvalidConfig(f"unknown settings {sorted(unknown)}")
    kwargs.update(overrides)
    if "optpal_config" in plan:
        optpal, kernel = _optpal_settings(read_toml(base_dir / plan["optpal_config"]))
        kwargs.update(optpal=optpal, optpal_bandwidth=kernel.bandwidth)
    try:
        return ex.Settings(**kwargs)
    except TypeError as exc:
        raise InvalidConfig(str(exc)) from None


def _settings_echo(s: ex.Settings) -> dict:
    return {
        "auction": s.config.to_dict(),
        "policies": {k: p.to_dict() for k, p in s.policies.items()},
        **{k: getattr(s, k) for k in _SETTING_KEYS},
        "optpal": s.optpal.to_dict(),
        "tune": s.tune.to_dict(),
        "proxy_params": s.proxy_params.to_dict(),
        "reward_params": s.reward_params.to_dict(),
    }


def scenario_ab_test(s: ex.Settings, seed: int, out: Artifacts, prefix: str) -> None:
    tests = ex.simulate_tests(s, seed)
    oracle = ex.oracle_values(s)
    rows, lifts, entries = [], {}, []
    for name, ab in tests.items():
        ctrl, trt = ex.TESTS[name]
        out.dataset(f"{prefix}{name}/control.jsonl", ab.control)
        out.dataset(f"{prefix}{name}/treatment.jsonl", ab.treatment)
        binning = make_binning(ab.control, s.num_bins)
        proxy = fit_proxy(ab.treatment, binning, s.params(s.proxy_params, seed, name, "e"), name=f"{trt}'")
        out.model(f"{prefix}{name}/proxy_treatment.json", proxy)
        lifts[name] = [l.to_dict() for l in ab.lifts]
        rows.extend(_lift_row(name, l) for l in ab.lifts)
        entries.append(
            {
                "log": f"{name}/control.jsonl",
                "policy": f"{name}/proxy_treatment.json",
                "value": {m.value: oracle[trt][m.index] for m in METRICS},
            }
        )
    truth = {
        name: {m.value: compute_lift(oracle[t][m.index], oracle[c][m.index]) for m in METRICS}
        for name, (c, t) in ex.TESTS.items()
    }
    out.csv(f"{prefix}lifts.csv", PLOT_COLUMNS, rows)
    out.json(f"{prefix}lifts.json", {"observed": lifts, "truth": truth})
    out.json(
        f"{prefix}oracle.json",
        {"policies": {k: {m.value: v[m.index] for m in METRICS} for k, v in oracle.items()}, "entries": entries},
    )


def _mape_rows(table: ex.MapeTable, family) -> list[tuple]:
    rows = []
    for m in METRICS:
        est, val = table.family_best(family, m)
        rows.append((m.value, est, val, None, None))
    return rows


def scenario_discrete_vs_continuous(s: ex.Settings, seed: int, out: Artifacts, prefix: str) -> None:
    table = ex.discrete_vs_continuous(s, seed)
    out.csv(f"{prefix}mape_discrete.csv", PLOT_COLUMNS, _mape_rows(table, ex.DISCRETE_ESTIMATORS))
    out.csv(f"{prefix}mape_continuous.csv", PLOT_COLUMNS, _mape_rows(table, CONTINUOUS_VARIANTS))
    out.csv(
        f"{prefix}mape_table.csv",
        PLOT_COLUMNS,
        [(m, e, v, None, None) for (e, m), v in table.mape.items()],
    )
    out.json(f"{prefix}estimates.json", _table_doc(table))


def _table_doc(table: ex.MapeTable) -> dict:
    return {
        "mape": [{"estimator": e, "metric": m, "mape": v} for (e, m), v in table.mape.items()],
        "estimates": [
            {"test": t, "estimator": e, "metric": m, "value": v} for (t, e, m), v in table.estimates.items()
        ],
        "truths": [{"test": t, "metric": m, "value": v} for (t, m), v in table.truths.items()],
        "kernels": [{"estimator": e, "metric": m, "kernel": k.to_dict()} for (e, m), k in table.kernels.items()],
        "continuous_wins": table.wins(),
    }


def scenario_estimator_comparison(s: ex.Settings, seed: int, out: Artifacts, prefix: str) -> None:
    table = ex.discrete_vs_continuous(s, seed)
    out.csv(
        f"{prefix}estimator_comparison.csv",
        PLOT_COLUMNS,
        [(m.value, v, table.mape[(v, m.value)], None, None) for v in CONTINUOUS_VARIANTS for m in METRICS],
    )
    out.csv(
        f"{prefix}estimates.csv",
        ("test", "metric", "estimator", "value", "truth"),
        [
            (t, m, e, v, table.truths[(t, m)])
            for (t, e, m), v in table.estimates.items()
            if e in CONTINUOUS_VARIANTS
        ],
    )
    out.json(f"{prefix}estimates.json", _table_doc(table))


def scenario_counterfactual_yz(s: ex.Settings, seed: int, out: Artifacts, prefix: str) -> None:
    res = ex.counterfactual_yz(s, seed)
    primary = next(iter(res.estimated))
    out.csv(
        f"{prefix}cf_lifts.csv",
        ("metric", "estimated", "actual"),
        [(a.metric, e.lift_percent, a.lift_percent) for e, a in zip(res.estimated[primary], res.actual)],
    )
    rows = [_lift_row(name, l) for name, lifts in res.estimated.items() for l in lifts]
    rows += [_lift_row("actual", l) for l in res.actual]
    out.csv(f"{prefix}cf_plot.csv", PLOT_COLUMNS, rows)
    out.json(
        f"{prefix}cf_report.json",
        {
            "primary": primary,
            "estimated": {k: [l.to_dict() for l in v] for k, v in res.estimated.items()},
            "actual": [l.to_dict() for l in res.actual],
            "sign_matches": {k: res.sign_matches(k) for k in res.estimated},
            "kernels": {k: v.to_dict() for k, v in res.kernels.items()},
        },
    )


def scenario_optpal(s: ex.Settings, seed: int, out: Artifacts, prefix: str) -> None:
    res = ex.optpal_test2(s, seed)
    out.model(f"{prefix}policy_w.json", res.policy)
    out.csv(f"{prefix}trace.csv", ("iteration", "loss"), enumerate(res.trace.losses.tolist()))
    rows = []
    for name, vals, profit in (("W", res.oracle_w, res.profit_w), ("X", res.oracle_x, res.profit_x)):
        rows.extend((m.value, name, vals[m.index], None, None) for m in METRICS)
        rows.append(("profit", name, profit, None, None))
    out.csv(f"{prefix}optpal_summary.csv", PLOT_COLUMNS, rows)
    out.json(
        f"{prefix}optpal.json",
        {
            "oracle": {
                "W": {m.value: res.oracle_w[m.index] for m in METRICS},
                "X": {m.value: res.oracle_x[m.index] for m in METRICS},
            },
            "oracle_profit": {"W": res.profit_w, "X": res.profit_x},
            "estimated_profit": {"W": res.estimated_profit_w, "X": res.estimated_profit_x},
            "training": {
                "iterations": len(res.trace) - 1,
                "initial_loss": res.trace.initial,
                "final_loss": res.trace.final,
                "learning_rate": res.trace.learning_rate,
                "retries": res.trace.retries,
                "converged": res.trace.converged,
            },
        },
    )


RUNNERS = {
    "AbTest": scenario_ab_test,
    "DiscreteVsContinuous": scenario_discrete_vs_continuous,
    "EstimatorComparison": scenario_estimator_comparison,
    "CounterfactualYZ": scenario_counterfactual_yz,
    "OptPal": scenario_optpal,
}


def run_plan(plan: Mapping, out_dir: Path, base_dir: Path = Path(".")) -> Path:
    """Run one scenario for every seed and write ``manifest.json``; returns its path.

    On failure the manifest lists what was written so far, records the
    error, and the exception propagates.
    """
    scenario = plan.get("scenario")
    if scenario not in RUNNERS:
        raise InvalidConfig(f"unknown scenario {scenario!r}; expected one of {list(SCENARIOS)}")
    seeds = plan.get("seeds", [plan.get("seed", 0)])
    if isinstance(seeds, int) or not seeds or not all(isinstance(x, int) for x in seeds):
        raise InvalidConfig("seeds must be a non-empty list of integers")
    settings = settings_from_plan(plan, base_dir)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    art = Artifacts(out_dir)
    echo = _settings_echo(settings)
    try:
        for seed in seeds:
            prefix = "" if len(seeds) == 1 else f"seed-{seed}/"
            RUNNERS[scenario](settings, seed, art, prefix)
    except OpeError as exc:
        art.manifest(scenario, seeds, echo, error=_error_doc(exc))
        raise
    return art.manifest(scenario, seeds, echo)


def cmd_run_plan(args) -> list[Path]:
    plan_path = Path(args.config)
    plan = read_toml(plan_path)
    if args.seed is not None:
        plan["seeds"] = [args.seed]
    out = args.out or plan.get("output_dir")
    if not out:
        raise InvalidConfig("no output directory: pass --out or set output_dir in the plan")
    out = Path(out) if args.out else plan_path.parent / out
    return [run_plan(plan, out, plan_path.parent)]


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------


def _verified(manifest_path: Path) -> tuple[dict, dict[str, Path]]:
    doc = read_json(manifest_path)
    if not isinstance(doc, Mapping):
        raise SchemaError(f"{manifest_path}: manifest must be a JSON object")
    root = manifest_path.parent
    files = {}
    for entry in doc.get("files", []):
        rel = entry.get("path")
        path = root / rel
        if not path.exists():
            raise MissingArtifact(f"artifact missing: {rel}")
        if sha256(path) != entry.get("sha256"):
            raise MissingArtifact(f"artifact {rel} does not match its manifest hash")
        files[rel] = path
    return doc, files


def _f(x: str) -> float | None:
    return float(x) if x not in ("", None) else None


def _plot_rows(path: Path, scenario: str, truth=None) -> list[tuple]:
    out = []
    for r in read_csv(path):
        t = truth(r) if truth else None
        out.append((scenario, r["metric"], r["estimator"], _f(r["value"]), _f(r["ci_low"]), _f(r["ci_high"]), t))
    return out


def summary_rows(doc: Mapping, files: Mapping[str, Path]) -> list[tuple]:
    scenario = doc.get("scenario")
    rows: list[tuple] = []
    by_name: dict[str, list[str]] = {}
    for rel in files:
        by_name.setdefault(Path(rel).name, []).append(rel)

    def each(name):
        return [files[rel] for rel in sorted(by_name.get(name, []))]

    if scenario == "DiscreteVsContinuous":
        for d, c in zip(each("mape_discrete.csv"), each("mape_continuous.csv")):
            rows += _plot_rows(d, scenario) + _plot_rows(c, scenario)
    elif scenario == "EstimatorComparison":
        for p in each("estimator_comparison.csv"):
            rows += _plot_rows(p, scenario)
    elif scenario == "AbTest":
        for p, lj in zip(each("lifts.csv"), each("lifts.json")):
            truth = read_json(lj)["truth"]
            rows += _plot_rows(p, scenario, lambda r: truth[r["estimator"]][r["metric"]])
    elif scenario == "CounterfactualYZ":
        for p in each("cf_plot.csv"):
            records = read_csv(p)
            actual = {r["metric"]: _f(r["value"]) for r in records if r["estimator"] == "actual"}
            rows += [
                row
                for row in _plot_rows(p, scenario, lambda r: actual.get(r["metric"]))
                if row[2] != "actual"
            ]
    elif scenario == "OptPal":
        for p in each("optpal_summary.csv"):
            rows += _plot_rows(p, scenario)
    return rows


def _markdown(rows: Sequence[tuple]) -> str:
    if not rows:
        return "# Summary\n\nNo artifacts.\n"
    lines = ["# Summary", ""]
    for scenario in dict.fromkeys(r[0] for r in rows):
        lines += [f"## {scenario}", "", "| " + " | ".join(SUMMARY_COLUMNS[1:]) + " |"]
        lines.append("|" + "---|" * (len(SUMMARY_COLUMNS) - 1))
        for r in rows:
            if r[0] == scenario:
                lines.append("| " + " | ".join(_cell(v) for v in r[1:]) + " |")
        lines.append("")
    return "\n".join(lines)


def report(manifest_path: Path, out_dir: Path) -> tuple[Path, Path]:
    doc, files = _verified(Path(manifest_path))
    rows = summary_rows(doc, files)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = write_csv(out_dir / "summary.csv", SUMMARY_COLUMNS, rows)
    md_path = out_dir / "summary.md"
    md_path.write_text(_markdown(rows), encoding="utf-8")
    return md_path, csv_path


def cmd_report(args) -> list[Path]:
    manifest = Path(args.manifest)
    out = Path(args.out) if args.out else manifest.parent
    return list(report(manifest, out))


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def _common(p: argparse.ArgumentParser, seed_default: int | None = 0) -> None:
    p.add_argument("--seed", type=int, default=seed_default)
    p.add_argument("--out", required=False)
    p.add_argument("--config")
    p.add_argument("--format", choices=("json", "csv"), default="json")


def _trees(p: argparse.ArgumentParser) -> None:
    p.add_argument("--trees", type=int, default=50)
    p.add_argument("--max-depth", type=int, default=10)
    p.add_argument("--min-leaf", type=int, default=5)
    p.add_argument("--num-bins", type=int, default=10)


def _kernel_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--kernel", default="gaussian")
    p.add_argument("--bandwidth", type=float)
    p.add_argument("--kernels", action="append", help="tuned kernel JSON (repeatable, one per metric)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="auctionope", description="Off-policy evaluation for auction payment policies")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="simulate an A/B test and write both logs")
    _common(p, None)
    p.add_argument("--n", type=int, default=10_000)
    p.add_argument("--control")
    p.add_argument("--treatment")
    p.set_defaults(func=cmd_simulate, needs_out=True)

    p = sub.add_parser("fit-proxy", help="fit a proxy policy on a log")
    _common(p)
    _trees(p)
    p.add_argument("--log", required=True)
    p.add_argument("--binning-log", help="log whose actions define the bins (default: --log)")
    p.add_argument("--name")
    p.add_argument("--no-classifier", action="store_true")
    p.add_argument("--no-regressor", action="store_true")
    p.set_defaults(func=cmd_fit_proxy, needs_out=True)

    p = sub.add_parser("evaluate", help="run the estimator table on a log")
    _common(p)
    _trees(p)
    _kernel_flags(p)
    p.add_argument("--log", required=True)
    p.add_argument("--policy-eval", required=True)
    p.add_argument("--policy-behavior")
    p.add_argument("--estimators", default="all")
    p.add_argument("--clip", type=float)
    p.set_defaults(func=cmd_evaluate, needs_out=True)

    p = sub.add_parser("tune", help="tune the continuous estimator's kernel and bandwidth")
    _common(p, None)
    p.add_argument("--logs", required=True)
    p.add_argument("--oracle", required=True)
    p.add_argument("--metric", default="returns")
    p.add_argument("--variant", default="continuous", choices=CONTINUOUS_VARIANTS)
    p.add_argument("--trials", help="also write the trial table as CSV")
    p.set_defaults(func=cmd_tune, needs_out=True)

    p = sub.add_parser("counterfactual", help="re-estimate one side of an A/B test under another policy")
    _common(p)
    _trees(p)
    _kernel_flags(p)
    p.add_argument("--test", required=True)
    p.add_argument("--replace-side", choices=("control", "treatment"), default="control")
    p.add_argument("--with", dest="with_", required=True)
    p.add_argument("--estimator", default="continuous")
    p.add_argument("--behavior")
    p.add_argument("--clip", type=float)
    p.add_argument("--alpha", type=float, default=0.05)
    p.set_defaults(func=cmd_counterfactual, needs_out=True)

    p = sub.add_parser("learn-optimal", help="learn a payment network on a log")
    _common(p, None)
    p.add_argument("--log", required=True)
    p.add_argument("--trace")
    p.set_defaults(func=cmd_learn_optimal, needs_out=True)

    p = sub.add_parser("report", help="summarise a run-plan manifest")
    _common(p)
    p.add_argument("--manifest", required=True)
    p.set_defaults(func=cmd_report, needs_out=False)

    p = sub.add_parser("run-plan", help="run an experiment plan")
    _common(p, None)
    p.set_defaults(func=cmd_run_plan, needs_out=False)
    return parser


def _error_doc(exc: BaseException) -> dict:
    return {"error": type(exc).__name__, "message": str(exc), "exit_code": getattr(exc, "exit_code", 1)}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.needs_out and not args.out:
        parser.error(f"{args.command}: --out is required")
    if args.command == "run-plan" and not args.config:
        parser.error("run-plan: --config is required")
    try:
        paths = args.func(args)
    except OpeError as exc:
        print(json.dumps(_error_doc(exc), sort_keys=True), file=sys.stderr)
        return exc.exit_code
    for p in paths:
        print(p)
    return 0


if __name__ == "__main__":
    sys.exit(main())
