"""Learned components: tree ensembles, kernels and KDE, the payment MLP, proxies."""

from __future__ import annotations

import json
from pathlib import Path

from ..errors import MissingArtifact, ParseError, SchemaError
from .kde import KdeDensity, fit_kde, kde_conditional_density, silverman_bandwidths
from .kernels import KERNEL_KINDS, KernelSpec, kernel
from .mlp import MlpGradients, MlpPolicy, init_mlp, layer_sizes_for, mlp_backward, mlp_forward
from .proxy import ProxyPolicy, fit_proxy
from .trees import (
    CLASSIFICATION,
    REGRESSION,
    Tree,
    TreeEnsemble,
    TreeParams,
    fit_tree_ensemble,
    predict_proxy_policy,
)

_LOADERS = {
    "tree_ensemble": TreeEnsemble.from_dict,
    "mlp": MlpPolicy.from_dict,
    "kde": KdeDensity.from_dict,
    "proxy_policy": ProxyPolicy.from_dict,
}

MODEL_VERSION = 1


def model_from_dict(d: dict):
    kind = d.get("kind") if isinstance(d, dict) else None
    if kind not in _LOADERS:
        raise SchemaError(f"unknown model kind {kind!r}")
    if d.get("version") != MODEL_VERSION:
        raise SchemaError(f"unsupported {kind} version {d.get('version')!r}")
    try:
        return _LOADERS[kind](d)
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaError(f"malformed {kind} model: {exc}") from None


def save_model(model, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(model.to_dict()), encoding="utf-8")
    return path


def load_model(path):
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise MissingArtifact(f"model file not found: {path}") from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: {exc.msg}", line=exc.lineno) from None
    return model_from_dict(doc)


__all__ = [
    "CLASSIFICATION",
    "KERNEL_KINDS",
    "REGRESSION",
    "KdeDensity",
    "KernelSpec",
    "MlpGradients",
    "MlpPolicy",
    "ProxyPolicy",
    "Tree",
    "TreeEnsemble",
    "TreeParams",
    "fit_kde",
    "fit_proxy",
    "fit_tree_ensemble",
    "init_mlp",
    "kde_conditional_density",
    "kernel",
    "layer_sizes_for",
    "load_model",
    "mlp_backward",
    "mlp_forward",
    "model_from_dict",
    "predict_proxy_policy",
    "save_model",
    "silverman_bandwidths",
]
