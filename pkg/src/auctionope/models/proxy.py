"""Proxy policies: supervised imitations of a logged payment policy."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..core import BinningScheme, LoggedDataset, make_binning
from ..errors import DimensionMismatch
from .trees import CLASSIFICATION, REGRESSION, TreeEnsemble, TreeParams, fit_tree_ensemble


@dataclass(frozen=True, eq=False)
class ProxyPolicy:
    """A regressor (continuous payment) and/or a classifier over action bins.

    The classifier's labels are bin indices under ``binning``; proxies that
    are compared in one discrete evaluation must share the same binning.
    """

    binning: BinningScheme | None = None
    classifier: TreeEnsemble | None = None
    regressor: TreeEnsemble | None = None
    name: str = "proxy"

    @property
    def dimension(self) -> int:
        model = self.regressor or self.classifier
        return model.feature_dimension

    def payment(self, contexts) -> np.ndarray:
        if self.regressor is None:
            raise ValueError(f"proxy {self.name!r} has no regressor")
        return np.maximum(self.regressor.predict(np.atleast_2d(contexts)), 0.0)

    def bin_probs(self, contexts) -> np.ndarray:
        if self.classifier is None:
            raise ValueError(f"proxy {self.name!r} has no classifier")
        return self.classifier.predict_proba(np.atleast_2d(contexts))

    def check_binning(self, binning: BinningScheme) -> None:
        if self.binning is None or not np.array_equal(self.binning.edges, binning.edges):
            raise DimensionMismatch(f"proxy {self.name!r} was trained on a different action binning")

    def to_dict(self) -> dict:
        return {
            "kind": "proxy_policy",
            "version": 1,
            "name": self.name,
            "binning": None if self.binning is None else self.binning.to_dict(),
            "classifier": None if self.classifier is None else self.classifier.to_dict(),
            "regressor": None if self.regressor is None else self.regressor.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ProxyPolicy":
        return cls(
            binning=None if d.get("binning") is None else BinningScheme.from_dict(d["binning"]),
            classifier=None if d.get("classifier") is None else TreeEnsemble.from_dict(d["classifier"]),
            regressor=None if d.get("regressor") is None else TreeEnsemble.from_dict(d["regressor"]),
            name=d.get("name", "proxy"),
        )


def fit_proxy(
    dataset: LoggedDataset,
    binning: BinningScheme | None = None,
    params: TreeParams | None = None,
    num_bins: int = 10,
    classifier: bool = True,
    regressor: bool = True,
    name: str | None = None,
) -> ProxyPolicy:
    """Fit a classifier on bin labels and a regressor on raw payments."""
    params = params or TreeParams()
    clf = reg = None
    if classifier:
        binning = binning or make_binning(dataset, num_bins)
        labels = binning.assign(dataset.actions)
        clf = fit_tree_ensemble(
            dataset.contexts, labels, CLASSIFICATION, params, num_classes=binning.num_bins
        )
    if regressor:
        reg = fit_tree_ensemble(dataset.contexts, dataset.actions, REGRESSION, params)
    return ProxyPolicy(binning=binning, classifier=clf, regressor=reg, name=name or dataset.policy_id)
