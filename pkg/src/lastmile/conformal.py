"""Mondrian conformal predictive system over a boosted regressor.

Calibration residuals ``y - yhat`` are pooled per category, the categories
being equal-frequency bins of the base prediction (a difficulty proxy).
A test instance gets the residuals of its bin shifted by its own
prediction, which defines a full step CDF.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .boosting import GBTEnsemble
from .errors import ConfigError, InsufficientCalibration, ShapeError

EXPORT_QUANTILES = (0.05, 0.25, 0.5, 0.75, 0.95)


@dataclass(frozen=True)
class CpsDistribution:
    point: float
    atoms: np.ndarray

    @property
    def n(self) -> int:
        return len(self.atoms)

    def cdf(self, y):
        """``(#atoms below y + mid-rank of any atoms tied at y) / (n + 1)``.

        A single atom at ``y`` counts fully; a run of ``t`` tied atoms
        counts ``(t + 1) / 2``.
        """
        y = np.asarray(y, dtype=float)
        below = np.searchsorted(self.atoms, y, side="left")
        upto = np.searchsorted(self.atoms, y, side="right")
        ties = upto - below
        out = (below + np.where(ties > 0, (ties + 1) / 2.0, 0.0)) / (self.n + 1)
        return float(out) if out.ndim == 0 else out

    def quantile(self, tau):
        """Atom at index ``ceil(tau * (n + 1)) - 1``, clamped to the atom range."""
        tau = np.asarray(tau, dtype=float)
        idx = np.ceil(tau * (self.n + 1) - 1e-9).astype(np.int64) - 1
        out = self.atoms[np.clip(idx, 0, self.n - 1)]
        return float(out) if out.ndim == 0 else out

    def mean(self) -> float:
        return float(self.atoms.mean())

    def to_dict(self) -> dict:
        lo, hi = cps_interval(self)
        return {"point": self.point,
                "quantiles": {str(t): float(self.quantile(t)) for t in EXPORT_QUANTILES},
                "interval": [lo, hi]}


@dataclass
class CpsModel:
    base: GBTEnsemble
    edges: np.ndarray
    residuals: list[np.ndarray]

    @property
    def n_categories(self) -> int:
        return len(self.residuals)

    def category(self, yhat) -> np.ndarray:
        return np.searchsorted(self.edges, np.asarray(yhat, dtype=float), side="right")

    def to_dict(self) -> dict:
        return {"version": 1, "kind": "mondrian_cps", "base": self.base.to_dict(),
                "edges": self.edges.tolist(), "residuals": [r.tolist() for r in self.residuals]}

    @classmethod
    def from_dict(cls, d: dict) -> CpsModel:
        return cls(GBTEnsemble.from_dict(d["base"]), np.array(d["edges"], dtype=float),
                   [np.array(r, dtype=float) for r in d["residuals"]])


def mondrian_edges(yhat: np.ndarray, n_bins: int, min_cal: int) -> np.ndarray:
    """Equal-frequency bin edges, greedily merged until every bin has ``min_cal`` points.

    A bin holds predictions in ``[edge[i-1], edge[i])``.
    """
    if n_bins < 1:
        raise ConfigError(f"n_bins must be >= 1, got {n_bins}")
    edges = np.unique(np.quantile(yhat, np.arange(1, n_bins) / n_bins)) if n_bins > 1 else np.empty(0)
    while len(edges):
        counts = np.bincount(np.searchsorted(edges, yhat, side="right"), minlength=len(edges) + 1)
        small = np.nonzero(counts < min_cal)[0]
        if not len(small):
            break
        i = int(small[np.argmin(counts[small])])
        # merge with the smaller neighbour by deleting the edge between them
        if i == 0:
            drop = 0
        elif i == len(counts) - 1:
            drop = i - 1
        else:
            drop = i - 1 if counts[i - 1] <= counts[i + 1] else i
        edges = np.delete(edges, drop)
    return edges


def cps_calibrate(base: GBTEnsemble, X_cal, y_cal, n_bins: int = 5, min_cal: int = 50) -> CpsModel:
    X_cal = np.asarray(X_cal, dtype=float)
    y_cal = np.asarray(y_cal, dtype=float).ravel()
    if len(X_cal) != len(y_cal):
        raise ShapeError(f"X_cal has {len(X_cal)} rows, y_cal {len(y_cal)}")
    if len(y_cal) < n_bins * min_cal:
        raise InsufficientCalibration(f"{len(y_cal)} calibration rows < n_bins*min_cal = {n_bins * min_cal}")
    yhat = base.predict(X_cal)
    edges = mondrian_edges(yhat, n_bins, min_cal)
    cat = np.searchsorted(edges, yhat, side="right")
    resid = y_cal - yhat
    residuals = [np.sort(resid[cat == c]) for c in range(len(edges) + 1)]
    return CpsModel(base, edges, residuals)


def cps_predict(model: CpsModel, x) -> CpsDistribution | list[CpsDistribution]:
    """Predictive distribution(s); a single row gives one, a matrix a list."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    X = x[None, :] if single else x
    if X.shape[1] != model.base.n_features:
        raise ShapeError(f"expected {model.base.n_features} features, got {X.shape[1]}")
    yhat = model.base.predict(X)
    cats = model.category(yhat)
    out = [CpsDistribution(float(p), p + model.residuals[c]) for p, c in zip(yhat, cats)]
    return out[0] if single else out


def cps_interval(dist, coverage: float = 0.90) -> tuple[float, float]:
    """Central interval between the ``(1-coverage)/2`` and ``1-(1-coverage)/2`` quantiles."""
    if not 0 < coverage < 1:
        raise ConfigError(f"coverage must be in (0, 1), got {coverage}")
    a = (1.0 - coverage) / 2.0
    return float(dist.quantile(a)), float(dist.quantile(1.0 - a))
