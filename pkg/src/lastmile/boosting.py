"""Second-order gradient-boosted regression trees, from scratch.

Two learners share the tree builder:

* ``gbt_fit`` -- squared error, the base regressor for the conformal module;
* ``lss_fit`` -- a lognormal whose ``mu`` and ``log_sigma`` are each boosted
  against the negative log likelihood, the two heads taking turns.

Splits are exact and greedy. Rows with identical feature vectors always
land in the same leaf, so the builder works on unique rows with summed
gradients and hessians; the resulting trees are the same as on the raw rows.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .baselines import FittedLognormal
from .errors import ConfigError, DivergenceError, DomainError, ShapeError

LOG_2PI = math.log(2 * math.pi)
CHECKPOINT_VERSION = 1


@dataclass
class RegressionTree:
    """Array-encoded binary tree; ``feature == -1`` marks a leaf.

    Rows with ``x[feature] <= threshold`` go left.
    """
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    max_depth: int

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    @property
    def n_leaves(self) -> int:
        return int(np.sum(self.feature < 0))

    def predict(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        node = np.zeros(len(X), dtype=np.int64)
        for _ in range(self.max_depth + 1):
            f = self.feature[node]
            internal = f >= 0
            if not internal.any():
                break
            rows = np.nonzero(internal)[0]
            go_left = X[rows, f[rows]] <= self.threshold[node[rows]]
            node[rows] = np.where(go_left, self.left[node[rows]], self.right[node[rows]])
        return self.value[node]

    def to_dict(self) -> dict:
        return {"feature": self.feature.tolist(), "threshold": self.threshold.tolist(),
                "left": self.left.tolist(), "right": self.right.tolist(),
                "value": self.value.tolist(), "max_depth": self.max_depth}

    @classmethod
    def from_dict(cls, d: dict) -> RegressionTree:
        return cls(np.array(d["feature"], dtype=np.int64), np.array(d["threshold"], dtype=float),
                   np.array(d["left"], dtype=np.int64), np.array(d["right"], dtype=np.int64),
                   np.array(d["value"], dtype=float), int(d["max_depth"]))


def _group_rows(X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    Xu, inv = np.unique(X, axis=0, return_inverse=True)
    return Xu, np.asarray(inv).ravel()


def _best_split(Xn, Gn, Hn, min_child_weight, lam):
    """Best (gain, feature, threshold) over all features, or None."""
    m = len(Xn)
    if m < 2:
        return None
    order = np.argsort(Xn, axis=0, kind="stable")
    xs = np.take_along_axis(Xn, order, axis=0)
    cg = np.cumsum(Gn[order], axis=0)[:-1]
    ch = np.cumsum(Hn[order], axis=0)[:-1]
    G, H = Gn.sum(), Hn.sum()
    gr, hr = G - cg, H - ch
    valid = (xs[:-1] < xs[1:]) & (ch >= min_child_weight) & (hr >= min_child_weight)
    if not valid.any():
        return None
    with np.errstate(divide="ignore", invalid="ignore"):
        gain = 0.5 * (cg ** 2 / (ch + lam) + gr ** 2 / (hr + lam) - G ** 2 / (H + lam))
    gain = np.where(valid, gain, -np.inf)
    # feature-major flattening: the first near-maximal gain is the lowest feature, then
    # lowest threshold; the slack absorbs rounding between identical partitions
    flat = gain.T.ravel()
    top = flat.max()
    if not top > 0:
        return None
    k = int(np.argmax(flat >= top - 1e-12 * top))
    best = flat[k]
    f, i = divmod(k, m - 1)
    lo, hi = xs[i, f], xs[i + 1, f]
    thr = lo + (hi - lo) / 2.0
    if not lo <= thr < hi:
        thr = lo
    return float(best), int(f), float(thr)


def _fit_grouped(Xu, G, H, max_depth, min_child_weight, lam) -> RegressionTree:
    feature, threshold, left, right, value = [], [], [], [], []

    def grow(idx, depth):
        node = len(feature)
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        Gs, Hs = G[idx].sum(), H[idx].sum()
        value.append(-Gs / (Hs + lam))
        if depth >= max_depth:
            return node
        split = _best_split(Xu[idx], G[idx], H[idx], min_child_weight, lam)
        if split is None:
            return node
        _, f, thr = split
        mask = Xu[idx, f] <= thr
        feature[node] = f
        threshold[node] = thr
        value[node] = 0.0
        left[node] = grow(idx[mask], depth + 1)
        right[node] = grow(idx[~mask], depth + 1)
        return node

    grow(np.arange(len(Xu)), 0)
    return RegressionTree(np.array(feature, dtype=np.int64), np.array(threshold, dtype=float),
                          np.array(left, dtype=np.int64), np.array(right, dtype=np.int64),
                          np.array(value, dtype=float), max_depth)


def tree_fit(X, g, h, max_depth: int = 4, min_child_weight: float = 5.0, lambda_reg: float = 1.0) -> RegressionTree:
    """Fit one tree to gradients ``g`` and hessians ``h``.

    Split gain is ``0.5 * (GL^2/(HL+lam) + GR^2/(HR+lam) - G^2/(H+lam))``;
    only positive-gain splits whose children each carry at least
    ``min_child_weight`` hessian are taken. Leaves hold ``-G/(H+lam)``.
    """
    X = np.asarray(X, dtype=float)
    g = np.asarray(g, dtype=float)
    h = np.asarray(h, dtype=float)
    if X.ndim != 2 or len(X) != len(g) or len(g) != len(h):
        raise ShapeError(f"X {X.shape}, g {g.shape}, h {h.shape}")
    if np.any(h < 0):
        raise DomainError("hessians must be non-negative")
    Xu, inv = _group_rows(X)
    G = np.bincount(inv, weights=g, minlength=len(Xu))
    H = np.bincount(inv, weights=h, minlength=len(Xu))
    return _fit_grouped(Xu, G, H, max_depth, min_child_weight, lambda_reg)


@dataclass
class GBTEnsemble:
    trees: list[RegressionTree]
    learning_rate: float
    base_score: float
    loss: str = "squared_error"
    n_features: int = 0
    history: list[float] = field(default_factory=list)
    val_history: list[float] = field(default_factory=list)

    def predict(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.ndim != 2 or (self.n_features and X.shape[1] != self.n_features):
            raise ShapeError(f"expected {self.n_features} features, got shape {X.shape}")
        Xu, inv = _group_rows(X) if len(X) else (X, np.zeros(0, dtype=np.int64))
        out = np.full(len(Xu), self.base_score)
        for t in self.trees:
            out += self.learning_rate * t.predict(Xu)
        return out[inv]

    def to_dict(self) -> dict:
        return {"version": CHECKPOINT_VERSION, "kind": "gbt", "loss": self.loss,
                "learning_rate": self.learning_rate, "base_score": self.base_score,
                "n_features": self.n_features, "trees": [t.to_dict() for t in self.trees]}

    @classmethod
    def from_dict(cls, d: dict) -> GBTEnsemble:
        if d.get("version") != CHECKPOINT_VERSION:
            raise ConfigError(f"unsupported checkpoint version {d.get('version')}")
        return cls([RegressionTree.from_dict(t) for t in d["trees"]], float(d["learning_rate"]),
                   float(d["base_score"]), d.get("loss", "squared_error"), int(d.get("n_features", 0)))


def _check_xy(X, y):
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float).ravel()
    if X.ndim != 2 or len(X) != len(y):
        raise ShapeError(f"X {X.shape} vs y {y.shape}")
    if len(y) < 10:
        raise ConfigError(f"need >= 10 training rows, got {len(y)}")
    if not np.all(np.isfinite(X)) or not np.all(np.isfinite(y)):
        raise DomainError("non-finite training data")
    return X, y


def gbt_fit(X, y, n_trees: int = 200, learning_rate: float = 0.1, max_depth: int = 4,
            min_child_weight: float = 5.0, lambda_reg: float = 1.0,
            eval_set=None, early_stopping_rounds: int | None = None) -> GBTEnsemble:
    """Squared-error boosting (g = pred - y, h = 1). ``history`` holds training MSE per round.

    With ``eval_set=(X_val, y_val)`` the validation MSE is tracked in
    ``val_history``; with ``early_stopping_rounds`` as well, fitting stops
    once it has not improved for that many rounds and the ensemble is cut
    back to the best round.
    """
    X, y = _check_xy(X, y)
    if not 0 < learning_rate <= 1:
        raise ConfigError(f"learning_rate must be in (0, 1], got {learning_rate}")
    Xu, inv = _group_rows(X)
    ones = np.bincount(inv, minlength=len(Xu)).astype(float)
    base = float(y.mean())
    pred_u = np.full(len(Xu), base)
    ens = GBTEnsemble([], learning_rate, base, "squared_error", X.shape[1])
    ens.history.append(float(np.mean((base - y) ** 2)))
    val = _Validation(eval_set, X.shape[1], early_stopping_rounds)
    if val.active:
        val_pred = np.full(len(val.y), base)
        val.record(float(np.mean((val_pred - val.y) ** 2)), 0)
    for _ in range(n_trees):
        g = pred_u[inv] - y
        G = np.bincount(inv, weights=g, minlength=len(Xu))
        tree = _fit_grouped(Xu, G, ones, max_depth, min_child_weight, lambda_reg)
        ens.trees.append(tree)
        pred_u += learning_rate * tree.predict(Xu)
        ens.history.append(float(np.mean((pred_u[inv] - y) ** 2)))
        if val.active:
            val_pred += learning_rate * tree.predict(val.X)
            if val.record(float(np.mean((val_pred - val.y) ** 2)), len(ens.trees)):
                break
    if val.active:
        ens.val_history = val.history
        if early_stopping_rounds is not None:
            del ens.trees[val.best_round:]
            del ens.history[val.best_round + 1:]
    return ens


class _Validation:
    """Validation-loss bookkeeping for early stopping."""

    def __init__(self, eval_set, n_features: int, patience: int | None):
        self.active = eval_set is not None
        self.patience = patience
        self.history: list[float] = []
        self.best_round = 0
        if patience is not None and (not self.active or patience < 1):
            raise ConfigError("early stopping needs an eval_set and patience >= 1")
        if self.active:
            Xv, yv = eval_set
            self.X = np.asarray(Xv, dtype=float)
            self.y = np.asarray(yv, dtype=float).ravel()
            if self.X.ndim != 2 or self.X.shape[1] != n_features or len(self.X) != len(self.y) or not len(self.y):
                raise ShapeError(f"eval_set X {self.X.shape} vs y {self.y.shape}")

    def record(self, loss: float, rnd: int) -> bool:
        """Log the loss after round ``rnd``; True once patience has run out."""
        self.history.append(loss)
        if loss < self.history[self.best_round]:
            self.best_round = rnd
        return self.patience is not None and rnd - self.best_round >= self.patience


# -- lognormal location/scale boosting ------------------------------------------

HESS_FLOOR = 1e-6


def lss_nll(y, mu, s):
    """Lognormal NLL with ``s = log sigma``."""
    ly = np.log(y)
    return ly + s + 0.5 * LOG_2PI + (ly - mu) ** 2 / (2.0 * np.exp(2.0 * s))


def lss_grad_hess(y, mu, s):
    """Gradients and boosting curvatures of ``lss_nll`` in (mu, s).

    The mu curvature is exact. For s the exact second derivative
    ``2 z^2`` (z the standardised log residual) is already non-negative; it
    is floored at 1e-6 so leaves with near-zero residuals stay bounded.
    """
    r = np.log(y) - mu
    inv_var = np.exp(-2.0 * s)
    g_mu = -r * inv_var
    h_mu = inv_var
    z2 = r * r * inv_var
    g_s = 1.0 - z2
    h_s = np.maximum(2.0 * z2, HESS_FLOOR)
    return g_mu, h_mu, g_s, h_s


@dataclass
class LssEnsemble:
    mu_head: GBTEnsemble
    s_head: GBTEnsemble
    history: list[float] = field(default_factory=list)
    val_history: list[float] = field(default_factory=list)

    @property
    def n_features(self) -> int:
        return self.mu_head.n_features

    def predict_params(self, X) -> tuple[np.ndarray, np.ndarray]:
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[None, :]
        return self.mu_head.predict(X), np.exp(self.s_head.predict(X))

    def to_dict(self) -> dict:
        return {"version": CHECKPOINT_VERSION, "kind": "lss_lognormal",
                "mu_head": self.mu_head.to_dict(), "log_sigma_head": self.s_head.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> LssEnsemble:
        if d.get("version") != CHECKPOINT_VERSION:
            raise ConfigError(f"unsupported checkpoint version {d.get('version')}")
        return cls(GBTEnsemble.from_dict(d["mu_head"]), GBTEnsemble.from_dict(d["log_sigma_head"]))


def lss_fit(X, y, n_trees: int = 200, learning_rate: float = 0.1, max_depth: int = 4,
            min_child_weight: float = 5.0, lambda_reg: float = 1.0,
            eval_set=None, early_stopping_rounds: int | None = None) -> LssEnsemble:
    """Boost lognormal (mu, log sigma) against NLL; heads alternate each round.

    ``history`` holds the mean training NLL after every round. ``eval_set``
    and ``early_stopping_rounds`` behave as in ``gbt_fit``, on validation NLL;
    a round is one tree per head.
    """
    X, y = _check_xy(X, y)
    if np.any(y <= 0):
        raise DomainError("lognormal boosting needs y > 0")
    Xu, inv = _group_rows(X)
    ly = np.log(y)
    mu0 = float(ly.mean())
    s0 = float(math.log(max(ly.std(), 1e-3)))
    mu_head = GBTEnsemble([], learning_rate, mu0, "lognormal_mu", X.shape[1])
    s_head = GBTEnsemble([], learning_rate, s0, "lognormal_log_sigma", X.shape[1])
    mu_u = np.full(len(Xu), mu0)
    s_u = np.full(len(Xu), s0)
    ens = LssEnsemble(mu_head, s_head)
    ens.history.append(float(np.mean(lss_nll(y, mu0, s0))))
    val = _Validation(eval_set, X.shape[1], early_stopping_rounds)
    if val.active and np.any(val.y <= 0):
        raise DomainError("lognormal boosting needs validation y > 0")
    if val.active:
        val_mu = np.full(len(val.y), mu0)
        val_s = np.full(len(val.y), s0)
        val.record(float(np.mean(lss_nll(val.y, val_mu, val_s))), 0)

    def grouped(v):
        return np.bincount(inv, weights=v, minlength=len(Xu))

    for rnd in range(1, n_trees + 1):
        g_mu, h_mu, _, _ = lss_grad_hess(y, mu_u[inv], s_u[inv])
        tree = _fit_grouped(Xu, grouped(g_mu), grouped(h_mu), max_depth, min_child_weight, lambda_reg)
        mu_head.trees.append(tree)
        mu_u += learning_rate * tree.predict(Xu)
        if val.active:
            val_mu = val_mu + learning_rate * tree.predict(val.X)

        _, _, g_s, h_s = lss_grad_hess(y, mu_u[inv], s_u[inv])
        tree = _fit_grouped(Xu, grouped(g_s), grouped(h_s), max_depth, min_child_weight, lambda_reg)
        s_head.trees.append(tree)
        s_u += learning_rate * tree.predict(Xu)
        if val.active:
            val_s = val_s + learning_rate * tree.predict(val.X)

        nll = float(np.mean(lss_nll(y, mu_u[inv], s_u[inv])))
        if not math.isfinite(nll):
            raise DivergenceError(f"NLL became non-finite after {len(mu_head.trees)} rounds")
        ens.history.append(nll)
        if val.active and val.record(float(np.mean(lss_nll(val.y, val_mu, val_s))), rnd):
            break
    if val.active:
        ens.val_history = val.history
        if early_stopping_rounds is not None:
            del mu_head.trees[val.best_round:]
            del s_head.trees[val.best_round:]
            del ens.history[val.best_round + 1:]
    return ens


def predict_distribution(ens: LssEnsemble, x) -> FittedLognormal | list[FittedLognormal]:
    """Per-instance lognormal. A single row gives one distribution, a matrix a list."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    X = x[None, :] if single else x
    if X.shape[1] != ens.n_features:
        raise ShapeError(f"expected {ens.n_features} features, got {X.shape[1]}")
    mu, sigma = ens.predict_params(X)
    dists = [FittedLognormal(float(m), float(s)) for m, s in zip(mu, sigma)]
    return dists[0] if single else dists


def write_predictions_csv(ens: LssEnsemble, X, path: str | Path) -> None:
    """Per-row lognormal parameters as CSV ``row_id,mu,sigma``."""
    mu, sigma = ens.predict_params(X)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["row_id", "mu", "sigma"])
        for i, (m, s) in enumerate(zip(mu.tolist(), sigma.tolist())):
            w.writerow([i, repr(m), repr(s)])
