"""Scores for distributional forecasts, plus the two rank tests.

CRPS comes in two flavours: an exact piecewise integral for step CDFs
(conformal outputs, ensembles) and a quadrature over the quantile function
for continuous distributions (the lognormal models).
"""
from __future__ import annotations

import itertools
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from scipy import special
from scipy.stats import rankdata

from .errors import DomainError, LengthMismatch, TooFewGroups, TooFewSamples

log = logging.getLogger(__name__)

DEFAULT_NODES = 1024
DEFAULT_TAU_MIN = 1e-4


def pinball(y, yhat_tau, tau: float):
    """Quantile loss: ``tau*(y-yhat)`` above the prediction, ``(1-tau)*(yhat-y)`` below."""
    if not 0 < tau < 1:
        raise DomainError(f"tau must be in (0, 1), got {tau}")
    y = np.asarray(y, dtype=float)
    q = np.asarray(yhat_tau, dtype=float)
    diff = y - q
    out = np.where(diff >= 0, tau * diff, (tau - 1.0) * diff)
    return float(out) if out.ndim == 0 else out


# -- CRPS ---------------------------------------------------------------------

def _atoms_of(dist) -> np.ndarray:
    atoms = getattr(dist, "atoms", dist)
    return np.sort(np.asarray(atoms, dtype=float).ravel())


def crps_step(dist, y: float) -> float:
    """Exact CRPS of the empirical step CDF over ``dist.atoms`` (or an array).

    Integrates ``(F(z) - 1{z >= y})**2`` piecewise over the intervals cut
    by the atoms and the observation.
    """
    atoms = _atoms_of(dist)
    n = atoms.size
    if n == 0:
        raise TooFewSamples("step distribution has no atoms")
    pts = np.sort(np.append(atoms, float(y)))
    left = pts[:-1]
    F = np.searchsorted(atoms, left, side="right") / n
    H = (left >= y).astype(float)
    return float(np.sum((F - H) ** 2 * np.diff(pts)))


def crps_ensemble(atoms, ys) -> np.ndarray:
    """CRPS of one equally weighted atom set against many observations.

    Uses ``E|X - y| - E|X - X'| / 2`` with prefix sums, O((n + m) log n).
    """
    x = _atoms_of(atoms)
    n = x.size
    ys = np.asarray(ys, dtype=float)
    csum = np.concatenate([[0.0], np.cumsum(x)])
    k = np.searchsorted(x, ys, side="right")
    abs_dev = (k * ys - csum[k]) + (csum[-1] - csum[k] - (n - k) * ys)
    i = np.arange(1, n + 1)
    spread = 2.0 * np.sum((2 * i - n - 1) * x) / (n * n)
    return abs_dev / n - 0.5 * spread


def quantile_crps(q_of_u, y, u_star, support_min, upper_partial_expectation,
                  n_nodes: int = DEFAULT_NODES, tau_min: float = DEFAULT_TAU_MIN) -> np.ndarray:
    """CRPS by quadrature of ``2 * int_0^1 pinball_tau(y, q(tau)) dtau``.

    The integral runs over the normal score ``u = Phi^-1(tau)`` between
    ``Phi^-1(tau_min)`` and ``Phi^-1(1 - tau_min)`` (widened to bracket the
    observation) with Gauss-Legendre nodes, split at the kink ``u_star``
    where ``q = y``. The two tails are replaced by the midpoint of their
    analytic bounds.

    q_of_u : callable(u) -> quantile at tau = Phi(u); broadcasts against y
    u_star : normal score of F(y)
    support_min : lower end of the support
    upper_partial_expectation : callable(a) -> int_{1-a}^1 q(tau) dtau
    """
    y = np.atleast_1d(np.asarray(y, dtype=float))
    u_star = np.clip(np.broadcast_to(np.asarray(u_star, dtype=float), y.shape), -8.0, 8.0)
    u_edge = -float(special.ndtri(tau_min))
    u_lo = np.minimum(-u_edge, u_star - 1.0)
    u_hi = np.maximum(u_edge, u_star + 1.0)
    half = n_nodes // 2
    x, w = np.polynomial.legendre.leggauss(half)

    def piece(a, b):
        mid = 0.5 * (a + b)[:, None]
        rad = 0.5 * (b - a)[:, None]
        u = mid + rad * x[None, :]
        tau = special.ndtr(u)
        q = q_of_u(u)
        diff = y[:, None] - q
        rho = np.where(diff >= 0, tau * diff, (tau - 1.0) * diff)
        dens = np.exp(-0.5 * u * u) / math.sqrt(2 * math.pi)
        return 2.0 * rad[:, 0] * np.sum(w[None, :] * rho * dens, axis=1)

    body = piece(u_lo, u_star) + piece(u_star, u_hi)

    a_lo = special.ndtr(u_lo)
    q_a = q_of_u(u_lo[:, None])[:, 0]
    # below tau=a_lo every quantile lies in [support_min, q_a]
    below = y >= q_a
    lo_tail = np.where(below, 0.5 * a_lo ** 2 * ((y - q_a) + (y - support_min)),
                       a_lo * (q_a - y))
    a_hi = special.ndtr(-u_hi)
    q_b = q_of_u(u_hi[:, None])[:, 0]
    pe = upper_partial_expectation(a_hi)
    upper_lo = a_hi ** 2 * (q_b - y)
    upper_hi = 2.0 * a_hi * (pe - a_hi * y)
    hi_tail = np.where(y <= q_b, 0.5 * (upper_lo + upper_hi), 0.5 * upper_hi)
    return body + lo_tail + np.maximum(hi_tail, 0.0)


def crps_lognormal(d, y, n_nodes: int = DEFAULT_NODES, tau_min: float = DEFAULT_TAU_MIN):
    """CRPS of lognormal forecast(s) ``d`` (anything with mu, sigma) at ``y`` > 0.

    ``d`` may carry array-valued mu/sigma matching ``y``; a tuple
    ``(mu, sigma)`` works too.
    """
    mu, sigma = (d if isinstance(d, tuple) else (d.mu, d.sigma))
    y_arr = np.asarray(y, dtype=float)
    if np.any(~(y_arr > 0)):
        raise DomainError("crps_lognormal needs y > 0")
    shape = np.broadcast(y_arr, np.asarray(mu), np.asarray(sigma)).shape
    yb = np.broadcast_to(y_arr, shape).ravel()
    mb = np.broadcast_to(np.asarray(mu, dtype=float), shape).ravel()
    sb = np.broadcast_to(np.asarray(sigma, dtype=float), shape).ravel()
    out = np.empty(yb.size)
    step = 2048
    for s in range(0, yb.size, step):
        m, sg, yy = mb[s:s + step], sb[s:s + step], yb[s:s + step]
        out[s:s + step] = quantile_crps(
            lambda u, m=m, sg=sg: np.exp(m.reshape(-1, *([1] * (np.ndim(u) - 1))) +
                                         sg.reshape(-1, *([1] * (np.ndim(u) - 1))) * u),
            yy, (np.log(yy) - m) / sg, 0.0,
            lambda a, m=m, sg=sg: np.exp(m + 0.5 * sg ** 2) * special.ndtr(sg + special.ndtri(a)),
            n_nodes, tau_min)
    out = out.reshape(shape)
    return float(out) if out.ndim == 0 else out


def crps_uniform(y, lo: float = 0.0, hi: float = 1.0, n_nodes: int = DEFAULT_NODES,
                 tau_min: float = DEFAULT_TAU_MIN):
    """Uniform(lo, hi) through the same quadrature engine (reference check)."""
    y = np.atleast_1d(np.asarray(y, dtype=float))
    width = hi - lo
    frac = np.clip((y - lo) / width, 1e-300, 1 - 1e-16)
    out = quantile_crps(lambda u: lo + width * special.ndtr(u), y, special.ndtri(frac), lo,
                        lambda a: a * hi - 0.5 * width * a * a, n_nodes, tau_min)
    return float(out[0]) if out.size == 1 else out


def interval_stats(intervals, ys) -> tuple[float, float]:
    """(coverage fraction, mean width) of closed intervals ``[lo, hi]``."""
    iv = np.asarray(intervals, dtype=float).reshape(-1, 2)
    ys = np.asarray(ys, dtype=float).ravel()
    if len(iv) != len(ys):
        raise LengthMismatch(f"{len(iv)} intervals vs {len(ys)} observations")
    if len(ys) == 0:
        raise LengthMismatch("no observations")
    covered = (iv[:, 0] <= ys) & (ys <= iv[:, 1])
    return float(covered.mean()), float(np.mean(iv[:, 1] - iv[:, 0]))


# -- rank tests ---------------------------------------------------------------

def _tie_term(ranks_source: np.ndarray) -> float:
    _, counts = np.unique(ranks_source, return_counts=True)
    return float(np.sum(counts ** 3 - counts))


def kruskal_wallis(groups: Sequence[Sequence[float]]) -> tuple[float, float]:
    """Kruskal-Wallis H with tie correction; p from chi-squared(k-1)."""
    groups = [np.asarray(g, dtype=float).ravel() for g in groups]
    if len(groups) < 2:
        raise TooFewGroups(f"need >= 2 groups, got {len(groups)}")
    if any(g.size == 0 for g in groups):
        raise TooFewSamples("empty group")
    if any(g.size < 5 for g in groups):
        log.warning("Kruskal-Wallis with a group under 5 samples; chi-squared p-value is approximate")
    pooled = np.concatenate(groups)
    n = pooled.size
    ranks = rankdata(pooled)
    h, start = 0.0, 0
    for g in groups:
        r = ranks[start:start + g.size]
        h += r.sum() ** 2 / g.size
        start += g.size
    h = 12.0 / (n * (n + 1)) * h - 3.0 * (n + 1)
    correction = 1.0 - _tie_term(pooled) / (n ** 3 - n)
    if correction <= 0:
        return 0.0, 1.0
    h = max(h / correction, 0.0)
    return float(h), float(special.chdtrc(len(groups) - 1, h))


@dataclass(frozen=True)
class RankSumResult:
    u: float
    p: float
    z: float
    exact: bool

    def __iter__(self):
        return iter((self.u, self.p, self.z))


EXACT_LIMIT = 20_000


def rank_sum_u(a, b) -> RankSumResult:
    """Mann-Whitney U of ``a`` against ``b`` (pairs with a > b, ties count half).

    Two-sided p: normal approximation with tie-corrected variance and
    continuity correction when both samples have >= 8 points; otherwise an
    exact permutation distribution over the pooled mid-ranks.
    """
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    if a.size == 0 or b.size == 0:
        raise TooFewSamples("both samples must be non-empty")
    na, nb = a.size, b.size
    n = na + nb
    pooled = np.concatenate([a, b])
    ranks = rankdata(pooled)
    u = float(ranks[:na].sum() - na * (na + 1) / 2.0)
    mean = na * nb / 2.0
    var = na * nb / 12.0 * ((n + 1) - _tie_term(pooled) / (n * (n - 1)))
    z = 0.0 if var <= 0 else (u - mean - math.copysign(0.5, u - mean) * (u != mean)) / math.sqrt(var)
    if min(na, nb) >= 8 or math.comb(n, na) > EXACT_LIMIT:
        p = 1.0 if var <= 0 else float(min(1.0, 2.0 * special.ndtr(-abs(z))))
        return RankSumResult(u, p, float(z), False)
    # exact: every way of choosing which pooled ranks belong to a
    dev = abs(u - mean)
    extreme = total = 0
    for idx in itertools.combinations(range(n), na):
        uu = ranks[list(idx)].sum() - na * (na + 1) / 2.0
        extreme += abs(uu - mean) >= dev - 1e-9
        total += 1
    return RankSumResult(u, extreme / total, float(z), True)


# -- report -------------------------------------------------------------------

SCORE_FIELDS = ("crps", "coverage", "width", "pinball_p50", "pinball_p95")


@dataclass
class FoldScores:
    fold: int
    n_test: int
    crps: float
    coverage: float
    width: float
    pinball_p50: float
    pinball_p95: float


@dataclass
class EvalReport:
    model: str
    scheme: str
    city: str
    crps_mean: float
    crps_std: float
    coverage: float
    coverage_std: float
    width_mean: float
    width_std: float
    pinball_p50: float
    pinball_p50_std: float
    pinball_p95: float
    pinball_p95_std: float
    folds: list[FoldScores] = field(default_factory=list)

    @classmethod
    def from_folds(cls, model: str, scheme: str, city: str, folds: list[FoldScores]) -> EvalReport:
        arr = {f: np.array([getattr(s, f) for s in folds]) for f in SCORE_FIELDS}
        return cls(model, scheme, city,
                   float(arr["crps"].mean()), float(arr["crps"].std()),
                   float(arr["coverage"].mean()), float(arr["coverage"].std()),
                   float(arr["width"].mean()), float(arr["width"].std()),
                   float(arr["pinball_p50"].mean()), float(arr["pinball_p50"].std()),
                   float(arr["pinball_p95"].mean()), float(arr["pinball_p95"].std()),
                   list(folds))

    def table_row(self) -> dict[str, str]:
        """Columns of the comparison table (coverage in percent)."""
        return {
            "City": self.city,
            "Model": self.model,
            "CRPS (s)": f"{self.crps_mean:.1f}±{self.crps_std:.1f}",
            "Coverage (%)": f"{100 * self.coverage:.1f}±{100 * self.coverage_std:.1f}",
            "Width (s)": f"{self.width_mean:.1f}±{self.width_std:.1f}",
            "P50 (s)": f"{self.pinball_p50:.1f}±{self.pinball_p50_std:.1f}",
            "P95 (s)": f"{self.pinball_p95:.1f}±{self.pinball_p95_std:.1f}",
        }

    def to_dict(self) -> dict:
        d = asdict(self)
        d["table"] = self.table_row()
        return d
