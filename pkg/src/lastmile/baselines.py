"""Context-free reference models: lognormals fit by quantile matching.

``city_model`` pools every delivery in a city; ``kring_model`` pools the
deliveries within ``k`` rings of the target hexagon, widening the ring
(then falling back to the city) when the pool is too small.
"""
from __future__ import annotations

import math
from collections.abc import Mapping
from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np
from scipy import special

from . import geo
from .errors import DegenerateSample, DomainError, InsufficientData
from .geo import HexCellId

MIN_SAMPLES = 20

# Acklam's rational approximation, refined below with one Halley step
_A = (-3.969683028665376e+01, 2.209460984245205e+02, -2.759285104469687e+02,
      1.383577518672690e+02, -3.066479806614716e+01, 2.506628277459239e+00)
_B = (-5.447609879822406e+01, 1.615858368580409e+02, -1.556989798598866e+02,
      6.680131188771972e+01, -1.328068155288572e+01)
_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e+00,
      -2.549732539343734e+00, 4.374664141464968e+00, 2.938163982698783e+00)
_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e+00, 3.754408661907416e+00)
_P_LOW = 0.02425


def inv_norm_cdf(tau):
    """Standard normal quantile function. Accepts scalars or arrays."""
    t = np.asarray(tau, dtype=float)
    if np.any(~(t > 0) | ~(t < 1)):
        raise DomainError("inv_norm_cdf needs 0 < tau < 1")
    # the approximation is odd-symmetric about 0.5; evaluate on the lower half
    lo = np.minimum(t, 1.0 - t)
    z = np.empty_like(lo)
    tail = lo < _P_LOW
    if np.any(tail):
        s = np.sqrt(-2.0 * np.log(lo[tail]))
        z[tail] = (((((_C[0] * s + _C[1]) * s + _C[2]) * s + _C[3]) * s + _C[4]) * s + _C[5]) / \
                  ((((_D[0] * s + _D[1]) * s + _D[2]) * s + _D[3]) * s + 1.0)
    mid = ~tail
    if np.any(mid):
        u = lo[mid] - 0.5
        v = u * u
        z[mid] = (((((_A[0] * v + _A[1]) * v + _A[2]) * v + _A[3]) * v + _A[4]) * v + _A[5]) * u / \
                 (((((_B[0] * v + _B[1]) * v + _B[2]) * v + _B[3]) * v + _B[4]) * v + 1.0)
    # Halley refinement against erfc; z is <= 0 here so erfc is well conditioned
    err = 0.5 * special.erfc(-z / math.sqrt(2.0)) - lo
    step = err * math.sqrt(2.0 * math.pi) * np.exp(0.5 * z * z)
    z = z - step / (1.0 + 0.5 * z * step)
    z = np.where(t > 0.5, -z, z)
    z = np.where(t == 0.5, 0.0, z)
    return float(z) if z.ndim == 0 else z


def norm_cdf(z):
    return special.ndtr(z)


class PredictiveDistribution(Protocol):
    def cdf(self, y): ...

    def quantile(self, tau): ...


@dataclass(frozen=True)
class FittedLognormal:
    mu: float
    sigma: float
    n_samples: int = 0
    fallback_used: bool = False
    kind: str = "lognormal"

    def __post_init__(self):
        if not (math.isfinite(self.mu) and math.isfinite(self.sigma)) or self.sigma <= 0:
            raise DomainError(f"invalid lognormal parameters mu={self.mu}, sigma={self.sigma}")

    def cdf(self, y):
        y = np.asarray(y, dtype=float)
        with np.errstate(divide="ignore"):
            z = (np.log(np.where(y > 0, y, 1.0)) - self.mu) / self.sigma
        out = np.where(y > 0, norm_cdf(z), 0.0)
        return float(out) if out.ndim == 0 else out

    def quantile(self, tau):
        tau = np.asarray(tau, dtype=float)
        out = np.exp(self.mu + self.sigma * np.asarray(inv_norm_cdf(np.where(tau == 0.5, 0.5, tau))))
        out = np.where(tau == 0.5, math.exp(self.mu), out)
        return float(out) if out.ndim == 0 else out

    def median(self) -> float:
        return math.exp(self.mu)

    def mean(self) -> float:
        return math.exp(self.mu + 0.5 * self.sigma ** 2)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return np.exp(self.mu + self.sigma * rng.standard_normal(n))

    def to_dict(self) -> dict:
        return {"type": self.kind, "mu": self.mu, "sigma": self.sigma,
                "fallback_used": self.fallback_used, "n_samples": self.n_samples}

    @classmethod
    def from_dict(cls, d: dict) -> FittedLognormal:
        return cls(float(d["mu"]), float(d["sigma"]), int(d.get("n_samples", 0)),
                   bool(d.get("fallback_used", False)), d.get("type", "lognormal"))


@dataclass(frozen=True)
class PointMass:
    """Degenerate distribution at ``value``."""
    value: float

    def cdf(self, y):
        out = (np.asarray(y, dtype=float) >= self.value).astype(float)
        return float(out) if out.ndim == 0 else out

    def quantile(self, tau):
        out = np.full(np.shape(tau), float(self.value))
        return float(out) if out.ndim == 0 else out


def fit_quantile_match(samples, tau_lo: float = 0.5, tau_hi: float = 0.9) -> FittedLognormal:
    """Lognormal whose ``tau_lo``/``tau_hi`` quantiles equal the empirical ones.

    Empirical quantiles use linear interpolation (Hyndman-Fan type 7).
    """
    x = np.asarray(samples, dtype=float).ravel()
    if x.size < MIN_SAMPLES:
        raise InsufficientData(f"need >= {MIN_SAMPLES} samples, got {x.size}")
    if np.any(~(x > 0)):
        raise DomainError("samples must be positive")
    q_lo, q_hi = np.quantile(x, [tau_lo, tau_hi])
    return lognormal_from_quantiles(q_lo, q_hi, tau_lo, tau_hi, n_samples=x.size)


def lognormal_from_quantiles(q_lo: float, q_hi: float, tau_lo: float = 0.5, tau_hi: float = 0.9,
                             n_samples: int = 0) -> FittedLognormal:
    if not q_hi > q_lo:
        raise DegenerateSample(f"q({tau_hi})={q_hi} is not above q({tau_lo})={q_lo}")
    z_lo, z_hi = inv_norm_cdf(tau_lo), inv_norm_cdf(tau_hi)
    sigma = (math.log(q_hi) - math.log(q_lo)) / (z_hi - z_lo)
    mu = math.log(q_lo) - z_lo * sigma
    return FittedLognormal(mu, sigma, n_samples=n_samples)


def _times(deliveries) -> np.ndarray:
    if isinstance(deliveries, np.ndarray):
        return deliveries.astype(float)
    return np.array([d.service_time_s for d in deliveries], dtype=float)


def city_model(deliveries) -> FittedLognormal:
    """City-wide lognormal over all service times (records or a bare array)."""
    t = _times(deliveries)
    if t.size < MIN_SAMPLES:
        raise InsufficientData(f"city model needs >= {MIN_SAMPLES} deliveries, got {t.size}")
    return fit_quantile_match(t)


def pool_by_cell(deliveries) -> dict[tuple[int, int], np.ndarray]:
    pools: dict[tuple[int, int], list] = {}
    for d in deliveries:
        pools.setdefault((d.cell.q, d.cell.r), []).append(d.service_time_s)
    return {k: np.asarray(v, dtype=float) for k, v in pools.items()}


def kring_pool(cell: HexCellId, pools: Mapping, k: int) -> np.ndarray:
    parts = [pools[(cell.q + dq, cell.r + dr)] for dq, dr in geo.spiral_offsets(k)
             if (cell.q + dq, cell.r + dr) in pools]
    return np.concatenate(parts) if parts else np.empty(0)


def kring_model(cell: HexCellId, deliveries, k: int = 3, min_n: int = MIN_SAMPLES,
                city: FittedLognormal | None = None) -> FittedLognormal:
    """Lognormal over deliveries within ``k`` rings of ``cell``.

    ``deliveries`` is a sequence of records or the output of
    ``pool_by_cell``. Pools under ``min_n`` widen to ``k+1`` then ``k+2``;
    after that the city model is used and ``fallback_used`` is set.
    ``city`` may be passed to skip refitting the city model.
    """
    pools = deliveries if isinstance(deliveries, Mapping) else pool_by_cell(deliveries)
    for kk in (k, k + 1, k + 2):
        pool = kring_pool(cell, pools, kk)
        if pool.size >= min_n:
            try:
                return fit_quantile_match(pool)
            except (DegenerateSample, InsufficientData):
                continue
    if city is None:
        everything = np.concatenate(list(pools.values())) if pools else np.empty(0)
        city = city_model(everything)
    return FittedLognormal(city.mu, city.sigma, n_samples=city.n_samples, fallback_used=True)
