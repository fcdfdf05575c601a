"""Hexagon-level cross-validation, training schemes and exceedance maps.

Every delivery of a hexagon lands on the same side of a split, so no test
hexagon is ever seen in training. A corpus is a mapping ``city_id ->
CityData``; a scheme says which cities train and which one is scored.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .baselines import FittedLognormal, city_model, inv_norm_cdf, kring_model, pool_by_cell
from .boosting import LssEnsemble, gbt_fit, lss_fit
from .conformal import CpsDistribution, CpsModel, cps_calibrate, cps_interval
from .embed import EmbeddingMatrix
from .errors import ComputationError, ConfigError, TooFewHexes
from .geo import HexCellId, Tessellation, cell_polygon
from .ingest import DeliveryRecord, RegionFeatureMatrix
from .metrics import EvalReport, FoldScores, crps_lognormal, crps_step, interval_stats, pinball

SCHEMES = ("city_specific", "transfer", "full")
MODEL_KINDS = ("city", "kring3", "cps_geo", "lss_geo", "lss_osm")
FEATURE_KINDS = ("embedding", "osm_counts")
DEFAULT_THRESHOLDS = (150.0, 300.0, 600.0)


@dataclass
class CityData:
    city_id: str
    tess: Tessellation
    features: RegionFeatureMatrix | None
    deliveries: list[DeliveryRecord]
    embeddings: EmbeddingMatrix | None = None


@dataclass
class ExperimentConfig:
    k: int = 5
    seed: int = 0
    n_trees: int = 200
    learning_rate: float = 0.1
    max_depth: int = 4
    min_child_weight: float = 5.0
    lambda_reg: float = 1.0
    n_bins: int = 5
    min_cal: int = 50
    cal_fraction: float = 0.25
    val_fraction: float = 0.2
    early_stopping_rounds: int | None = 20
    kring_k: int = 3
    kring_min_n: int = 20
    leaky_kring: bool = False
    coverage: float = 0.90

    def __post_init__(self):
        if self.k < 2:
            raise ConfigError(f"k must be >= 2, got {self.k}")
        if not 0 < self.cal_fraction < 1:
            raise ConfigError(f"cal_fraction must be in (0, 1), got {self.cal_fraction}")
        if not 0 < self.val_fraction < 1:
            raise ConfigError(f"val_fraction must be in (0, 1), got {self.val_fraction}")
        if not 0 < self.coverage < 1:
            raise ConfigError(f"coverage must be in (0, 1), got {self.coverage}")


# -- folds --------------------------------------------------------------------

@dataclass(frozen=True)
class FoldPlan:
    hexes: tuple[HexCellId, ...]
    test_sets: tuple[frozenset, ...]
    seed: int

    @property
    def k(self) -> int:
        return len(self.test_sets)

    def test_hexes(self, i: int) -> frozenset:
        return self.test_sets[i]

    def train_hexes(self, i: int) -> frozenset:
        return frozenset(self.hexes) - self.test_sets[i]

    def split(self, deliveries: Sequence[DeliveryRecord], i: int):
        test = self.test_sets[i]
        train = [d for d in deliveries if d.cell not in test]
        held = [d for d in deliveries if d.cell in test]
        return train, held


def hex_kfold(deliveries: Sequence[DeliveryRecord], k: int = 5, seed: int = 0) -> FoldPlan:
    """Shuffle the distinct delivery hexes by ``seed`` and cut them into ``k`` near-equal folds."""
    hexes = sorted({d.cell for d in deliveries})
    if k < 2 or len(hexes) < k:
        raise TooFewHexes(f"{len(hexes)} distinct hexes cannot make {k} folds")
    perm = np.random.default_rng(seed).permutation(len(hexes))
    groups = np.array_split(perm, k)
    return FoldPlan(tuple(hexes), tuple(frozenset(hexes[j] for j in g) for g in groups), seed)


@dataclass(frozen=True)
class SchemeSpec:
    scheme: str
    target_city: str
    source_cities: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "source_cities", tuple(self.source_cities))
        if self.scheme not in SCHEMES:
            raise ConfigError(f"scheme must be one of {SCHEMES}, got {self.scheme!r}")
        if self.scheme == "city_specific" and set(self.source_cities) - {self.target_city}:
            raise ConfigError("city_specific trains on the target city only")
        if self.scheme == "transfer":
            if self.target_city in self.source_cities:
                raise ConfigError("transfer must exclude the target city from training")
            if not self.source_cities:
                raise ConfigError("transfer needs at least one source city besides the target")
        if self.scheme == "full" and self.target_city not in self.source_cities:
            raise ConfigError("full must include the target city among the sources")

    @classmethod
    def for_corpus(cls, scheme: str, target_city: str, cities: Sequence[str]) -> SchemeSpec:
        """Default sources: the target alone, every other city, or every city."""
        if target_city not in cities:
            raise ConfigError(f"target city {target_city!r} not in corpus {sorted(cities)}")
        others = tuple(sorted(c for c in cities if c != target_city))
        sources = {"city_specific": (target_city,), "transfer": others,
                   "full": tuple(sorted(cities))}.get(scheme, ())
        return cls(scheme, target_city, sources)


# -- models -------------------------------------------------------------------

def feature_rows(city: CityData, cells: Sequence[HexCellId], features: str) -> np.ndarray:
    if features == "embedding":
        if city.embeddings is None:
            raise ConfigError(f"city {city.city_id!r} has no embeddings; run the embed step first")
        missing = [c for c in cells if city.embeddings.row(c) is None]
        if missing:
            raise ConfigError(f"{len(missing)} cells of {city.city_id!r} lack embeddings, e.g. {missing[0].key}")
        return city.embeddings.lookup(cells)
    if features == "osm_counts":
        if city.features is None:
            raise ConfigError(f"city {city.city_id!r} has no feature matrix")
        m = city.features
        # a cell with no mapped objects has all-zero counts
        out = np.zeros((len(cells), len(m.vocab)))
        for i, c in enumerate(cells):
            row = m.row(c)
            if row is not None:
                out[i] = m.counts[row]
        return out
    raise ConfigError(f"features must be one of {FEATURE_KINDS}, got {features!r}")


def _design(corpus: Mapping[str, CityData], deliveries: Sequence[DeliveryRecord], features: str):
    X = _design_grouped(corpus, deliveries, features)
    y = np.array([d.service_time_s for d in deliveries])
    return X, y


def _design_grouped(corpus, deliveries, features):
    # one feature lookup per distinct cell, then broadcast to deliveries
    cells = sorted({d.cell for d in deliveries})
    index = {c: i for i, c in enumerate(cells)}
    by_city: dict[str, list[HexCellId]] = {}
    for c in cells:
        by_city.setdefault(c.city_id, []).append(c)
    rows = {}
    for cid, cs in by_city.items():
        for c, r in zip(cs, feature_rows(corpus[cid], cs, features)):
            rows[c] = r
    table = np.array([rows[c] for c in cells])
    return table[[index[d.cell] for d in deliveries]]


@dataclass
class FittedModel:
    """A trained model of one kind plus what it needs to predict a cell."""
    kind: str
    features: str | None
    city: FittedLognormal | None = None
    pools: dict | None = None
    pool_city: str | None = None
    lss: LssEnsemble | None = None
    cps: CpsModel | None = None
    config: ExperimentConfig = field(default_factory=ExperimentConfig)

    def predict_cells(self, corpus: Mapping[str, CityData], cells: Sequence[HexCellId]) -> list:
        cells = list(cells)
        if self.kind == "city":
            return [self.city] * len(cells)
        if self.kind == "kring3":
            out = []
            for c in cells:
                pools = self.pools if c.city_id == self.pool_city else {}
                out.append(kring_model(c, pools, self.config.kring_k, self.config.kring_min_n, city=self.city))
            return out
        if not cells:
            return []
        X = _design_grouped(corpus, [_Probe(c) for c in cells], self.features)
        if self.lss is not None:
            mu, sigma = self.lss.predict_params(X)
            return [FittedLognormal(float(m), float(s)) for m, s in zip(mu, sigma)]
        yhat = self.cps.base.predict(X)
        cats = self.cps.category(yhat)
        return [CpsDistribution(float(p), p + self.cps.residuals[k]) for p, k in zip(yhat, cats)]

    def to_dict(self) -> dict:
        d = {"version": 1, "kind": self.kind, "features": self.features, "config": asdict(self.config)}
        if self.city is not None:
            d["city"] = self.city.to_dict()
        if self.pools is not None:
            d["pool_city"] = self.pool_city
            d["pools"] = [[q, r, v.tolist()] for (q, r), v in sorted(self.pools.items())]
        if self.lss is not None:
            d["lss"] = self.lss.to_dict()
        if self.cps is not None:
            d["cps"] = self.cps.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> FittedModel:
        if d.get("version") != 1:
            raise ConfigError(f"unsupported model file version {d.get('version')}")
        pools = {(q, r): np.array(v, dtype=float) for q, r, v in d["pools"]} if "pools" in d else None
        return cls(d["kind"], d["features"],
                   FittedLognormal.from_dict(d["city"]) if "city" in d else None,
                   pools, d.get("pool_city"),
                   LssEnsemble.from_dict(d["lss"]) if "lss" in d else None,
                   CpsModel.from_dict(d["cps"]) if "cps" in d else None,
                   ExperimentConfig(**d["config"]))


@dataclass(frozen=True)
class _Probe:
    cell: HexCellId

    @property
    def city_id(self) -> str:
        return self.cell.city_id


def holdout_split(deliveries: Sequence[DeliveryRecord], fraction: float, seed: int):
    """Hold out ``fraction`` of each city's hexes (not deliveries).

    Returns ``(kept, held_out)``; used for conformal calibration and for
    early-stopping validation.
    """
    rng = np.random.default_rng(seed)
    by_city: dict[str, list[HexCellId]] = {}
    for c in sorted({d.cell for d in deliveries}):
        by_city.setdefault(c.city_id, []).append(c)
    cal_hexes = set()
    for cid in sorted(by_city):
        hexes = by_city[cid]
        n_cal = max(1, int(round(fraction * len(hexes)))) if len(hexes) > 1 else 0
        cal_hexes.update(hexes[j] for j in rng.permutation(len(hexes))[:n_cal])
    fit = [d for d in deliveries if d.cell not in cal_hexes]
    cal = [d for d in deliveries if d.cell in cal_hexes]
    return fit, cal


def fit_model(kind: str, corpus: Mapping[str, CityData], train: Sequence[DeliveryRecord],
              target_city: str, features: str = "embedding",
              config: ExperimentConfig = ExperimentConfig(), seed: int = 0) -> FittedModel:
    if kind not in MODEL_KINDS:
        raise ConfigError(f"model must be one of {MODEL_KINDS}, got {kind!r}")
    if kind == "lss_osm":
        features = "osm_counts"
    if features not in FEATURE_KINDS:
        raise ConfigError(f"features must be one of {FEATURE_KINDS}, got {features!r}")
    c = config
    if kind == "city":
        return FittedModel(kind, None, city=city_model(train), config=c)
    if kind == "kring3":
        local = [d for d in train if d.city_id == target_city]
        return FittedModel(kind, None, city=city_model(train), pools=pool_by_cell(local),
                           pool_city=target_city, config=c)
    if kind in ("lss_geo", "lss_osm"):
        eval_set = None
        if c.early_stopping_rounds is not None:
            # stop on the NLL of held-out hexes so the heads do not memorise cells
            train, held = holdout_split(train, c.val_fraction, seed)
            eval_set = _design(corpus, held, features)
        X, y = _design(corpus, train, features)
        ens = lss_fit(X, y, c.n_trees, c.learning_rate, c.max_depth, c.min_child_weight, c.lambda_reg,
                      eval_set=eval_set, early_stopping_rounds=c.early_stopping_rounds)
        return FittedModel(kind, features, lss=ens, config=c)
    fit, cal = holdout_split(train, c.cal_fraction, seed)
    X, y = _design(corpus, fit, features)
    base = gbt_fit(X, y, c.n_trees, c.learning_rate, c.max_depth, c.min_child_weight, c.lambda_reg)
    X_cal, y_cal = _design(corpus, cal, features)
    # shrink the Mondrian taxonomy when calibration data is scarce
    n_bins = max(1, min(c.n_bins, len(y_cal) // c.min_cal))
    cps = cps_calibrate(base, X_cal, y_cal, n_bins, min(c.min_cal, len(y_cal)))
    return FittedModel(kind, features, cps=cps, config=c)


# -- scoring ------------------------------------------------------------------

def score_predictions(dists: Sequence, y, coverage: float = 0.90) -> dict[str, float]:
    """Mean CRPS, interval coverage and width, and pinball at 0.5 and 0.95."""
    y = np.asarray(y, dtype=float)
    if len(dists) != len(y) or len(y) == 0:
        raise ConfigError("need one distribution per observation")
    a = (1.0 - coverage) / 2.0
    if all(isinstance(d, FittedLognormal) for d in dists):
        mu = np.array([d.mu for d in dists])
        sigma = np.array([d.sigma for d in dists])
        crps = np.atleast_1d(crps_lognormal((mu, sigma), y))
        z = {t: np.exp(mu + sigma * float(inv_norm_cdf(t))) for t in (a, 1 - a, 0.95)}
        z[0.5] = np.exp(mu)
        lo, hi = z[a], z[1 - a]
        q50, q95 = z[0.5], z[0.95]
    else:
        crps = np.array([crps_step(d, t) for d, t in zip(dists, y)])
        iv = np.array([cps_interval(d, coverage) for d in dists])
        lo, hi = iv[:, 0], iv[:, 1]
        q50 = np.array([d.quantile(0.5) for d in dists])
        q95 = np.array([d.quantile(0.95) for d in dists])
    cov, width = interval_stats(np.column_stack([lo, hi]), y)
    return {"crps": float(np.mean(crps)), "coverage": cov, "width": width,
            "pinball_p50": float(np.mean(pinball(y, q50, 0.5))),
            "pinball_p95": float(np.mean(pinball(y, q95, 0.95)))}


def _check_no_leak(train: Sequence[DeliveryRecord], test: Sequence[DeliveryRecord]) -> None:
    overlap = {d.cell for d in train} & {d.cell for d in test}
    if overlap:
        raise ComputationError(f"{len(overlap)} test hexes leaked into training, e.g. {min(overlap).key}")


def run_experiment(corpus: Mapping[str, CityData], scheme: SchemeSpec, model_kind: str,
                   features: str = "embedding", config: ExperimentConfig = ExperimentConfig()) -> EvalReport:
    """Cross-validate one model under one scheme on the scheme's target city."""
    if model_kind not in MODEL_KINDS:
        raise ConfigError(f"model must be one of {MODEL_KINDS}, got {model_kind!r}")
    for cid in (scheme.target_city, *scheme.source_cities):
        if cid not in corpus:
            raise ConfigError(f"city {cid!r} not in corpus")
    target = corpus[scheme.target_city]
    plan = hex_kfold(target.deliveries, config.k, config.seed)
    others = [d for cid in scheme.source_cities if cid != scheme.target_city for d in corpus[cid].deliveries]
    folds = []
    for i in range(plan.k):
        fold_train, test = plan.split(target.deliveries, i)
        train = others if scheme.scheme == "transfer" else others + fold_train
        _check_no_leak(train, test)
        model = fit_model(model_kind, corpus, train, scheme.target_city, features, config,
                          seed=config.seed + 1000 * (i + 1))
        if model_kind == "kring3" and config.leaky_kring:
            # evaluation without a split: pools see every target delivery
            model.pools = pool_by_cell(target.deliveries)
        cells = sorted({d.cell for d in test})
        by_cell = dict(zip(cells, model.predict_cells(corpus, cells)))
        dists = [by_cell[d.cell] for d in test]
        try:
            s = score_predictions(dists, [d.service_time_s for d in test], config.coverage)
        except (FloatingPointError, ValueError) as exc:
            raise type(exc)(f"fold {i}: {exc}") from exc
        folds.append(FoldScores(i, len(test), **s))
    return EvalReport.from_folds(model_kind, scheme.scheme, scheme.target_city, folds)


def format_table(reports: Sequence[EvalReport]) -> str:
    """Plain-text comparison table, one row per report."""
    rows = [r.table_row() for r in reports]
    if not rows:
        return ""
    cols = list(rows[0])
    widths = [max(len(c), *(len(r[c]) for r in rows)) for c in cols]
    lines = ["  ".join(c.ljust(w) for c, w in zip(cols, widths))]
    lines += ["  ".join(r[c].ljust(w) for c, w in zip(cols, widths)) for r in rows]
    return "\n".join(line.rstrip() for line in lines) + "\n"


def write_fold_csv(report: EvalReport, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model", "scheme", "city", "fold", "n_test", "crps", "coverage", "width",
                    "pinball_p50", "pinball_p95"])
        for f in report.folds:
            w.writerow([report.model, report.scheme, report.city, f.fold, f.n_test,
                        *(repr(float(getattr(f, k))) for k in ("crps", "coverage", "width",
                                                               "pinball_p50", "pinball_p95"))])


def read_fold_csv(path: str | Path) -> list[FoldScores]:
    with open(path, newline="", encoding="utf-8") as fh:
        return [FoldScores(int(r["fold"]), int(r["n_test"]), float(r["crps"]), float(r["coverage"]),
                           float(r["width"]), float(r["pinball_p50"]), float(r["pinball_p95"]))
                for r in csv.DictReader(fh)]


def write_report_json(reports: Sequence[EvalReport], path: str | Path) -> None:
    Path(path).write_text(json.dumps([r.to_dict() for r in reports], indent=2) + "\n", encoding="utf-8")


# -- exceedance maps ----------------------------------------------------------

def exceedance_map(model, cells: Sequence[HexCellId], thresholds: Sequence[float] = DEFAULT_THRESHOLDS,
                   corpus: Mapping[str, CityData] | None = None) -> dict[HexCellId, dict[str, float]]:
    """``P(T > t) = 1 - cdf(t)`` per cell and threshold.

    ``model`` is a ``FittedModel`` (with ``corpus``), a mapping from cell to
    distribution, or a callable returning a cell's distribution.
    """
    cells = list(cells)
    if isinstance(model, FittedModel):
        dists = model.predict_cells(corpus or {}, cells)
    elif isinstance(model, Mapping):
        dists = [model[c] for c in cells]
    else:
        dists = [model(c) for c in cells]
    out = {}
    for c, d in zip(cells, dists):
        probs = [min(1.0, max(0.0, 1.0 - float(d.cdf(t)))) for t in thresholds]
        # the step CDF can be non-monotone only through rounding; enforce it
        probs = np.minimum.accumulate(probs).tolist()
        out[c] = {f"p_{_fmt(t)}": p for t, p in zip(thresholds, probs)}
    return out


def _fmt(t: float) -> str:
    return str(int(t)) if float(t).is_integer() else repr(float(t))


def exceedance_geojson(probs: Mapping[HexCellId, dict[str, float]]) -> dict:
    features = []
    for c in sorted(probs):
        ring = [[p.lon, p.lat] for p in cell_polygon(c)]
        ring.append(ring[0])
        features.append({"type": "Feature",
                         "geometry": {"type": "Polygon", "coordinates": [ring]},
                         "properties": {"city_id": c.city_id, "q": c.q, "r": c.r, **probs[c]}})
    return {"type": "FeatureCollection", "features": features}


def write_geojson(doc: dict, path: str | Path) -> None:
    Path(path).write_text(json.dumps(doc, separators=(",", ":")) + "\n", encoding="utf-8")


def crps_gain(model: EvalReport, reference: EvalReport) -> float:
    """Relative CRPS improvement of ``model`` over ``reference`` (positive is better)."""
    if not reference.crps_mean > 0 or not math.isfinite(model.crps_mean):
        raise ComputationError("reference CRPS must be positive")
    return 1.0 - model.crps_mean / reference.crps_mean
