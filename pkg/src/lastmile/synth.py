"""Synthetic cities with planted region archetypes and known service-time laws.

Four archetypes, each with its own tag-count profile and lognormal service
time, are laid out as a Voronoi patchwork over a hex disk. Everything is a
pure function of the seed.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import geo
from .errors import ConfigError
from .geo import GeoPoint, HexCellId, Tessellation
from .ingest import DeliveryRecord, RegionFeatureMatrix
from .vocab import TagVocabulary, default_vocab

N_ARCHETYPES = 4
ARCHETYPE_NAMES = ("downtown core", "transport hub", "residential", "green & leisure")

# ln-seconds shift of each archetype at context_effect=1
MU_OFFSETS = np.array([0.55, 0.2, -0.15, -0.6])
# log-scale shift of sigma at context_effect=1
LOG_SIGMA_OFFSETS = np.array([0.10, -0.05, -0.10, 0.05])

SYNTH_TAGS = {
    "Built Environment": ["building=apartments", "building=house", "building=residential", "landuse=residential"],
    "Transportation": ["highway=service", "highway=bus_stop", "railway=station", "amenity=parking"],
    "Natural Elements": ["landuse=grass", "landuse=forest", "landuse=meadow", "landuse=orchard"],
    "Amenities": ["amenity=restaurant", "amenity=cafe", "amenity=fast_food", "amenity=bench"],
    "Leisure & Recreation": ["leisure=park", "leisure=playground", "leisure=pitch", "sport=soccer"],
    "Barriers & Boundaries": ["barrier=fence", "barrier=wall", "barrier=hedge", "barrier=gate"],
    "Utilities & Services": ["power=pole", "amenity=post_box", "man_made=street_cabinet", "emergency=fire_hydrant"],
    "Commerce & Industry": ["shop=clothes", "shop=convenience", "office=company", "shop=supermarket"],
    "Historical & Cultural": ["historic=memorial", "tourism=artwork", "amenity=place_of_worship", "historic=building"],
}

# super-tags each archetype over-represents
PROFILES = (
    ("Commerce & Industry", "Amenities", "Historical & Cultural"),
    ("Transportation", "Utilities & Services"),
    ("Built Environment", "Barriers & Boundaries"),
    ("Leisure & Recreation", "Natural Elements"),
)
BASE_RATE = 0.25
HIGH_RATE = 5.0
ZERO_INFLATION = 0.3


@dataclass
class SynthGroundTruth:
    cells: list[HexCellId]
    archetype: np.ndarray
    mu_true: np.ndarray
    sigma_true: np.ndarray
    seed: int

    def __post_init__(self):
        if np.any(self.sigma_true <= 0):
            raise ConfigError("sigma_true must be positive")


def synth_vocab() -> TagVocabulary:
    tags = [t for group in SYNTH_TAGS.values() for t in group]
    base = default_vocab(754)
    missing = [t for t in tags if base.index(t) is None]
    assert not missing, missing
    return base.subset(tags)


def archetype_rates(vocab: TagVocabulary) -> np.ndarray:
    """Poisson rate per (archetype, tag)."""
    rates = np.full((N_ARCHETYPES, len(vocab)), BASE_RATE)
    for a, emphasised in enumerate(PROFILES):
        for name in emphasised:
            for tag in SYNTH_TAGS[name]:
                j = vocab.index(tag)
                if j is not None:
                    rates[a, j] = HIGH_RATE
    return rates


def _spread_seeds(offsets: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` cell indices in random order, skipping cells too close to an earlier pick.

    The spacing is about the radius of a region of average size; if it
    cannot be met the remaining picks ignore it.
    """
    spacing = max(1.0, 0.8 * math.sqrt(len(offsets) / (3.0 * n)))
    order = rng.permutation(len(offsets))
    picked: list[int] = []
    for i in order:
        if len(picked) == n:
            break
        if not picked or np.min(geo.axial_distance(offsets[picked, 0] - offsets[i, 0],
                                                   offsets[picked, 1] - offsets[i, 1])) >= spacing:
            picked.append(int(i))
    for i in order:
        if len(picked) == n:
            break
        if int(i) not in picked:
            picked.append(int(i))
    return np.array(picked)


def synth_city(seed: int, n_cells: int, n_deliveries: int, context_effect: float, *,
               city_id: str = "synth", origin: GeoPoint = GeoPoint(42.3601, -71.0589),
               edge_m: float = geo.DEFAULT_EDGE_M, n_regions: int = 8,
               base_mu: float = math.log(150.0), base_sigma: float = 0.6,
               vehicle: str = "van") -> tuple[RegionFeatureMatrix, list[DeliveryRecord], SynthGroundTruth]:
    if n_cells < 16:
        raise ConfigError(f"n_cells must be >= 16, got {n_cells}")
    if n_deliveries < 10 * n_cells:
        raise ConfigError(f"n_deliveries must be >= 10 * n_cells ({10 * n_cells}), got {n_deliveries}")
    if not context_effect >= 0:
        raise ConfigError(f"context_effect must be >= 0, got {context_effect}")
    rng = np.random.default_rng(seed)
    tess = Tessellation(city_id, origin, edge_m)

    radius = 0
    while 3 * radius * (radius + 1) + 1 < n_cells:
        radius += 1
    offsets = np.array(geo.spiral_offsets(radius)[:n_cells])
    cells = [HexCellId(int(q), int(r), tess) for q, r in offsets]

    # Voronoi patchwork: archetypes take turns over the region seeds so each
    # gets an equal share of regions
    n_regions = max(n_regions, N_ARCHETYPES)
    seeds = _spread_seeds(offsets, n_regions, rng)
    seed_arch = rng.permutation(np.resize(np.arange(N_ARCHETYPES), n_regions))
    dq = offsets[:, None, 0] - offsets[None, seeds, 0]
    dr = offsets[:, None, 1] - offsets[None, seeds, 1]
    nearest = np.argmin(geo.axial_distance(dq, dr), axis=1)
    archetype = seed_arch[nearest]

    vocab = synth_vocab()
    rates = archetype_rates(vocab)[archetype]
    density = rng.gamma(8.0, 1.0 / 8.0, size=(n_cells, 1))
    counts = rng.poisson(rates * density)
    counts[rng.random(counts.shape) < ZERO_INFLATION] = 0
    features = RegionFeatureMatrix(cells, vocab, counts.astype(np.int64))

    mu_true = base_mu + context_effect * MU_OFFSETS[archetype]
    sigma_true = base_sigma * np.exp(context_effect * LOG_SIGMA_OFFSETS[archetype])
    truth = SynthGroundTruth(cells, archetype, mu_true, sigma_true, seed)

    which = rng.integers(0, n_cells, size=n_deliveries)
    # uniform in a disk well inside the hexagon so the point indexes back to its cell
    ang = rng.uniform(0.0, 2 * math.pi, n_deliveries)
    rad = 0.8 * (math.sqrt(3) / 2) * edge_m * np.sqrt(rng.random(n_deliveries))
    cx, cy = geo.axial_to_xy(offsets[which, 0], offsets[which, 1], edge_m)
    lat, lon = geo.unproject_many(tess, cx + rad * np.cos(ang), cy + rad * np.sin(ang))
    times = np.exp(mu_true[which] + sigma_true[which] * rng.standard_normal(n_deliveries))
    times = np.clip(times, 1e-3, 86_400.0)
    deliveries = [DeliveryRecord(city_id, GeoPoint(float(a), float(b)), cells[k], float(t), vehicle, None)
                  for a, b, k, t in zip(lat, lon, which, times)]
    return features, deliveries, truth


def write_truth_csv(truth: SynthGroundTruth, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["cell_q", "cell_r", "archetype", "mu_true", "sigma_true"])
        for c, a, m, s in zip(truth.cells, truth.archetype, truth.mu_true, truth.sigma_true):
            w.writerow([c.q, c.r, int(a), repr(float(m)), repr(float(s))])


def read_truth_csv(path: str | Path, tess: Tessellation) -> SynthGroundTruth:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    cells = [HexCellId(int(r["cell_q"]), int(r["cell_r"]), tess) for r in rows]
    return SynthGroundTruth(cells, np.array([int(r["archetype"]) for r in rows]),
                            np.array([float(r["mu_true"]) for r in rows]),
                            np.array([float(r["sigma_true"]) for r in rows]), seed=-1)
