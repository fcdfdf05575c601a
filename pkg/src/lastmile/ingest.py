"""Loading tagged geometries and deliveries; per-hexagon tag counts."""
from __future__ import annotations

import csv
import json
import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import geo
from .errors import (EmptyCollection, IngestError, OutOfRange, ParseError,
                     RowValidationError, SchemaError, ValidationError)
from .geo import GeoPoint, HexCellId, Tessellation
from .vocab import SUPER_TAGS, TagVocabulary

log = logging.getLogger(__name__)

VEHICLES = ("van", "cargo_bike")
MAX_SERVICE_TIME_S = 86_400.0
MAX_BAD_ROW_FRACTION = 0.10
OUT_OF_RANGE_KEY = "<out_of_range>"


@dataclass
class RegionFeatureMatrix:
    cells: list[HexCellId]
    vocab: TagVocabulary
    counts: np.ndarray
    drop_report: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        self.counts = np.asarray(self.counts)
        if self.counts.shape != (len(self.cells), len(self.vocab)):
            raise ValidationError(f"counts shape {self.counts.shape} != ({len(self.cells)}, {len(self.vocab)})")
        if np.any(self.counts < 0):
            raise ValidationError("negative tag counts")
        self._row = {c: i for i, c in enumerate(self.cells)}
        if len(self._row) != len(self.cells):
            raise ValidationError("duplicate cells in feature matrix")

    @property
    def tess(self) -> Tessellation:
        return self.cells[0].tess

    def row(self, cell: HexCellId) -> int | None:
        return self._row.get(cell)

    def __contains__(self, cell):
        return cell in self._row

    def counts_for(self, cell: HexCellId) -> np.ndarray:
        i = self._row.get(cell)
        if i is None:
            return np.zeros(len(self.vocab), dtype=self.counts.dtype)
        return self.counts[i]


@dataclass(frozen=True)
class DeliveryRecord:
    city_id: str
    point: GeoPoint
    cell: HexCellId
    service_time_s: float
    vehicle: str = "van"
    route_id: str | None = None


# -- GeoJSON ------------------------------------------------------------------

def load_tagged_geojson(path: str | Path) -> list[tuple[GeoPoint, dict[str, str]]]:
    """Read a FeatureCollection and reduce each feature to (point, tags)."""
    raw = Path(path).read_bytes()
    try:
        doc = json.loads(raw)
    except json.JSONDecodeError as e:
        raise ParseError(f"{path}: invalid JSON at byte offset {e.pos} (line {e.lineno}): {e.msg}") from e
    return parse_feature_collection(doc, source=str(path))


def parse_feature_collection(doc, source: str = "<memory>") -> list[tuple[GeoPoint, dict[str, str]]]:
    if not isinstance(doc, dict) or doc.get("type") != "FeatureCollection":
        raise ParseError(f"{source}: not a GeoJSON FeatureCollection")
    features = doc.get("features")
    if not isinstance(features, list):
        raise ParseError(f"{source}: 'features' must be a list")
    if not features:
        raise EmptyCollection(f"{source}: no features")
    out = []
    for i, feat in enumerate(features):
        try:
            point = representative_point(feat["geometry"])
            props = feat.get("properties") or {}
            if not isinstance(props, dict):
                raise TypeError("properties must be an object")
            tags = {str(k): str(v) for k, v in props.items() if v is not None and not isinstance(v, (dict, list))}
        except (KeyError, TypeError, IndexError, ValueError) as e:
            raise ParseError(f"{source}: feature {i}: {e}") from e
        out.append((point, tags))
    return out


def representative_point(geometry: dict) -> GeoPoint:
    """Point itself, first vertex of a line, centroid of a polygon's outer ring."""
    kind = geometry["type"]
    coords = geometry["coordinates"]
    if kind == "Point":
        lon, lat = coords[:2]
    elif kind in ("LineString", "MultiPoint"):
        lon, lat = coords[0][:2]
    elif kind == "MultiLineString":
        lon, lat = coords[0][0][:2]
    elif kind == "Polygon":
        lon, lat = ring_centroid(coords[0])
    elif kind == "MultiPolygon":
        lon, lat = ring_centroid(coords[0][0])
    else:
        raise ValueError(f"unsupported geometry type {kind!r}")
    return GeoPoint(float(lat), float(lon))


def ring_centroid(ring: Sequence[Sequence[float]]) -> tuple[float, float]:
    pts = np.asarray([c[:2] for c in ring], dtype=float)
    if len(pts) > 1 and np.array_equal(pts[0], pts[-1]):
        pts = pts[:-1]
    if len(pts) == 0:
        raise ValueError("empty ring")
    x, y = pts[:, 0], pts[:, 1]
    x1, y1 = np.roll(x, -1), np.roll(y, -1)
    cross = x * y1 - x1 * y
    area = cross.sum() / 2
    if abs(area) < 1e-18:
        return float(x.mean()), float(y.mean())
    cx = ((x + x1) * cross).sum() / (6 * area)
    cy = ((y + y1) * cross).sum() / (6 * area)
    return float(cx), float(cy)


# -- feature matrix -----------------------------------------------------------

def build_feature_matrix(records: Iterable[tuple[GeoPoint, dict[str, str]]], tess: Tessellation,
                         vocab: TagVocabulary, cells: Sequence[HexCellId] | None = None) -> RegionFeatureMatrix:
    """Count vocabulary tags per hexagon.

    Tags outside the vocabulary are tallied in ``drop_report``; so are
    records too far from the origin. Without ``cells`` the output holds
    only cells that received at least one count, sorted by ``(q, r)``.
    With ``cells`` the output rows are exactly those cells (zeros allowed)
    and counts falling elsewhere are dropped.
    """
    if len(vocab) == 0:
        raise ValidationError("empty vocabulary")
    tally: dict[tuple[int, int], Counter] = {}
    drops: Counter = Counter()
    for point, tags in records:
        try:
            cell = geo.point_to_cell(tess, point)
        except OutOfRange:
            drops[OUT_OF_RANGE_KEY] += 1
            continue
        row = tally.setdefault((cell.q, cell.r), Counter())
        for k, v in tags.items():
            j = vocab.index(f"{k}={v}")
            if j is None:
                drops[f"{k}={v}"] += 1
            else:
                row[j] += 1
    if cells is None:
        keys = sorted(k for k, row in tally.items() if row)
        cells = [HexCellId(q, r, tess) for q, r in keys]
    else:
        cells = list(cells)
        wanted = {(c.q, c.r) for c in cells}
        for key, row in tally.items():
            if key not in wanted and row:
                drops[OUT_OF_RANGE_KEY] += sum(row.values())
    counts = np.zeros((len(cells), len(vocab)), dtype=np.int64)
    for i, c in enumerate(cells):
        for j, n in tally.get((c.q, c.r), {}).items():
            counts[i, j] = n
    return RegionFeatureMatrix(cells, vocab, counts, dict(sorted(drops.items())))


def super_tag_rollup(m: RegionFeatureMatrix) -> np.ndarray:
    """Sum subtag columns into the nine super-tag columns (first regex match wins)."""
    out = np.zeros((len(m.cells), len(SUPER_TAGS)), dtype=m.counts.dtype)
    for j, col in enumerate(m.vocab.super_columns()):
        if col is not None:
            out[:, col] += m.counts[:, j]
    return out


# -- deliveries ---------------------------------------------------------------

DELIVERY_COLUMNS = ("city_id", "lat", "lon", "service_time_s", "vehicle")


def read_deliveries(path: str | Path, tess: Tessellation) -> tuple[list[DeliveryRecord], list[RowValidationError]]:
    """Parse a deliveries CSV, returning good records and per-row errors.

    Row numbers count data rows from 1.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in DELIVERY_COLUMNS if c not in header]
        if missing:
            raise SchemaError(f"{path}: missing columns {missing}; expected {','.join(DELIVERY_COLUMNS)}[,route_id]")
        records, errors = [], []
        for i, row in enumerate(reader, start=1):
            try:
                records.append(parse_delivery_row(row, tess, i))
            except RowValidationError as e:
                errors.append(e)
    return records, errors


def parse_delivery_row(row: dict, tess: Tessellation, i: int) -> DeliveryRecord:
    try:
        lat = float(row["lat"])
        lon = float(row["lon"])
        t = float(row["service_time_s"])
    except (TypeError, ValueError) as e:
        raise RowValidationError(i, f"non-numeric field ({e})") from None
    if not math.isfinite(t) or t <= 0 or t > MAX_SERVICE_TIME_S:
        raise RowValidationError(i, f"service_time_s={row['service_time_s']} outside (0, 86400]")
    vehicle = (row.get("vehicle") or "").strip()
    if vehicle not in VEHICLES:
        raise RowValidationError(i, f"vehicle {vehicle!r} not in {VEHICLES}")
    city = (row.get("city_id") or "").strip()
    if city != tess.city_id:
        raise RowValidationError(i, f"city_id {city!r} does not match tessellation {tess.city_id!r}")
    try:
        point = GeoPoint(lat, lon)
        cell = geo.point_to_cell(tess, point)
    except ValidationError as e:
        raise RowValidationError(i, str(e)) from None
    route = (row.get("route_id") or "").strip() or None
    return DeliveryRecord(city, point, cell, t, vehicle, route)


def load_deliveries_csv(path: str | Path, tess: Tessellation) -> list[DeliveryRecord]:
    records, errors = read_deliveries(path, tess)
    total = len(records) + len(errors)
    if total == 0:
        raise IngestError(f"{path}: no data rows")
    if len(errors) > MAX_BAD_ROW_FRACTION * total:
        raise IngestError(f"{path}: {len(errors)} of {total} rows invalid; first: {errors[0]}")
    for e in errors:
        log.warning("%s: rejected %s", path, e)
    return records


def deliveries_to_rows(deliveries: Sequence[DeliveryRecord]) -> list[list]:
    return [[d.city_id, repr(d.point.lat), repr(d.point.lon), repr(float(d.service_time_s)), d.vehicle,
             d.route_id or "", d.cell.q, d.cell.r] for d in deliveries]


def write_deliveries_csv(deliveries: Sequence[DeliveryRecord], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(DELIVERY_COLUMNS) + ["route_id", "cell_q", "cell_r"])
        w.writerows(deliveries_to_rows(deliveries))


def write_feature_matrix_csv(m: RegionFeatureMatrix, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["cell_q", "cell_r"] + list(m.vocab.subtags))
        for c, row in zip(m.cells, m.counts):
            w.writerow([c.q, c.r] + [int(v) for v in row])


def read_feature_matrix_csv(path: str | Path, tess: Tessellation, vocab: TagVocabulary | None = None) -> RegionFeatureMatrix:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[:2] != ["cell_q", "cell_r"]:
            raise SchemaError(f"{path}: expected header cell_q,cell_r,<tags...>")
        tags = tuple(header[2:])
        if vocab is None:
            vocab = TagVocabulary(tags)
        elif vocab.subtags != tags:
            raise SchemaError(f"{path}: tag columns do not match the vocabulary")
        cells, rows = [], []
        for row in reader:
            cells.append(HexCellId(int(row[0]), int(row[1]), tess))
            rows.append([int(v) for v in row[2:]])
    counts = np.array(rows, dtype=np.int64).reshape(len(cells), len(vocab))
    return RegionFeatureMatrix(cells, vocab, counts)
