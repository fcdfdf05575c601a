"""City-local hexagonal grid.

Cells are pointy-top hexagons in axial ``(q, r)`` coordinates laid over an
azimuthal-equidistant projection centred on the city origin. ``q`` grows
eastward, ``r`` grows toward the north-east. With the default edge length
of 174.4 m the cells match H3 resolution 9 in size.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .errors import CityMismatch, OutOfRange, ValidationError

EARTH_RADIUS_M = 6_371_008.8
DEFAULT_EDGE_M = 174.4
MAX_RADIUS_M = 100_000.0
SQRT3 = math.sqrt(3.0)

# clockwise, starting at the north-east neighbour
DIRECTIONS: tuple[tuple[int, int], ...] = ((0, 1), (1, 0), (1, -1), (0, -1), (-1, 0), (-1, 1))


@dataclass(frozen=True)
class GeoPoint:
    lat: float
    lon: float

    def __post_init__(self):
        if not (math.isfinite(self.lat) and math.isfinite(self.lon)):
            raise ValidationError(f"non-finite coordinate ({self.lat}, {self.lon})")
        if not -90.0 <= self.lat <= 90.0 or not -180.0 <= self.lon <= 180.0:
            raise ValidationError(f"coordinate out of bounds ({self.lat}, {self.lon})")


@dataclass(frozen=True)
class Tessellation:
    city_id: str
    origin: GeoPoint
    edge_m: float = DEFAULT_EDGE_M

    def __post_init__(self):
        if not self.edge_m > 0 or not math.isfinite(self.edge_m):
            raise ValidationError(f"edge_m must be positive, got {self.edge_m}")

    def cell(self, q: int, r: int) -> HexCellId:
        return HexCellId(int(q), int(r), self)


@dataclass(frozen=True, eq=False)
class HexCellId:
    q: int
    r: int
    tess: Tessellation = field(repr=False)

    @property
    def city_id(self) -> str:
        return self.tess.city_id

    @property
    def key(self) -> tuple[str, int, int]:
        return (self.tess.city_id, self.q, self.r)

    def __eq__(self, other):
        if not isinstance(other, HexCellId):
            return NotImplemented
        return self.key == other.key

    def __hash__(self):
        return hash(self.key)

    def __lt__(self, other: HexCellId) -> bool:
        return self.key < other.key


# -- projection ---------------------------------------------------------------

def project(tess: Tessellation, p: GeoPoint) -> tuple[float, float]:
    """Azimuthal-equidistant projection of ``p`` about the city origin.

    Returns ``(x, y)`` in meters east and north of the origin.
    """
    x, y = project_many(tess, np.array([p.lat]), np.array([p.lon]))
    return float(x[0]), float(y[0])


def project_many(tess: Tessellation, lat, lon) -> tuple[np.ndarray, np.ndarray]:
    lat = np.radians(np.asarray(lat, dtype=float))
    lon = np.radians(np.asarray(lon, dtype=float))
    lat0 = math.radians(tess.origin.lat)
    lon0 = math.radians(tess.origin.lon)
    dlon = lon - lon0
    # haversine for the angular distance, well conditioned near the origin
    a = np.sin((lat - lat0) / 2) ** 2 + math.cos(lat0) * np.cos(lat) * np.sin(dlon / 2) ** 2
    c = 2 * np.arcsin(np.sqrt(np.clip(a, 0.0, 1.0)))
    rho = EARTH_RADIUS_M * c
    if np.any(rho > MAX_RADIUS_M):
        worst = float(rho.max())
        raise OutOfRange(f"point {worst / 1000:.1f} km from origin of {tess.city_id!r} (limit 100 km)")
    az = np.arctan2(np.sin(dlon) * np.cos(lat),
                    math.cos(lat0) * np.sin(lat) - math.sin(lat0) * np.cos(lat) * np.cos(dlon))
    return rho * np.sin(az), rho * np.cos(az)


def unproject(tess: Tessellation, x: float, y: float) -> GeoPoint:
    lat, lon = unproject_many(tess, np.array([x]), np.array([y]))
    return GeoPoint(float(lat[0]), float(lon[0]))


def unproject_many(tess: Tessellation, x, y) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    lat0 = math.radians(tess.origin.lat)
    lon0 = math.radians(tess.origin.lon)
    c = np.hypot(x, y) / EARTH_RADIUS_M
    az = np.arctan2(x, y)
    lat = np.arcsin(math.sin(lat0) * np.cos(c) + math.cos(lat0) * np.sin(c) * np.cos(az))
    lon = lon0 + np.arctan2(np.sin(az) * np.sin(c) * math.cos(lat0),
                            np.cos(c) - math.sin(lat0) * np.sin(lat))
    lon = (lon + math.pi) % (2 * math.pi) - math.pi
    return np.degrees(lat), np.degrees(lon)


# -- lattice ------------------------------------------------------------------

def axial_to_xy(q, r, edge_m: float):
    q = np.asarray(q, dtype=float)
    r = np.asarray(r, dtype=float)
    return edge_m * SQRT3 * (q + r / 2.0), edge_m * 1.5 * r


def cell_center_xy(c: HexCellId) -> tuple[float, float]:
    x, y = axial_to_xy(c.q, c.r, c.tess.edge_m)
    return float(x), float(y)


def cell_center(c: HexCellId) -> GeoPoint:
    return unproject(c.tess, *cell_center_xy(c))


def xy_to_axial(x, y, edge_m: float) -> tuple[np.ndarray, np.ndarray]:
    """Index planar points to the hexagon with the nearest centre.

    Boundary points go to the nearest centre, ties broken by the
    lexicographically smallest ``(q, r)``.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=float))
    fq = (SQRT3 / 3.0 * x - y / 3.0) / edge_m
    fr = (2.0 / 3.0 * y) / edge_m
    q0, r0 = _cube_round(fq, fr)
    cand = np.array([(0, 0)] + list(DIRECTIONS))
    cq = q0[:, None] + cand[None, :, 0]
    cr = r0[:, None] + cand[None, :, 1]
    cx, cy = axial_to_xy(cq, cr, edge_m)
    d = np.hypot(cx - x[:, None], cy - y[:, None])
    near = d <= d.min(axis=1, keepdims=True) + 1e-9 * edge_m
    # among near-equidistant candidates pick smallest (q, r)
    big = np.iinfo(np.int64).max
    qm = np.where(near, cq, big)
    best_q = qm.min(axis=1)
    rm = np.where(near & (cq == best_q[:, None]), cr, big)
    best_r = rm.min(axis=1)
    return best_q.astype(np.int64), best_r.astype(np.int64)


def _cube_round(fq, fr):
    fs = -fq - fr
    q = np.round(fq)
    r = np.round(fr)
    s = np.round(fs)
    dq = np.abs(q - fq)
    dr = np.abs(r - fr)
    ds = np.abs(s - fs)
    fix_q = (dq > dr) & (dq > ds)
    fix_r = ~fix_q & (dr > ds)
    q = np.where(fix_q, -r - s, q)
    r = np.where(fix_r, -q - s, r)
    return q.astype(np.int64), r.astype(np.int64)


def point_to_cell(tess: Tessellation, p: GeoPoint) -> HexCellId:
    x, y = project(tess, p)
    q, r = xy_to_axial(x, y, tess.edge_m)
    return HexCellId(int(q[0]), int(r[0]), tess)


def points_to_axial(tess: Tessellation, lat, lon) -> tuple[np.ndarray, np.ndarray]:
    x, y = project_many(tess, lat, lon)
    return xy_to_axial(x, y, tess.edge_m)


def axial_distance(dq, dr):
    return (np.abs(dq) + np.abs(dr) + np.abs(np.asarray(dq) + np.asarray(dr))) // 2


def hex_distance(a: HexCellId, b: HexCellId) -> int:
    if a.tess.city_id != b.tess.city_id:
        raise CityMismatch(f"{a.city_id!r} vs {b.city_id!r}")
    return int(axial_distance(a.q - b.q, a.r - b.r))


def spiral_offsets(k: int) -> list[tuple[int, int]]:
    """Axial offsets of the k-disk in spiral order.

    Centre first, then rings 1..k, each ring walked clockwise starting at
    its north-east corner. Shifting ring ``d`` cyclically by ``d`` positions
    rotates the disk by 60 degrees.
    """
    if k < 0:
        raise ValidationError(f"k must be >= 0, got {k}")
    out = [(0, 0)]
    for ring in range(1, k + 1):
        q, r = DIRECTIONS[0][0] * ring, DIRECTIONS[0][1] * ring
        for side in range(6):
            dq, dr = DIRECTIONS[(side + 2) % 6]
            for _ in range(ring):
                out.append((q, r))
                q, r = q + dq, r + dr
    return out


def spiral_rings(k: int) -> np.ndarray:
    """Ring distance of each position in ``spiral_offsets(k)``."""
    return np.array([0] + [d for d in range(1, k + 1) for _ in range(6 * d)], dtype=np.int64)


def k_ring(c: HexCellId, k: int) -> list[HexCellId]:
    return [HexCellId(c.q + dq, c.r + dr, c.tess) for dq, dr in spiral_offsets(k)]


def neighbors(c: HexCellId) -> Iterator[HexCellId]:
    for dq, dr in DIRECTIONS:
        yield HexCellId(c.q + dq, c.r + dr, c.tess)


def cell_polygon_xy(c: HexCellId) -> list[tuple[float, float]]:
    """Planar hexagon vertices, counter-clockwise from the east-north-east corner."""
    cx, cy = cell_center_xy(c)
    s = c.tess.edge_m
    return [(cx + s * math.cos(math.radians(30 + 60 * i)), cy + s * math.sin(math.radians(30 + 60 * i)))
            for i in range(6)]


def cell_polygon(c: HexCellId) -> list[GeoPoint]:
    """Six vertices, counter-clockwise, first vertex not repeated."""
    xy = np.array(cell_polygon_xy(c))
    lat, lon = unproject_many(c.tess, xy[:, 0], xy[:, 1])
    return [GeoPoint(float(a), float(b)) for a, b in zip(lat, lon)]
