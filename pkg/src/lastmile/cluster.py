"""Agglomerative clustering of region embeddings and per-cluster summaries."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import comb

from .errors import ConfigError, NoDeliveries
from .geo import HexCellId
from .ingest import RegionFeatureMatrix, super_tag_rollup
from .vocab import SUPER_TAGS

LINKAGES = ("ward", "average")


@dataclass
class ClusterAssignment:
    cells: list[HexCellId]
    labels: np.ndarray  # 1..k
    k: int
    ordering_stat: str | None = None

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.labels) != len(self.cells):
            raise ConfigError("one label per cell required")
        if len(self.labels) and (self.labels.min() < 1 or self.labels.max() > self.k):
            raise ConfigError(f"labels must lie in 1..{self.k}")

    def label_of(self) -> dict[HexCellId, int]:
        return dict(zip(self.cells, self.labels.tolist()))


def agglomerate_labels(vectors, k: int, linkage: str = "ward") -> np.ndarray:
    """Bottom-up merging to ``k`` clusters; returns labels 1..k.

    Ward merges the pair with the smallest increase in within-cluster sum
    of squares; average merges the pair with the smallest mean pairwise
    Euclidean distance. Both are updated with the Lance-Williams recurrence.
    Exact ties go to the pair with the smallest (i, j), a cluster being
    identified by its smallest member index. Labels are numbered by that
    smallest member index.
    """
    X = np.asarray(vectors, dtype=float)
    n = len(X)
    if linkage not in LINKAGES:
        raise ConfigError(f"linkage must be one of {LINKAGES}")
    if not 1 <= k <= n:
        raise ConfigError(f"k={k} must be in 1..{n}")
    if not np.all(np.isfinite(X)):
        raise ConfigError("vectors must be finite")
    sq = np.sum(X * X, axis=1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * X @ X.T, 0.0)
    D = d2 / 2.0 if linkage == "ward" else np.sqrt(d2)
    np.fill_diagonal(D, np.inf)
    size = np.ones(n)
    active = np.ones(n, dtype=bool)
    owner = np.arange(n)
    for _ in range(n - k):
        flat = int(np.argmin(D))
        i, j = divmod(flat, n)
        if i > j:
            i, j = j, i
        ni, nj = size[i], size[j]
        if linkage == "ward":
            nk = size
            new = ((ni + nk) * D[i] + (nj + nk) * D[j] - nk * D[i, j]) / (ni + nj + nk)
        else:
            new = (ni * D[i] + nj * D[j]) / (ni + nj)
        new[~active] = np.inf
        new[i] = np.inf
        D[i, :] = new
        D[:, i] = new
        D[j, :] = np.inf
        D[:, j] = np.inf
        active[j] = False
        size[i] = ni + nj
        owner[owner == j] = i
    roots = np.unique(owner)
    return np.searchsorted(roots, owner) + 1


def agglomerate(vectors, k: int = 4, linkage: str = "ward", cells: Sequence[HexCellId] | None = None) -> ClusterAssignment:
    labels = agglomerate_labels(vectors, k, linkage)
    cells = list(cells) if cells is not None else [None] * len(labels)
    return ClusterAssignment(cells, labels, k)


def adjusted_rand_index(a, b) -> float:
    """Chance-corrected agreement of two labelings (1 identical, about 0 random)."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape or a.ndim != 1:
        raise ConfigError("labelings must be 1-D and the same length")
    _, ia = np.unique(a, return_inverse=True)
    _, ib = np.unique(b, return_inverse=True)
    table = np.zeros((ia.max() + 1, ib.max() + 1), dtype=np.int64)
    np.add.at(table, (ia, ib), 1)
    pairs = comb(table, 2).sum()
    rows = comb(table.sum(axis=1), 2).sum()
    cols = comb(table.sum(axis=0), 2).sum()
    expected = rows * cols / comb(len(a), 2) if len(a) > 1 else 0.0
    top = 0.5 * (rows + cols)
    if top == expected:
        return 1.0
    return float((pairs - expected) / (top - expected))


def _stat(values: np.ndarray, stat: str) -> float:
    if stat == "median":
        return float(np.median(values))
    if stat == "mean":
        return float(np.mean(values))
    raise ConfigError(f"ordering stat must be 'median' or 'mean', got {stat!r}")


def order_by_service_time(assignment: ClusterAssignment, deliveries, stat: str = "median") -> ClusterAssignment:
    """Relabel so cluster 1 has the highest service-time ``stat`` and k the lowest.

    Clusters without deliveries go last; equal stats keep the original
    label order.
    """
    label_of = assignment.label_of()
    pooled: dict[int, list[float]] = {}
    for d in deliveries:
        lab = label_of.get(d.cell)
        if lab is not None:
            pooled.setdefault(lab, []).append(d.service_time_s)
    if not pooled:
        raise NoDeliveries("no deliveries fall in any clustered cell")
    stats = {lab: _stat(np.asarray(v), stat) for lab, v in pooled.items()}
    with_data = sorted(stats, key=lambda lab: (-stats[lab], lab))
    empty = [lab for lab in range(1, assignment.k + 1) if lab not in stats]
    new_label = {old: new for new, old in enumerate(with_data + empty, start=1)}
    labels = np.array([new_label[lab] for lab in assignment.labels.tolist()], dtype=np.int64)
    return ClusterAssignment(assignment.cells, labels, assignment.k, stat)


def cluster_summary(assignment: ClusterAssignment, m: RegionFeatureMatrix) -> dict[int, dict]:
    """Hex count and mean super-tag counts per cluster label."""
    rollup = super_tag_rollup(m)
    rows = np.array([m.row(c) for c in assignment.cells])
    if np.any(rows == None):  # noqa: E711
        raise ConfigError("assignment contains cells missing from the feature matrix")
    rows = rows.astype(np.int64)
    out = {}
    for lab in range(1, assignment.k + 1):
        sel = rows[assignment.labels == lab]
        means = rollup[sel].mean(axis=0) if len(sel) else np.zeros(len(SUPER_TAGS))
        out[lab] = {"hex_count": int(len(sel)),
                    "super_tags": {name: float(v) for name, v in zip(SUPER_TAGS, means)}}
    return out


def write_assignment_csv(a: ClusterAssignment, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["cell_q", "cell_r", "cluster"])
        for c, lab in zip(a.cells, a.labels.tolist()):
            w.writerow([c.q, c.r, lab])


def write_summary_json(summary: dict[int, dict], path: str | Path) -> None:
    Path(path).write_text(json.dumps({str(k): v for k, v in summary.items()}, indent=2) + "\n", encoding="utf-8")
