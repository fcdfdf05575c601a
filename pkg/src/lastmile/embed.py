"""Hexagonal convolutional autoencoder for region embeddings.

Each cell is encoded from its radius-R hex neighbourhood (a "patch" of
3R(R+1)+1 cells in spiral order). The network:

    ring-shared hex conv  ->  dense(hidden)  ->  bottleneck (embedding)
    -> dense(hidden) -> ring features -> per-ring ZIP head (logit_pi, log_lambda)

The convolution shares one weight matrix per ring distance across all
positions of that ring, so rotating a patch by 60 degrees leaves the
encoding unchanged. Reconstruction scores raw tag counts under a
zero-inflated Poisson, weighted by each position's distance to the centre.
All gradients are derived by hand; ``grad_check`` compares them with
central differences.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import gammaln

from . import geo
from .errors import ConfigError, DivergenceError, ShapeError
from .geo import HexCellId
from .ingest import RegionFeatureMatrix

CHECKPOINT_VERSION = 1
LOGIT_CLIP = 50.0
LOG_RATE_CLIP = 30.0
PARAM_ORDER = ("conv_w", "conv_b", "enc_w", "enc_b", "bott_w", "bott_b",
               "dec_w", "dec_b", "up_w", "up_b", "out_w", "out_b")


@dataclass(frozen=True)
class EmbedConfig:
    radius: int = 3
    channels: int = 16
    hidden: int = 128
    embed_dim: int = 50
    log_input: bool = True

    @property
    def n_positions(self) -> int:
        return 3 * self.radius * (self.radius + 1) + 1


@dataclass
class HexPatch:
    center: HexCellId
    radius: int
    tensor: np.ndarray  # (positions, tags) raw counts, spiral order
    mask: np.ndarray    # 1 where the neighbour exists in the feature matrix


@dataclass
class EncoderParams:
    config: EmbedConfig
    n_tags: int
    arrays: dict[str, np.ndarray]

    def copy(self) -> EncoderParams:
        return EncoderParams(self.config, self.n_tags, {k: v.copy() for k, v in self.arrays.items()})

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.arrays.values())

    def to_dict(self) -> dict:
        return {"version": CHECKPOINT_VERSION, "config": asdict(self.config), "n_tags": self.n_tags,
                "arrays": {k: {"shape": list(self.arrays[k].shape), "data": self.arrays[k].ravel().tolist()}
                           for k in PARAM_ORDER}}

    @classmethod
    def from_dict(cls, d: dict) -> EncoderParams:
        if d.get("version") != CHECKPOINT_VERSION:
            raise ConfigError(f"unsupported checkpoint version {d.get('version')}")
        arrays = {k: np.array(v["data"], dtype=float).reshape(v["shape"]) for k, v in d["arrays"].items()}
        return cls(EmbedConfig(**d["config"]), int(d["n_tags"]), arrays)


@dataclass
class EmbeddingMatrix:
    cells: list[HexCellId]
    vectors: np.ndarray

    def __post_init__(self):
        if len(self.cells) != len(self.vectors):
            raise ShapeError("one embedding row per cell required")
        self._row = {c: i for i, c in enumerate(self.cells)}

    def row(self, cell: HexCellId) -> int | None:
        return self._row.get(cell)

    def lookup(self, cells: Sequence[HexCellId]) -> np.ndarray:
        return self.vectors[[self._row[c] for c in cells]]


# -- patches ------------------------------------------------------------------

def build_patch(cell: HexCellId, m: RegionFeatureMatrix, radius: int = 3) -> HexPatch:
    ring = geo.k_ring(cell, radius)
    tensor = np.zeros((len(ring), len(m.vocab)), dtype=float)
    mask = np.zeros(len(ring), dtype=float)
    for i, c in enumerate(ring):
        row = m.row(c)
        if row is not None:
            tensor[i] = m.counts[row]
            mask[i] = 1.0
    return HexPatch(cell, radius, tensor, mask)


def build_patches(m: RegionFeatureMatrix, radius: int = 3, cells: Sequence[HexCellId] | None = None):
    """Stacked patches ``(counts (N, P, V), mask (N, P))`` for ``cells`` (default: all of m)."""
    cells = list(m.cells if cells is None else cells)
    offsets = geo.spiral_offsets(radius)
    lookup = {(c.q, c.r): i for i, c in enumerate(m.cells)}
    counts = np.zeros((len(cells), len(offsets), len(m.vocab)), dtype=float)
    mask = np.zeros((len(cells), len(offsets)), dtype=float)
    for n, c in enumerate(cells):
        for p, (dq, dr) in enumerate(offsets):
            row = lookup.get((c.q + dq, c.r + dr))
            if row is not None:
                counts[n, p] = m.counts[row]
                mask[n, p] = 1.0
    return counts, mask


def rotation_permutation(radius: int, steps: int = 1) -> np.ndarray:
    """Spiral-position permutation rotating a patch by ``60 * steps`` degrees clockwise."""
    perm = [0]
    start = 1
    for d in range(1, radius + 1):
        n = 6 * d
        perm.extend(start + (np.arange(n) - steps * d) % n)
        start += n
    return np.array(perm)


# -- loss pieces ----------------------------------------------------------------

def zip_nll(logit_pi, log_lambda, x):
    """Negative log-pmf of a zero-inflated Poisson with ``pi = sigmoid(logit_pi)``, ``lambda = exp(log_lambda)``."""
    return _zip_nll_grad(logit_pi, log_lambda, x)[0]


def _zip_nll_grad(logit_pi, log_lambda, x):
    a = np.clip(np.asarray(logit_pi, dtype=float), -LOGIT_CLIP, LOGIT_CLIP)
    l = np.clip(np.asarray(log_lambda, dtype=float), -LOG_RATE_CLIP, LOG_RATE_CLIP)
    x = np.asarray(x, dtype=float)
    lam = np.exp(l)
    pi = 0.5 * (1.0 + np.tanh(0.5 * a))
    log_pi = -np.logaddexp(0.0, -a)
    log_1mpi = -np.logaddexp(0.0, a)
    zero = x == 0
    log_p0 = np.logaddexp(log_pi, log_1mpi - lam)
    nll = np.where(zero, -log_p0, -log_1mpi - x * l + lam + gammaln(x + 1.0))
    # posterior weight of the structural zero, only meaningful when x == 0
    post = np.exp(log_pi - log_p0)
    da = np.where(zero, pi - post, pi)
    dl = np.where(zero, (1.0 - post) * lam, lam - x)
    return nll, da, dl


def location_weights(radius: int) -> np.ndarray:
    """Weight per ring distance, ``1/(1+d)`` scaled so the weights of all patch positions sum to 1."""
    d = np.arange(radius + 1)
    raw = 1.0 / (1.0 + d)
    ring_sizes = np.where(d == 0, 1, 6 * d)
    return raw / np.sum(raw * ring_sizes)


def location_weight(d: int, radius: int) -> float:
    if not 0 <= d <= radius:
        raise ConfigError(f"ring distance {d} outside 0..{radius}")
    return float(location_weights(radius)[d])


# -- network --------------------------------------------------------------------

def init_params(n_tags: int, config: EmbedConfig = EmbedConfig(), seed: int = 0) -> EncoderParams:
    rng = np.random.default_rng(seed)
    R1, C, H, E, V = config.radius + 1, config.channels, config.hidden, config.embed_dim, n_tags

    def glorot(shape, fan_in, fan_out):
        return rng.normal(0.0, math.sqrt(2.0 / (fan_in + fan_out)), size=shape)

    arrays = {
        "conv_w": glorot((R1, V, C), V, C), "conv_b": np.zeros((R1, C)),
        "enc_w": glorot((R1 * C, H), R1 * C, H), "enc_b": np.zeros(H),
        "bott_w": glorot((H, E), H, E), "bott_b": np.zeros(E),
        "dec_w": glorot((E, H), E, H), "dec_b": np.zeros(H),
        "up_w": glorot((H, R1 * C), H, R1 * C), "up_b": np.zeros(R1 * C),
        "out_w": glorot((R1, C, 2 * V), C, 2 * V), "out_b": np.zeros((R1, 2 * V)),
    }
    # start the ZIP head near pi=0.5, lambda=1
    return EncoderParams(config, n_tags, arrays)


@dataclass
class ForwardResult:
    embedding: np.ndarray   # (B, E)
    logit_pi: np.ndarray    # (B, R+1, V), one field per ring
    log_lambda: np.ndarray  # (B, R+1, V)
    loss: float             # mean over the batch
    cache: dict = field(repr=False, default_factory=dict)


def _ring_matrices(radius: int):
    rings = geo.spiral_rings(radius)
    indicator = (rings[None, :] == np.arange(radius + 1)[:, None]).astype(float)  # (R1, P)
    mean = indicator / indicator.sum(axis=1, keepdims=True)
    return rings, indicator, mean


def _as_batch(patches, config: EmbedConfig):
    if isinstance(patches, HexPatch):
        patches = [patches]
    if isinstance(patches, tuple):
        counts, mask = patches
    else:
        if any(p.radius != config.radius for p in patches):
            raise ShapeError(f"patch radius does not match model radius {config.radius}")
        counts = np.stack([p.tensor for p in patches])
        mask = np.stack([p.mask for p in patches])
    counts = np.asarray(counts, dtype=float)
    mask = np.asarray(mask, dtype=float)
    if counts.ndim != 3 or counts.shape[1] != config.n_positions:
        raise ShapeError(f"patch tensor shape {counts.shape} does not fit radius {config.radius}")
    return counts, mask


def forward(params: EncoderParams, patches) -> ForwardResult:
    """Encode and reconstruct a patch, a list of patches, or a ``(counts, mask)`` pair."""
    cfg = params.config
    counts, mask = _as_batch(patches, cfg)
    if counts.shape[2] != params.n_tags:
        raise ShapeError(f"patch has {counts.shape[2]} tags, model expects {params.n_tags}")
    w = params.arrays
    B = len(counts)
    R1, C, V = cfg.radius + 1, cfg.channels, params.n_tags
    rings, indicator, ring_mean = _ring_matrices(cfg.radius)

    inp = (np.log1p(counts) if cfg.log_input else counts) * mask[:, :, None]
    S = np.einsum("dp,bpv->bdv", ring_mean, inp)
    H1 = np.tanh(np.einsum("bdv,dvc->bdc", S, w["conv_w"]) + w["conv_b"])
    h1 = H1.reshape(B, R1 * C)
    H2 = np.tanh(h1 @ w["enc_w"] + w["enc_b"])
    emb = H2 @ w["bott_w"] + w["bott_b"]
    H3 = np.tanh(emb @ w["dec_w"] + w["dec_b"])
    H4 = np.tanh(H3 @ w["up_w"] + w["up_b"]).reshape(B, R1, C)
    out = np.einsum("bdc,dck->bdk", H4, w["out_w"]) + w["out_b"]
    a, l = out[:, :, :V], out[:, :, V:]

    nll, da, dl = _zip_nll_grad(a[:, rings], l[:, rings], counts)
    pos_w = location_weights(cfg.radius)[rings][None, :] * mask  # (B, P)
    per_patch = np.einsum("bp,bpv->b", pos_w, nll)
    loss = float(per_patch.mean())
    cache = dict(counts=counts, mask=mask, S=S, H1=H1, h1=h1, H2=H2, emb=emb, H3=H3, H4=H4,
                 da=da, dl=dl, pos_w=pos_w, indicator=indicator, ring_mean=ring_mean)
    return ForwardResult(emb, a, l, loss, cache)


def backward(params: EncoderParams, fr: ForwardResult) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """Gradients of ``fr.loss`` w.r.t. every parameter and w.r.t. the (scaled) encoder input."""
    c = fr.cache
    w = params.arrays
    cfg = params.config
    B = len(c["counts"])
    R1, C = cfg.radius + 1, cfg.channels
    scale = c["pos_w"][:, :, None] / B
    # outputs are shared by every position of a ring
    d_a = np.einsum("dp,bpv->bdv", c["indicator"], scale * c["da"])
    d_l = np.einsum("dp,bpv->bdv", c["indicator"], scale * c["dl"])
    d_out = np.concatenate([d_a, d_l], axis=2)

    g = {}
    g["out_w"] = np.einsum("bdc,bdk->dck", c["H4"], d_out)
    g["out_b"] = d_out.sum(axis=0)
    dZ4 = (np.einsum("bdk,dck->bdc", d_out, w["out_w"]) * (1 - c["H4"] ** 2)).reshape(B, R1 * C)
    g["up_w"] = c["H3"].T @ dZ4
    g["up_b"] = dZ4.sum(axis=0)
    dZ3 = (dZ4 @ w["up_w"].T) * (1 - c["H3"] ** 2)
    g["dec_w"] = c["emb"].T @ dZ3
    g["dec_b"] = dZ3.sum(axis=0)
    d_emb = dZ3 @ w["dec_w"].T
    g["bott_w"] = c["H2"].T @ d_emb
    g["bott_b"] = d_emb.sum(axis=0)
    dZ2 = (d_emb @ w["bott_w"].T) * (1 - c["H2"] ** 2)
    g["enc_w"] = c["h1"].T @ dZ2
    g["enc_b"] = dZ2.sum(axis=0)
    dZ1 = (dZ2 @ w["enc_w"].T).reshape(B, R1, C) * (1 - c["H1"] ** 2)
    g["conv_w"] = np.einsum("bdv,bdc->dvc", c["S"], dZ1)
    g["conv_b"] = dZ1.sum(axis=0)
    dS = np.einsum("bdc,dvc->bdv", dZ1, w["conv_w"])
    d_inp = np.einsum("dp,bdv->bpv", c["ring_mean"], dS) * c["mask"][:, :, None]
    return g, d_inp


def loss_and_grad(params: EncoderParams, patches) -> tuple[float, dict[str, np.ndarray]]:
    fr = forward(params, patches)
    g, _ = backward(params, fr)
    return fr.loss, g


def grad_check(params: EncoderParams, patch, eps: float = 1e-4) -> float:
    """Largest ``|analytic - numeric| / max(|analytic| + |numeric|, 1e-6)`` over all parameters.

    The floor keeps entries whose gradient is below the difference quotient's
    rounding noise (about ``1e-16 * loss / eps``) from dominating.
    """
    _, g = loss_and_grad(params, patch)
    worst = 0.0
    p = params.copy()
    for name in PARAM_ORDER:
        arr = p.arrays[name]
        flat = arr.reshape(-1)
        num = np.empty(flat.size)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + eps
            up = forward(p, patch).loss
            flat[i] = old - eps
            down = forward(p, patch).loss
            flat[i] = old
            num[i] = (up - down) / (2 * eps)
        ana = g[name].reshape(-1)
        rel = np.abs(ana - num) / np.maximum(np.abs(ana) + np.abs(num), 1e-6)
        worst = max(worst, float(rel.max()))
    return worst


# -- training -------------------------------------------------------------------

def mean_loss(params: EncoderParams, patches, batch: int = 256) -> float:
    counts, mask = _as_batch(patches, params.config)
    total = 0.0
    for s in range(0, len(counts), batch):
        fr = forward(params, (counts[s:s + batch], mask[s:s + batch]))
        total += fr.loss * len(fr.embedding)
    return total / len(counts)


def train(params: EncoderParams, patches, epochs: int = 50, lr: float = 1e-3, batch: int = 32,
          seed: int = 0, momentum: float = 0.9) -> tuple[EncoderParams, list[float]]:
    """Mini-batch SGD with momentum. Returns new params and the per-epoch mean batch loss."""
    counts, mask = _as_batch(patches, params.config)
    if len(counts) < 32:
        raise ConfigError(f"need >= 32 patches to train, got {len(counts)}")
    rng = np.random.default_rng(seed)
    p = params.copy()
    vel = {k: np.zeros_like(v) for k, v in p.arrays.items()}
    curve = []
    for epoch in range(epochs):
        order = rng.permutation(len(counts))
        losses, sizes = [], []
        for s in range(0, len(order), batch):
            idx = order[s:s + batch]
            loss, g = loss_and_grad(p, (counts[idx], mask[idx]))
            if not math.isfinite(loss):
                raise DivergenceError(f"loss became non-finite in epoch {epoch}")
            for k in PARAM_ORDER:
                vel[k] = momentum * vel[k] - lr * g[k]
                p.arrays[k] += vel[k]
            losses.append(loss)
            sizes.append(len(idx))
        epoch_loss = float(np.average(losses, weights=sizes))
        if not math.isfinite(epoch_loss) or not p.all_finite():
            raise DivergenceError(f"parameters became non-finite in epoch {epoch}")
        curve.append(epoch_loss)
    return p, curve


def embed_matrix(params: EncoderParams, m: RegionFeatureMatrix, cells: Sequence[HexCellId] | None = None,
                 batch: int = 256) -> EmbeddingMatrix:
    cells = list(m.cells if cells is None else cells)
    counts, mask = build_patches(m, params.config.radius, cells)
    vecs = np.zeros((len(cells), params.config.embed_dim))
    for s in range(0, len(cells), batch):
        vecs[s:s + batch] = forward(params, (counts[s:s + batch], mask[s:s + batch])).embedding
    return EmbeddingMatrix(cells, vecs)


def fit_embeddings(matrices: Sequence[RegionFeatureMatrix], config: EmbedConfig = EmbedConfig(),
                   epochs: int = 150, lr: float = 1e-2, batch: int = 32, seed: int = 0):
    """Train one encoder on the patches of every city, then embed each city's cells.

    Returns ``(params, curve, [EmbeddingMatrix per city])``.
    """
    if not matrices:
        raise ConfigError("no feature matrices")
    vocab = matrices[0].vocab
    if any(m.vocab.subtags != vocab.subtags for m in matrices):
        raise ConfigError("all cities must share one vocabulary")
    parts = [build_patches(m, config.radius) for m in matrices]
    counts = np.concatenate([c for c, _ in parts])
    mask = np.concatenate([k for _, k in parts])
    params = init_params(len(vocab), config, seed)
    params, curve = train(params, (counts, mask), epochs, lr, batch, seed)
    return params, curve, [embed_matrix(params, m) for m in matrices]


# -- files ------------------------------------------------------------------------

def write_embeddings_csv(e: EmbeddingMatrix, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["cell_q", "cell_r"] + [f"e{i}" for i in range(e.vectors.shape[1])])
        for c, v in zip(e.cells, e.vectors):
            w.writerow([c.q, c.r] + [repr(float(x)) for x in v])


def read_embeddings_csv(path: str | Path, tess: geo.Tessellation) -> EmbeddingMatrix:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[:2] != ["cell_q", "cell_r"]:
            raise ShapeError(f"{path}: expected header cell_q,cell_r,e0..")
        cells, rows = [], []
        for row in reader:
            cells.append(HexCellId(int(row[0]), int(row[1]), tess))
            rows.append([float(x) for x in row[2:]])
    return EmbeddingMatrix(cells, np.array(rows, dtype=float).reshape(len(cells), len(header) - 2))


def save_params(params: EncoderParams, path: str | Path) -> None:
    Path(path).write_text(json.dumps(params.to_dict()), encoding="utf-8")


def load_params(path: str | Path) -> EncoderParams:
    return EncoderParams.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
