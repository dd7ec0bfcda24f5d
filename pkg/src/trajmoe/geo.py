"""Location featurisation and the city-agnostic candidate encoder.

A location is described by its POI category counts, its (per-city normalised)
coordinates and a popularity bucket. Three embedding layers map these to one
vector; a Deep & Cross network then produces the candidate matrix that next-step
scores are computed against.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import core
from .config import ModelConfig
from .core import ShapeError, Tensor


@dataclass(frozen=True)
class LocationFeatures:
    poi_counts: np.ndarray  # (c,) non-negative integers
    coord: tuple[float, float]  # normalised (lat, lon)
    popularity_rank: int  # 1 = most popular bucket

    def __post_init__(self):
        if np.any(np.asarray(self.poi_counts) < 0):
            raise ValueError("POI counts must be non-negative")
        if self.popularity_rank < 1:
            raise ValueError(f"popularity rank must be >= 1, got {self.popularity_rank}")


def poi_feature(counts) -> np.ndarray:
    """``[n_1..n_c, p_1..p_c]`` with ``p_i = n_i / sum(n)``; all-zero cells give p = 0."""
    n = np.asarray(counts, dtype=np.float64)
    if n.ndim != 1:
        raise ValueError(f"POI counts must be a vector, got shape {n.shape}")
    if np.any(n < 0):
        raise ValueError(f"negative POI count in {n.tolist()}")
    total = n.sum()
    p = n / total if total > 0 else np.zeros_like(n)
    return np.concatenate([n, p])


def poi_feature_matrix(counts: np.ndarray) -> np.ndarray:
    return np.stack([poi_feature(row) for row in np.asarray(counts)])


def normalize_coords(coords) -> np.ndarray:
    """Per-axis z-score with population std; a constant axis maps to zeros."""
    xy = np.asarray(coords, dtype=np.float64)
    if xy.ndim != 2 or xy.shape[1] != 2:
        raise ValueError(f"coords must be (N, 2), got shape {xy.shape}")
    if len(xy) == 0:
        raise ValueError("cannot normalise coordinates of an empty city")
    mean = xy.mean(axis=0)
    centered = xy - mean
    std = np.sqrt((centered**2).mean(axis=0))
    # tiny spreads are rounding noise around a constant axis
    scale = np.where(std > 1e-12 * np.maximum(1.0, np.abs(mean)), std, np.inf)
    return centered / scale


def popularity_rank(flow, buckets: int = 5) -> np.ndarray:
    """Quintile-style buckets; 1 holds the highest flows.

    Locations are ordered by descending flow (ties by ascending id) and the
    k-th bucket ends at position ``ceil(N * k / buckets)`` of that order.
    """
    f = np.asarray(flow, dtype=np.float64)
    if f.ndim != 1 or len(f) == 0:
        raise ValueError("popularity_rank needs a non-empty flow vector")
    if np.any(f < 0):
        raise ValueError("flows must be non-negative")
    n = len(f)
    order = np.lexsort((np.arange(n), -f))
    bounds = [math.ceil(n * k / buckets) for k in range(1, buckets + 1)]
    ranks = np.empty(n, dtype=np.int64)
    pos = 0
    for k, end in enumerate(bounds, start=1):
        ranks[order[pos:end]] = k
        pos = max(pos, end)
    return ranks


def init_params(cfg: ModelConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    d, c, h = cfg.d, cfg.poi_categories, cfg.deep_dim
    s = cfg.init_std
    p = {
        "geo.poi.w": rng.normal(0.0, s, (2 * c, d)),
        "geo.poi.b": np.zeros(d),
        "geo.coord.w": rng.normal(0.0, s, (2, d)),
        "geo.coord.b": np.zeros(d),
        "geo.rank.table": rng.normal(0.0, s, (cfg.rank_buckets, d)),
    }
    for i in range(cfg.cross_layers):
        shape = (d,) if cfg.cross_mode == "vector" else (d, d)
        p[f"geo.cross.{i}.w"] = rng.normal(0.0, s, shape)
        p[f"geo.cross.{i}.b"] = np.zeros(d)
    p["geo.deep.w1"] = rng.normal(0.0, s, (d, h))
    p["geo.deep.b1"] = np.zeros(h)
    p["geo.deep.w2"] = rng.normal(0.0, s, (h, d))
    p["geo.deep.b2"] = np.zeros(d)
    p["geo.out.w"] = rng.normal(0.0, s, (2 * d, d))
    p["geo.out.b"] = np.zeros(d)
    return p


def embed_location(poi_feats, coords, rank_ids, params) -> Tensor:
    """Sum of the POI, coordinate and rank embeddings.

    ``poi_feats`` is (..., 2c), ``coords`` (..., 2) and ``rank_ids`` integer
    ranks in ``[1, B]`` of the leading shape.
    """
    table = params["geo.rank.table"]
    rank_ids = np.asarray(rank_ids)
    if rank_ids.size and (rank_ids.min() < 1 or rank_ids.max() > table.shape[0]):
        raise IndexError(f"popularity rank outside [1, {table.shape[0]}]")
    e_p = core.linear(core.as_tensor(poi_feats), params["geo.poi.w"], params["geo.poi.b"])
    e_g = core.linear(core.as_tensor(coords), params["geo.coord.w"], params["geo.coord.b"])
    e_r = core.take(table, rank_ids - 1)
    return core.add_n([e_p, e_g, e_r])


def cross_layer(e0, ei, w, b) -> Tensor:
    """``e0 * (ei . w) + b + ei`` for a weight vector; ``e0 * (ei @ w) + b + ei`` for a matrix."""
    e0, ei, w, b = (core.as_tensor(t) for t in (e0, ei, w, b))
    d = e0.shape[-1]
    if ei.shape[-1] != d or b.shape != (d,) or w.shape[0] != d:
        raise ShapeError(
            f"cross layer dimension mismatch: e0 {e0.shape}, e_i {ei.shape}, w {w.shape}, b {b.shape}"
        )
    if w.ndim == 1:
        gate = core.linear(ei, core.reshape(w, (d, 1)))  # (..., 1)
    else:
        gate = core.linear(ei, w)
    return core.add_n([core.mul(e0, gate), ei, b])


def encode_candidates(city, params, cfg: ModelConfig) -> Tensor:
    """Candidate matrix for every location of ``city``, one row per location id.

    ``city`` needs ``poi_features`` (N, 2c), ``coords`` (N, 2) and ``ranks`` (N,).
    """
    if city.num_locations == 0:
        raise ValueError("cannot encode candidates for an empty city")
    e0 = embed_location(city.poi_features, city.coords, city.ranks, params)
    x = e0
    for i in range(cfg.cross_layers):
        x = cross_layer(e0, x, params[f"geo.cross.{i}.w"], params[f"geo.cross.{i}.b"])
    hidden = core.gelu(core.linear(e0, params["geo.deep.w1"], params["geo.deep.b1"]))
    deep = core.linear(hidden, params["geo.deep.w2"], params["geo.deep.b2"])
    return core.linear(core.concat([x, deep], axis=-1), params["geo.out.w"], params["geo.out.b"])
