"""Trajectories, temporal features, padded batches and stream embeddings."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import core
from .config import DOW_DAYS, STAY_BUCKETS, TOD_SLOTS, ModelConfig
from .core import Tensor

SLOT_SECONDS = 1800
DAY_SECONDS = 86400
# 1970-01-01 was a Thursday; Monday is day 0
_EPOCH_DOW = 3


class UnknownLocationError(KeyError):
    pass


@dataclass(frozen=True)
class Trajectory:
    city_id: int
    user_id: int
    locations: np.ndarray  # (n,) int64 location ids
    times: np.ndarray  # (n,) int64 epoch seconds (UTC)

    def __post_init__(self):
        locs = np.asarray(self.locations, dtype=np.int64)
        times = np.asarray(self.times, dtype=np.int64)
        object.__setattr__(self, "locations", locs)
        object.__setattr__(self, "times", times)
        if locs.shape != times.shape or locs.ndim != 1:
            raise ValueError("locations and times must be equal-length vectors")
        if len(times) > 1 and np.any(np.diff(times) <= 0):
            raise ValueError(f"arrival times of user {self.user_id} are not strictly increasing")

    def __len__(self) -> int:
        return len(self.locations)

    @property
    def steps(self) -> list[tuple[int, int]]:
        return list(zip(self.locations.tolist(), self.times.tolist()))

    def __eq__(self, other):
        if not isinstance(other, Trajectory):
            return NotImplemented
        return (
            self.city_id == other.city_id
            and self.user_id == other.user_id
            and np.array_equal(self.locations, other.locations)
            and np.array_equal(self.times, other.times)
        )

    __hash__ = None


@dataclass(frozen=True)
class TemporalFeatures:
    tod: np.ndarray  # half-hour slot in [0, 48)
    dow: np.ndarray  # Monday = 0
    stay: np.ndarray  # half-hour stay bucket in [0, 48]


def time_of_day_slot(times) -> np.ndarray:
    """Nearest half-hour slot; times past 23:45 wrap to slot 0."""
    sec = np.asarray(times, dtype=np.int64) % DAY_SECONDS
    return ((sec + SLOT_SECONDS // 2) // SLOT_SECONDS) % TOD_SLOTS


def day_of_week(times) -> np.ndarray:
    return (np.asarray(times, dtype=np.int64) // DAY_SECONDS + _EPOCH_DOW) % DOW_DAYS


def stay_bucket(seconds) -> np.ndarray:
    """Half-hour-wide buckets, everything from 24 h up collapsed into bucket 48."""
    return np.minimum(np.asarray(seconds, dtype=np.int64) // SLOT_SECONDS, STAY_BUCKETS - 1)


def temporal_features(times) -> TemporalFeatures:
    t = np.asarray(times, dtype=np.int64)
    if len(t) > 1 and np.any(np.diff(t) <= 0):
        raise ValueError("timestamps must be strictly increasing")
    stay = np.zeros(len(t), dtype=np.int64)
    if len(t) > 1:
        stay[:-1] = stay_bucket(np.diff(t))
    return TemporalFeatures(time_of_day_slot(t), day_of_week(t), stay)


def build_foundational(traj: Trajectory, city):
    """Per-step POI features, normalised coordinates and rank bucket."""
    locs = traj.locations
    bad = (locs < 0) | (locs >= city.num_locations)
    if np.any(bad):
        raise UnknownLocationError(
            f"location id {int(locs[bad][0])} not in city {city.city_id} "
            f"({city.num_locations} locations)"
        )
    return city.poi_features[locs], city.coords[locs], city.ranks[locs]


@dataclass
class PaddedBatch:
    city_id: int
    locations: np.ndarray  # (B, T) ids, 0 on padding
    poi: np.ndarray  # (B, T, 2c)
    coords: np.ndarray  # (B, T, 2)
    ranks: np.ndarray  # (B, T) in [1, buckets], 1 on padding
    tod: np.ndarray
    dow: np.ndarray
    stay: np.ndarray
    padding_mask: np.ndarray  # True where a real token exists
    targets: np.ndarray  # next location id, 0 where invalid
    valid_target_mask: np.ndarray

    @property
    def size(self) -> int:
        return self.locations.shape[0]

    @property
    def T(self) -> int:
        return self.locations.shape[1]


def pad_batch(trajs, city, T: int) -> PaddedBatch:
    """Right-pad trajectories of one city to length ``T``."""
    if not trajs:
        raise ValueError("pad_batch needs at least one trajectory")
    B = len(trajs)
    c2 = city.poi_features.shape[1]
    locations = np.zeros((B, T), dtype=np.int64)
    poi = np.zeros((B, T, c2))
    coords = np.zeros((B, T, 2))
    ranks = np.ones((B, T), dtype=np.int64)
    tod = np.zeros((B, T), dtype=np.int64)
    dow = np.zeros((B, T), dtype=np.int64)
    stay = np.zeros((B, T), dtype=np.int64)
    mask = np.zeros((B, T), dtype=bool)
    targets = np.zeros((B, T), dtype=np.int64)
    valid = np.zeros((B, T), dtype=bool)
    for i, tr in enumerate(trajs):
        n = len(tr)
        if tr.city_id != city.city_id:
            raise ValueError(f"trajectory of city {tr.city_id} batched with city {city.city_id}")
        if n > T:
            raise ValueError(f"trajectory of length {n} exceeds T={T}; window it first")
        if n < 2:
            raise ValueError("trajectories need at least two steps to carry a target")
        p, g, r = build_foundational(tr, city)
        tf = temporal_features(tr.times)
        locations[i, :n] = tr.locations
        poi[i, :n] = p
        coords[i, :n] = g
        ranks[i, :n] = r
        tod[i, :n] = tf.tod
        dow[i, :n] = tf.dow
        stay[i, :n] = tf.stay
        mask[i, :n] = True
        targets[i, : n - 1] = tr.locations[1:]
        valid[i, : n - 1] = True
    return PaddedBatch(city.city_id, locations, poi, coords, ranks, tod, dow, stay, mask, targets, valid)


def causal_mask(T: int) -> np.ndarray:
    """``mask[i, j]`` is True iff position i may attend to position j (j <= i)."""
    return np.tril(np.ones((T, T), dtype=bool))


def last_position_mask(valid: np.ndarray) -> np.ndarray:
    """Keep only the final valid target of each row."""
    out = np.zeros_like(valid)
    counts = valid.sum(axis=1)
    rows = np.nonzero(counts)[0]
    out[rows, counts[rows] - 1] = True
    return out


@dataclass
class StreamEmbeddings:
    poi: Tensor
    pos: Tensor
    pop: Tensor
    traj: Tensor
    ts: Tensor


def init_params(cfg: ModelConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    d, c, s = cfg.d, cfg.poi_categories, cfg.init_std
    return {
        "emb.poi.w": rng.normal(0.0, s, (2 * c, d)),
        "emb.poi.b": np.zeros(d),
        "emb.pos.w": rng.normal(0.0, s, (2, d)),
        "emb.pos.b": np.zeros(d),
        "emb.pop.table": rng.normal(0.0, s, (cfg.rank_buckets, d)),
        "emb.tod": rng.normal(0.0, s, (TOD_SLOTS, d)),
        "emb.dow": rng.normal(0.0, s, (DOW_DAYS, d)),
        "emb.stay": rng.normal(0.0, s, (STAY_BUCKETS, d)),
    }


def embed_streams(batch: PaddedBatch, params) -> StreamEmbeddings:
    """Embed the three foundational streams and the temporal stream.

    Padded positions embed to exactly zero.
    """
    keep = batch.padding_mask[..., None].astype(np.float64)
    e_poi = core.mul(core.linear(core.as_tensor(batch.poi), params["emb.poi.w"], params["emb.poi.b"]), keep)
    e_pos = core.mul(core.linear(core.as_tensor(batch.coords), params["emb.pos.w"], params["emb.pos.b"]), keep)
    e_pop = core.mul(core.take(params["emb.pop.table"], batch.ranks - 1), keep)
    e_traj = core.add_n([e_poi, e_pos, e_pop])
    e_ts = core.mul(
        core.add_n(
            [
                core.take(params["emb.tod"], batch.tod),
                core.take(params["emb.dow"], batch.dow),
                core.take(params["emb.stay"], batch.stay),
            ]
        ),
        keep,
    )
    return StreamEmbeddings(e_poi, e_pos, e_pop, e_traj, e_ts)
