"""Deterministic synthetic multi-city mobility data and its on-disk format.

Each city partitions its locations into disjoint anchor groups. An anchor group
plays fixed roles (home, work, food, leisure, ...) whose POI profiles are
shared across cities, and every user follows one group's daily itinerary. At
noise 0 the next location is a function of the current location and the half
of the day, so a time-conditioned first-order Markov model is exact.

Files
-----
``city.csv``
    Comment header ``# trajmoe-city v1 city_id=<i> categories=<c>``, then a CSV
    header ``id,poi_0..poi_{c-1},lat,lon,flow`` and one row per location.
``trajectories.jsonl``
    One JSON object per line:
    ``{"user": u, "city": i, "split": "train"|"val"|"test", "steps": [[loc, t], ...]}``
    with ``t`` in integer epoch seconds (UTC).
``dataset.json``
    Generator config and per-city file list.
"""
from __future__ import annotations

import csv
import dataclasses
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .features import DAY_SECONDS, Trajectory
from .geo import normalize_coords, poi_feature_matrix, popularity_rank

FORMAT_VERSION = 1
# Monday 2024-01-01 00:00 UTC
START_EPOCH = 1704067200


class DatasetFormatError(ValueError):
    def __init__(self, path, line: int, message: str):
        super().__init__(f"{path}:{line}: {message}")
        self.path = str(path)
        self.line = line


@dataclass
class City:
    city_id: int
    poi_counts: np.ndarray  # (N, c) int64
    raw_coords: np.ndarray  # (N, 2) lat, lon
    flow: np.ndarray  # (N,)
    coords: np.ndarray = field(init=False)
    ranks: np.ndarray = field(init=False)
    poi_features: np.ndarray = field(init=False)

    def __post_init__(self):
        self.poi_counts = np.asarray(self.poi_counts, dtype=np.int64)
        self.raw_coords = np.asarray(self.raw_coords, dtype=np.float64)
        self.flow = np.asarray(self.flow, dtype=np.float64)
        n = len(self.flow)
        if n == 0:
            raise ValueError(f"city {self.city_id} has no locations")
        if self.poi_counts.shape[0] != n or self.raw_coords.shape != (n, 2):
            raise ValueError(f"city {self.city_id}: inconsistent per-location arrays")
        if np.any(self.flow < 0):
            raise ValueError(f"city {self.city_id}: negative flow")
        self.coords = normalize_coords(self.raw_coords)
        self.ranks = popularity_rank(self.flow)
        self.poi_features = poi_feature_matrix(self.poi_counts)

    @property
    def num_locations(self) -> int:
        return len(self.flow)

    @property
    def poi_categories(self) -> int:
        return self.poi_counts.shape[1]

    def __eq__(self, other):
        if not isinstance(other, City):
            return NotImplemented
        return (
            self.city_id == other.city_id
            and np.array_equal(self.poi_counts, other.poi_counts)
            and np.array_equal(self.raw_coords, other.raw_coords)
            and np.array_equal(self.flow, other.flow)
        )

    __hash__ = None


@dataclass(frozen=True)
class GeneratorConfig:
    seed: int = 0
    cities: int = 3
    locations: int = 50
    poi_categories: int = 8
    users: int = 200  # per city
    days: int = 15
    anchors: int = 4
    noise: float = 0.0
    time_conditioned: bool = True
    split: tuple[float, float, float] = (0.8, 0.1, 0.1)
    pattern: str = "anchors"  # "anchors", or "uniform": every move is uniform over all locations

    def __post_init__(self):
        if not 0.0 <= self.noise <= 1.0:
            raise ValueError(f"noise must lie in [0, 1], got {self.noise}")
        if self.anchors < 2:
            raise ValueError("at least two anchors per user are required")
        if self.time_conditioned and self.anchors < 3:
            raise ValueError("time-conditioned itineraries need at least three anchors")
        if self.pattern not in ("anchors", "uniform"):
            raise ValueError(f"pattern must be 'anchors' or 'uniform', got {self.pattern!r}")
        if self.locations < self.anchors:
            raise ValueError("a city needs at least one full anchor group")

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["split"] = list(self.split)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "GeneratorConfig":
        data = dict(data)
        if "split" in data:
            data["split"] = tuple(data["split"])
        return cls(**data)


def _rng(cfg: GeneratorConfig, *keys: int) -> np.random.Generator:
    return np.random.default_rng([cfg.seed, *keys])


def location_roles(n: int, anchors: int) -> np.ndarray:
    """Role slot of each location id; group g owns ids ``[g*anchors, (g+1)*anchors)``."""
    return np.arange(n) % anchors


def gen_city(cfg: GeneratorConfig, index: int) -> City:
    n, c = cfg.locations, cfg.poi_categories
    if n < 2:
        raise ValueError(f"a city needs at least 2 locations, got {n}")
    if c < 1:
        raise ValueError("at least one POI category is required")
    rng = _rng(cfg, index, 0)
    roles = location_roles(n, cfg.anchors)
    counts = rng.poisson(0.4, size=(n, c))
    counts[np.arange(n), roles % c] += 3 + rng.poisson(4.0, size=n)

    side = math.ceil(math.sqrt(n))
    cells = rng.permutation(side * side)[:n]
    cell = 0.01
    origin = np.array([30.0 + 2.5 * index, -100.0 + 4.0 * index])
    grid = np.stack([cells // side, cells % side], axis=1).astype(np.float64)
    coords = origin + cell * (grid + rng.uniform(-0.3, 0.3, size=(n, 2)))

    flow = np.floor(rng.pareto(1.5, size=n) * 100.0 + 1.0)
    return City(index, counts, coords, flow)


def itinerary(anchors: int, time_conditioned: bool) -> list[tuple[int, float]]:
    """Daily (role slot, base arrival hour) sequence ending back at home (slot 0).

    With time conditioning, slot 1 is visited in the morning and again after
    lunch with different successors.
    """
    if time_conditioned:
        plan = [(1, 8.0), (2, 12.0), (1, 13.5)]
        rest = list(range(3, anchors))
    else:
        plan = [(1, 8.0)]
        rest = list(range(2, anchors))
    span_start, span_end = 17.0, 21.0
    for i, slot in enumerate(rest):
        frac = i / max(len(rest), 1)
        plan.append((slot, span_start + frac * (span_end - span_start)))
    plan.append((0, 21.5))
    return plan


def gen_trajectories(city: City, cfg: GeneratorConfig) -> list[Trajectory]:
    """One raw multi-day trajectory per user of ``city``."""
    n, k = city.num_locations, cfg.anchors
    groups = n // k
    plan = itinerary(k, cfg.time_conditioned)
    out = []
    for user in range(cfg.users):
        rng = _rng(cfg, city.city_id, 1, user)
        group = user % groups
        anchor_ids = np.arange(group * k, (group + 1) * k)
        # first point: at home on the first morning
        locs = [int(anchor_ids[0])]
        times = [START_EPOCH + int(rng.integers(6 * 3600, 7 * 3600))]
        for day in range(cfg.days):
            base = START_EPOCH + day * DAY_SECONDS
            for slot, hour in plan:
                t = base + int(hour * 3600) + int(rng.integers(0, 45 * 60))
                t = max(t, times[-1] + 60)
                if cfg.pattern == "uniform":
                    # stays are kept so the next id is independent of everything before it
                    locs.append(int(rng.integers(n)))
                    times.append(t)
                    continue
                dest = int(anchor_ids[slot])
                if cfg.noise > 0 and rng.random() < cfg.noise:
                    others = anchor_ids[anchor_ids != locs[-1]]
                    dest = int(rng.choice(others))
                if dest == locs[-1]:
                    continue
                locs.append(dest)
                times.append(t)
        out.append(Trajectory(city.city_id, user, locs, times))
    return out


def preprocess(raw, window_days: int = 3, min_len: int = 5, T: int | None = None,
               stride_days: int | None = None) -> list[Trajectory]:
    """Cut each user stream into 3-day windows, drop short ones, split at ``T``.

    Windows are consecutive and non-overlapping, anchored at the user's first
    point; ``stride_days`` smaller than ``window_days`` gives overlapping windows.
    """
    stride = (stride_days or window_days) * DAY_SECONDS
    width = window_days * DAY_SECONDS
    out = []
    for tr in raw:
        if len(tr) == 0:
            continue
        t0, t_end = int(tr.times[0]), int(tr.times[-1])
        start = t0
        while start <= t_end:
            sel = (tr.times >= start) & (tr.times < start + width)
            locs, times = tr.locations[sel], tr.times[sel]
            pieces = [(locs, times)]
            if T is not None and len(locs) > T:
                pieces = [(locs[i : i + T], times[i : i + T]) for i in range(0, len(locs), T)]
            for pl, pt in pieces:
                if len(pl) >= min_len:
                    out.append(Trajectory(tr.city_id, tr.user_id, pl, pt))
            start += stride
    return out


@dataclass
class CityDataset:
    city: City
    train: list[Trajectory]
    val: list[Trajectory]
    test: list[Trajectory]

    @property
    def city_id(self) -> int:
        return self.city.city_id

    def split(self, name: str) -> list[Trajectory]:
        return {"train": self.train, "val": self.val, "test": self.test}[name]

    def all_trajectories(self):
        return [("train", t) for t in self.train] + [("val", t) for t in self.val] + [("test", t) for t in self.test]


def split_trajectories(trajs, fractions, seed: int, city_id: int):
    """Seeded shuffle into train/val/test by trajectory."""
    n = len(trajs)
    perm = np.random.default_rng([seed, city_id, 2]).permutation(n)
    n_val = int(round(fractions[1] * n))
    n_test = int(round(fractions[2] * n))
    val_idx = sorted(perm[:n_val])
    test_idx = sorted(perm[n_val : n_val + n_test])
    train_idx = sorted(perm[n_val + n_test :])
    pick = lambda idx: [trajs[i] for i in idx]  # noqa: E731
    return pick(train_idx), pick(val_idx), pick(test_idx)


def generate(cfg: GeneratorConfig, T: int = 24) -> list[CityDataset]:
    out = []
    for i in range(cfg.cities):
        city = gen_city(cfg, i)
        trajs = preprocess(gen_trajectories(city, cfg), T=T)
        train, val, test = split_trajectories(trajs, cfg.split, cfg.seed, i)
        out.append(CityDataset(city, train, val, test))
    return out


# -------------------------------------------------------------------- files


def _fmt(x: float) -> str:
    return repr(float(x))


def write_city(city: City, path) -> None:
    c = city.poi_categories
    buf = io.StringIO()
    buf.write(f"# trajmoe-city v{FORMAT_VERSION} city_id={city.city_id} categories={c}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["id", *[f"poi_{j}" for j in range(c)], "lat", "lon", "flow"])
    for i in range(city.num_locations):
        w.writerow([i, *city.poi_counts[i].tolist(), _fmt(city.raw_coords[i, 0]),
                    _fmt(city.raw_coords[i, 1]), _fmt(city.flow[i])])
    Path(path).write_text(buf.getvalue())


def read_city(path) -> City:
    path = Path(path)
    lines = path.read_text().splitlines()
    if not lines or not lines[0].startswith("# trajmoe-city"):
        raise DatasetFormatError(path, 1, "missing '# trajmoe-city' header")
    meta = dict(tok.split("=", 1) for tok in lines[0].split()[3:] if "=" in tok)
    try:
        version = int(lines[0].split()[2].lstrip("v"))
        city_id, c = int(meta["city_id"]), int(meta["categories"])
    except (IndexError, KeyError, ValueError) as exc:
        raise DatasetFormatError(path, 1, f"malformed header: {exc}") from exc
    if version != FORMAT_VERSION:
        raise DatasetFormatError(path, 1, f"unsupported city format version {version}")
    if len(lines) < 2:
        raise DatasetFormatError(path, 2, "missing column header")
    expected = ["id", *[f"poi_{j}" for j in range(c)], "lat", "lon", "flow"]
    if next(csv.reader([lines[1]])) != expected:
        raise DatasetFormatError(path, 2, "unexpected column header")
    counts, coords, flow = [], [], []
    for lineno, row in enumerate(csv.reader(lines[2:]), start=3):
        if len(row) != c + 4:
            raise DatasetFormatError(path, lineno, f"expected {c + 4} fields, got {len(row)}")
        try:
            loc_id = int(row[0])
            n = [int(v) for v in row[1 : c + 1]]
            lat, lon, f = float(row[c + 1]), float(row[c + 2]), float(row[c + 3])
        except ValueError as exc:
            raise DatasetFormatError(path, lineno, str(exc)) from exc
        if loc_id != len(flow):
            raise DatasetFormatError(path, lineno, f"location ids must be dense from 0; got {loc_id}")
        if min(n) < 0 or f < 0:
            raise DatasetFormatError(path, lineno, "negative POI count or flow")
        counts.append(n)
        coords.append((lat, lon))
        flow.append(f)
    if not flow:
        raise DatasetFormatError(path, len(lines) + 1, "city has no locations")
    return City(city_id, np.array(counts, dtype=np.int64).reshape(len(flow), c), np.array(coords), np.array(flow))


def write_trajectories(records, path) -> None:
    """``records`` is an iterable of (split, Trajectory)."""
    with open(path, "w") as fh:
        for split, tr in records:
            fh.write(json.dumps({"user": int(tr.user_id), "city": int(tr.city_id), "split": split,
                                 "steps": [[int(l), int(t)] for l, t in tr.steps]}))
            fh.write("\n")


def read_trajectories(path):
    """List of (split, Trajectory) in file order."""
    path = Path(path)
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                steps = rec["steps"]
                tr = Trajectory(int(rec["city"]), int(rec["user"]),
                                [int(s[0]) for s in steps], [int(s[1]) for s in steps])
                split = rec["split"]
            except (json.JSONDecodeError, KeyError, TypeError, IndexError, ValueError) as exc:
                raise DatasetFormatError(path, lineno, f"bad trajectory record: {exc}") from exc
            if split not in ("train", "val", "test"):
                raise DatasetFormatError(path, lineno, f"unknown split {split!r}")
            out.append((split, tr))
    return out


def save_dataset(datasets, root, gen_cfg: GeneratorConfig | None = None) -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    cities = []
    for ds in datasets:
        sub = root / f"city_{ds.city_id}"
        sub.mkdir(exist_ok=True)
        write_city(ds.city, sub / "city.csv")
        write_trajectories(ds.all_trajectories(), sub / "trajectories.jsonl")
        cities.append({"city_id": ds.city_id, "dir": sub.name})
    meta = {"format": "trajmoe-dataset", "version": FORMAT_VERSION, "cities": cities,
            "generator": gen_cfg.to_dict() if gen_cfg else None}
    (root / "dataset.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return root


def load_city_dataset(directory) -> CityDataset:
    directory = Path(directory)
    city = read_city(directory / "city.csv")
    parts = {"train": [], "val": [], "test": []}
    for split, tr in read_trajectories(directory / "trajectories.jsonl"):
        if tr.city_id != city.city_id:
            raise DatasetFormatError(directory / "trajectories.jsonl", 0,
                                     f"trajectory of city {tr.city_id} in city {city.city_id} file")
        parts[split].append(tr)
    return CityDataset(city, parts["train"], parts["val"], parts["test"])


def load_dataset(root, city_ids=None) -> list[CityDataset]:
    root = Path(root)
    meta_path = root / "dataset.json"
    try:
        meta = json.loads(meta_path.read_text())
    except FileNotFoundError:
        raise
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(meta_path, exc.lineno, exc.msg) from exc
    out = []
    for entry in meta["cities"]:
        if city_ids is None or entry["city_id"] in city_ids:
            out.append(load_city_dataset(root / entry["dir"]))
    if city_ids is not None:
        missing = set(city_ids) - {d.city_id for d in out}
        if missing:
            raise FileNotFoundError(f"cities {sorted(missing)} not present in {root}")
    return out
