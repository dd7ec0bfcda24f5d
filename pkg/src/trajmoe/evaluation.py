"""Top-k accuracy, the Markov baseline, ablation accounting, gate statistics
and the pretrain / fine-tune experiment grids.

Tabular outputs are CSV with a one-line header:

* reports: ``cell,city,split,variant,samples,trajectories,finetune_trajectories,acc@1,acc@3,acc@5,fingerprint``
* gate slots: ``slot,count,poi,pos,pop`` (share of positions whose top-1 weight
  is on that stream; slots without positions are omitted)
* gate layers: ``layer,component,count,mean,q25,median,q75`` over ``w_traj``

Wall-clock time lives in a separate ``timing.csv`` so that the report tables
stay byte-identical across reruns with the same seed.
"""
from __future__ import annotations

import concurrent.futures as futures
import csv
import dataclasses
import hashlib
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import core, model, training
from .config import ABLATIONS, ConfigError, ModelConfig, TrainConfig
from .features import Trajectory, pad_batch, time_of_day_slot
from .synth import CityDataset
from .training import Checkpoint

DEFAULT_KS = (1, 3, 5)
REPORT_FIELDS = ("cell", "city", "split", "variant", "samples", "trajectories", "finetune_trajectories",
                 "acc@1", "acc@3", "acc@5", "fingerprint")


# ------------------------------------------------------------------ metrics


def rank_candidates(scores, k: int) -> np.ndarray:
    """Top-k candidate ids per row, best first; equal scores rank the lower id first."""
    scores = np.ascontiguousarray(scores, dtype=np.float64)
    if scores.ndim != 2:
        raise ValueError(f"scores must be (samples, candidates), got shape {scores.shape}")
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    return core.kernels.topk_rows(scores, min(k, scores.shape[1]))


def acc_at_k(ranked, truths, k: int) -> float:
    """Fraction of samples whose truth is among the first k ranked ids."""
    ranked = np.asarray(ranked)
    truths = np.asarray(truths)
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if len(truths) == 0:
        raise ValueError("Acc@k over an empty sample set is undefined")
    if ranked.ndim != 2 or ranked.shape[0] != len(truths):
        raise ValueError(f"ranked predictions {ranked.shape} do not match {len(truths)} truths")
    if ranked.shape[1] < k:
        raise ValueError(f"prediction lists of length {ranked.shape[1]} are shorter than k={k}")
    hits = (ranked[:, :k] == truths[:, None]).any(axis=1)
    return float(hits.mean())


def accuracies(scores, truths, ks=DEFAULT_KS) -> dict[int, float]:
    ranked = rank_candidates(scores, max(ks))
    return {k: acc_at_k(ranked, truths, min(k, ranked.shape[1])) for k in ks}


# ------------------------------------------------------------------ Markov


class MarkovBaseline:
    """First-order transition counts with add-one smoothing.

    The state is the current location, or (location, half of the day) with
    ``time_conditioned``. States never seen in training fall back to the
    global visit-frequency ranking of the training targets.
    """

    def __init__(self, num_locations: int, time_conditioned: bool = False):
        self.N = num_locations
        self.time_conditioned = time_conditioned
        self.halves = 2 if time_conditioned else 1
        self.counts = np.zeros((num_locations * self.halves, num_locations))
        self.seen = np.zeros(num_locations * self.halves, dtype=bool)
        self.global_counts = np.zeros(num_locations)

    def _states(self, tr: Trajectory) -> np.ndarray:
        locs = tr.locations[:-1]
        if not self.time_conditioned:
            return locs
        half = time_of_day_slot(tr.times[:-1]) // 24
        return locs * 2 + half

    def fit(self, trajs) -> "MarkovBaseline":
        trajs = list(trajs)
        if not trajs:
            raise ValueError("the Markov baseline needs at least one training trajectory")
        for tr in trajs:
            if len(tr) < 2:
                continue
            states, nxt = self._states(tr), tr.locations[1:]
            np.add.at(self.counts, (states, nxt), 1.0)
            self.seen[states] = True
            np.add.at(self.global_counts, nxt, 1.0)
        return self

    def scores(self, trajs) -> tuple[np.ndarray, np.ndarray]:
        """Score rows and true next ids for every transition of ``trajs``."""
        rows, truths = [], []
        smoothed = (self.counts + 1.0) / (self.counts.sum(axis=1, keepdims=True) + self.N)
        fallback = self.global_counts / max(self.global_counts.sum(), 1.0)
        for tr in trajs:
            if len(tr) < 2:
                continue
            states = self._states(tr)
            block = smoothed[states]
            block[~self.seen[states]] = fallback
            rows.append(block)
            truths.append(tr.locations[1:])
        if not rows:
            raise ValueError("no transitions to score")
        return np.concatenate(rows), np.concatenate(truths)


def markov_baseline(train, test, k: int = 1, num_locations: int | None = None,
                    time_conditioned: bool = False) -> float:
    train, test = list(train), list(test)
    if not train:
        raise ValueError("the Markov baseline needs at least one training trajectory")
    if num_locations is None:
        num_locations = 1 + max(int(t.locations.max()) for t in train + test)
    m = MarkovBaseline(num_locations, time_conditioned).fit(train)
    scores, truths = m.scores(test)
    return acc_at_k(rank_candidates(scores, k), truths, min(k, num_locations))


# ------------------------------------------------------------------ reports


def config_fingerprint(cfg: TrainConfig) -> str:
    blob = json.dumps(cfg.to_dict(), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def variant_name(cfg: ModelConfig) -> str:
    return cfg.ablation[0] if len(cfg.ablation) == 1 else ("full" if not cfg.ablation else "+".join(cfg.ablation))


@dataclass
class EvalReport:
    city_id: int
    split: str
    acc: dict  # k -> Acc@k
    samples: int
    trajectories: int
    fingerprint: str
    variant: str = "full"
    cell: str = ""
    finetune_trajectories: int = 0
    wall_clock: float = 0.0

    def row(self) -> dict:
        out = {"cell": self.cell, "city": self.city_id, "split": self.split, "variant": self.variant,
               "samples": self.samples, "trajectories": self.trajectories,
               "finetune_trajectories": self.finetune_trajectories, "fingerprint": self.fingerprint}
        for k in DEFAULT_KS:
            out[f"acc@{k}"] = repr(float(self.acc[k])) if k in self.acc else ""
        return out


def write_reports(reports, path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=REPORT_FIELDS, lineterminator="\n")
        w.writeheader()
        for r in reports:
            w.writerow(r.row())
    return path


def write_timing(reports, path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["cell", "city", "wall_clock_s"])
        for r in reports:
            w.writerow([r.cell, r.city_id, f"{r.wall_clock:.3f}"])
    return path


def read_reports(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def collect_scores(params, trajs, city, cfg: TrainConfig, trace: bool = False, chunk: int = 64,
                   positions: str = "all"):
    """Candidate scores and truths at every evaluated position, plus the gate trace."""
    tp = core.constants(params)
    scores, truths = [], []
    gates = model.GateTrace() if trace else None
    for i in range(0, len(trajs), chunk):
        batch = pad_batch(trajs[i : i + chunk], city, cfg.T)
        logits, g = training.batch_logits(tp, batch, city, cfg, trace=trace)
        mask = batch.valid_target_mask
        if positions == "last":
            mask = training.last_position_mask(mask)
        scores.append(logits.data[mask])
        truths.append(batch.targets[mask])
        if trace:
            gates = gates.extend(g)
    return np.concatenate(scores), np.concatenate(truths), gates


def evaluate(ckpt: Checkpoint, dataset: CityDataset, split: str = "test", ks=DEFAULT_KS,
             trace: bool = False, positions: str = "all"):
    """Acc@k over every next-step target of one split. Returns ``(report, trace)``."""
    trajs = dataset.split(split)
    if not trajs:
        raise ValueError(f"city {dataset.city_id} has no {split} trajectories")
    start = time.perf_counter()
    scores, truths, gates = collect_scores(ckpt.params, trajs, dataset.city, ckpt.config, trace, positions=positions)
    acc = accuracies(scores, truths, ks)
    report = EvalReport(dataset.city_id, split, acc, int(len(truths)), len(trajs),
                        config_fingerprint(ckpt.config), variant_name(ckpt.config.model),
                        wall_clock=time.perf_counter() - start)
    return report, gates


# ---------------------------------------------------------------- ablation


def apply_ablation(cfg, variant: str):
    """Config (TrainConfig or ModelConfig) with exactly ``variant`` active."""
    if isinstance(cfg, TrainConfig):
        return dataclasses.replace(cfg, model=cfg.model.with_variant(variant))
    return cfg.with_variant(variant)


def param_count(cfg: ModelConfig) -> int:
    return model.expected_param_count(cfg)


def ablation_param_delta(cfg: ModelConfig, variant: str) -> int:
    """Parameters removed by ``variant`` relative to the full model, in closed form."""
    d, h = cfg.d, cfg.expert_dim
    expert = d * h + h + h * d + d
    gate = d * 3 + 3
    router = 2 * d * 2 + 2
    per_layer = {
        "full": 0,
        "remove_adapted_gate": router,
        "remove_time_gate": gate + router,
        "remove_traj_gate": gate + router,
        "remove_moe_keep_fused": 3 * expert + 2 * gate + router,
        "remove_fused_expert": expert,
    }
    if variant not in per_layer:
        raise ConfigError(f"unknown ablation variant {variant!r}")
    return cfg.layers * per_layer[variant]


# -------------------------------------------------------------- gate stats


@dataclass
class GateStats:
    source: str
    slot_counts: np.ndarray  # (48,)
    slot_shares: np.ndarray  # (48, 3); rows of empty slots are zero
    layer_summaries: list  # per layer: dict component -> (count, mean, q25, median, q75), or None
    records: int

    def slot_rows(self):
        for slot in np.nonzero(self.slot_counts)[0]:
            yield int(slot), int(self.slot_counts[slot]), self.slot_shares[slot]


def gate_stats_from_trace(trace: model.GateTrace, source: str = "W", layer: int = -1) -> GateStats:
    """Top-1 shares per time-of-day slot and per-layer ``w_traj`` summaries.

    ``source`` picks the weights whose argmax is counted: the final mixture
    ``W`` (default) or the time gate's ``w_time``; ``layer`` picks which
    layer's router (default the last).
    """
    if source not in ("W", "w_time"):
        raise ValueError(f"source must be 'W' or 'w_time', got {source!r}")
    if not trace.layers or trace.layers[layer].W is None:
        raise ValueError("the model has no router, so there are no gate statistics")
    weights = trace.layers[layer].W if source == "W" else trace.layers[layer].w_time
    if weights is None:
        raise ValueError(f"this variant has no {source} weights")
    top = np.argmax(weights, axis=1)
    slots = trace.tod
    counts = np.bincount(slots, minlength=48).astype(np.int64)
    hits = np.zeros((48, 3))
    np.add.at(hits, (slots, top), 1.0)
    shares = np.divide(hits, counts[:, None], out=np.zeros_like(hits), where=counts[:, None] > 0)
    summaries = []
    for lg in trace.layers:
        if lg.w_traj is None:
            summaries.append(None)
            continue
        comp = {}
        for j, name in enumerate(("poi", "pos", "pop")):
            col = lg.w_traj[:, j]
            q25, med, q75 = np.quantile(col, [0.25, 0.5, 0.75])
            comp[name] = (len(col), float(col.mean()), float(q25), float(med), float(q75))
        summaries.append(comp)
    return GateStats(source, counts, shares, summaries, trace.record_count())


def gate_stats(ckpt: Checkpoint, dataset: CityDataset, split: str = "test", source: str = "W",
               layer: int = -1) -> GateStats:
    _, trace = evaluate(ckpt, dataset, split, trace=True)
    return gate_stats_from_trace(trace, source, layer)


def write_gate_stats(stats: GateStats, out_dir, prefix: str = "gate") -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    slots_path = out_dir / f"{prefix}_slots.csv"
    layers_path = out_dir / f"{prefix}_layers.csv"
    with open(slots_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["slot", "count", "poi", "pos", "pop"])
        for slot, count, share in stats.slot_rows():
            w.writerow([slot, count, *(repr(float(x)) for x in share)])
    with open(layers_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["layer", "component", "count", "mean", "q25", "median", "q75"])
        for layer, comp in enumerate(stats.layer_summaries):
            if comp is None:
                continue
            for name, (count, *vals) in comp.items():
                w.writerow([layer, name, count, *(repr(v) for v in vals)])
    return slots_path, layers_path


# -------------------------------------------------------------- experiments

EXPERIMENT_KINDS = ("overall", "scaling", "fewshot", "ablation")


@dataclass(frozen=True)
class ExperimentConfig:
    kind: str
    train: TrainConfig = field(default_factory=TrainConfig)
    target_city: int | None = None  # default: the highest city id
    pretrain_cities: tuple[int, ...] | None = None  # default: every other city
    fractions: tuple[float, ...] = (0.01, 0.05, 0.10, 1.0)
    volumes: tuple[float, ...] = (0.25, 0.5, 1.0)
    finetune_fraction: float = 0.05
    finetune_epochs: int = 1
    variants: tuple[str, ...] = ABLATIONS
    split: str = "test"

    def __post_init__(self):
        if self.kind not in EXPERIMENT_KINDS:
            raise ConfigError(f"unknown experiment kind {self.kind!r}; expected one of {EXPERIMENT_KINDS}")

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["train"] = self.train.to_dict()
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        data = dict(data)
        data["train"] = TrainConfig.from_dict(data.get("train", {}))
        for key in ("pretrain_cities", "fractions", "volumes", "variants"):
            if data.get(key) is not None:
                data[key] = tuple(data[key])
        return cls(**data)


def subsample_train(ds: CityDataset, fraction: float, seed: int) -> CityDataset:
    """Same city with a seeded ``fraction`` of its training trajectories."""
    n = training.subsample_count(len(ds.train), fraction)
    rng = np.random.default_rng([seed, 17, ds.city_id])
    chosen = np.sort(rng.choice(len(ds.train), size=n, replace=False))
    return CityDataset(ds.city, [ds.train[i] for i in chosen], ds.val, ds.test)


def _roles(exp: ExperimentConfig, datasets):
    by_id = {ds.city_id: ds for ds in datasets}
    if not by_id:
        raise ValueError("no datasets given")
    target = exp.target_city if exp.target_city is not None else max(by_id)
    if exp.pretrain_cities is not None:
        pre = tuple(exp.pretrain_cities)
    else:
        pre = tuple(c for c in sorted(by_id) if c != target)
    return by_id, target, pre


def plan_cells(exp: ExperimentConfig, datasets) -> list[dict]:
    """Grid cells of an experiment. Validates every cell before anything trains."""
    by_id, target, pre = _roles(exp, datasets)
    needed = set(pre) | ({target} if exp.kind != "overall" else set())
    missing = sorted(c for c in needed if c not in by_id)
    if missing:
        raise FileNotFoundError(f"experiment {exp.kind} needs cities {missing}, which are not in the dataset")
    if exp.kind in ("scaling", "fewshot") and not pre:
        raise ValueError(f"{exp.kind} needs at least one pretraining city besides the target")

    def check_fraction(ds, frac, what):
        if training.subsample_count(len(ds.train), frac) == 0:
            raise ValueError(f"{what} {frac} of city {ds.city_id} ({len(ds.train)} trajectories) selects none")

    cells = []
    if exp.kind == "overall":
        cities = pre or tuple(sorted(by_id))
        if not any(by_id[c].train for c in cities):
            raise ValueError("no training trajectories for the overall run")
        cells.append({"name": "overall", "pretrain": cities, "eval": tuple(sorted(by_id))})
    elif exp.kind == "scaling":
        for v in exp.volumes:
            if v != 0.0:
                for c in pre:
                    check_fraction(by_id[c], v, "volume")
            check_fraction(by_id[target], exp.finetune_fraction, "fine-tune fraction")
            cells.append({"name": f"volume_{v:g}", "volume": float(v), "pretrain": pre, "target": target})
    elif exp.kind == "fewshot":
        for f in exp.fractions:
            check_fraction(by_id[target], f, "fraction")
            cells.append({"name": f"fraction_{f:g}", "fraction": float(f), "pretrain": pre, "target": target})
    else:
        for v in exp.variants:
            if v not in ABLATIONS:
                raise ConfigError(f"unknown ablation variant {v!r}")
            cells.append({"name": v, "variant": v, "pretrain": tuple(exp.pretrain_cities or (target,)),
                          "target": target})
    return cells


def _run_cell(cell: dict, exp: ExperimentConfig, datasets, shared: Checkpoint | None, out_dir: Path | None):
    by_id = {ds.city_id: ds for ds in datasets}
    cfg = exp.train
    reports: list[EvalReport] = []
    ft_n = 0
    if exp.kind == "overall":
        ckpt = training.pretrain([by_id[c] for c in cell["pretrain"]], cfg)
        evals = cell["eval"]
    elif exp.kind == "scaling":
        tgt = by_id[cell["target"]]
        if cell["volume"] == 0.0:
            base = training.init_checkpoint(cfg)
        else:
            pre = [subsample_train(by_id[c], cell["volume"], cfg.seed) for c in cell["pretrain"]]
            base = training.pretrain(pre, cfg)
        ckpt = training.finetune(base, tgt, exp.finetune_fraction, exp.finetune_epochs)
        ft_n = training.subsample_count(len(tgt.train), exp.finetune_fraction)
        evals = (cell["target"],)
    elif exp.kind == "fewshot":
        tgt = by_id[cell["target"]]
        ckpt = training.finetune(shared, tgt, cell["fraction"], exp.finetune_epochs)
        ft_n = training.subsample_count(len(tgt.train), cell["fraction"])
        evals = (cell["target"],)
    else:
        vcfg = apply_ablation(cfg, cell["variant"])
        ckpt = training.pretrain([by_id[c] for c in cell["pretrain"]], vcfg)
        if cell["target"] not in cell["pretrain"]:
            ckpt = training.finetune(ckpt, by_id[cell["target"]], exp.finetune_fraction, exp.finetune_epochs)
        evals = (cell["target"],)
    for c in evals:
        rep, _ = evaluate(ckpt, by_id[c], exp.split)
        rep.cell = cell["name"]
        rep.finetune_trajectories = ft_n
        reports.append(rep)
    if out_dir is not None:
        cdir = out_dir / cell["name"]
        cdir.mkdir(parents=True, exist_ok=True)
        training.save_checkpoint(ckpt, cdir / "checkpoint.zip")
        write_reports(reports, cdir / "reports.csv")
    return reports


def run_experiment(exp: ExperimentConfig, datasets, out_dir=None, jobs: int = 1) -> list[EvalReport]:
    """Run every grid cell and write per-cell reports plus a summary keyed by cell.

    Cells are independent and seeded alone, so ``jobs > 1`` gives the same
    numbers as a sequential run.
    """
    datasets = list(datasets)
    cells = plan_cells(exp, datasets)
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    shared = None
    if exp.kind == "fewshot":
        by_id = {ds.city_id: ds for ds in datasets}
        shared = training.pretrain([by_id[c] for c in cells[0]["pretrain"]], exp.train)
        if out_dir is not None:
            training.save_checkpoint(shared, out_dir / "pretrained.zip")
    if jobs > 1 and len(cells) > 1:
        with futures.ProcessPoolExecutor(max_workers=jobs) as pool:
            parts = list(pool.map(_run_cell, cells, [exp] * len(cells), [datasets] * len(cells),
                                  [shared] * len(cells), [out_dir] * len(cells)))
    else:
        parts = [_run_cell(c, exp, datasets, shared, out_dir) for c in cells]
    reports = [r for part in parts for r in part]
    if out_dir is not None:
        write_reports(reports, out_dir / "reports.csv")
        write_timing(reports, out_dir / "timing.csv")
        summary = {r.cell if len(parts) == len(reports) else f"{r.cell}/city_{r.city_id}":
                   {f"acc@{k}": v for k, v in r.acc.items()} | {"samples": r.samples,
                                                              "finetune_trajectories": r.finetune_trajectories}
                   for r in reports}
        (out_dir / "summary.json").write_text(
            json.dumps({"kind": exp.kind, "cells": summary}, indent=2, sort_keys=True) + "\n")
    return reports
