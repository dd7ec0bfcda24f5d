"""Prediction head, loss, checkpoints and the pretrain / fine-tune loops.

Checkpoint container
--------------------
A zip archive (stored, fixed timestamps, so identical contents give identical
bytes) holding

* ``format.json`` - ``{"format": "trajmoe-checkpoint", "version": 1,
  "config": <TrainConfig dict>, "meta": {...}, "params": [[name, shape], ...]}``
* ``param/<name>.npy`` - one NPY array per parameter, little-endian float64,
  C order.
"""
from __future__ import annotations

import copy
import io
import json
import logging
import math
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import core, geo, model
from .config import ConfigError, TrainConfig
from .core import ShapeError, Tensor
from .features import last_position_mask, pad_batch

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "trajmoe-checkpoint"
CHECKPOINT_VERSION = 1
_ZIP_DATE = (1980, 1, 1, 0, 0, 0)


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    config: TrainConfig
    meta: dict = field(default_factory=dict)

    def copy(self) -> "Checkpoint":
        return Checkpoint({k: v.copy() for k, v in self.params.items()}, self.config, copy.deepcopy(self.meta))

    def param_count(self) -> int:
        return int(sum(v.size for v in self.params.values()))


def init_checkpoint(cfg: TrainConfig) -> Checkpoint:
    return Checkpoint(model.init_params(cfg.model, cfg.seed), cfg, {"epochs_run": 0, "history": []})


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    path = Path(path)
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": ckpt.config.to_dict(),
        "meta": ckpt.meta,
        "params": [[name, list(arr.shape)] for name, arr in ckpt.params.items()],
    }
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        zf.writestr(zipfile.ZipInfo("format.json", _ZIP_DATE), json.dumps(header, sort_keys=True, indent=1))
        for name, arr in ckpt.params.items():
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(arr, dtype="<f8"), allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(f"param/{name}.npy", _ZIP_DATE), buf.getvalue())
    return path


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    try:
        with zipfile.ZipFile(path) as zf:
            header = json.loads(zf.read("format.json"))
            if header.get("format") != CHECKPOINT_FORMAT:
                raise CheckpointError(f"{path}: not a trajmoe checkpoint")
            if header.get("version") != CHECKPOINT_VERSION:
                raise CheckpointError(f"{path}: unsupported checkpoint version {header.get('version')}")
            params = {}
            for name, shape in header["params"]:
                arr = np.lib.format.read_array(io.BytesIO(zf.read(f"param/{name}.npy")), allow_pickle=False)
                if list(arr.shape) != shape:
                    raise CheckpointError(f"{path}: parameter {name} has shape {arr.shape}, header says {shape}")
                params[name] = arr.astype(np.float64)
    except (zipfile.BadZipFile, KeyError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint ({exc})") from exc
    return Checkpoint(params, TrainConfig.from_dict(header["config"]), header["meta"])


# --------------------------------------------------------------- objective


def predict_logits(h: Tensor, candidates: Tensor) -> Tensor:
    """Dot-product scores of every position against every candidate row."""
    if h.shape[-1] != candidates.shape[-1] or candidates.ndim != 2:
        raise ShapeError(f"prediction dims differ: states {h.shape}, candidates {candidates.shape}")
    return core.matmul(h, core.transpose(candidates, (1, 0)))


def ce_loss(logits: Tensor, targets, valid) -> Tensor:
    return core.cross_entropy(logits, targets, valid)


def loss_mask(batch, cfg: TrainConfig) -> np.ndarray:
    if cfg.loss_positions == "last":
        return last_position_mask(batch.valid_target_mask)
    return batch.valid_target_mask


def batch_logits(params, batch, city, cfg: TrainConfig, trace: bool = False):
    if city.poi_categories != cfg.model.poi_categories:
        raise ConfigError(f"city {city.city_id} has {city.poi_categories} POI categories, "
                          f"the model expects {cfg.model.poi_categories}")
    h, gates = model.forward(params, batch, cfg.model, trace=trace)
    cands = geo.encode_candidates(city, params, cfg.model)
    return predict_logits(h, cands), gates


def batch_loss(params, batch, city, cfg: TrainConfig) -> Tensor:
    logits, _ = batch_logits(params, batch, city, cfg)
    return ce_loss(logits, batch.targets, loss_mask(batch, cfg))


def loss_and_grads(params: dict[str, np.ndarray], batch, city, cfg: TrainConfig):
    tp = core.parameters(params)
    with core.Tape() as tape:
        loss = batch_loss(tp, batch, city, cfg)
    return float(loss.data), tape.backward(loss, tp)


def iter_batches(trajs, city, T: int, size: int):
    for i in range(0, len(trajs), size):
        yield pad_batch(trajs[i : i + size], city, T)


def dataset_loss(params: dict[str, np.ndarray], trajs, city, cfg: TrainConfig, chunk: int = 64) -> float:
    """Mean next-step NLL over every target position of ``trajs``."""
    if not trajs:
        raise ValueError("no trajectories to evaluate")
    tp = core.constants(params)
    total, count = 0.0, 0
    for batch in iter_batches(trajs, city, cfg.T, chunk):
        mask = loss_mask(batch, cfg)
        n = int(mask.sum())
        total += float(batch_loss(tp, batch, city, cfg).data) * n
        count += n
    return total / count


# ---------------------------------------------------------------- loops


def _optimizer(cfg: TrainConfig) -> core.OptimizerState:
    return core.OptimizerState(lr=cfg.lr, weight_decay=cfg.weight_decay)


def _mean_val_loss(params, datasets, cfg) -> float | None:
    losses = [dataset_loss(params, ds.val, ds.city, cfg) for ds in datasets if ds.val]
    return float(np.mean(losses)) if losses else None


def pretrain(datasets, cfg: TrainConfig, init: Checkpoint | None = None, max_steps: int | None = None) -> Checkpoint:
    """Multi-city training with early stopping on mean validation loss.

    Every step draws a city (uniformly, or in proportion to its remaining
    batches) and the next mini-batch of that city's shuffled training set.
    Returns the parameters of the best validation epoch.
    """
    datasets = [ds for ds in datasets]
    if not datasets or not any(ds.train for ds in datasets):
        raise ValueError("pretrain needs at least one city with training trajectories")
    datasets = [ds for ds in datasets if ds.train]
    rng = np.random.default_rng([cfg.seed, 11])
    params = init.params if init is not None else model.init_params(cfg.model, cfg.seed)
    params = {k: v.copy() for k, v in params.items()}
    opt = _optimizer(cfg)
    bs = cfg.batch_size
    n_batches = [math.ceil(len(ds.train) / bs) for ds in datasets]
    steps_per_epoch = sum(n_batches)

    meta = {
        "epochs_run": 0,
        "train_loss": [],
        "val_loss": [],
        "initial_train_loss": float(np.mean([dataset_loss(params, ds.train, ds.city, cfg) for ds in datasets])),
        "initial_val_loss": _mean_val_loss(params, datasets, cfg),
        "best_epoch": 0,
        "cities": [ds.city_id for ds in datasets],
        "train_sizes": [len(ds.train) for ds in datasets],
        "history": list(init.meta.get("history", [])) if init is not None else [],
    }
    best_val = meta["initial_val_loss"]
    best = params
    stale = 0
    steps = 0
    for epoch in range(1, cfg.max_epochs + 1):
        orders = [rng.permutation(len(ds.train)) for ds in datasets]
        cursors = [0] * len(datasets)
        remaining = list(n_batches)
        losses = []
        for _ in range(steps_per_epoch):
            if cfg.city_sampling == "uniform":
                ci = int(rng.integers(len(datasets)))
            else:
                w = np.asarray(remaining, dtype=np.float64)
                ci = int(rng.choice(len(datasets), p=w / w.sum()))
            ds = datasets[ci]
            if cursors[ci] >= len(ds.train):
                orders[ci] = rng.permutation(len(ds.train))
                cursors[ci] = 0
            idx = orders[ci][cursors[ci] : cursors[ci] + bs]
            cursors[ci] += bs
            remaining[ci] = max(remaining[ci] - 1, 0)
            batch = pad_batch([ds.train[i] for i in idx], ds.city, cfg.T)
            loss, grads = loss_and_grads(params, batch, ds.city, cfg)
            params, opt = core.adamw_step(params, grads, opt)
            losses.append(loss)
            steps += 1
            if max_steps is not None and steps >= max_steps:
                break
        meta["epochs_run"] = epoch
        meta["train_loss"].append(float(np.mean(losses)))
        val = _mean_val_loss(params, datasets, cfg)
        meta["val_loss"].append(val)
        log.info("epoch %d train %.4f val %s", epoch, meta["train_loss"][-1], val)
        if val is None:
            best = params
            meta["best_epoch"] = epoch
        elif best_val is None or val < best_val:
            best_val, best, stale = val, params, 0
            meta["best_epoch"] = epoch
        else:
            stale += 1
            if stale >= cfg.patience:
                break
        if max_steps is not None and steps >= max_steps:
            break
    meta["history"].append({"phase": "pretrain", "cities": meta["cities"], "epochs": meta["epochs_run"],
                            "best_epoch": meta["best_epoch"]})
    return Checkpoint({k: v.copy() for k, v in best.items()}, cfg, meta)


def subsample_count(n: int, fraction: float) -> int:
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction must lie in (0, 1], got {fraction}")
    return int(math.floor(fraction * n + 1e-9))


def finetune(ckpt: Checkpoint, dataset, fraction: float = 1.0, epochs: int | None = None,
             seed: int | None = None) -> Checkpoint:
    """Train all parameters on a seeded subsample of one city's training set."""
    cfg = ckpt.config
    epochs = cfg.finetune_epochs if epochs is None else epochs
    seed = cfg.seed if seed is None else seed
    n = subsample_count(len(dataset.train), fraction)
    if n == 0:
        raise ValueError(f"fraction {fraction} of {len(dataset.train)} trajectories selects none")
    rng = np.random.default_rng([seed, 13, dataset.city_id])
    chosen = np.sort(rng.choice(len(dataset.train), size=n, replace=False))
    subset = [dataset.train[i] for i in chosen]
    out = ckpt.copy()
    if epochs == 0:
        return out
    params = out.params
    opt = _optimizer(cfg)
    losses = []
    for _ in range(epochs):
        order = rng.permutation(n)
        for i in range(0, n, cfg.batch_size):
            batch = pad_batch([subset[j] for j in order[i : i + cfg.batch_size]], dataset.city, cfg.T)
            loss, grads = loss_and_grads(params, batch, dataset.city, cfg)
            params, opt = core.adamw_step(params, grads, opt)
            losses.append(loss)
    out.params = params
    out.meta.setdefault("history", []).append(
        {"phase": "finetune", "city": dataset.city_id, "fraction": fraction, "trajectories": n,
         "epochs": epochs, "mean_loss": float(np.mean(losses))}
    )
    return out
