"""``trajmoe`` command line.

Every invocation writes its outputs under ``<out>/<command>_<timestamp>_seed<seed>``
where ``<out>`` is ``--out``, else ``$TRAJMOE_OUT``, else ``./runs``. The run
directory holds ``manifest.json`` (argv, config file text, resolved config,
seed, artifact paths, version, start/end time), written before any work and
completed when the command ends. The last stdout line is the run directory.

Exit status: 0 on success, 2 on usage errors, 1 on runtime failures.
"""
from __future__ import annotations

import argparse
import dataclasses
import datetime as dt
import json
import logging
import os
import sys
from pathlib import Path

from . import __version__, evaluation, synth, training
from .config import ABLATIONS, TrainConfig

log = logging.getLogger("trajmoe")

OUT_ENV = "TRAJMOE_OUT"


class UsageError(Exception):
    pass


# ------------------------------------------------------------------ helpers


def _now() -> str:
    return dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds")


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _float_list(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _read_config(path) -> tuple[dict, str]:
    if path is None:
        return {}, ""
    text = Path(path).read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: invalid JSON config ({exc})") from exc
    if not isinstance(data, dict):
        raise UsageError(f"{path}: config must be a JSON object")
    return data, text


def train_config_from(data: dict, **overrides) -> TrainConfig:
    """TrainConfig from a dict that may nest model fields under ``model`` or list them flat."""
    data = dict(data)
    nested = data.pop("model", {})
    cfg = TrainConfig.from_dict({"model": nested})
    flat = {k: v for k, v in data.items()}
    if "ablation" in flat:
        flat["ablation"] = tuple(flat["ablation"])
    cfg = cfg.replace(**flat)
    over = {k: v for k, v in overrides.items() if v is not None}
    return cfg.replace(**over) if over else cfg


class Run:
    """Per-run output directory and manifest."""

    def __init__(self, args, argv, config_text: str, resolved: dict):
        root = Path(args.out or os.environ.get(OUT_ENV) or "runs")
        stamp = dt.datetime.now(dt.timezone.utc).strftime("%Y%m%d-%H%M%S")
        base = f"{args.command}_{stamp}_seed{args.seed}"
        path = root / base
        n = 1
        while path.exists():
            path = root / f"{base}-{n}"
            n += 1
        path.mkdir(parents=True)
        self.dir = path
        self.manifest = {
            "command": ["trajmoe", *argv],
            "subcommand": args.command,
            "config_file": args.config,
            "config_text": config_text,
            "resolved_config": resolved,
            "seed": args.seed,
            "artifacts": {},
            "version": __version__,
            "started": _now(),
            "finished": None,
            "status": "running",
        }
        self.write()

    def write(self):
        (self.dir / "manifest.json").write_text(json.dumps(self.manifest, indent=2, sort_keys=True) + "\n")

    def record_config(self, key: str, value):
        self.manifest["resolved_config"][key] = value
        self.write()

    def artifact(self, name: str, path) -> Path:
        self.manifest["artifacts"][name] = str(Path(path).relative_to(self.dir))
        return Path(path)

    def finish(self, status: str, error: str | None = None):
        self.manifest["finished"] = _now()
        self.manifest["status"] = status
        if error:
            self.manifest["error"] = error
        self.write()


def _print_reports(reports):
    print("cell\tcity\tsamples\tacc@1\tacc@3\tacc@5")
    for r in reports:
        accs = "\t".join(f"{r.acc.get(k, float('nan')):.4f}" for k in evaluation.DEFAULT_KS)
        print(f"{r.cell or '-'}\t{r.city_id}\t{r.samples}\t{accs}")


def _datasets(args, ids=None):
    return synth.load_dataset(args.data, ids)


def _one_city(args, city_id):
    (ds,) = synth.load_dataset(args.data, [city_id])
    return ds


# ----------------------------------------------------------------- commands


def _gen_cfg(args, data):
    fields = dict(data)
    for key, val in (("seed", args.seed), ("cities", args.cities), ("locations", args.locations),
                     ("users", args.users), ("days", args.days), ("anchors", args.anchors),
                     ("noise", args.noise), ("pattern", args.pattern), ("poi_categories", args.categories)):
        if val is not None:
            fields[key] = val
    if args.time_agnostic:
        fields["time_conditioned"] = False
    return synth.GeneratorConfig.from_dict(fields)


def cmd_gen_data(args, run: Run, data):
    cfg = _gen_cfg(args, data)
    run.record_config("generator", cfg.to_dict())
    datasets = synth.generate(cfg, T=args.T)
    root = synth.save_dataset(datasets, run.dir / "data", cfg)
    run.artifact("dataset", root)
    for ds in datasets:
        print(f"city {ds.city_id}: {ds.city.num_locations} locations, "
              f"{len(ds.train)}/{len(ds.val)}/{len(ds.test)} train/val/test trajectories")


def _train_cfg(args, data):
    return train_config_from(data, seed=args.seed, max_epochs=getattr(args, "epochs", None),
                             T=getattr(args, "T", None), lr=getattr(args, "lr", None))


def cmd_pretrain(args, run: Run, data):
    cfg = _train_cfg(args, data)
    run.record_config("train", cfg.to_dict())
    datasets = _datasets(args, args.cities)
    ckpt = training.pretrain(datasets, cfg)
    path = training.save_checkpoint(ckpt, run.dir / "checkpoint.zip")
    run.artifact("checkpoint", path)
    print(f"pretrained {ckpt.meta['epochs_run']} epochs on cities {ckpt.meta['cities']}, "
          f"best epoch {ckpt.meta['best_epoch']}")


def cmd_finetune(args, run: Run, data):
    ckpt = training.load_checkpoint(args.checkpoint)
    ds = _one_city(args, args.city)
    out = training.finetune(ckpt, ds, args.fraction, args.epochs, seed=args.seed)
    path = training.save_checkpoint(out, run.dir / "checkpoint.zip")
    run.artifact("checkpoint", path)
    print(f"fine-tuned on {out.meta['history'][-1]['trajectories']} trajectories of city {args.city}")


def cmd_eval(args, run: Run, data):
    ckpt = training.load_checkpoint(args.checkpoint)
    ks = tuple(sorted(set(args.k)))
    reports = []
    for ds in _datasets(args, args.cities):
        rep, _ = evaluation.evaluate(ckpt, ds, args.split, ks=ks)
        reports.append(rep)
    run.artifact("reports", evaluation.write_reports(reports, run.dir / "reports.csv"))
    run.artifact("timing", evaluation.write_timing(reports, run.dir / "timing.csv"))
    _print_reports(reports)


def _experiment(args, data, kind):
    known = {f.name for f in dataclasses.fields(evaluation.ExperimentConfig)}
    fields = {k: v for k, v in data.items() if k in known}
    # anything else is a train setting given at the top level
    train_data = {**{k: v for k, v in data.items() if k not in known}, **fields.pop("train", {})}
    train = train_config_from(train_data, seed=args.seed, max_epochs=args.epochs)
    fields["train"] = train.to_dict()
    fields["kind"] = kind
    if getattr(args, "variant", None):
        fields["variants"] = list(args.variant)
    if getattr(args, "city", None) is not None:
        fields["target_city"] = args.city
    if getattr(args, "cities", None) is not None:
        fields["pretrain_cities"] = list(args.cities)
    if getattr(args, "fraction", None) is not None:
        if kind == "fewshot":
            fields["fractions"] = list(args.fraction)
        else:
            fields["finetune_fraction"] = args.fraction[0]
    return evaluation.ExperimentConfig.from_dict(fields)


def _run_grid(args, run: Run, exp):
    run.record_config("experiment", exp.to_dict())
    reports = evaluation.run_experiment(exp, _datasets(args), run.dir / "cells", jobs=args.jobs)
    run.artifact("reports", run.dir / "cells" / "reports.csv")
    run.artifact("summary", run.dir / "cells" / "summary.json")
    _print_reports(reports)


def cmd_ablate(args, run: Run, data):
    _run_grid(args, run, _experiment(args, data, "ablation"))


def cmd_experiment(args, run: Run, data):
    _run_grid(args, run, _experiment(args, data, args.kind))


def cmd_gate_stats(args, run: Run, data):
    ckpt = training.load_checkpoint(args.checkpoint)
    ds = _one_city(args, args.city)
    stats = evaluation.gate_stats(ckpt, ds, args.split, source=args.source, layer=args.layer)
    slots, layers = evaluation.write_gate_stats(stats, run.dir)
    run.artifact("gate_slots", slots)
    run.artifact("gate_layers", layers)
    print(f"{stats.records} gate records over {int((stats.slot_counts > 0).sum())} time slots")


COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "gate-stats": cmd_gate_stats,
    "experiment": cmd_experiment,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="trajmoe", description="Cross-city next-location prediction.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    def common(sp):
        sp.add_argument("--seed", type=int, help="root seed for every random choice (default: config file, else 0)")
        sp.add_argument("--config", help="JSON config file; flags override its values")
        sp.add_argument("--out", help=f"output root (default ${OUT_ENV} or ./runs)")
        sp.add_argument("-v", "--verbose", action="store_true")

    g = sub.add_parser("gen-data", help="generate a synthetic multi-city dataset")
    common(g)
    g.add_argument("--cities", type=int)
    g.add_argument("--locations", type=int)
    g.add_argument("--users", type=int)
    g.add_argument("--days", type=int)
    g.add_argument("--anchors", type=int)
    g.add_argument("--categories", type=int)
    g.add_argument("--noise", type=float)
    g.add_argument("--pattern", choices=("anchors", "uniform"))
    g.add_argument("--time-agnostic", action="store_true", help="itinerary without time-dependent transitions")
    g.add_argument("--T", type=int, default=24, help="split windows longer than T steps")

    t = sub.add_parser("pretrain", help="multi-city pretraining")
    common(t)
    t.add_argument("--data", required=True, help="dataset root written by gen-data")
    t.add_argument("--cities", type=_int_list, help="city ids, comma separated (default all)")
    t.add_argument("--epochs", type=int, help="maximum epochs")
    t.add_argument("--lr", type=float)
    t.add_argument("--T", type=int)

    f = sub.add_parser("finetune", help="fine-tune a checkpoint on one city")
    common(f)
    f.add_argument("--checkpoint", required=True)
    f.add_argument("--data", required=True)
    f.add_argument("--city", type=int, required=True)
    f.add_argument("--fraction", type=float, default=1.0)
    f.add_argument("--epochs", type=int)

    e = sub.add_parser("eval", help="Acc@k of a checkpoint")
    common(e)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--cities", type=_int_list)
    e.add_argument("--split", default="test", choices=("train", "val", "test"))
    e.add_argument("--k", type=_int_list, default=[1, 3, 5])

    a = sub.add_parser("ablate", help="train and evaluate ablation variants")
    common(a)
    a.add_argument("--data", required=True)
    a.add_argument("--city", type=int, help="evaluation city (default highest id)")
    a.add_argument("--cities", type=_int_list, help="training cities (default the evaluation city)")
    a.add_argument("--variant", action="append", choices=ABLATIONS, help="repeatable; default all six")
    a.add_argument("--epochs", type=int)
    a.add_argument("--fraction", type=_float_list, help="fine-tune fraction when training cities exclude the target")
    a.add_argument("--jobs", type=int, default=1)

    s = sub.add_parser("gate-stats", help="export router statistics")
    common(s)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--city", type=int, required=True)
    s.add_argument("--split", default="test", choices=("train", "val", "test"))
    s.add_argument("--source", default="W", choices=("W", "w_time"), help="weights whose top-1 is counted")
    s.add_argument("--layer", type=int, default=-1, help="router layer for the slot shares")

    x = sub.add_parser("experiment", help="scaling / few-shot / ablation / overall grids")
    common(x)
    x.add_argument("--kind", required=True, choices=evaluation.EXPERIMENT_KINDS)
    x.add_argument("--data", required=True)
    x.add_argument("--city", type=int, help="target city (default highest id)")
    x.add_argument("--cities", type=_int_list, help="pretraining cities (default all others)")
    x.add_argument("--fraction", type=_float_list, help="few-shot fractions, or the fine-tune fraction")
    x.add_argument("--epochs", type=int)
    x.add_argument("--jobs", type=int, default=1)
    return p


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        data, text = _read_config(args.config)
    except (UsageError, OSError) as exc:
        print(f"trajmoe: error: {exc}", file=sys.stderr)
        return 2
    if args.seed is None:
        args.seed = int(data.get("seed", data.get("train", {}).get("seed", 0)))
    resolved = {k: v for k, v in vars(args).items() if k not in ("verbose",)}
    run = Run(args, argv, text, resolved)
    try:
        COMMANDS[args.command](args, run, data)
    except Exception as exc:  # noqa: BLE001 - every failure becomes a diagnostic and exit 1
        run.finish("failed", f"{type(exc).__name__}: {exc}")
        print(f"trajmoe: error: {exc}", file=sys.stderr)
        log.debug("traceback", exc_info=True)
        return 1
    run.finish("ok")
    print(run.dir)
    return 0


if __name__ == "__main__":
    sys.exit(main())
