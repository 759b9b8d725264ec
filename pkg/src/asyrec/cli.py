"""Command-line entry point: ``gen-data``, ``train``, ``eval``, ``ablate``, ``report``.

Configuration is merged as defaults < ``--config`` file section < flags.
Exit status is 0 on success, 2 for invalid configuration or usage, 1 for
runtime failures such as missing files or schema mismatches.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import hashlib
import io
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from . import ablation as ab
from .data import (Dataset, DatasetError, SynthConfig, atomic_write, load_dataset, remap_hierarchical,
                   save_dataset, stratified_holdout, synth_generate)
from .model import load_checkpoint, save_checkpoint
from .train import (CrossValidation, FoldResult, TrainConfig, confusion_csv, cross_validate, evaluate,
                    report_json, train)


class ConfigError(ValueError):
    pass


DEFAULTS: dict[str, dict] = {
    "gen-data": {"classes": 4, "dyads_per_class": 24, "clips": 12, "dim": 16, "noise": 0.05,
                 "asymmetric": True, "asym_fraction": 0.5, "bidirectional": True,
                 "output": "data.tsv", "seed": 0},
    "train": {"data": "", "kfold": 3, "batch_size": 64, "learning_rate": 1e-4, "weight_decay": 5e-4,
              "max_epochs": 200, "patience": 10, "val_fraction": 0.2, "test_fraction": 0.2,
              "aggregate": "counterpart", "level": "", "workers": 1, "seed": 0},
    "eval": {"data": "", "run": "", "checkpoint": "", "level": "", "seed": 0},
    "ablate": {"data": "", "run": "", "checkpoint": "", "kind": "all", "renormalize": True,
               "workers": 1, "seed": 0},
    "report": {"inputs": "", "seed": 0},
}

_BOOL = {"1": True, "true": True, "yes": True, "on": True, "0": False, "false": False, "no": False, "off": False}


def _coerce(key: str, value, default):
    if isinstance(value, str) and not isinstance(default, str):
        text = value.strip()
        try:
            if isinstance(default, bool):
                return _BOOL[text.lower()]
            if isinstance(default, int):
                return int(text)
            if isinstance(default, float):
                return float(text)
        except (KeyError, ValueError):
            raise ConfigError(f"{key}: cannot read {value!r} as {type(default).__name__}") from None
    return value


def resolve_config(command: str, args: argparse.Namespace) -> dict:
    cfg = dict(DEFAULTS[command])
    if args.config:
        parser = configparser.ConfigParser()
        try:
            with open(args.config, encoding="utf-8") as fh:
                parser.read_file(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config file: {exc}") from None
        except configparser.Error as exc:
            raise ConfigError(f"config file {args.config}: {exc}") from None
        if parser.has_section(command):
            for key, value in parser.items(command):
                name = key.replace("-", "_")
                if name not in cfg:
                    raise ConfigError(f"[{command}] unknown key {key!r}; known: {', '.join(sorted(cfg))}")
                cfg[name] = _coerce(name, value, DEFAULTS[command][name])
    for name in cfg:
        flag = getattr(args, name, None)
        if flag is not None:
            cfg[name] = flag
    return cfg


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()[:16]


def header_meta(cfg: dict) -> dict:
    return {"version": __version__, "seed": cfg["seed"], "config_hash": config_hash(cfg)}


def _comment_header(cfg: dict) -> str:
    return "".join(f"# {k}={v}\n" for k, v in header_meta(cfg).items())


def worker_count(requested: int) -> int:
    cap = os.environ.get("ASYREC_THREADS")
    n = max(1, int(requested))
    if cap:
        try:
            n = min(n, max(1, int(cap)))
        except ValueError:
            raise ConfigError(f"ASYREC_THREADS must be an integer, got {cap!r}") from None
    return n


def _out_dir(args) -> Path:
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_config(out: Path, command: str, cfg: dict) -> None:
    payload = {"command": command, "config": cfg, **header_meta(cfg)}
    atomic_write(out / f"{command}.config.json", report_json(payload))


def _load_data(cfg: dict) -> Dataset:
    if not cfg["data"]:
        raise ConfigError("a dataset path is required (-d/--data)")
    ds = load_dataset(cfg["data"])
    if cfg.get("level"):
        ds = remap_hierarchical(ds, cfg["level"])
        if not ds.dyads:
            raise DatasetError(f"no dyad survives level {cfg['level']}")
    return ds


# ------------------------------------------------------------------ commands

def count_table(ds: Dataset) -> str:
    """Videos and clips per direction and class, one column per class."""
    counts = ds.class_counts()
    heads, videos, clips = [""], ["videos"], ["clips"]
    for direction, per in counts.items():
        for cls, (v, c) in per.items():
            heads.append(f"{direction}:{cls}")
            videos.append(str(v))
            clips.append(f"{c:,}")
    width = [max(len(r[k]) for r in (heads, videos, clips)) for k in range(len(heads))]
    rows = [" | ".join(r[k].rjust(width[k]) for k in range(len(r))) for r in (heads, videos, clips)]
    total = f"total: {len(ds)} dyads, {ds.n_clips:,} clips"
    return "\n".join(rows + [total]) + "\n"


def cmd_gen_data(args) -> int:
    cfg = resolve_config("gen-data", args)
    try:
        synth = SynthConfig(dim=cfg["dim"], n_classes=cfg["classes"], dyads_per_class=cfg["dyads_per_class"],
                            clips=cfg["clips"], noise=cfg["noise"], asymmetric=cfg["asymmetric"],
                            asym_fraction=cfg["asym_fraction"], bidirectional=cfg["bidirectional"])
        ds = synth_generate(synth, cfg["seed"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    out = _out_dir(args)
    path = out / cfg["output"]
    save_dataset(ds, path, header_meta(cfg))
    _write_config(out, "gen-data", cfg)
    sys.stdout.write(count_table(ds))
    return 0


def _train_config(cfg: dict) -> TrainConfig:
    try:
        return TrainConfig(batch_size=cfg["batch_size"], learning_rate=cfg["learning_rate"],
                           weight_decay=cfg["weight_decay"], max_epochs=cfg["max_epochs"],
                           patience=cfg["patience"], seed=cfg["seed"], val_fraction=cfg["val_fraction"],
                           aggregate=cfg["aggregate"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def cmd_train(args) -> int:
    cfg = resolve_config("train", args)
    tcfg = _train_config(cfg)
    ds = _load_data(cfg)
    if cfg["kfold"] >= 2:
        cv = cross_validate(ds, cfg["kfold"], tcfg, workers=worker_count(cfg["workers"]))
    else:
        rest, test = stratified_holdout(ds, cfg["test_fraction"], cfg["seed"])
        fit, val = stratified_holdout(rest, cfg["val_fraction"], cfg["seed"])
        if len(test) == 0 or len(val) == 0:
            raise ConfigError("single-split training needs at least two dyads per class")
        params, history = train(fit, val, tcfg)
        cv = CrossValidation([FoldResult(0, params, history, evaluate(params, test), test)])
    out = _out_dir(args)
    meta = header_meta(cfg)
    hist = ["fold,epoch,train_loss,val_uar,best"]
    conf = ["fold,level,direction,true,pred,count"]
    for f in cv.folds:
        save_checkpoint(f.params, out / f"fold{f.fold}.ckpt", meta)
        hist += [f"{f.fold},{h.epoch},{h.train_loss!r},{h.val_uar!r},{int(h.best)}" for h in f.history]
        conf += confusion_csv(f.report, f.fold)
    atomic_write(out / "history.csv", _comment_header(cfg) + "\n".join(hist) + "\n")
    atomic_write(out / "confusion.csv", _comment_header(cfg) + "\n".join(conf) + "\n")
    payload = {**meta, "config": cfg, **cv.to_dict(),
               "test_dyads": {str(f.fold): sorted(f.test_set.dyads) for f in cv.folds}}
    atomic_write(out / "report.json", report_json(payload))
    _write_config(out, "train", cfg)
    print(f"uar {cv.mean:.4f} +- {cv.std:.4f} over {len(cv.folds)} fold(s)")
    return 0


def _folds(cfg: dict, ds: Dataset) -> list[tuple[str, object, Dataset]]:
    """(fold id, params, test set) from a training run directory or explicit checkpoints."""
    if cfg["run"]:
        run = Path(cfg["run"])
        report = json.loads((run / "report.json").read_text(encoding="utf-8"))
        out = []
        for fid, ids in sorted(report["test_dyads"].items(), key=lambda kv: int(kv[0])):
            missing = [d for d in ids if d not in ds.dyads]
            if missing and not cfg.get("level"):
                raise DatasetError(f"fold {fid}: dyad {missing[0]} is not in the dataset")
            out.append((fid, load_checkpoint(run / f"fold{fid}.ckpt"),
                        ds.subset([d for d in ids if d in ds.dyads])))
        return out
    if cfg["checkpoint"]:
        paths = [p for p in cfg["checkpoint"].split(",") if p]
        return [(str(k), load_checkpoint(p), ds) for k, p in enumerate(paths)]
    raise ConfigError("give --run <train output dir> or --checkpoint <path[,path...]>")


def cmd_eval(args) -> int:
    cfg = resolve_config("eval", args)
    ds = _load_data(cfg)
    out = _out_dir(args)
    folds, conf, uars = [], ["fold,level,direction,true,pred,count"], []
    for fid, params, test in _folds(cfg, ds):
        rep = evaluate(params, test)
        folds.append({"fold": fid, "test_dyads": len(test), **rep.to_dict()})
        conf += confusion_csv(rep, fid)
        uars.append(rep.uar)
    payload = {**header_meta(cfg), "config": cfg, "folds": folds,
               "uar": {"mean": float(np.mean(uars)), "std": float(np.std(uars)), "per_fold": uars}}
    atomic_write(out / "eval.json", report_json(payload))
    atomic_write(out / "eval_confusion.csv", _comment_header(cfg) + "\n".join(conf) + "\n")
    _write_config(out, "eval", cfg)
    print(f"uar {payload['uar']['mean']:.4f} +- {payload['uar']['std']:.4f}")
    return 0


def _kinds(text: str) -> list[str]:
    if text == "all":
        return list(ab.KINDS)
    kinds = [k.strip() for k in text.split(",") if k.strip()]
    bad = [k for k in kinds if k not in ab.KINDS]
    if bad or not kinds:
        raise ConfigError(f"unknown mask kind {bad[0] if bad else text!r}; valid kinds: {', '.join(ab.KINDS)}")
    return kinds


def _run_condition(job):
    folds, spec = job
    return ab.run_mask(folds, spec)


def cmd_ablate(args) -> int:
    cfg = resolve_config("ablate", args)
    kinds = _kinds(cfg["kind"])
    ds = _load_data(cfg)
    folds = _folds(cfg, ds)
    pairs = [(p, t) for _, p, t in folds]
    ids = [fid for fid, _, _ in folds]
    specs = []
    for kind in kinds:
        smoke = ab.smoke_spec(kind, cfg["seed"])
        if smoke is not None:
            specs.append(smoke)
        for spec in ab.grid(kind, cfg["seed"]):
            if kind == "modality_edge" and not cfg["renormalize"]:
                spec = ab.MaskSpec(kind, pair=spec.pair, seed=spec.seed, renormalize=False)
            specs.append(spec)
    jobs = [(pairs, s) for s in specs]
    n = worker_count(cfg["workers"])
    if n > 1:
        with ProcessPoolExecutor(max_workers=n) as pool:
            reports = list(pool.map(_run_condition, jobs))
    else:
        reports = [_run_condition(j) for j in jobs]
    rows = [",".join(ab.CSV_COLUMNS)]
    for rep in reports:
        rows += ab.csv_rows(rep, ids)
    out = _out_dir(args)
    atomic_write(out / "ablation.csv", _comment_header(cfg) + "\n".join(rows) + "\n")
    _write_config(out, "ablate", cfg)
    print(f"{len(reports)} conditions x {len(folds)} fold(s) -> {out / 'ablation.csv'}")
    return 0


def read_csv(path) -> list[dict]:
    text = Path(path).read_text(encoding="utf-8")
    body = "".join(line for line in io.StringIO(text) if not line.startswith("#"))
    return list(csv.DictReader(io.StringIO(body)))


def summarize_ablation(tables: list[list[dict]]) -> list[str]:
    """Mean and population std of the per-run ``mean`` rows, per condition."""
    keys = ("kind", "parity", "ratio", "pair", "region")
    groups: dict[tuple, list[dict]] = {}
    for rows in tables:
        for row in rows:
            if row["fold"] == "mean":
                groups.setdefault(tuple(row[k] for k in keys), []).append(row)
    out = [",".join(keys + ("runs", "dF_mean", "dF_std", "uar_mean", "dF_ij_mean", "dF_ji_mean"))]
    for key, rows in groups.items():
        col = lambda name: [float(r[name]) for r in rows if r.get(name)]  # noqa: E731
        stats = [np.mean(col("dF")), np.std(col("dF")), np.mean(col("uar")), np.mean(col("dF_ij"))]
        stats.append(np.mean(col("dF_ji")) if col("dF_ji") else None)
        out.append(",".join(list(key) + [str(len(rows))] + [ab._fmt(None if v is None else float(v)) for v in stats]))
    return out


def cmd_report(args) -> int:
    cfg = resolve_config("report", args)
    inputs = [Path(p) for p in cfg["inputs"].split(",") if p]
    if not inputs:
        raise ConfigError("report needs --inputs <ablation.csv|report.json|run dir>[,...]")
    tables, uar_rows = [], ["source,direction,mean,std,folds"]
    for path in inputs:
        if path.is_dir():
            path = path / "report.json" if (path / "report.json").exists() else path / "ablation.csv"
        if path.suffix == ".json":
            rep = json.loads(path.read_text(encoding="utf-8"))
            block = rep["uar"]
            for direction, stats in sorted(block.get("by_direction", {}).items()):
                uar_rows.append(f"{path},{direction},{stats['mean']!r},{stats['std']!r},{len(block['per_fold'])}")
            uar_rows.append(f"{path},mean,{block['mean']!r},{block['std']!r},{len(block['per_fold'])}")
        else:
            tables.append(read_csv(path))
    out = _out_dir(args)
    written = []
    if tables:
        atomic_write(out / "summary_ablation.csv", _comment_header(cfg) + "\n".join(summarize_ablation(tables)) + "\n")
        written.append("summary_ablation.csv")
    if len(uar_rows) > 1:
        atomic_write(out / "summary_uar.csv", _comment_header(cfg) + "\n".join(uar_rows) + "\n")
        written.append("summary_uar.csv")
    _write_config(out, "report", cfg)
    print("wrote " + ", ".join(written))
    return 0


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="config file with one [command] section")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory (default: current directory)")

    p = argparse.ArgumentParser(prog="asyrec", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"asyrec {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", parents=[common], help="write a synthetic dyad dataset")
    g.add_argument("--classes", type=int)
    g.add_argument("--dyads-per-class", type=int)
    g.add_argument("--clips", type=int)
    g.add_argument("--dim", type=int)
    g.add_argument("--noise", type=float)
    g.add_argument("--asym-fraction", type=float)
    g.add_argument("--symmetric", dest="asymmetric", action="store_false", default=None)
    g.add_argument("--unidirectional", dest="bidirectional", action="store_false", default=None)
    g.add_argument("-o", "--output")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", parents=[common], help="train with K-fold cross-validation")
    t.add_argument("-d", "--data")
    t.add_argument("--kfold", type=int, help="folds; below 2 trains one stratified split")
    t.add_argument("--batch-size", type=int)
    t.add_argument("--lr", "--learning-rate", dest="learning_rate", type=float)
    t.add_argument("--weight-decay", type=float)
    t.add_argument("--max-epochs", type=int)
    t.add_argument("--patience", type=int)
    t.add_argument("--val-fraction", type=float)
    t.add_argument("--test-fraction", type=float)
    t.add_argument("--aggregate", choices=("counterpart", "self"))
    t.add_argument("--level", choices=("I", "II", "III"))
    t.add_argument("--workers", type=int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", parents=[common], help="evaluate checkpoints")
    e.add_argument("-d", "--data")
    e.add_argument("--run", help="train output directory (uses its fold test splits)")
    e.add_argument("--checkpoint", help="comma-separated checkpoint paths")
    e.add_argument("--level", choices=("I", "II", "III"))
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", parents=[common], help="run mask grids and write the ablation CSV")
    a.add_argument("-d", "--data")
    a.add_argument("--run")
    a.add_argument("--checkpoint")
    a.add_argument("--kind", help=f"comma-separated subset of {', '.join(ab.KINDS)}, or all")
    a.add_argument("--no-renormalize", dest="renormalize", action="store_false", default=None)
    a.add_argument("--workers", type=int)
    a.set_defaults(func=cmd_ablate)

    r = sub.add_parser("report", parents=[common], help="aggregate runs into plotting tables")
    r.add_argument("--inputs", help="comma-separated ablation CSVs, report.json files or run dirs")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"asyrec {args.command}: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, KeyError) as exc:
        print(f"asyrec {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
