"""Command-line pipeline: gen-data, train, delete, unlearn, eval, report.

Every stage reads one YAML experiment config, writes its outputs under the
config's output directory, and drops a manifest (config hash, seeds,
versions) so runs are replayable.  All randomness comes from the explicit
seeds in the config; rerunning a stage with identical inputs produces
byte-identical outputs (timing files aside, which measure wall time).

Exit codes: 0 success, 2 validation/configuration error, 3 stage-ordering
error, 4 runtime or training error.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .datagen import DataGenConfig, gen_star_schema
from .errors import (CardestError, ConfigurationError, StageOrderingError,
                     TrainingError, ValidationError)
from .model import (ModelConfig, encode_relation, init_model,
                    load_checkpoint, save_checkpoint, train)
from .queries import save_workload
from .relational import (Condition, DatasetSplit, DeletionTask, SchemaGraph,
                         apply_deletion, attribute_specs, load_dataset,
                         materialize_join, save_dataset)
from .unlearn import METHODS, CepConfig, run_method
from .workload import (PERCENTILES, WorkloadConfig, complement_query,
                       convergence_trace, evaluate, gen_workload)


@dataclass
class ExperimentConfig:
    output_dir: Path
    seeds: dict[str, int]
    datagen: DataGenConfig | None
    dataset_dir: Path | None
    model: ModelConfig
    task: DeletionTask
    cep: CepConfig
    workload: WorkloadConfig
    join_cap: int
    raw: dict = field(default_factory=dict)


def parse_task(d: dict) -> DeletionTask:
    name = d.get("name")
    if not name:
        raise ConfigurationError("task needs a name like A-2-0.5")
    parts = name.split("-")
    if len(parts) != 3:
        raise ConfigurationError(f"task name {name!r} is not [Type]-[Scope]-[Ratio]")
    dtype, scope_s, ratio_s = parts
    try:
        scope, ratio = int(scope_s), float(ratio_s)
    except ValueError as exc:
        raise ConfigurationError(f"task name {name!r}: {exc}") from exc
    conds = []
    for c in d.get("conditions", []):
        conds.append(Condition(table=c["table"], column=c.get("column"),
                               value=c.get("value"),
                               lo=c.get("lo"), hi=c.get("hi")))
    if len(conds) != scope:
        raise ConfigurationError(
            f"task {name!r}: scope {scope} but {len(conds)} conditions")
    return DeletionTask(dtype=dtype, conditions=tuple(conds), ratio=ratio)


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"config file {path} does not exist")
    raw = yaml.safe_load(path.read_text()) or {}
    for key in ("output_dir", "seeds", "task"):
        if key not in raw:
            raise ConfigurationError(f"config is missing {key!r}")
    seeds = {k: int(v) for k, v in raw["seeds"].items()}
    for k in ("data", "model", "workload", "eval"):
        if k not in seeds:
            raise ConfigurationError(f"seeds must include {k!r}")
    datagen_cfg = None
    dataset_dir = None
    if "dataset" in raw:
        dataset_dir = Path(raw["dataset"]["dir"])
    else:
        dg = dict(raw.get("datagen", {}))
        if "dim_rows" in dg:
            dg["dim_rows"] = tuple(dg["dim_rows"])
        for tup in ("hub_cat_cards", "dim_cat_cards", "numeric_range"):
            if tup in dg:
                dg[tup] = tuple(dg[tup])
        dg.setdefault("seed", seeds["data"])
        datagen_cfg = DataGenConfig(**dg)
    mc = dict(raw.get("model", {}))
    if mc.get("column_order") is not None:
        mc["column_order"] = tuple(mc["column_order"])
    wl = dict(raw.get("workload", {}))
    if "focus_columns" in wl:
        wl["focus_columns"] = tuple(wl["focus_columns"])
    return ExperimentConfig(
        output_dir=Path(raw["output_dir"]),
        seeds=seeds,
        datagen=datagen_cfg,
        dataset_dir=dataset_dir,
        model=ModelConfig(**mc),
        task=parse_task(raw["task"]),
        cep=CepConfig(**raw.get("cep", {})),
        workload=WorkloadConfig(**wl),
        join_cap=int(raw.get("join_cap", 5_000_000)),
        raw=raw,
    )


def write_manifest(directory: Path, command: str, cfg: ExperimentConfig,
                   extra: dict | None = None):
    directory.mkdir(parents=True, exist_ok=True)
    config_bytes = json.dumps(cfg.raw, sort_keys=True, default=str).encode()
    manifest = {
        "command": command,
        "config_sha256": hashlib.sha256(config_bytes).hexdigest(),
        "seeds": cfg.seeds,
        "versions": {"cardest": __version__,
                     "numpy": np.__version__,
                     "python": sys.version.split()[0]},
    }
    if extra:
        manifest.update(extra)
    (directory / "manifest.json").write_text(
        json.dumps(manifest, sort_keys=True, indent=1) + "\n")


def _require(path: Path, hint: str):
    if not path.exists():
        raise StageOrderingError(f"missing {path}; run `{hint}` first")


def _write_csv(path: Path, header: list[str], rows: list[list]):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, float) else str(v)


# ---------------------------------------------------------------------------
# stages


def cmd_gen_data(cfg: ExperimentConfig) -> Path:
    out = cfg.output_dir / "data"
    if cfg.dataset_dir is not None:
        db = load_dataset(cfg.dataset_dir)  # validate external data, then copy
        save_dataset(db, out)
    else:
        db = gen_star_schema(cfg.datagen)
        save_dataset(db, out)
    write_manifest(out, "gen-data", cfg, {"tables": db.table_names()})
    return out


def _load_db(cfg: ExperimentConfig) -> SchemaGraph:
    data_dir = cfg.output_dir / "data"
    _require(data_dir / "schema.txt", "cardest gen-data")
    return load_dataset(data_dir)


def cmd_train(cfg: ExperimentConfig) -> Path:
    db = _load_db(cfg)
    out = cfg.output_dir / "model"
    out.mkdir(parents=True, exist_ok=True)
    rel = materialize_join(db.tables, db.joins, cap=cfg.join_cap)
    specs = attribute_specs(rel)
    model = init_model(specs, cfg.model, seed=cfg.seeds["model"])
    codes, valid = encode_relation(model, rel)
    t0 = time.perf_counter()
    trace = train(model, codes[valid], cfg.seeds["model"])
    train_seconds = time.perf_counter() - t0
    save_checkpoint(model, out / "original.ckpt")
    _write_csv(out / "train_trace.csv", ["step", "loss"],
               [[i, _fmt(v)] for i, v in enumerate(trace)])
    _write_csv(out / "timing.csv", ["stage", "seconds"],
               [["train_seconds", repr(train_seconds)]])
    write_manifest(out, "train", cfg, {"parameters": model.parameter_count(),
                                       "join_rows": rel.cardinality})
    return out


def cmd_delete(cfg: ExperimentConfig) -> Path:
    db = _load_db(cfg)
    split = apply_deletion(db, cfg.task, seed=cfg.seeds["data"])
    out = cfg.output_dir / "split"
    save_dataset(SchemaGraph(split.retained, split.joins, split.hub), out / "retained")
    save_dataset(SchemaGraph(split.deleted, split.joins, split.hub), out / "deleted")
    task_doc = {"name": cfg.task.name, "dtype": cfg.task.dtype, "ratio": cfg.task.ratio,
                "conditions": [{"table": c.table, "column": c.column, "value": c.value,
                                "lo": c.lo, "hi": c.hi} for c in cfg.task.conditions]}
    (out / "task.json").write_text(json.dumps(task_doc, sort_keys=True, indent=1) + "\n")
    write_manifest(out, "delete", cfg, {
        "deleted_rows": {t.name: t.row_count for t in split.deleted}})
    return out


def _load_split(cfg: ExperimentConfig) -> DatasetSplit:
    split_dir = cfg.output_dir / "split"
    _require(split_dir / "task.json", "cardest delete")
    retained = load_dataset(split_dir / "retained", validate=False)
    deleted = load_dataset(split_dir / "deleted", validate=False)
    doc = json.loads((split_dir / "task.json").read_text())
    conds = tuple(Condition(table=c["table"], column=c["column"], value=c["value"],
                            lo=c["lo"], hi=c["hi"]) for c in doc["conditions"])
    task = DeletionTask(dtype=doc["dtype"], conditions=conds, ratio=doc["ratio"])
    return DatasetSplit(retained.tables, deleted.tables, task,
                        joins=retained.joins, hub=retained.hub)


def cmd_unlearn(cfg: ExperimentConfig, method: str,
                cep_overrides: dict | None = None) -> Path:
    if method not in METHODS:
        raise ValidationError(f"--method must be one of {METHODS}")
    split = _load_split(cfg)
    cep_cfg = cfg.cep
    if cep_overrides:
        cep_cfg = CepConfig(**{**asdict(cfg.cep), **cep_overrides})
    original = None
    if method != "retrain":
        ckpt = cfg.output_dir / "model" / "original.ckpt"
        _require(ckpt, "cardest train")
        original = load_checkpoint(ckpt)
    run = run_method(method, split, original, cep_cfg, seed=cfg.seeds["model"],
                     model_cfg=cfg.model, cap=cfg.join_cap)
    out = cfg.output_dir / f"unlearn-{method}"
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(run.model, out / "model.ckpt")
    total = sum(v for k, v in run.timings.items()
                if k in ("prune_seconds", "finetune_seconds", "train_seconds"))
    _write_csv(out / "timing.csv", ["stage", "seconds"],
               [[k, repr(v)] for k, v in run.timings.items()] +
               [["total_seconds", repr(total)]])
    _write_csv(out / "trace.csv", ["step", "loss"],
               [[i, _fmt(v)] for i, v in enumerate(run.loss_trace)])
    write_manifest(out, f"unlearn-{method}", cfg, {"method": method})
    return out


def _workloads(cfg: ExperimentConfig, db: SchemaGraph):
    """OQ and CQ workloads; regenerated deterministically on each call and
    persisted next to the stage outputs for inspection."""
    wl_cfg = cfg.workload
    if not wl_cfg.focus_columns:
        focus = tuple(f"{t}.{c}" for t, c in cfg.task.condition_columns())
        wl_cfg = WorkloadConfig(**{**asdict(wl_cfg), "focus_columns": focus})
    oq = gen_workload(db, wl_cfg.n_queries, cfg.seeds["workload"], wl_cfg)
    cond_cols = {f"{t}.{c}" for t, c in cfg.task.condition_columns()}
    cq = [c for q in oq if (c := complement_query(q, cond_cols)) is not None]
    save_workload(oq, cfg.output_dir / "workload_oq.txt")
    save_workload(cq, cfg.output_dir / "workload_cq.txt")
    return oq, cq


def cmd_eval(cfg: ExperimentConfig, method: str, query_types: str = "both") -> Path:
    if query_types not in ("oq", "cq", "both"):
        raise ValidationError("--query-types must be oq, cq, or both")
    db = _load_db(cfg)
    split = _load_split(cfg)
    if method == "stale":
        ckpt = cfg.output_dir / "model" / "original.ckpt"
        _require(ckpt, "cardest train")
    else:
        ckpt = cfg.output_dir / f"unlearn-{method}" / "model.ckpt"
        _require(ckpt, f"cardest unlearn --method {method}")
    model = load_checkpoint(ckpt)

    # the scale constant matches the distribution the model represents
    if method == "stale":
        total_rows = materialize_join(db.tables, db.joins, cap=cfg.join_cap).cardinality
    else:
        total_rows = split.retained_join(cfg.join_cap).cardinality

    oq, cq = _workloads(cfg, db)
    labeled = []
    if query_types in ("oq", "both"):
        labeled += [("OQ", q) for q in oq]
    if query_types in ("cq", "both"):
        labeled += [("CQ", q) for q in cq]
    t0 = time.perf_counter()
    report = evaluate(model, labeled, split.retained, split.joins, total_rows,
                      seed=cfg.seeds["eval"], num_samples=cfg.workload.num_samples,
                      cap=cfg.join_cap)
    eval_seconds = time.perf_counter() - t0

    out = cfg.output_dir / f"eval-{method}"
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "report.csv",
               ["query_id", "type", "c", "c_hat", "qerr", "excluded_reason"],
               [[r.qid, r.qtype, _fmt(r.true_card), _fmt(r.est_card),
                 _fmt(r.qerr) if r.qerr is not None else "",
                 r.excluded_reason or ""] for r in report.rows])
    rows = []
    for qtype, pcts in sorted(report.percentiles.items()):
        rows.append([method, qtype] + [_fmt(pcts[p]) for p in PERCENTILES] +
                    [len(report.included(None if qtype == "ALL" else qtype)),
                     report.excluded.get("model-zero", 0),
                     report.excluded.get("true-zero", 0),
                     total_rows])
    _write_csv(out / "summary.csv",
               ["method", "qtype", "p50", "p75", "p95", "p99",
                "included", "excluded_model_zero", "excluded_true_zero", "scale_rows"],
               rows)
    _write_csv(out / "timing.csv", ["stage", "seconds"],
               [["eval_seconds", repr(eval_seconds)]])
    write_manifest(out, f"eval-{method}", cfg,
                   {"method": method, "query_types": query_types,
                    "degenerate": report.degenerate})
    return out


def cmd_report(cfg: ExperimentConfig) -> Path:
    out = cfg.output_dir / "report"
    out.mkdir(parents=True, exist_ok=True)
    lines = ["# Q-error summary", "",
             "| method | qtype | p50 | p75 | p95 | p99 | included |",
             "|---|---|---|---|---|---|---|"]
    summary_rows = []
    for method in METHODS:
        summary = cfg.output_dir / f"eval-{method}" / "summary.csv"
        if not summary.exists():
            continue
        with open(summary, newline="") as fh:
            for row in list(csv.DictReader(fh)):
                summary_rows.append(row)
                lines.append("| {method} | {qtype} | {p50} | {p75} | {p95} | {p99} |"
                             " {included} |".format(**row))
    lines += ["", "# Timings", "", "| method | stage | seconds |", "|---|---|---|"]
    for method in METHODS:
        timing = cfg.output_dir / f"unlearn-{method}" / "timing.csv"
        if not timing.exists():
            continue
        with open(timing, newline="") as fh:
            for row in csv.DictReader(fh):
                lines.append(f"| {method} | {row['stage']} | {row['seconds']} |")
    (out / "consolidated.md").write_text("\n".join(lines) + "\n")
    if summary_rows:
        _write_csv(out / "summary_all.csv", list(summary_rows[0].keys()),
                   [list(r.values()) for r in summary_rows])

    traces = {}
    for method in METHODS:
        trace = cfg.output_dir / f"unlearn-{method}" / "trace.csv"
        if trace.exists():
            with open(trace, newline="") as fh:
                vals = [float(r["loss"]) for r in csv.DictReader(fh)]
            if vals:
                traces[method] = vals
    if traces:
        curves = convergence_trace(traces)
        header = ["progress_pct"] + sorted(curves)
        rows = []
        for i in range(101):
            rows.append([i] + [_fmt(curves[m][i]) for m in sorted(curves)])
        _write_csv(out / "convergence.csv", header, rows)
    write_manifest(out, "report", cfg)
    return out


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="cardest",
                                 description="star-schema cardinality estimation "
                                             "with deletion unlearning")
    sub = ap.add_subparsers(dest="command", required=True)

    def add(name, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("-c", "--config", required=True, help="experiment YAML")
        return p

    add("gen-data", "generate or import the dataset")
    add("train", "train the original model")
    add("delete", "apply the deletion task")
    p = add("unlearn", "produce an unlearned/baseline model")
    p.add_argument("--method", required=True, choices=METHODS)
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--ns", type=int, default=None, help="sampling iterations")
    p.add_argument("--finetune-epochs", type=int, default=None)
    p.add_argument("--no-domain-prune", action="store_true")
    p.add_argument("--no-sensitivity-prune", action="store_true")
    p = add("eval", "evaluate a checkpoint on OQ/CQ workloads")
    p.add_argument("--method", required=True, choices=METHODS)
    p.add_argument("--query-types", default="both", choices=("oq", "cq", "both"))
    add("report", "consolidate summaries, timings, and convergence curves")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.command == "gen-data":
            out = cmd_gen_data(cfg)
        elif args.command == "train":
            out = cmd_train(cfg)
        elif args.command == "delete":
            out = cmd_delete(cfg)
        elif args.command == "unlearn":
            overrides = {}
            if args.alpha is not None:
                overrides["alpha"] = args.alpha
            if args.ns is not None:
                overrides["sampling_iterations"] = args.ns
            if args.finetune_epochs is not None:
                overrides["finetune_epochs"] = args.finetune_epochs
            if args.no_domain_prune:
                overrides["domain_prune"] = False
            if args.no_sensitivity_prune:
                overrides["sensitivity_prune"] = False
            out = cmd_unlearn(cfg, args.method, overrides)
        elif args.command == "eval":
            out = cmd_eval(cfg, args.method, args.query_types)
        else:
            out = cmd_report(cfg)
        print(out)
        return 0
    except StageOrderingError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (ValidationError, ConfigurationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except TrainingError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except CardestError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
