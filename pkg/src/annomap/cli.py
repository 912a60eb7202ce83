"""Command-line entry point.

Every subcommand takes ``--config``, ``--seed`` and ``--out``. On failure a
single JSON line ``{"error": ..., "type": ...}`` goes to stderr and the exit
status is nonzero.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .checkpoint import load_checkpoint, save_checkpoint
from .corpus import ALL, FoldSpec, load_dataset, make_folds, write_dataset
from .crowd_sim import SimConfig, simulate
from .errors import AnnomapError, InvalidInputError
from .harness import (
    Corpora,
    ExperimentConfig,
    _records,
    enroll,
    load_corpora,
    pretrain,
    prepare_target,
    rq3_enrollment_sweep,
    rq3_table,
    rq5_aggregate_comparison,
    read_records,
    run_experiment,
    significance,
    summarize,
    write_records,
    write_report,
    _rounded,
    _write_table,
)
from .mapper import MappingTable, map_similar, oracle_ground_truth, predict_aggregate_head, predict_all_heads, predict_mapped
from .metrics import ScalingParams

EXIT_USAGE = 2
EXIT_FAILURE = 1


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _experiment(args) -> ExperimentConfig:
    if args.config is None:
        raise InvalidInputError("--config is required")
    cfg = ExperimentConfig.load(args.config)
    if getattr(args, "manifest", None):
        cfg = replace(cfg, target_manifest=str(Path(args.manifest).resolve()))
    if args.seed is not None:
        cfg = replace(cfg, base_seed=args.seed, n_seeds=1)
    return cfg


def _seed(args, cfg: ExperimentConfig) -> int:
    return cfg.base_seed if args.seed is None else args.seed


def _corpora(cfg: ExperimentConfig, manifest) -> Corpora:
    if manifest and cfg.sim is not None:
        # simulated source, ingested target
        bench = simulate(cfg.sim)
        return Corpora(bench.source, load_dataset(manifest), "declared")
    return load_corpora(cfg)


def _scaling(checkpoint: Path, corpora: Corpora):
    path = checkpoint.parent / "scaling.json"
    if path.exists():
        data = json.loads(path.read_text(encoding="utf-8"))
        return tuple(ScalingParams(lo, hi) for lo, hi in data)
    return corpora.scaling


def _fold(cfg: ExperimentConfig, corpora: Corpora, index: int) -> FoldSpec:
    folds = make_folds(corpora.target, cfg.n_folds, cfg.fold_seed)
    if not 0 <= index < len(folds):
        raise InvalidInputError(f"--fold must be in [0, {len(folds) - 1}]")
    return folds[index]


def cmd_simulate(args) -> dict:
    if args.config is None:
        raise InvalidInputError("--config is required")
    data = json.loads(Path(args.config).read_text(encoding="utf-8"))
    sim = SimConfig.from_dict(data.get("sim", data))
    if args.seed is not None:
        sim = replace(sim, rng_seed=args.seed)
    bench = simulate(sim)
    out = _out(args)
    src = write_dataset(bench.source, out / "source")
    tgt = write_dataset(bench.target, out / "target")
    with open(out / "planted.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("target_id", "planted_source"))
        w.writerows(sorted(bench.planted.items()))
    (out / "sim_config.json").write_text(json.dumps(sim.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return {"source_manifest": str(src), "target_manifest": str(tgt)}


def cmd_pretrain(args) -> dict:
    cfg = _experiment(args)
    corpora = load_corpora(cfg)
    model = pretrain(corpora.source, cfg, _seed(args, cfg), corpora.scaling)
    out = _out(args)
    save_checkpoint(model.ia, out / "ia.amck")
    save_checkpoint(model.agg, out / "agg.amck")
    (out / "scaling.json").write_text(json.dumps([[p.raw_min, p.raw_max] for p in model.scaling]) + "\n", encoding="utf-8")
    _write_table([{"source_id": a, "ccc_activation": q[0], "ccc_valence": q[1]} for a, q in sorted(model.source_quality.items())],
                 out / "source_quality.csv")  # fmt: skip
    return {"checkpoint": str(out / "ia.amck"), "aggregate_checkpoint": str(out / "agg.amck"), "digest": model.digest}


def _target_split(args, cfg):
    corpora = _corpora(cfg, args.manifest)
    checkpoint = Path(args.checkpoint)
    scaling = _scaling(checkpoint, corpora)
    split = prepare_target(corpora.target, _fold(cfg, corpora, args.fold), scaling, cfg, _seed(args, cfg))
    return load_checkpoint(checkpoint), split


def cmd_map(args) -> dict:
    cfg = _experiment(args)
    params, split = _target_split(args, cfg)
    n = ALL if args.enrollment_size.lower() == ALL else int(args.enrollment_size)
    table = map_similar(params, enroll(split, n, _seed(args, cfg)), joint=args.joint)
    out = _out(args)
    table.write_csv(out / "mapping.csv")
    return {"mapping": str(out / "mapping.csv"), "targets": len(table.targets), "unmapped": sorted(table.errors)}


def cmd_evaluate(args) -> dict:
    cfg = _experiment(args)
    params, split = _target_split(args, cfg)
    seed, fold = _seed(args, cfg), split.fold.fold_index
    mapping = MappingTable.read_csv(args.mapping)
    preds = [predict_mapped(params, mapping, split.test), predict_all_heads(params, split.test)]
    agg_path = Path(args.aggregate_checkpoint) if args.aggregate_checkpoint else Path(args.checkpoint).parent / "agg.amck"
    if agg_path.exists():
        preds.append(predict_aggregate_head(load_checkpoint(agg_path), split.test, "PT"))
    preds.append(oracle_ground_truth(split.test))
    records = [r for p in preds for r in _records(p, seed, fold)]
    out = _out(args)
    write_records(records, out / "records.csv")
    return {"records": str(out / "records.csv"), "n": len(records)}


def cmd_sweep(args) -> dict:
    cfg = _experiment(args)
    rows = rq3_enrollment_sweep(cfg)
    out = _out(args)
    _write_table(rows, out / "rq3_cells.csv")
    _write_table(_rounded(rq3_table(rows)), out / "rq3_sweep.csv")
    return {"sweep": str(out / "rq3_sweep.csv"), "cells": len(rows)}


def cmd_report(args) -> dict:
    if not args.records:
        raise InvalidInputError("--records is required")
    records = read_records(args.records)
    summary = summarize(records)
    tests = significance(records)
    body = _rounded({"summary": summary, "significance": tests, "rq5": rq5_aggregate_comparison(summary, tests)})
    out = _out(args)
    (out / "report.json").write_text(json.dumps(body, indent=2, sort_keys=True, ensure_ascii=False) + "\n", encoding="utf-8")
    _write_table(body["summary"], out / "summary.csv")
    return {"report": str(out / "report.json")}


def cmd_run(args) -> dict:
    cfg = ExperimentConfig.load(args.config) if args.config else None
    if cfg is None:
        raise InvalidInputError("--config is required")
    if args.seed is not None:
        cfg = replace(cfg, base_seed=args.seed)
    report = run_experiment(cfg)
    paths = write_report(report, _out(args))
    return {k: str(v) for k, v in paths.items()} | {"errors": len(report.errors)}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="annomap", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", required=True, help="output directory")
        p.set_defaults(func=fn)
        return p

    add("simulate", cmd_simulate, "write a synthetic source/target corpus pair")
    add("pretrain", cmd_pretrain, "train the aggregate and annotator-head models on the source corpus")
    for name, fn, help_ in (("map", cmd_map, "map target annotators to source heads"),
                            ("evaluate", cmd_evaluate, "score a mapping on a target test fold")):  # fmt: skip
        p = add(name, fn, help_)
        p.add_argument("--checkpoint", required=True, help="annotator-head checkpoint (ia.amck)")
        p.add_argument("--manifest", help="target manifest (overrides the config)")
        p.add_argument("--fold", type=int, default=0)
        if name == "map":
            p.add_argument("--enrollment-size", default=ALL, help="samples per target annotator, or 'all'")
            p.add_argument("--joint", action="store_true", help="one head for both dimensions")
        else:
            p.add_argument("--mapping", required=True)
            p.add_argument("--aggregate-checkpoint")
    add("sweep", cmd_sweep, "enrollment-size sweep")
    p = add("report", cmd_report, "summary tables and significance from a records file")
    p.add_argument("--records")
    add("run", cmd_run, "full seeds x folds experiment")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        if exc.code:
            print(json.dumps({"error": "invalid arguments", "type": "UsageError"}), file=sys.stderr)
            return EXIT_USAGE
        return 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        result = args.func(args)
    except (AnnomapError, OSError, ValueError, KeyError, json.JSONDecodeError) as exc:
        print(json.dumps({"error": str(exc), "type": type(exc).__name__}), file=sys.stderr)
        return EXIT_FAILURE
    print(json.dumps(result, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
