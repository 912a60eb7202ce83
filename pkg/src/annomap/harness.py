"""Experiment orchestration: seeds x folds, every method, metrics and analyses.

For each seed the source corpus trains two models: the aggregate baseline
(early-stopped) and the annotator-head model (five aggregate epochs, heads
copied, then per-annotator training). Each target fold is then scored for
every method; the per-cell records feed paired t-tests against the mapped
method and the enrollment/source-quality/sweep/stability analyses.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import params_digest
from .corpus import (
    ALL,
    DIMENSIONS,
    Dataset,
    FoldSpec,
    aggregate_matrix,
    load_dataset,
    make_folds,
    preprocess,
    sample_enrollment,
    split_by_group,
)
from .crowd_sim import SimConfig, simulate
from .errors import AnnomapError, DegenerateError, InvalidInputError
from .mapper import (
    AGG_FT1,
    AGG_FT_FULL,
    AGG_GROUND_TRUTH,
    AGG_PT,
    METHODS,
    PT_ALL,
    PT_MAPPED,
    PT_RANDOM,
    MappingTable,
    MethodPredictions,
    map_random,
    map_similar,
    oracle_ground_truth,
    predict_aggregate_head,
    predict_all_heads,
    predict_mapped,
)
from .metrics import ccc, entropy_log2, paired_t_test, pcc
from .network import ModelConfig, ModelParams, init_heads_from_aggregate, init_model
from .training import (
    ONE_EPOCH,
    UNTIL_EARLY_STOP,
    TrainConfig,
    finetune_aggregate,
    per_annotator_ccc,
    train_aggregate,
    train_individual,
)

log = logging.getLogger(__name__)

RECORD_HEADER = ("method", "seed", "fold", "dimension", "ccc_ind", "ccc_agg", "n_annotators_scored")
BIN_LABELS = ("(-inf,0)", "[0,0.25)", "[0.25,0.5)", "[0.5,0.75)", "[0.75,1.0]")
DEFAULT_ENROLLMENT_SIZES = (5, 10, 15, 20, 25, 30, ALL)
DECREASE, INCREASE = "†", "*"


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class ExperimentConfig:
    sim: SimConfig | None = None
    source_manifest: str | None = None
    target_manifest: str | None = None
    n_seeds: int = 6
    base_seed: int = 0
    n_folds: int = 5
    fold_seed: int = 0
    enrollment_sizes: tuple = DEFAULT_ENROLLMENT_SIZES
    methods: tuple = METHODS
    train: TrainConfig = field(default_factory=TrainConfig)
    hidden_width: int = 256
    dropout_rate: float = 0.2
    min_annotations: int = 30
    init_epochs: int = 5
    holdout_fraction: float = 0.2
    joint_selection: bool = False
    output_dir: str | None = None

    def __post_init__(self):
        if (self.sim is None) == (self.source_manifest is None):
            raise InvalidInputError("give exactly one data source: sim or source_manifest/target_manifest")
        if self.source_manifest is not None and self.target_manifest is None:
            raise InvalidInputError("target_manifest is required with source_manifest")
        if self.n_seeds < 1 or self.n_folds < 2:
            raise InvalidInputError("n_seeds >= 1 and n_folds >= 2 required")
        sizes = tuple(ALL if str(n).lower() == ALL else int(n) for n in self.enrollment_sizes)
        if any(n != ALL and n < 1 for n in sizes):
            raise InvalidInputError("enrollment sizes must be positive")
        object.__setattr__(self, "enrollment_sizes", sizes)
        unknown = set(self.methods) - set(METHODS)
        if unknown:
            raise InvalidInputError(f"unknown methods {sorted(unknown)}")
        if PT_MAPPED not in self.methods:
            raise InvalidInputError(f"{PT_MAPPED} must be among the methods")
        object.__setattr__(self, "methods", tuple(m for m in METHODS if m in self.methods))

    @property
    def seeds(self) -> tuple:
        return tuple(self.base_seed + i for i in range(self.n_seeds))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["enrollment_sizes"] = list(self.enrollment_sizes)
        d["methods"] = list(self.methods)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        data = dict(data)
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise InvalidInputError(f"unknown experiment config keys: {sorted(unknown)}")
        if data.get("sim") is not None:
            data["sim"] = SimConfig.from_dict(data["sim"])
        if "train" in data:
            data["train"] = TrainConfig(**data["train"])
        for key in ("enrollment_sizes", "methods"):
            if key in data:
                data[key] = tuple(data[key])
        return cls(**data)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        cfg = cls.from_dict(json.loads(path.read_text(encoding="utf-8")))
        # manifests are resolved relative to the config file
        fix = {}
        for key in ("source_manifest", "target_manifest"):
            value = getattr(cfg, key)
            if value is not None and not Path(value).is_absolute():
                fix[key] = str((path.parent / value).resolve())
        return replace(cfg, **fix) if fix else cfg

    def digest(self) -> str:
        d = self.to_dict()
        d.pop("output_dir", None)
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class MetricRecord:
    method: str
    seed: int
    fold: int
    dimension: str
    ccc_ind: float
    ccc_agg: float
    n_annotators_scored: int


# ---------------------------------------------------------------------------
# metrics


def per_annotator_scores(predictions: MethodPredictions, min_samples: int = 2) -> dict:
    """``annotator_id -> (ccc_act, ccc_val)`` for annotators with >= 2 scored samples."""
    ds = predictions.dataset
    ann = ds.ann_annotator
    uniq, inverse = np.unique(ann, return_inverse=True)
    out = {}
    for k, a in enumerate(uniq.tolist()):
        rows = np.flatnonzero(inverse == k)
        if rows.size < min_samples:
            continue
        out[a] = tuple(ccc(ds.labels[rows, d], predictions.individual[rows, d]) for d in range(2))
    return out


def metric_ccc_ind(predictions: MethodPredictions) -> tuple[dict, int]:
    """Unweighted mean per-annotator CCC per dimension, and the annotator count."""
    scores = per_annotator_scores(predictions)
    if not scores:
        raise InvalidInputError("no annotator has >= 2 scored samples")
    vals = np.array(list(scores.values()))
    return {name: float(vals[:, d].mean()) for d, name in enumerate(DIMENSIONS)}, len(scores)


def metric_ccc_agg(predictions: MethodPredictions) -> dict:
    """CCC between per-sample aggregate truth and aggregate predictions."""
    truth, counts = aggregate_matrix(predictions.dataset)
    keep = counts > 0
    if keep.sum() < 2:
        raise InvalidInputError("need at least two test samples")
    return {name: ccc(truth[keep, d], predictions.aggregate[keep, d]) for d, name in enumerate(DIMENSIONS)}


def _records(pred: MethodPredictions, seed: int, fold: int) -> list[MetricRecord]:
    ind, n = metric_ccc_ind(pred)
    agg = metric_ccc_agg(pred)
    return [MetricRecord(pred.method, seed, fold, d, ind[d], agg[d], n) for d in DIMENSIONS]


# ---------------------------------------------------------------------------
# data and pre-training


@dataclass(frozen=True, eq=False)
class Corpora:
    source: Dataset
    target: Dataset
    scaling: object
    planted: dict | None = None


def load_corpora(config: ExperimentConfig) -> Corpora:
    if config.sim is not None:
        bench = simulate(config.sim)
        return Corpora(bench.source, bench.target, "declared", bench.planted)
    return Corpora(load_dataset(config.source_manifest), load_dataset(config.target_manifest), "fit")


@dataclass(eq=False)
class Pretrained:
    seed: int
    ia: ModelParams
    agg: ModelParams
    source_quality: dict
    scaling: tuple
    history: dict

    @property
    def digest(self) -> str:
        return params_digest(self.ia)


def _train_config(config: ExperimentConfig, seed: int) -> TrainConfig:
    return replace(config.train, rng_seed=seed)


def pretrain(source_raw: Dataset, config: ExperimentConfig, seed: int, scaling="fit") -> Pretrained:
    """Train the aggregate baseline and the annotator-head model on the source corpus."""
    train_ids, val_ids = split_by_group(source_raw, source_raw.sample_ids, config.holdout_fraction, config.fold_seed)
    source = preprocess(source_raw, config.min_annotations, train_ids=train_ids, scaling=scaling)
    train, val = source.subset(train_ids), source.subset(val_ids)
    mc = ModelConfig(source.feature_dim, train.annotator_ids, config.hidden_width, config.dropout_rate)
    tc = _train_config(config, seed)

    agg, agg_hist = train_aggregate(init_model(mc, seed), train, val, tc)
    ia, init_hist = train_aggregate(init_model(mc, seed), train, None, tc, max_epochs=config.init_epochs, early_stopping=False)
    ia = init_heads_from_aggregate(ia)
    ia, ind_hist = train_individual(ia, train, val, tc)
    quality = per_annotator_ccc(ia, train)
    return Pretrained(seed, ia, agg, quality, source.scaling, {"aggregate": agg_hist, "init": init_hist, "individual": ind_hist})


# ---------------------------------------------------------------------------
# one (seed, fold) cell


@dataclass
class CellResult:
    seed: int
    fold: int
    records: list = field(default_factory=list)
    mapped: MappingTable | None = None
    random: MappingTable | None = None
    pairs: list = field(default_factory=list)
    sweep: list = field(default_factory=list)
    dropped_targets: list = field(default_factory=list)
    model_digest: str = ""


@dataclass(frozen=True, eq=False)
class TargetSplit:
    fold: FoldSpec
    dataset: Dataset
    enroll_fold: FoldSpec
    ft_train: Dataset
    ft_val: Dataset
    test: Dataset
    targets: tuple
    dropped: tuple


def prepare_target(target_raw: Dataset, fold: FoldSpec, scaling, config: ExperimentConfig, seed: int) -> TargetSplit:
    """Preprocess one target fold and split its training part into FT-train/FT-validation.

    Enrollment is drawn from FT-train; test annotators without two FT-train
    annotations cannot be mapped and are removed from the test set.
    """
    tgt = preprocess(target_raw, config.min_annotations, train_ids=fold.train_sample_ids, scaling=scaling)
    present = set(tgt.sample_ids)
    train_ids = fold.train_sample_ids & present
    test_ids = fold.test_sample_ids & present
    ft_ids, ftv_ids = split_by_group(tgt, train_ids, config.holdout_fraction, seed * 1009 + fold.fold_index)
    ft_train = tgt.subset(ft_ids)
    test = tgt.subset(test_ids)
    counts = {a: ft_train.annotator_rows(a).size for a in test.annotator_ids}
    targets = tuple(sorted(a for a, c in counts.items() if c >= 2))
    dropped = tuple(sorted(a for a, c in counts.items() if c < 2))
    if dropped:
        test = test.keep_annotators(targets)
    if not targets:
        raise InvalidInputError(f"fold {fold.fold_index}: no test annotator has enrollment data")
    return TargetSplit(fold, tgt, FoldSpec(fold.fold_index, ft_ids, test_ids), ft_train, tgt.subset(ftv_ids), test, targets, dropped)


def enroll(split: TargetSplit, n, seed: int) -> dict:
    return {a: sample_enrollment(split.dataset, split.enroll_fold, a, n, seed) for a in split.targets}


def run_cell(model: Pretrained, split: TargetSplit, config: ExperimentConfig) -> CellResult:
    seed, fold = model.seed, split.fold.fold_index
    out = CellResult(seed, fold, dropped_targets=list(split.dropped), model_digest=model.digest)
    tc = _train_config(config, seed)
    enrollment = enroll(split, ALL, seed)
    out.mapped = map_similar(model.ia, enrollment, joint=config.joint_selection)
    out.random = map_random(model.ia, split.targets, seed * 1009 + fold)

    preds = {}
    for method in config.methods:
        if method == PT_MAPPED:
            preds[method] = predict_mapped(model.ia, out.mapped, split.test)
        elif method == PT_RANDOM:
            preds[method] = predict_mapped(model.ia, out.random, split.test, method=PT_RANDOM)
        elif method == PT_ALL:
            preds[method] = predict_all_heads(model.ia, split.test)
        elif method == AGG_PT:
            preds[method] = predict_aggregate_head(model.agg, split.test, "PT")
        elif method == AGG_FT1:
            ft1, _ = finetune_aggregate(model.agg, split.ft_train, None, tc, ONE_EPOCH)
            preds[method] = predict_aggregate_head(ft1, split.test, "FT-1")
        elif method == AGG_FT_FULL:
            ftf, _ = finetune_aggregate(model.agg, split.ft_train, split.ft_val, tc, UNTIL_EARLY_STOP)
            preds[method] = predict_aggregate_head(ftf, split.test, "FT-Full")
        elif method == AGG_GROUND_TRUTH:
            preds[method] = oracle_ground_truth(split.test)
    for method in config.methods:
        out.records.extend(_records(preds[method], seed, fold))

    test_scores = per_annotator_scores(preds[PT_MAPPED])
    for (target, dim), entry in sorted(out.mapped.entries.items()):
        if target not in test_scores:
            continue
        d = DIMENSIONS.index(dim)
        quality = model.source_quality.get(entry.source_id)
        out.pairs.append({
            "seed": seed, "fold": fold, "target_id": target, "dimension": dim,
            "source_id": entry.source_id, "enrollment_ccc": entry.enrollment_ccc,
            "test_ccc": test_scores[target][d],
            "source_train_ccc": quality[d] if quality else math.nan,
        })  # fmt: skip

    for n in config.enrollment_sizes:
        mapping = out.mapped if n == ALL else map_similar(model.ia, enroll(split, n, seed), joint=config.joint_selection)
        pred = predict_mapped(model.ia, mapping, split.test)
        ind, _ = metric_ccc_ind(pred)
        agg = metric_ccc_agg(pred)
        for dim in DIMENSIONS:
            out.sweep.append({"seed": seed, "fold": fold, "n": n, "dimension": dim, "ccc_ind": ind[dim], "ccc_agg": agg[dim], "model_digest": model.digest})
    return out


# ---------------------------------------------------------------------------
# analyses


def _bin_index(value: float) -> int:
    if value < 0:
        return 0
    return min(1 + int(value // 0.25), 4)


def _binned(keys, values) -> list[dict]:
    groups = [[] for _ in BIN_LABELS]
    for k, v in zip(keys, values):
        if math.isfinite(k):
            groups[_bin_index(k)].append(v)
    rows = []
    for label, vals in zip(BIN_LABELS, groups):
        rows.append({
            "bin": label, "count": len(vals),
            "mean_test_ccc": float(np.mean(vals)) if vals else None,
            "median_test_ccc": float(np.median(vals)) if vals else None,
        })  # fmt: skip
    return rows


def rq1_enrollment_correlation(pairs: list[dict]) -> dict:
    """PCC between enrollment and test CCC of each mapped pair, plus a histogram."""
    out = {}
    for dim in DIMENSIONS:
        rows = [p for p in pairs if p["dimension"] == dim]
        if len(rows) < 2:
            raise InvalidInputError(f"{dim}: fewer than two mapped pairs")
        enr = [p["enrollment_ccc"] for p in rows]
        test = [p["test_ccc"] for p in rows]
        try:
            r = pcc(enr, test)
        except DegenerateError:
            r = None
        out[dim] = {"pcc": r, "n_pairs": len(rows), "histogram": _binned(enr, test)}
    return out


def rq2_source_quality_analysis(pairs: list[dict], source_quality: dict) -> dict:
    """Test CCC grouped by the selected source head's source-training CCC.

    ``source_quality`` maps seed -> {source_id: (ccc_act, ccc_val)}.
    """
    out = {}
    for d, dim in enumerate(DIMENSIONS):
        rows = [p for p in pairs if p["dimension"] == dim]
        selected = [p["source_train_ccc"] for p in rows if math.isfinite(p["source_train_ccc"])]
        population = [q[d] for per_seed in source_quality.values() for q in per_seed.values()]
        out[dim] = {
            "bins": _binned([p["source_train_ccc"] for p in rows], [p["test_ccc"] for p in rows]),
            "median_selected_source_ccc": float(np.median(selected)) if selected else None,
            "median_population_source_ccc": float(np.median(population)) if population else None,
        }
    return out


def rq3_table(sweep_rows: list[dict]) -> list[dict]:
    """Mean and sd of mapped CCC_ind / CCC_agg per enrollment size and dimension."""
    table = []
    sizes = []
    for r in sweep_rows:
        if r["n"] not in sizes:
            sizes.append(r["n"])
    for n in sizes:
        for dim in DIMENSIONS:
            sel = [r for r in sweep_rows if r["n"] == n and r["dimension"] == dim]
            ind = [r["ccc_ind"] for r in sel]
            agg = [r["ccc_agg"] for r in sel]
            table.append({
                "n": n, "dimension": dim, "cells": len(sel),
                "ccc_ind_mean": float(np.mean(ind)), "ccc_ind_sd": _sd(ind),
                "ccc_agg_mean": float(np.mean(agg)), "ccc_agg_sd": _sd(agg),
            })  # fmt: skip
    return table


def rq3_enrollment_sweep(config: ExperimentConfig, corpora: Corpora | None = None, models: dict | None = None) -> list[dict]:
    """Re-run mapping (never training) for every enrollment size.

    ``models`` may supply already pre-trained :class:`Pretrained` per seed.
    """
    corpora = corpora or load_corpora(config)
    folds = make_folds(corpora.target, config.n_folds, config.fold_seed)
    rows = []
    for seed in config.seeds:
        model = (models or {}).get(seed) or pretrain(corpora.source, config, seed, corpora.scaling)
        for fold in folds:
            split = prepare_target(corpora.target, fold, model.scaling, config, seed)
            only_mapped = replace(config, methods=(PT_MAPPED,))
            rows.extend(run_cell(model, split, only_mapped).sweep)
    return rows


def rq4_stability(mapped: list[MappingTable], random: list[MappingTable] | None = None) -> dict:
    """Selection entropy per target over repetitions, against the log2(reps) ceiling."""
    if len(mapped) < 2:
        raise InvalidInputError("stability needs at least two repetitions")
    from .mapper import selection_entropy

    def summary(tables):
        ent, excluded = selection_entropy(tables)
        per_dim = {}
        for dim in DIMENSIONS:
            vals = [v for (t, d), v in ent.items() if d == dim]
            per_dim[dim] = {"mean": float(np.mean(vals)) if vals else None, "sd": _sd(vals), "n_targets": len(vals)}
        return ent, excluded, per_dim

    ent, excluded, per_dim = summary(mapped)
    out = {
        "repetitions": len(mapped),
        "max_entropy_reference": math.log2(len(mapped)),
        "mapped": per_dim,
        "excluded_targets": excluded,
        "per_target": [{"target_id": t, "dimension": d, "entropy": v} for (t, d), v in sorted(ent.items())],
    }
    if random:
        _, _, rand_dim = summary(random)
        out["random"] = rand_dim
    return out


def _sd(values) -> float | None:
    values = list(values)
    return float(np.std(values, ddof=1)) if len(values) >= 2 else None


def summarize(records: list[MetricRecord]) -> list[dict]:
    rows = []
    for method in METHODS:
        for dim in DIMENSIONS:
            sel = [r for r in records if r.method == method and r.dimension == dim]
            if not sel:
                continue
            rows.append({
                "method": method, "dimension": dim, "cells": len(sel),
                "ccc_ind_mean": float(np.mean([r.ccc_ind for r in sel])), "ccc_ind_sd": _sd(r.ccc_ind for r in sel),
                "ccc_agg_mean": float(np.mean([r.ccc_agg for r in sel])), "ccc_agg_sd": _sd(r.ccc_agg for r in sel),
            })  # fmt: skip
    return rows


def significance(records: list[MetricRecord], reference: str = PT_MAPPED) -> list[dict]:
    """Paired t-tests of every method against ``reference`` over (seed, fold) cells."""
    index = {(r.method, r.seed, r.fold, r.dimension): r for r in records}
    cells = sorted({(r.seed, r.fold) for r in records if r.method == reference})
    out = []
    for method in METHODS:
        if method == reference or not any(r.method == method for r in records):
            continue
        for dim in DIMENSIONS:
            for metric in ("ccc_ind", "ccc_agg"):
                paired = [(index[(reference, s, f, dim)], index[(method, s, f, dim)]) for s, f in cells if (method, s, f, dim) in index]
                row = {"method": method, "reference": reference, "dimension": dim, "metric": metric, "n": len(paired)}
                try:
                    res = paired_t_test([getattr(b, metric) for _, b in paired], [getattr(a, metric) for a, _ in paired])
                except (DegenerateError, InvalidInputError) as exc:
                    row.update({"t": None, "df": None, "p": None, "significant": False, "marker": "", "note": str(exc)})
                else:
                    marker = (INCREASE if res.mean_difference > 0 else DECREASE) if res.significant_at_95 else ""
                    row.update({"t": res.t_statistic, "df": res.degrees_of_freedom, "p": res.p_value,
                                "significant": res.significant_at_95, "mean_difference": res.mean_difference, "marker": marker})  # fmt: skip
                out.append(row)
    return out


def rq5_aggregate_comparison(summary: list[dict], tests: list[dict]) -> dict:
    """CCC_agg ranking per dimension with markers relative to the mapped method.

    The oracle is ranked but never marked best.
    """
    out = {}
    for dim in DIMENSIONS:
        rows = sorted((s for s in summary if s["dimension"] == dim), key=lambda s: -s["ccc_agg_mean"])
        best = next((s["method"] for s in rows if s["method"] != AGG_GROUND_TRUTH), None)
        table = []
        for rank, s in enumerate(rows, 1):
            test = next((t for t in tests if t["method"] == s["method"] and t["dimension"] == dim and t["metric"] == "ccc_agg"), None)
            table.append({
                "rank": rank, "method": s["method"], "ccc_agg_mean": s["ccc_agg_mean"], "ccc_agg_sd": s["ccc_agg_sd"],
                "marker": test["marker"] if test else "", "best_non_oracle": s["method"] == best,
            })  # fmt: skip
        out[dim] = table
    return out


# ---------------------------------------------------------------------------
# experiment


@dataclass(eq=False)
class ExperimentReport:
    config: ExperimentConfig
    records: list
    summary: list
    significance: list
    rq: dict
    errors: list
    provenance: dict
    pairs: list = field(default_factory=list)
    sweep: list = field(default_factory=list)
    mapped_tables: list = field(default_factory=list)
    random_tables: list = field(default_factory=list)
    dropped_targets: list = field(default_factory=list)

    def values(self, method: str, dimension: str, metric: str = "ccc_ind") -> list[float]:
        rows = sorted((r for r in self.records if r.method == method and r.dimension == dimension), key=lambda r: (r.seed, r.fold))
        return [getattr(r, metric) for r in rows]

    def body(self) -> dict:
        """JSON-ready report; floats rounded to three decimals."""
        return _rounded({
            "config": self.config.to_dict(),
            "provenance": self.provenance,
            "summary": self.summary,
            "significance": self.significance,
            "rq1": self.rq.get("rq1"),
            "rq2": self.rq.get("rq2"),
            "rq3": self.rq.get("rq3"),
            "rq4": {k: v for k, v in self.rq.get("rq4", {}).items() if k != "per_target"},
            "rq5": self.rq.get("rq5"),
            "dropped_targets": self.dropped_targets,
            "errors": self.errors,
        })  # fmt: skip


def _rounded(obj):
    if isinstance(obj, float):
        return None if not math.isfinite(obj) else round(obj, 3)
    if isinstance(obj, dict):
        return {k: _rounded(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_rounded(v) for v in obj]
    return obj


def run_experiment(config: ExperimentConfig, corpora: Corpora | None = None) -> ExperimentReport:
    """Run every configured method on every (seed, fold) cell.

    Failures are recorded per cell and the run continues.
    """
    corpora = corpora or load_corpora(config)
    folds = make_folds(corpora.target, config.n_folds, config.fold_seed)
    cells, errors = [], []
    source_quality = {}
    digests = {}
    for seed in config.seeds:
        try:
            model = pretrain(corpora.source, config, seed, corpora.scaling)
        except AnnomapError as exc:
            log.error("seed %d: pre-training failed: %s", seed, exc)
            errors.extend({"seed": seed, "fold": f.fold_index, "stage": "pretrain", "error": f"{type(exc).__name__}: {exc}"} for f in folds)
            continue
        source_quality[seed] = model.source_quality
        digests[seed] = model.digest
        for fold in folds:
            try:
                split = prepare_target(corpora.target, fold, model.scaling, config, seed)
                cells.append(run_cell(model, split, config))
            except AnnomapError as exc:
                log.error("seed %d fold %d failed: %s", seed, fold.fold_index, exc)
                errors.append({"seed": seed, "fold": fold.fold_index, "stage": "cell", "error": f"{type(exc).__name__}: {exc}"})

    records = sorted((r for c in cells for r in c.records), key=lambda r: (METHODS.index(r.method), r.seed, r.fold, r.dimension))
    pairs = [p for c in cells for p in c.pairs]
    sweep = [s for c in cells for s in c.sweep]
    summary = summarize(records)
    tests = significance(records)
    rq = {}
    if pairs:
        try:
            rq["rq1"] = rq1_enrollment_correlation(pairs)
        except InvalidInputError as exc:
            errors.append({"stage": "rq1", "error": str(exc)})
        rq["rq2"] = rq2_source_quality_analysis(pairs, source_quality)
    if sweep:
        rq["rq3"] = rq3_table(sweep)
    mapped_tables = [c.mapped for c in cells]
    random_tables = [c.random for c in cells]
    if len(mapped_tables) >= 2:
        rq["rq4"] = rq4_stability(mapped_tables, random_tables)
    rq["rq5"] = rq5_aggregate_comparison(summary, tests)
    provenance = {
        "config_hash": config.digest(),
        "seeds": list(config.seeds),
        "folds": config.n_folds,
        "package_version": __version__,
        "numpy_version": np.__version__,
        "model_digests": {str(k): v for k, v in digests.items()},
        "planted_pairs_known": corpora.planted is not None,
    }
    dropped = [{"seed": c.seed, "fold": c.fold, "targets": c.dropped_targets} for c in cells if c.dropped_targets]
    return ExperimentReport(config, records, summary, tests, rq, errors, provenance, pairs, sweep, mapped_tables, random_tables, dropped)


# ---------------------------------------------------------------------------
# output files


def write_records(records, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RECORD_HEADER)
        for r in records:
            w.writerow([r.method, r.seed, r.fold, r.dimension, repr(float(r.ccc_ind)), repr(float(r.ccc_agg)), r.n_annotators_scored])


def read_records(path) -> list[MetricRecord]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != RECORD_HEADER:
            raise InvalidInputError(f"records header must be {','.join(RECORD_HEADER)}")
        return [MetricRecord(m, int(s), int(f), d, float(i), float(a), int(n)) for m, s, f, d, i, a, n in reader]


def _write_table(rows: list[dict], path) -> None:
    if not rows:
        return
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if v is None else v) for k, v in r.items()})


def write_report(report: ExperimentReport, out_dir) -> dict:
    """Write records, the JSON report and plot-ready tables; returns the paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"records": out / "records.csv", "report": out / "report.json"}
    write_records(report.records, paths["records"])
    paths["report"].write_text(json.dumps(report.body(), indent=2, sort_keys=True, ensure_ascii=False) + "\n", encoding="utf-8")
    if "rq1" in report.rq:
        rows = [{"dimension": d, **b} for d, v in report.rq["rq1"].items() for b in v["histogram"]]
        _write_table(rows, out / "rq1_histogram.csv")
        _write_table(report.pairs, out / "rq1_pairs.csv")
        paths["rq1"] = out / "rq1_histogram.csv"
    if "rq2" in report.rq:
        _write_table([{"dimension": d, **b} for d, v in report.rq["rq2"].items() for b in v["bins"]], out / "rq2_bins.csv")
    if report.sweep:
        _write_table(report.rq["rq3"], out / "rq3_sweep.csv")
    if "rq4" in report.rq:
        _write_table(report.rq["rq4"]["per_target"], out / "rq4_entropy.csv")
    return paths


def check_report_consistency(report_body: dict, records: list[MetricRecord], tol: float = 5e-4) -> list[str]:
    """Recompute every mean/sd in ``report_body['summary']`` from ``records``.

    Returns a list of mismatch descriptions (empty when consistent).
    """
    fresh = {(s["method"], s["dimension"]): s for s in _rounded(summarize(records))}
    problems = []
    for row in report_body["summary"]:
        ref = fresh.get((row["method"], row["dimension"]))
        if ref is None:
            problems.append(f"{row['method']}/{row['dimension']}: no records")
            continue
        for key, value in row.items():
            if key in ("method", "dimension"):
                continue
            other = ref[key]
            if (value is None) != (other is None) or (value is not None and abs(value - other) > tol):
                problems.append(f"{row['method']}/{row['dimension']}/{key}: report {value} vs records {other}")
    return problems


def load_report(out_dir) -> tuple[dict, list[MetricRecord]]:
    """Read ``report.json`` and ``records.csv``; raise if the summary disagrees with the records."""
    out = Path(out_dir)
    body = json.loads((out / "report.json").read_text(encoding="utf-8"))
    records = read_records(out / "records.csv")
    problems = check_report_consistency(body, records)
    if problems:
        raise InvalidInputError("report does not match its records: " + "; ".join(problems[:5]))
    return body, records
