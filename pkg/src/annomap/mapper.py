"""Off-the-shelf prediction for unseen target annotators.

The central method picks, per target annotator and dimension, the source
head whose predictions on the target's enrollment samples have the highest
CCC with the target's enrollment labels, and deploys it unchanged.
Baselines: random head assignment, mean of all heads, the aggregate head,
and the ground-truth aggregate oracle.
"""

from __future__ import annotations

import csv
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .corpus import DIMENSIONS, Dataset, EnrollmentSet, aggregate_matrix
from .errors import InvalidInputError, UnknownAnnotatorError
from .metrics import ccc_columns, entropy_log2
from .network import AGGREGATE, ALL_HEADS, ModelParams, forward, row_predictions

PT_MAPPED = "PT-Mapped"
PT_RANDOM = "PT-Random"
PT_ALL = "PT-All"
AGG_PT = "Agg-PT"
AGG_FT1 = "Agg-FT-1"
AGG_FT_FULL = "Agg-FT-Full"
AGG_GROUND_TRUTH = "Agg-GroundTruth"
METHODS = (PT_MAPPED, PT_RANDOM, PT_ALL, AGG_PT, AGG_FT1, AGG_FT_FULL, AGG_GROUND_TRUTH)

MAPPING_HEADER = ("target_id", "dimension", "source_id", "enrollment_ccc", "enrollment_size")


@dataclass(frozen=True)
class MappingEntry:
    source_id: str
    enrollment_ccc: float = math.nan
    enrollment_size: int = 0


@dataclass
class MappingTable:
    """``(target_id, dimension) -> MappingEntry`` plus per-target failures."""

    entries: dict = field(default_factory=dict)
    errors: dict = field(default_factory=dict)

    @property
    def targets(self) -> tuple:
        return tuple(sorted({t for t, _ in self.entries}))

    def source_for(self, target_id: str, dimension: str) -> str:
        try:
            return self.entries[(target_id, dimension)].source_id
        except KeyError:
            raise UnknownAnnotatorError(f"target annotator {target_id!r} is not mapped for {dimension}") from None

    def selections(self, dimension: str) -> dict:
        return {t: e.source_id for (t, d), e in self.entries.items() if d == dimension}

    def __eq__(self, other):
        if not isinstance(other, MappingTable):
            return NotImplemented
        if self.entries.keys() != other.entries.keys():
            return False
        for k, e in self.entries.items():
            o = other.entries[k]
            if e.source_id != o.source_id or e.enrollment_size != o.enrollment_size:
                return False
            if not (e.enrollment_ccc == o.enrollment_ccc or (math.isnan(e.enrollment_ccc) and math.isnan(o.enrollment_ccc))):
                return False
        return True

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(MAPPING_HEADER)
            for (t, d) in sorted(self.entries):
                e = self.entries[(t, d)]
                score = "" if math.isnan(e.enrollment_ccc) else repr(float(e.enrollment_ccc))
                w.writerow([t, d, e.source_id, score, e.enrollment_size])

    @classmethod
    def read_csv(cls, path) -> "MappingTable":
        table = cls()
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None or tuple(header) != MAPPING_HEADER:
                raise InvalidInputError(f"mapping file header must be {','.join(MAPPING_HEADER)}")
            for row in reader:
                if not row:
                    continue
                t, d, s, score, size = row
                if d not in DIMENSIONS:
                    raise InvalidInputError(f"unknown dimension {d!r}")
                table.entries[(t, d)] = MappingEntry(s, float(score) if score else math.nan, int(size or 0))
        return table


def _sorted_order(ids: Sequence[str]) -> np.ndarray:
    return np.array(sorted(range(len(ids)), key=lambda i: ids[i]), dtype=np.int64)


def enrollment_scores(params: ModelParams, enrollment: EnrollmentSet) -> np.ndarray:
    """``(n_heads, 2)`` CCC of every source head on one enrollment set."""
    pred = forward(params, enrollment.features, ALL_HEADS)
    return np.column_stack([ccc_columns(pred.dimension(d), enrollment.labels[:, d]) for d in range(2)])


def map_similar(params: ModelParams, enrollments, joint: bool = False) -> MappingTable:
    """Pick the best-matching source head for each target annotator.

    ``enrollments`` is a mapping ``target_id -> EnrollmentSet`` or an
    iterable of enrollment sets. Selection is independent per dimension
    unless ``joint``, in which case the mean of the two CCCs decides a single
    head. Ties go to the lexicographically smallest source id. Targets with
    fewer than two enrollment annotations are reported in ``errors``.
    """
    if isinstance(enrollments, Mapping):
        enrollments = enrollments.values()
    ids = params.config.annotator_ids
    if not ids:
        raise InvalidInputError("model has no source heads")
    order = _sorted_order(ids)
    table = MappingTable()
    for enr in sorted(enrollments, key=lambda e: e.annotator_id):
        if enr.size < 2:
            table.errors[enr.annotator_id] = f"enrollment has {enr.size} annotation(s); need >= 2"
            continue
        scores = enrollment_scores(params, enr)[order]
        if joint:
            best = int(np.argmax(scores.mean(axis=1)))
            picks = (best, best)
        else:
            picks = tuple(int(np.argmax(scores[:, d])) for d in range(2))
        for d, name in enumerate(DIMENSIONS):
            j = picks[d]
            table.entries[(enr.annotator_id, name)] = MappingEntry(ids[order[j]], float(scores[j, d]), enr.size)
    return table


def map_random(source, target_ids: Iterable[str], rng_seed: int) -> MappingTable:
    """Assign each target a uniformly random source head (same for both dimensions)."""
    ids = source.config.annotator_ids if isinstance(source, ModelParams) else tuple(source)
    if not ids:
        raise InvalidInputError("no source heads to choose from")
    rng = np.random.default_rng(rng_seed)
    table = MappingTable()
    for t in sorted(set(target_ids)):
        s = ids[int(rng.integers(len(ids)))]
        for name in DIMENSIONS:
            table.entries[(t, name)] = MappingEntry(s)
    return table


@dataclass(frozen=True, eq=False)
class MethodPredictions:
    """Predictions for a test dataset.

    ``individual`` is row-aligned with ``dataset``'s annotations ``(R, 2)``;
    ``aggregate`` is sample-aligned ``(S, 2)``.
    """

    method: str
    dataset: Dataset
    individual: np.ndarray
    aggregate: np.ndarray


def _sample_means(dataset: Dataset, row_values: np.ndarray) -> np.ndarray:
    counts = np.bincount(dataset.ann_sample, minlength=dataset.n_samples)
    sums = np.zeros((dataset.n_samples, 2))
    np.add.at(sums, dataset.ann_sample, row_values)
    with np.errstate(invalid="ignore", divide="ignore"):
        return sums / counts[:, None]


def predict_mapped(params: ModelParams, mapping: MappingTable, test: Dataset, method: str = PT_MAPPED) -> MethodPredictions:
    """Each annotation is predicted by its annotator's mapped source head; the
    sample aggregate is the mean over that sample's annotators."""
    individual = np.empty((test.n_annotations, 2))
    for d, name in enumerate(DIMENSIONS):
        sources = [mapping.source_for(t, name) for t in test.ann_annotator.tolist()]
        heads = params.head_indices(sources)
        individual[:, d] = row_predictions(params, test.features, test.ann_sample, heads)[:, d]
    return MethodPredictions(method, test, individual, _sample_means(test, individual))


def predict_all_heads(params: ModelParams, test: Dataset) -> MethodPredictions:
    """Mean over every source head, used as both aggregate and individual prediction."""
    pred = forward(params, test.features, ALL_HEADS)
    agg = np.column_stack([pred.activation.mean(axis=1), pred.valence.mean(axis=1)])
    return MethodPredictions(PT_ALL, test, agg[test.ann_sample], agg)


def predict_aggregate_head(params: ModelParams | None, test: Dataset, which: str = "PT") -> MethodPredictions:
    """Aggregate-head output per sample, assigned to every annotator of the sample."""
    if params is None:
        raise InvalidInputError(f"no checkpoint available for Agg-{which}")
    pred = forward(params, test.features, AGGREGATE)
    agg = np.column_stack([pred.activation, pred.valence])
    return MethodPredictions(f"Agg-{which}", test, agg[test.ann_sample], agg)


def oracle_ground_truth(test: Dataset) -> MethodPredictions:
    """The true per-sample mean label assigned to every annotator of the sample."""
    agg, _ = aggregate_matrix(test)
    return MethodPredictions(AGG_GROUND_TRUTH, test, agg[test.ann_sample], agg)


def selection_entropy(mappings: Sequence[MappingTable], expected_repetitions: int | None = None):
    """Per-(target, dimension) entropy in bits of chosen source ids across runs.

    Only targets mapped in every repetition are scored; the rest are returned
    in the second element.
    """
    if expected_repetitions is not None and len(mappings) != expected_repetitions:
        raise InvalidInputError(f"expected {expected_repetitions} repetitions, got {len(mappings)}")
    if not mappings:
        raise InvalidInputError("no repetitions given")
    entropies, excluded = {}, set()
    for name in DIMENSIONS:
        picks = [m.selections(name) for m in mappings]
        everywhere = set.intersection(*(set(p) for p in picks))
        excluded |= set.union(*(set(p) for p in picks)) - everywhere
        for t in sorted(everywhere):
            entropies[(t, name)] = entropy_log2(Counter(p[t] for p in picks))
    return entropies, sorted(excluded)
