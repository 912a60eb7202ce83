"""Datasets of per-annotator activation/valence labels.

A :class:`Dataset` is immutable and column-oriented: samples carry a
feature matrix and a group key (session/speaker); annotations are stored
as parallel arrays sorted by ``(sample_id, annotator_id)``.

On-disk layout (see :func:`write_dataset`)::

    manifest.json     name, file names, feature_dim, label_range, column names
    features.amft     "AMFT" | u32 rows | u32 cols | 4 zero bytes | f32 LE row-major
    samples.idx       one sample_id per line, in feature-row order
    samples.csv       sample_id,<group column>[,split]
    annotations.csv   sample_id,annotator_id,activation,valence  (raw labels)
"""

from __future__ import annotations

import csv
import json
import struct
import zlib
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    DimensionMismatchError,
    DuplicateAnnotationError,
    EmptyDatasetError,
    InvalidInputError,
    MissingFileError,
    ReferentialIntegrityError,
)
from .metrics import ScalingParams, apply_scaling, fit_scaling

DIMENSIONS = ("activation", "valence")
ALL = "all"

FEATURE_MAGIC = b"AMFT"
_FEATURE_HEADER = struct.Struct("<4sIII")
ANNOTATION_HEADER = ("sample_id", "annotator_id", "activation", "valence")


@dataclass(frozen=True)
class Sample:
    sample_id: str
    features: Sequence[float]
    group_key: str
    split_hint: str | None = None


@dataclass(frozen=True)
class Annotation:
    sample_id: str
    annotator_id: str
    activation: float
    valence: float


@dataclass(frozen=True)
class AggregateLabel:
    sample_id: str
    activation_mean: float
    valence_mean: float
    annotator_count: int


@dataclass(frozen=True)
class FoldSpec:
    fold_index: int
    train_sample_ids: frozenset
    test_sample_ids: frozenset


@dataclass(frozen=True, eq=False)
class EnrollmentSet:
    """Enrollment annotations of one target annotator.

    ``features`` and ``labels`` are row-aligned; ``labels`` columns follow
    :data:`DIMENSIONS`.
    """

    annotator_id: str
    sample_ids: tuple
    features: np.ndarray
    labels: np.ndarray
    requested_size: int | str

    @property
    def size(self) -> int:
        return len(self.sample_ids)


@dataclass(frozen=True, eq=False)
class Dataset:
    name: str
    sample_ids: tuple
    features: np.ndarray
    group_keys: tuple
    split_hints: tuple
    ann_sample: np.ndarray
    ann_annotator: np.ndarray
    labels: np.ndarray
    scaling: tuple | None = None
    declared_range: tuple | None = None
    _index: dict = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self._index is None:
            object.__setattr__(self, "_index", {s: i for i, s in enumerate(self.sample_ids)})

    @property
    def feature_dim(self) -> int:
        return int(self.features.shape[1])

    @property
    def n_samples(self) -> int:
        return len(self.sample_ids)

    @property
    def n_annotations(self) -> int:
        return int(self.ann_sample.size)

    @property
    def annotator_ids(self) -> tuple:
        return tuple(sorted(set(self.ann_annotator.tolist())))

    def sample_index(self, sample_id: str) -> int:
        return self._index[sample_id]

    def annotations(self) -> Iterable[Annotation]:
        for s, a, (act, val) in zip(self.ann_sample, self.ann_annotator, self.labels):
            yield Annotation(self.sample_ids[s], str(a), float(act), float(val))

    def samples(self) -> Iterable[Sample]:
        for i, sid in enumerate(self.sample_ids):
            yield Sample(sid, self.features[i], self.group_keys[i], self.split_hints[i])

    def annotator_rows(self, annotator_id: str, sample_ids=None) -> np.ndarray:
        mask = self.ann_annotator == annotator_id
        if sample_ids is not None:
            mask &= self._sample_mask(sample_ids)[self.ann_sample]
        return np.flatnonzero(mask)

    def _sample_mask(self, sample_ids) -> np.ndarray:
        keep = np.zeros(self.n_samples, dtype=bool)
        for sid in sample_ids:
            i = self._index.get(sid)
            if i is not None:
                keep[i] = True
        return keep

    def subset(self, sample_ids, name: str | None = None) -> "Dataset":
        """Dataset restricted to ``sample_ids`` (order of this dataset kept)."""
        keep = self._sample_mask(sample_ids)
        return self._select(keep, np.ones(self.n_annotations, dtype=bool), name)

    def keep_annotators(self, annotator_ids) -> "Dataset":
        """Drop other annotators' annotations and any sample left unlabelled."""
        ann_keep = np.isin(self.ann_annotator, list(annotator_ids))
        has_ann = np.zeros(self.n_samples, dtype=bool)
        has_ann[self.ann_sample[ann_keep]] = True
        return self._select(has_ann, ann_keep)

    def _select(self, sample_keep: np.ndarray, ann_keep: np.ndarray, name=None) -> "Dataset":
        ann_keep = ann_keep & sample_keep[self.ann_sample]
        new_pos = np.cumsum(sample_keep) - 1
        idx = np.flatnonzero(sample_keep)
        return replace(
            self,
            name=name or self.name,
            sample_ids=tuple(self.sample_ids[i] for i in idx),
            features=self.features[idx],
            group_keys=tuple(self.group_keys[i] for i in idx),
            split_hints=tuple(self.split_hints[i] for i in idx),
            ann_sample=new_pos[self.ann_sample[ann_keep]],
            ann_annotator=self.ann_annotator[ann_keep],
            labels=self.labels[ann_keep],
            _index=None,
        )

    @classmethod
    def from_records(
        cls,
        name: str,
        samples: Sequence[Sample],
        annotations: Sequence[Annotation],
        declared_range=None,
    ) -> "Dataset":
        """Build a validated dataset; samples and annotations are sorted by id."""
        samples = sorted(samples, key=lambda s: s.sample_id)
        ids = [s.sample_id for s in samples]
        if len(set(ids)) != len(ids):
            raise InvalidInputError("duplicate sample_id")
        if not samples:
            raise EmptyDatasetError("dataset has no samples")
        rows = [np.asarray(s.features, dtype=np.float64) for s in samples]
        if any(r.ndim != 1 or r.shape != rows[0].shape for r in rows):
            raise DimensionMismatchError("feature vectors differ in length")
        features = np.array(rows)
        for s in samples:
            if not s.group_key:
                raise InvalidInputError(f"sample {s.sample_id!r} has an empty group key")
        index = {sid: i for i, sid in enumerate(ids)}
        seen = set()
        for a in annotations:
            if a.sample_id not in index:
                raise ReferentialIntegrityError(f"annotation references unknown sample {a.sample_id!r}")
            key = (a.sample_id, a.annotator_id)
            if key in seen:
                raise DuplicateAnnotationError(f"duplicate annotation for {key}")
            seen.add(key)
        ordered = sorted(annotations, key=lambda a: (a.sample_id, a.annotator_id))
        labels = np.array([[a.activation, a.valence] for a in ordered], dtype=np.float64).reshape(-1, 2)
        if not np.all(np.isfinite(labels)):
            raise InvalidInputError("non-finite label")
        return cls(
            name=name,
            sample_ids=tuple(ids),
            features=features,
            group_keys=tuple(s.group_key for s in samples),
            split_hints=tuple(s.split_hint for s in samples),
            ann_sample=np.array([index[a.sample_id] for a in ordered], dtype=np.int64),
            ann_annotator=np.array([a.annotator_id for a in ordered], dtype=str),
            labels=labels,
            declared_range=declared_range,
        )


# ---------------------------------------------------------------------------
# preprocessing


def _training_ids(dataset: Dataset, train_ids) -> set:
    if train_ids is not None:
        return set(train_ids)
    hinted = {sid for sid, h in zip(dataset.sample_ids, dataset.split_hints) if h == "train"}
    if hinted:
        return hinted
    return set(dataset.sample_ids)


def preprocess(dataset: Dataset, min_annotations: int = 30, train_ids=None, scaling="fit") -> Dataset:
    """Filter annotators and scale labels to [-1, 1].

    Training samples are ``train_ids`` if given, else samples hinted
    ``"train"``, else every sample. ``scaling`` is ``"fit"`` (population
    min/max), ``"declared"`` (the manifest label range) or a pair of
    :class:`ScalingParams` (activation, valence) reused from elsewhere.
    """
    if min_annotations < 1:
        raise InvalidInputError("min_annotations must be positive")
    train = _training_ids(dataset, train_ids)
    in_train = dataset._sample_mask(train)[dataset.ann_sample]

    counts = Counter(dataset.ann_annotator[in_train].tolist())
    keep_annotators = {a for a, c in counts.items() if c >= min_annotations}
    ann_keep = np.isin(dataset.ann_annotator, list(keep_annotators))
    # validation/test annotators never seen in training
    ann_keep &= np.isin(dataset.ann_annotator, list(counts))

    has_ann = np.zeros(dataset.n_samples, dtype=bool)
    has_ann[dataset.ann_sample[ann_keep]] = True
    if not ann_keep.any():
        raise EmptyDatasetError(f"{dataset.name}: no annotations left after filtering")
    out = dataset._select(has_ann, ann_keep)

    if isinstance(scaling, str):
        if scaling == "fit":
            params = tuple(fit_scaling(out.labels[:, d]) for d in range(2))
        elif scaling == "declared":
            if dataset.declared_range is None:
                raise InvalidInputError("dataset declares no label range")
            params = tuple(dataset.declared_range)
        else:
            raise InvalidInputError(f"unknown scaling mode {scaling!r}")
    else:
        params = tuple(scaling)
    labels = np.column_stack([apply_scaling(params[d], out.labels[:, d]) for d in range(2)])
    return replace(out, labels=labels, scaling=params, _index=None)


def aggregate_matrix(dataset: Dataset) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample mean labels ``(n_samples, 2)`` and annotation counts."""
    counts = np.bincount(dataset.ann_sample, minlength=dataset.n_samples)
    sums = np.zeros((dataset.n_samples, 2))
    np.add.at(sums, dataset.ann_sample, dataset.labels)
    with np.errstate(invalid="ignore", divide="ignore"):
        means = sums / counts[:, None]
    return means, counts


def aggregate_labels(dataset: Dataset) -> list[AggregateLabel]:
    means, counts = aggregate_matrix(dataset)
    return [
        AggregateLabel(sid, float(means[i, 0]), float(means[i, 1]), int(counts[i]))
        for i, sid in enumerate(dataset.sample_ids)
        if counts[i] > 0
    ]


def _partition_groups(groups: Sequence[str], k: int, rng_seed: int) -> list[list[str]]:
    order = np.random.default_rng(rng_seed).permutation(len(groups))
    shuffled = [groups[i] for i in order]
    return [list(chunk) for chunk in np.array_split(np.array(shuffled, dtype=object), k)]


def make_folds(dataset: Dataset, k: int = 5, rng_seed: int = 0) -> list[FoldSpec]:
    """Group-independent k-fold partition; fold sizes differ by at most one group."""
    groups = sorted(set(dataset.group_keys))
    if k < 2:
        raise InvalidInputError("k must be at least 2")
    if len(groups) < k:
        raise InvalidInputError(f"{len(groups)} group keys cannot form {k} folds")
    chunks = _partition_groups(groups, k, rng_seed)
    folds = []
    for i, chunk in enumerate(chunks):
        test_groups = set(chunk)
        test = frozenset(s for s, g in zip(dataset.sample_ids, dataset.group_keys) if g in test_groups)
        train = frozenset(dataset.sample_ids) - test
        folds.append(FoldSpec(i, train, test))
    return folds


def split_by_group(dataset: Dataset, sample_ids, holdout_fraction: float = 0.2, rng_seed: int = 0):
    """Split ``sample_ids`` into (train, holdout) sets without sharing group keys."""
    ids = set(sample_ids)
    groups = sorted({g for s, g in zip(dataset.sample_ids, dataset.group_keys) if s in ids})
    if len(groups) < 2:
        raise InvalidInputError("need at least two groups to hold one out")
    n_hold = min(len(groups) - 1, max(1, int(round(holdout_fraction * len(groups)))))
    order = np.random.default_rng(rng_seed).permutation(len(groups))
    held = {groups[i] for i in order[:n_hold]}
    hold = frozenset(s for s, g in zip(dataset.sample_ids, dataset.group_keys) if s in ids and g in held)
    return frozenset(ids - hold), hold


def _stable_key(text: str) -> int:
    return zlib.crc32(text.encode("utf-8"))


def sample_enrollment(dataset: Dataset, fold: FoldSpec, annotator_id: str, n, rng_seed: int) -> EnrollmentSet:
    """Uniform subset (without replacement) of an annotator's training annotations."""
    rows = dataset.annotator_rows(annotator_id, fold.train_sample_ids)
    if rows.size == 0:
        raise InvalidInputError(f"annotator {annotator_id!r} has no annotations in fold {fold.fold_index} training data")
    if n != ALL:
        n = int(n)
        if n < 1:
            raise InvalidInputError("enrollment size must be positive")
        if n < rows.size:
            rng = np.random.default_rng([rng_seed, fold.fold_index, _stable_key(annotator_id)])
            rows = np.sort(rng.choice(rows, size=n, replace=False))
    sidx = dataset.ann_sample[rows]
    return EnrollmentSet(
        annotator_id=annotator_id,
        sample_ids=tuple(dataset.sample_ids[i] for i in sidx),
        features=dataset.features[sidx],
        labels=dataset.labels[rows],
        requested_size=n,
    )


# ---------------------------------------------------------------------------
# file formats


def write_feature_file(path, features: np.ndarray) -> None:
    arr = np.ascontiguousarray(features, dtype="<f4")
    if arr.ndim != 2:
        raise DimensionMismatchError("feature matrix must be 2-d")
    with open(path, "wb") as fh:
        fh.write(_FEATURE_HEADER.pack(FEATURE_MAGIC, arr.shape[0], arr.shape[1], 0))
        fh.write(arr.tobytes(order="C"))


def read_feature_file(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise MissingFileError(f"feature file not found: {path}")
    raw = path.read_bytes()
    if len(raw) < _FEATURE_HEADER.size:
        raise DimensionMismatchError("feature file shorter than its header")
    magic, rows, cols, reserved = _FEATURE_HEADER.unpack_from(raw)
    if magic != FEATURE_MAGIC or reserved != 0:
        raise InvalidInputError(f"{path}: not an AMFT feature file")
    body = raw[_FEATURE_HEADER.size:]
    if len(body) != rows * cols * 4:
        raise DimensionMismatchError(f"{path}: header says {rows}x{cols} but payload has {len(body)} bytes")
    return np.frombuffer(body, dtype="<f4").reshape(rows, cols).astype(np.float64)


def write_dataset(dataset: Dataset, directory, raw_labels: bool = True) -> Path:
    """Write ``dataset`` in the on-disk layout; returns the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_feature_file(directory / "features.amft", dataset.features)
    (directory / "samples.idx").write_text("".join(f"{s}\n" for s in dataset.sample_ids), encoding="utf-8")
    has_split = any(h is not None for h in dataset.split_hints)
    with open(directory / "samples.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_id", "session"] + (["split"] if has_split else []))
        for sid, g, h in zip(dataset.sample_ids, dataset.group_keys, dataset.split_hints):
            w.writerow([sid, g] + ([h or ""] if has_split else []))
    with open(directory / "annotations.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ANNOTATION_HEADER)
        for a in dataset.annotations():
            w.writerow([a.sample_id, a.annotator_id, repr(a.activation), repr(a.valence)])
    label_range = None
    rng = dataset.declared_range if raw_labels else dataset.scaling
    if rng is not None:
        label_range = {d: [p.raw_min, p.raw_max] for d, p in zip(DIMENSIONS, rng)}
    manifest = {
        "name": dataset.name,
        "feature_file": "features.amft",
        "index_file": "samples.idx",
        "sample_file": "samples.csv",
        "annotation_file": "annotations.csv",
        "feature_dim": dataset.feature_dim,
        "label_range": label_range,
        "group_key_column": "session",
        "split_column": "split" if has_split else None,
    }
    path = directory / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    return path


def _require(path: Path) -> Path:
    if not path.exists():
        raise MissingFileError(f"file not found: {path}")
    return path


def load_dataset(manifest_path) -> Dataset:
    manifest_path = _require(Path(manifest_path))
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise InvalidInputError(f"{manifest_path}: malformed manifest ({exc})") from exc
    base = manifest_path.parent
    features = read_feature_file(base / manifest["feature_file"])
    index = _require(base / manifest["index_file"]).read_text(encoding="utf-8").splitlines()
    index = [s for s in index if s]
    if features.shape[0] != len(index):
        raise DimensionMismatchError(f"{features.shape[0]} feature rows but {len(index)} indexed sample ids")
    if features.shape[1] != int(manifest["feature_dim"]):
        raise DimensionMismatchError(f"feature file has {features.shape[1]} columns, manifest says {manifest['feature_dim']}")

    group_col = manifest.get("group_key_column", "session")
    split_col = manifest.get("split_column")
    meta = {}
    sample_file = manifest.get("sample_file")
    if sample_file:
        with open(_require(base / sample_file), newline="", encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                meta[row["sample_id"]] = (row[group_col], (row.get(split_col) or None) if split_col else None)
    samples = []
    for i, sid in enumerate(index):
        group, split = meta.get(sid, (sid, None))
        samples.append(Sample(sid, features[i], group, split))

    annotations = []
    with open(_require(base / manifest["annotation_file"]), newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != ANNOTATION_HEADER:
            raise InvalidInputError(f"annotation file header must be {','.join(ANNOTATION_HEADER)}")
        for row in reader:
            if not row:
                continue
            annotations.append(Annotation(row[0], row[1], float(row[2]), float(row[3])))

    declared = None
    if manifest.get("label_range"):
        declared = tuple(ScalingParams(*manifest["label_range"][d]) for d in DIMENSIONS)
    return Dataset.from_records(manifest["name"], samples, annotations, declared_range=declared)
