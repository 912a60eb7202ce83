"""Training regimes for the annotator network.

* :func:`train_aggregate` - aggregate heads on per-sample mean labels
* :func:`train_individual` - annotator heads on individual labels
* :func:`finetune_aggregate` - one epoch or patience-based finetuning

All loops use Adam and are deterministic given ``TrainConfig.rng_seed``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .corpus import Dataset, aggregate_matrix
from .errors import InvalidInputError, TrainingDivergedError
from .metrics import ccc
from .network import (
    AGGREGATE,
    ModelParams,
    batch_loss_aggregate,
    batch_loss_individual,
    forward,
    row_predictions,
)

log = logging.getLogger(__name__)

ONE_EPOCH = "one_epoch"
UNTIL_EARLY_STOP = "until_early_stop"


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 32
    max_epochs: int = 100
    patience: int = 10
    rng_seed: int = 0
    annotators_per_batch: int = 8
    samples_per_annotator_in_batch: int = 4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise InvalidInputError("learning_rate must be positive")
        if self.batch_size < 2 or self.max_epochs < 1 or self.annotators_per_batch < 1:
            raise InvalidInputError("batch_size >= 2, max_epochs >= 1 and annotators_per_batch >= 1 required")
        if self.samples_per_annotator_in_batch < 2:
            raise InvalidInputError("samples_per_annotator_in_batch must be at least 2")
        if not 0 <= self.patience <= self.max_epochs:
            raise InvalidInputError("patience must lie in [0, max_epochs]")


class Adam:
    def __init__(self, params: ModelParams, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = params.zeros_like()
        self.v = params.zeros_like()
        self.t = 0

    @classmethod
    def from_config(cls, params: ModelParams, config: TrainConfig) -> "Adam":
        return cls(params, config.learning_rate, config.beta1, config.beta2, config.epsilon)

    def step(self, params: ModelParams, grads: dict) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for name, g in grads.items():
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            params.tensors[name] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def _check_finite(loss: float, where: str, epoch: int, step: int) -> None:
    if not math.isfinite(loss):
        raise TrainingDivergedError(f"{where}: non-finite loss {loss} at epoch {epoch}, step {step}")


def fit_with_early_stopping(
    params: ModelParams,
    run_epoch: Callable[[ModelParams, int], dict],
    score: Callable[[ModelParams], float],
    max_epochs: int,
    patience: int,
) -> tuple[ModelParams, list[dict]]:
    """Generic early-stopping loop.

    ``run_epoch`` updates ``params`` in place and returns epoch statistics.
    The starting parameters are scored as epoch 0; training stops once the
    validation score has failed to improve for more than ``patience``
    consecutive epochs, and the best-scoring parameters are returned.
    """
    best = score(params)
    best_params = params.copy()
    best_epoch = 0
    history = [{"epoch": 0, "val_score": best}]
    bad = 0
    for epoch in range(1, max_epochs + 1):
        stats = run_epoch(params, epoch)
        current = score(params)
        if not math.isfinite(current):
            raise TrainingDivergedError(f"non-finite validation score at epoch {epoch}")
        history.append({"epoch": epoch, **stats, "val_score": current})
        if current > best:
            best, best_params, best_epoch, bad = current, params.copy(), epoch, 0
        else:
            bad += 1
            if bad > patience:
                break
    history[-1]["best_epoch"] = best_epoch
    return best_params, history


def _batches(n: int, batch_size: int, order: np.ndarray) -> list[np.ndarray]:
    chunks = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    if len(chunks) > 1 and chunks[-1].size < 2:
        last = chunks.pop()
        chunks[-1] = np.concatenate([chunks[-1], last])
    return chunks


def aggregate_batches(n_samples: int, config: TrainConfig, rng: np.random.Generator) -> list[np.ndarray]:
    return _batches(n_samples, config.batch_size, rng.permutation(n_samples))


def _aggregate_data(dataset: Dataset):
    means, counts = aggregate_matrix(dataset)
    keep = counts > 0
    return dataset.features[keep], means[keep]


def aggregate_score(params: ModelParams, dataset: Dataset) -> float:
    """Mean over both dimensions of CCC between aggregate head and mean labels."""
    X, Y = _aggregate_data(dataset)
    pred = forward(params, X, AGGREGATE)
    return 0.5 * (ccc(pred.activation, Y[:, 0]) + ccc(pred.valence, Y[:, 1]))


def per_annotator_ccc(params: ModelParams, dataset: Dataset) -> dict:
    """``annotator_id -> (ccc_act, ccc_val)`` of each annotator's own head.

    Only annotators with a head and at least two annotations are scored.
    """
    heads = set(params.config.annotator_ids)
    rows_ok = np.isin(dataset.ann_annotator, list(heads))
    if not rows_ok.any():
        return {}
    rows = np.flatnonzero(rows_ok)
    pred = row_predictions(params, dataset.features, dataset.ann_sample[rows], params.head_indices(dataset.ann_annotator[rows]))
    ann = dataset.ann_annotator[rows]
    out = {}
    for a in sorted(set(ann.tolist())):
        sel = ann == a
        if sel.sum() < 2:
            continue
        y = dataset.labels[rows[sel]]
        out[a] = (ccc(pred[sel, 0], y[:, 0]), ccc(pred[sel, 1], y[:, 1]))
    return out


def individual_score(params: ModelParams, dataset: Dataset) -> float:
    scores = per_annotator_ccc(params, dataset)
    if not scores:
        raise InvalidInputError("no validation annotator with a head and >= 2 annotations")
    return float(np.mean([v for pair in scores.values() for v in pair]))


def _aggregate_epoch_fn(X, Y, config: TrainConfig, opt: Adam, rng: np.random.Generator, where: str):
    def run_epoch(params: ModelParams, epoch: int) -> dict:
        losses = []
        for step, idx in enumerate(aggregate_batches(X.shape[0], config, rng)):
            res = batch_loss_aggregate(params, X[idx], Y[idx], dropout_rng=rng)
            _check_finite(res.loss, where, epoch, step)
            opt.step(params, res.grads)
            losses.append(res.loss)
        return {"train_loss": float(np.mean(losses)), "steps": len(losses)}

    return run_epoch


def _run_fixed(params, run_epoch, epochs: int, score=None):
    history = []
    for epoch in range(1, epochs + 1):
        stats = run_epoch(params, epoch)
        entry = {"epoch": epoch, **stats}
        if score is not None:
            entry["val_score"] = score(params)
        history.append(entry)
    return params, history


def train_aggregate(
    params: ModelParams,
    train: Dataset,
    validation: Dataset | None,
    config: TrainConfig,
    max_epochs: int | None = None,
    early_stopping: bool = True,
) -> tuple[ModelParams, list[dict]]:
    """Train the aggregate heads (and shared layers) on mean labels.

    With ``early_stopping`` the validation mean CCC is monitored with
    ``config.patience``; otherwise exactly ``max_epochs`` epochs run.
    """
    params = params.copy()
    X, Y = _aggregate_data(train)
    if X.shape[0] < 2:
        raise InvalidInputError("aggregate training needs at least two labelled samples")
    rng = np.random.default_rng(config.rng_seed)
    opt = Adam.from_config(params, config)
    run_epoch = _aggregate_epoch_fn(X, Y, config, opt, rng, "train_aggregate")
    epochs = max_epochs or config.max_epochs
    if early_stopping:
        if validation is None:
            raise InvalidInputError("early stopping requires a validation dataset")
        return fit_with_early_stopping(params, run_epoch, lambda p: aggregate_score(p, validation), epochs, config.patience)
    score = (lambda p: aggregate_score(p, validation)) if validation is not None else None
    return _run_fixed(params, run_epoch, epochs, score)


def finetune_aggregate(
    params: ModelParams,
    train: Dataset,
    validation: Dataset | None,
    config: TrainConfig,
    mode: str = UNTIL_EARLY_STOP,
) -> tuple[ModelParams, list[dict]]:
    """Finetune a pre-trained aggregate model on target data."""
    if mode == ONE_EPOCH:
        return train_aggregate(params, train, None, config, max_epochs=1, early_stopping=False)
    if mode == UNTIL_EARLY_STOP:
        if validation is None or validation.n_annotations == 0:
            raise InvalidInputError("until_early_stop finetuning needs a validation partition")
        return train_aggregate(params, train, validation, config, early_stopping=True)
    raise InvalidInputError(f"unknown finetuning mode {mode!r}")


def _eligible_annotators(params: ModelParams, train: Dataset) -> dict:
    heads = set(params.config.annotator_ids)
    rows_by = {}
    for a in train.annotator_ids:
        rows = train.annotator_rows(a)
        if a not in heads:
            log.warning("annotator %s has no prediction head; skipped", a)
        elif rows.size < 2:
            log.info("annotator %s has %d training annotation(s); excluded from batches", a, rows.size)
        else:
            rows_by[a] = rows
    if not rows_by:
        raise InvalidInputError("no annotator has >= 2 training annotations")
    return rows_by


def individual_batches(rows_by: dict, config: TrainConfig, rng: np.random.Generator) -> list[tuple[list, list]]:
    """Batches for one epoch as ``(annotator_ids, row_arrays)`` pairs."""
    annotators = sorted(rows_by)
    n_rows = sum(r.size for r in rows_by.values())
    per_batch = config.annotators_per_batch * config.samples_per_annotator_in_batch
    n_steps = max(1, math.ceil(n_rows / per_batch))
    k = min(config.annotators_per_batch, len(annotators))
    out = []
    for _ in range(n_steps):
        chosen = [annotators[i] for i in np.sort(rng.choice(len(annotators), size=k, replace=False))]
        rows = []
        for a in chosen:
            avail = rows_by[a]
            m = min(config.samples_per_annotator_in_batch, avail.size)
            rows.append(avail[rng.choice(avail.size, size=m, replace=False)])
        out.append((chosen, rows))
    return out


def train_individual(
    params: ModelParams,
    train: Dataset,
    validation: Dataset | None,
    config: TrainConfig,
    max_epochs: int | None = None,
) -> tuple[ModelParams, list[dict]]:
    """Train annotator heads with the per-annotator CCC loss.

    Early stopping monitors the unweighted mean per-annotator validation CCC
    over both dimensions; without a validation set ``max_epochs`` run.
    """
    params = params.copy()
    rows_by = _eligible_annotators(params, train)
    rng = np.random.default_rng(config.rng_seed)
    opt = Adam.from_config(params, config)

    def run_epoch(p: ModelParams, epoch: int) -> dict:
        losses = []
        for step, (chosen, rows) in enumerate(individual_batches(rows_by, config, rng)):
            flat = np.concatenate(rows)
            ids = np.repeat(chosen, [r.size for r in rows])
            res = batch_loss_individual(p, train.features[train.ann_sample[flat]], ids, train.labels[flat], dropout_rng=rng)
            _check_finite(res.loss, "train_individual", epoch, step)
            opt.step(p, res.grads)
            losses.append(res.loss)
        return {"train_loss": float(np.mean(losses)), "steps": len(losses)}

    epochs = max_epochs or config.max_epochs
    if validation is None:
        return _run_fixed(params, run_epoch, epochs)
    return fit_with_early_stopping(params, run_epoch, lambda p: individual_score(p, validation), epochs, config.patience)
