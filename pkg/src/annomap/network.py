"""Shared-trunk network with one prediction head per annotator.

Layout (all hidden layers ReLU, width ``hidden_width``)::

    features -> dropout -> trunk
                             |-> act_1 -> act_2 -> {heads_act[i], agg_act}
                             |-> val_1 -> val_2 -> {heads_val[i], agg_val}

Gradients are computed by hand; ``batch_loss_*`` return the loss together
with a gradient dict keyed like :attr:`ModelParams.tensors`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import InvalidInputError, UnknownAnnotatorError
from .metrics import DEGENERATE_EPS

AGGREGATE = "aggregate"
ALL_HEADS = "all"

PARAM_NAMES = (
    "trunk_w", "trunk_b",
    "act_w1", "act_b1", "act_w2", "act_b2",
    "val_w1", "val_b1", "val_w2", "val_b2",
    "heads_act_w", "heads_act_b", "heads_val_w", "heads_val_b",
    "agg_act_w", "agg_act_b", "agg_val_w", "agg_val_b",
)  # fmt: skip

_BRANCHES = ("act", "val")


@dataclass(frozen=True)
class ModelConfig:
    feature_dim: int
    annotator_ids: tuple
    hidden_width: int = 256
    dropout_rate: float = 0.2

    def __post_init__(self):
        object.__setattr__(self, "annotator_ids", tuple(str(a) for a in self.annotator_ids))
        if self.feature_dim < 1 or self.hidden_width < 1:
            raise InvalidInputError("feature_dim and hidden_width must be positive")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise InvalidInputError("dropout_rate must lie in [0, 1)")
        if len(set(self.annotator_ids)) != len(self.annotator_ids):
            raise InvalidInputError("annotator_ids must be unique")

    def shapes(self) -> dict:
        f, h, a = self.feature_dim, self.hidden_width, len(self.annotator_ids)
        return {
            "trunk_w": (h, f), "trunk_b": (h,),
            "act_w1": (h, h), "act_b1": (h,), "act_w2": (h, h), "act_b2": (h,),
            "val_w1": (h, h), "val_b1": (h,), "val_w2": (h, h), "val_b2": (h,),
            "heads_act_w": (a, h), "heads_act_b": (a,),
            "heads_val_w": (a, h), "heads_val_b": (a,),
            "agg_act_w": (h,), "agg_act_b": (), "agg_val_w": (h,), "agg_val_b": (),
        }  # fmt: skip


@dataclass(eq=False)
class ModelParams:
    config: ModelConfig
    tensors: dict
    _head_index: dict = field(default=None, repr=False)

    def __post_init__(self):
        self._head_index = {a: i for i, a in enumerate(self.config.annotator_ids)}

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.tensors.items()})

    def head_indices(self, annotator_ids) -> np.ndarray:
        try:
            return np.array([self._head_index[str(a)] for a in annotator_ids], dtype=np.int64)
        except KeyError as exc:
            raise UnknownAnnotatorError(f"no prediction head for annotator {exc.args[0]!r}") from None

    def zeros_like(self) -> dict:
        return {k: np.zeros_like(v) for k, v in self.tensors.items()}


def init_model(config: ModelConfig, rng_seed: int) -> ModelParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for every weight and bias."""
    rng = np.random.default_rng(rng_seed)
    fan_in = {"trunk": config.feature_dim}
    tensors = {}
    for name, shape in config.shapes().items():
        bound = 1.0 / np.sqrt(fan_in.get(name.split("_")[0], config.hidden_width))
        tensors[name] = rng.uniform(-bound, bound, size=shape)
    return ModelParams(config, tensors)


# ---------------------------------------------------------------------------
# forward / backward through the shared layers


def dropout_mask(rate: float, shape, rng: np.random.Generator) -> np.ndarray:
    keep = 1.0 - rate
    return (rng.random(shape) < keep) / keep


def _embed(params: ModelParams, X: np.ndarray, mask: np.ndarray | None):
    t = params.tensors
    x0 = X if mask is None else X * mask
    z0 = x0 @ t["trunk_w"].T + t["trunk_b"]
    h0 = np.maximum(z0, 0.0)
    cache = {"x0": x0, "z0": z0, "h0": h0}
    out = {}
    for br in _BRANCHES:
        z1 = h0 @ t[f"{br}_w1"].T + t[f"{br}_b1"]
        h1 = np.maximum(z1, 0.0)
        z2 = h1 @ t[f"{br}_w2"].T + t[f"{br}_b2"]
        h2 = np.maximum(z2, 0.0)
        cache[br] = (z1, h1, z2)
        out[br] = h2
    return out, cache


def _embed_backward(params: ModelParams, cache, g_h2: dict, grads: dict) -> None:
    t = params.tensors
    g_h0 = np.zeros_like(cache["h0"])
    for br in _BRANCHES:
        z1, h1, z2 = cache[br]
        g_z2 = g_h2[br] * (z2 > 0)
        grads[f"{br}_w2"] += g_z2.T @ h1
        grads[f"{br}_b2"] += g_z2.sum(axis=0)
        g_z1 = (g_z2 @ t[f"{br}_w2"]) * (z1 > 0)
        grads[f"{br}_w1"] += g_z1.T @ cache["h0"]
        grads[f"{br}_b1"] += g_z1.sum(axis=0)
        g_h0 += g_z1 @ t[f"{br}_w1"]
    g_z0 = g_h0 * (cache["z0"] > 0)
    grads["trunk_w"] += g_z0.T @ cache["x0"]
    grads["trunk_b"] += g_z0.sum(axis=0)


def _features(params: ModelParams, features) -> np.ndarray:
    X = np.asarray(features, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] != params.config.feature_dim:
        raise InvalidInputError(f"expected features of width {params.config.feature_dim}, got shape {X.shape}")
    return X


@dataclass(frozen=True)
class PredictionBatch:
    """Predictions aligned with the input rows.

    ``activation``/``valence`` are ``(n,)`` for the aggregate head and
    ``(n, len(head_ids))`` otherwise.
    """

    activation: np.ndarray
    valence: np.ndarray
    head_ids: tuple | None = None

    def dimension(self, d: int) -> np.ndarray:
        return self.activation if d == 0 else self.valence


def forward(params: ModelParams, features, head_selector=AGGREGATE, training_mode=False, dropout_rng=None) -> PredictionBatch:
    """Predict for one feature vector or a ``(n, feature_dim)`` batch.

    ``head_selector`` is ``"aggregate"``, ``"all"`` or a sequence of
    annotator ids. Dropout is applied only when ``training_mode`` is true.
    """
    X = _features(params, features)
    mask = None
    if training_mode and params.config.dropout_rate > 0:
        if dropout_rng is None:
            raise InvalidInputError("training_mode requires a dropout_rng")
        mask = dropout_mask(params.config.dropout_rate, X.shape, dropout_rng)
    emb, _ = _embed(params, X, mask)
    t = params.tensors
    if isinstance(head_selector, str) and head_selector == AGGREGATE:
        return PredictionBatch(
            emb["act"] @ t["agg_act_w"] + t["agg_act_b"],
            emb["val"] @ t["agg_val_w"] + t["agg_val_b"],
        )
    if isinstance(head_selector, str) and head_selector == ALL_HEADS:
        ids = params.config.annotator_ids
        idx = slice(None)
    else:
        ids = tuple(str(a) for a in head_selector)
        idx = params.head_indices(ids)
    return PredictionBatch(
        emb["act"] @ t["heads_act_w"][idx].T + t["heads_act_b"][idx],
        emb["val"] @ t["heads_val_w"][idx].T + t["heads_val_b"][idx],
        ids,
    )


# ---------------------------------------------------------------------------
# losses


@dataclass
class LossResult:
    loss: float
    grads: dict
    degenerate: int = 0
    n_terms: int = 0


def _ccc_and_grad(pred: np.ndarray, target: np.ndarray):
    """CCC value and d ccc / d pred; (0, zeros, True) when degenerate."""
    n = pred.size
    mp, mt = pred.mean(), target.mean()
    dp, dt = pred - mp, target - mt
    vp, vt, cov = (dp * dp).mean(), (dt * dt).mean(), (dp * dt).mean()
    denom = vp + vt + (mp - mt) ** 2
    if denom < DEGENERATE_EPS:
        return 0.0, np.zeros(n), True
    value = 2.0 * cov / denom
    grad = (2.0 / (n * denom)) * dt - (4.0 * cov / (n * denom * denom)) * (dp + (mp - mt))
    return value, grad, False


def batch_loss_aggregate(params: ModelParams, features, targets, dropout_rng=None) -> LossResult:
    """``1 - (ccc_act + ccc_val) / 2`` of the aggregate heads over a batch.

    ``targets`` is ``(n, 2)`` (activation, valence) with ``n >= 2``.
    """
    X = _features(params, features)
    Y = np.asarray(targets, dtype=np.float64)
    if X.shape[0] < 2 or Y.shape != (X.shape[0], 2):
        raise InvalidInputError("aggregate loss needs >= 2 rows and (n, 2) targets")
    mask = None
    if dropout_rng is not None and params.config.dropout_rate > 0:
        mask = dropout_mask(params.config.dropout_rate, X.shape, dropout_rng)
    emb, cache = _embed(params, X, mask)
    t = params.tensors
    grads = params.zeros_like()
    g_h2 = {}
    total, degenerate = 0.0, 0
    for d, br in enumerate(_BRANCHES):
        pred = emb[br] @ t[f"agg_{br}_w"] + t[f"agg_{br}_b"]
        value, g, degen = _ccc_and_grad(pred, Y[:, d])
        degenerate += degen
        total += value
        g_pred = -0.5 * g
        grads[f"agg_{br}_w"] += emb[br].T @ g_pred
        grads[f"agg_{br}_b"] += g_pred.sum()
        g_h2[br] = np.outer(g_pred, t[f"agg_{br}_w"])
    _embed_backward(params, cache, g_h2, grads)
    return LossResult(1.0 - 0.5 * total, grads, degenerate, 2)


def batch_loss_individual(params: ModelParams, features, annotator_ids: Sequence, labels, dropout_rng=None) -> LossResult:
    """Mean per-annotator CCC loss over annotators with >= 2 rows in the batch.

    Each row is one annotation: the sample's features, the annotator id and
    the annotator's ``(activation, valence)`` label. Annotators with a single
    row are dropped before the forward pass.
    """
    X = _features(params, features)
    ids = np.asarray([str(a) for a in annotator_ids])
    Y = np.asarray(labels, dtype=np.float64)
    if ids.shape[0] != X.shape[0] or Y.shape != (X.shape[0], 2):
        raise InvalidInputError("features, annotator_ids and labels must be row-aligned")
    uniq, inverse, counts = np.unique(ids, return_inverse=True, return_counts=True)
    keep = counts[inverse] >= 2
    if not keep.any():
        raise InvalidInputError("no annotator has >= 2 annotations in the batch")
    X, ids, Y, inverse = X[keep], ids[keep], Y[keep], inverse[keep]
    qualifying = np.flatnonzero(counts >= 2)
    head_idx = params.head_indices(ids)

    mask = None
    if dropout_rng is not None and params.config.dropout_rate > 0:
        mask = dropout_mask(params.config.dropout_rate, X.shape, dropout_rng)
    emb, cache = _embed(params, X, mask)
    t = params.tensors
    grads = params.zeros_like()
    g_h2 = {}
    scale = 1.0 / (2 * qualifying.size)
    total, degenerate = 0.0, 0
    groups = [np.flatnonzero(inverse == q) for q in qualifying]
    for d, br in enumerate(_BRANCHES):
        w = t[f"heads_{br}_w"][head_idx]
        pred = np.einsum("ij,ij->i", emb[br], w) + t[f"heads_{br}_b"][head_idx]
        g_pred = np.zeros_like(pred)
        for rows in groups:
            value, g, degen = _ccc_and_grad(pred[rows], Y[rows, d])
            degenerate += degen
            total += value
            g_pred[rows] = -scale * g
        np.add.at(grads[f"heads_{br}_w"], head_idx, g_pred[:, None] * emb[br])
        np.add.at(grads[f"heads_{br}_b"], head_idx, g_pred)
        g_h2[br] = g_pred[:, None] * w
    _embed_backward(params, cache, g_h2, grads)
    return LossResult(1.0 - scale * total, grads, degenerate, 2 * qualifying.size)


def row_predictions(params: ModelParams, sample_features, sample_idx, head_idx) -> np.ndarray:
    """``(n_rows, 2)`` predictions where row ``r`` uses sample ``sample_idx[r]``
    and annotator head ``head_idx[r]`` (inference mode)."""
    X = _features(params, sample_features)
    sample_idx = np.asarray(sample_idx, dtype=np.int64)
    head_idx = np.asarray(head_idx, dtype=np.int64)
    used, inv = np.unique(sample_idx, return_inverse=True)
    emb, _ = _embed(params, X[used], None)
    t = params.tensors
    out = np.empty((sample_idx.size, 2))
    for d, br in enumerate(_BRANCHES):
        out[:, d] = np.einsum("ij,ij->i", emb[br][inv], t[f"heads_{br}_w"][head_idx]) + t[f"heads_{br}_b"][head_idx]
    return out


def init_heads_from_aggregate(params: ModelParams) -> ModelParams:
    """Copy each aggregate head into every annotator head of its dimension."""
    out = params.copy()
    for br in _BRANCHES:
        out.tensors[f"heads_{br}_w"][:] = out.tensors[f"agg_{br}_w"]
        out.tensors[f"heads_{br}_b"][:] = out.tensors[f"agg_{br}_b"]
    return out
