import numpy as np
import pytest

from annomap.errors import InvalidInputError, UnknownAnnotatorError
from annomap.network import (
    AGGREGATE,
    ALL_HEADS,
    PARAM_NAMES,
    ModelConfig,
    batch_loss_aggregate,
    batch_loss_individual,
    forward,
    init_heads_from_aggregate,
    init_model,
    row_predictions,
)

from gradcheck import numeric_grads, relative_error

ANN = ("a1", "a2", "a3")


def small(seed=0, width=8, feature_dim=8, annotators=ANN, dropout=0.2):
    return init_model(ModelConfig(feature_dim, annotators, width, dropout), seed)


def test_init_deterministic_and_shaped():
    a, b, c = small(1), small(1), small(2)
    assert all(np.array_equal(a[k], b[k]) for k in PARAM_NAMES)
    assert not np.array_equal(a["trunk_w"], c["trunk_w"])
    assert a["heads_act_w"].shape[0] == 3 and a["heads_val_w"].shape[0] == 3
    with pytest.raises(InvalidInputError):
        ModelConfig(4, ("a", "a"))


def test_forward_contracts():
    p = small()
    x = np.random.default_rng(0).normal(size=(5, 8))
    zero = p.copy()
    for k in zero.tensors:
        zero.tensors[k][...] = 0.0
    assert np.all(forward(zero, x).activation == 0.0)
    one = forward(p, x, ["a1"])
    assert one.activation.shape == (5, 1) and one.valence.shape == (5, 1)
    np.testing.assert_array_equal(forward(p, x, ALL_HEADS).activation, forward(p, x, ALL_HEADS).activation)
    with pytest.raises(UnknownAnnotatorError):
        forward(p, x, ["zz"])
    # alone vs inside a batch
    alone = forward(p, x[2], ALL_HEADS).activation
    np.testing.assert_allclose(alone[0], forward(p, x, ALL_HEADS).activation[2], rtol=0, atol=1e-14)
    # training-mode dropout changes outputs; inference never does
    rng = np.random.default_rng(1)
    train_out = forward(p, x, AGGREGATE, training_mode=True, dropout_rng=rng).activation
    assert not np.allclose(train_out, forward(p, x).activation)


def test_row_predictions_match_forward():
    p = small()
    x = np.random.default_rng(0).normal(size=(4, 8))
    rows = row_predictions(p, x, [0, 3, 3, 1], [2, 0, 1, 2])
    full = forward(p, x, ALL_HEADS)
    assert rows[1, 0] == pytest.approx(full.activation[3, 0], abs=1e-14)
    assert rows[3, 1] == pytest.approx(full.valence[1, 2], abs=1e-14)


def test_aggregate_loss_zero_when_exact():
    p = small()
    x = np.random.default_rng(2).normal(size=(6, 8))
    out = forward(p, x)
    res = batch_loss_aggregate(p, x, np.column_stack([out.activation, out.valence]))
    assert res.loss == pytest.approx(0.0, abs=1e-12)
    const = batch_loss_aggregate(p, x, np.ones((6, 2)))
    assert const.degenerate == 0  # predictions vary, so denominators stay positive
    flat = p.copy()
    flat.tensors["agg_act_w"][...] = 0
    flat.tensors["agg_val_w"][...] = 0
    res = batch_loss_aggregate(flat, x, np.tile([flat["agg_act_b"], flat["agg_val_b"]], (6, 1)))
    assert res.degenerate == 2
    assert all(np.all(g == 0) for g in res.grads.values())


def test_aggregate_loss_order_invariant():
    p = small()
    rng = np.random.default_rng(3)
    x, y = rng.normal(size=(7, 8)), rng.uniform(-1, 1, size=(7, 2))
    perm = rng.permutation(7)
    assert batch_loss_aggregate(p, x, y).loss == pytest.approx(batch_loss_aggregate(p, x[perm], y[perm]).loss, abs=1e-12)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_aggregate_gradient_finite_differences(seed):
    p = small(seed)
    rng = np.random.default_rng(100 + seed)
    x, y = rng.normal(size=(4, 8)), rng.uniform(-1, 1, size=(4, 2))
    res = batch_loss_aggregate(p, x, y)
    num = numeric_grads(lambda q: batch_loss_aggregate(q, x, y).loss, p)
    assert max(relative_error(res.grads, num).values()) < 1e-5


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_individual_gradient_finite_differences(seed):
    p = small(seed)
    rng = np.random.default_rng(200 + seed)
    x = rng.normal(size=(6, 8))
    ids = ["a1", "a1", "a1", "a3", "a3", "a3"]
    y = rng.uniform(-1, 1, size=(6, 2))
    res = batch_loss_individual(p, x, ids, y)
    num = numeric_grads(lambda q: batch_loss_individual(q, x, ids, y).loss, p)
    assert max(relative_error(res.grads, num).values()) < 1e-5
    assert np.all(res.grads["heads_act_w"][1] == 0)


def test_individual_loss_skip_rule_and_errors():
    p = small()
    rng = np.random.default_rng(4)
    x, y = rng.normal(size=(5, 8)), rng.uniform(-1, 1, size=(5, 2))
    with_b = batch_loss_individual(p, x, ["a1", "a1", "a1", "a1", "a2"], y)
    without_b = batch_loss_individual(p, x[:4], ["a1"] * 4, y[:4])
    assert with_b.loss == pytest.approx(without_b.loss, abs=1e-14)
    assert np.all(with_b.grads["heads_act_w"][1] == 0)
    for k in PARAM_NAMES:
        np.testing.assert_allclose(with_b.grads[k], without_b.grads[k], atol=1e-14)
    with pytest.raises(InvalidInputError):
        batch_loss_individual(p, x[:2], ["a1", "a2"], y[:2])


def test_individual_loss_zero_when_exact():
    p = small()
    x = np.random.default_rng(5).normal(size=(4, 8))
    out = forward(p, x, ["a2"])
    y = np.column_stack([out.activation[:, 0], out.valence[:, 0]])
    assert batch_loss_individual(p, x, ["a2"] * 4, y).loss == pytest.approx(0.0, abs=1e-12)


def test_init_heads_copy_semantics():
    p = init_heads_from_aggregate(small(dropout=0.0))
    x = np.random.default_rng(6).normal(size=(5, 8))
    agg = forward(p, x)
    heads = forward(p, x, ALL_HEADS)
    for j in range(3):
        np.testing.assert_allclose(heads.activation[:, j], agg.activation, rtol=0, atol=1e-14)
        np.testing.assert_allclose(heads.valence[:, j], agg.valence, rtol=0, atol=1e-14)


def test_many_heads_copied():
    ids = tuple(f"s{i:04d}" for i in range(1998))
    p = init_heads_from_aggregate(init_model(ModelConfig(4, ids, 8), 0))
    assert p["heads_act_w"].shape == (1998, 8)
    assert np.all(p["heads_act_w"] == p["agg_act_w"]) and np.all(p["heads_val_b"] == p["agg_val_b"])
