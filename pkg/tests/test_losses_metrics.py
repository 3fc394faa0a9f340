import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from cdseunet.errors import ConfigError, DimensionError
from cdseunet.gradcheck import loss_checks
from cdseunet.losses import (
    ConfusionCounts,
    MetricsReport,
    aggregate,
    bce_loss,
    combined_loss,
    confusion,
    dice_loss,
    format_row,
    metrics,
    parse_row,
)
from cdseunet.tensor import Tensor

import oracles

masks = arrays(np.uint8, (4, 4), elements=st.integers(0, 1))
counts = st.builds(ConfusionCounts, *(st.integers(0, 50) for _ in range(4)))


def p(a):
    return Tensor(np.asarray(a, dtype=np.float64))


# ---- losses


def test_bce_perfect():
    y = (np.arange(16).reshape(4, 4) % 3 == 0).astype(float)
    assert bce_loss(p(y), y).item() < 1e-6


def test_bce_half():
    y = np.random.default_rng(0).integers(0, 2, (8, 8))
    assert bce_loss(p(np.full((8, 8), 0.5)), y).item() == pytest.approx(math.log(2), abs=1e-12)


def test_bce_clamped_opposite():
    y = np.random.default_rng(1).integers(0, 2, (8, 8)).astype(float)
    value = bce_loss(p(1 - y), y).item()
    assert value == pytest.approx(-math.log(1e-7), rel=1e-6)
    assert value == pytest.approx(16.118, abs=1e-3)


def test_dice_examples():
    y = np.random.default_rng(2).integers(0, 2, (8, 8)).astype(float)
    assert dice_loss(p(y), y).item() == 0.0
    assert dice_loss(p(np.ones((8, 8))), np.zeros((8, 8))).item() == pytest.approx(1 - 1 / 65, abs=1e-15)
    assert dice_loss(p(np.full((8, 8), 1e-9)), np.zeros((8, 8))).item() < 1e-6


def test_combined_examples():
    y = np.random.default_rng(3).integers(0, 2, (8, 8)).astype(float)
    lv = combined_loss(p(y), y)
    assert lv.total.item() < 1e-6
    assert 0.5 * 0.6931 + 0.5 * 0.9846 == pytest.approx(0.83885, abs=1e-12)
    lv = combined_loss(p(np.full((8, 8), 0.5)), np.zeros((8, 8)))
    assert lv.total.item() == pytest.approx(0.5 * lv.bce.item() + 0.5 * lv.dice.item(), abs=1e-15)


def test_loss_shape_mismatch():
    with pytest.raises(DimensionError):
        bce_loss(p(np.zeros((2, 2))), np.zeros((2, 3)))
    with pytest.raises(DimensionError):
        dice_loss(p(np.zeros((2, 2))), np.zeros((3, 2)))


@settings(max_examples=50, deadline=None)
@given(masks, masks)
def test_dice_symmetric_on_binary(a, b):
    assert dice_loss(p(a), b).item() == dice_loss(p(b), a).item()


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 3), elements=st.floats(1e-6, 1 - 1e-6)), masks.map(lambda m: m[:3, :3]))
def test_loss_components_nonnegative(probs, y):
    lv = combined_loss(p(probs), y)
    assert lv.bce.item() >= 0 and lv.dice.item() >= 0
    assert abs(lv.total.item() - 0.5 * lv.bce.item() - 0.5 * lv.dice.item()) <= 1e-7


@pytest.mark.parametrize("result", loss_checks(seed=11), ids=lambda r: r.name)
def test_loss_gradients(result):
    assert result.error <= 1e-4


# ---- confusion and metrics


def test_confusion_examples():
    truth = np.zeros(100, np.uint8)
    truth[:10] = 1
    c = confusion(truth, truth)
    assert (c.tp, c.fp, c.fn, c.tn) == (10, 0, 0, 90)
    c = confusion(np.ones(100, np.uint8), truth)
    assert (c.tp, c.fp, c.fn, c.tn) == (10, 90, 0, 0)
    with pytest.raises(DimensionError):
        confusion(np.zeros(3), np.zeros(4))


@settings(max_examples=50, deadline=None)
@given(arrays(np.uint8, (8, 8), elements=st.integers(0, 1)), arrays(np.uint8, (8, 8), elements=st.integers(0, 1)))
def test_confusion_matches_loop(a, b):
    c = confusion(a, b)
    assert (c.tp, c.fp, c.fn, c.tn) == oracles.confusion(a.ravel().tolist(), b.ravel().tolist())
    assert c.total == 64


def test_metric_example():
    r = metrics(ConfusionCounts(tp=3, fp=1, fn=1, tn=95))
    assert (r.accuracy, r.precision, r.recall, r.dsc) == (0.98, 0.75, 0.75, 0.75)


def test_metric_perfect_and_empty():
    assert metrics(ConfusionCounts(5, 0, 0, 11)).row() == (1.0, 1.0, 1.0, 1.0)
    assert metrics(ConfusionCounts(0, 0, 0, 16)).row() == (1.0, 1.0, 1.0, 1.0)
    r = metrics(ConfusionCounts(0, 0, 4, 12))
    assert r.precision == 0.0 and r.recall == 0.0 and r.dsc == 0.0
    r = metrics(ConfusionCounts(0, 3, 0, 13))
    assert r.precision == 0.0 and r.recall == 0.0


@settings(max_examples=200, deadline=None)
@given(counts)
def test_metrics_in_unit_interval_and_match_oracle(c):
    r = metrics(c)
    assert all(0.0 <= v <= 1.0 for v in r.row())
    if c.total:
        assert r.row() == oracles.metric_values(c.tp, c.fp, c.fn, c.tn)


@settings(max_examples=200, deadline=None)
@given(counts)
def test_f1_identity(c):
    if c.tp + c.fp == 0 or c.tp + c.fn == 0 or c.tp == 0:
        return
    prec, rec = Fraction(c.tp, c.tp + c.fp), Fraction(c.tp, c.tp + c.fn)
    assert Fraction(2 * c.tp, 2 * c.tp + c.fp + c.fn) == 2 * prec * rec / (prec + rec)
    r = metrics(c)
    assert r.dsc == pytest.approx(2 * r.precision * r.recall / (r.precision + r.recall), rel=1e-12)


def test_counts_validation_and_sum():
    with pytest.raises(ConfigError):
        ConfusionCounts(-1, 0, 0, 0)
    assert ConfusionCounts(1, 2, 3, 4) + ConfusionCounts(1, 1, 1, 1) == ConfusionCounts(2, 3, 4, 5)


def test_aggregate_micro_vs_mean():
    per = [ConfusionCounts(3, 1, 1, 95), ConfusionCounts(0, 0, 0, 100)]
    micro = aggregate(per, "micro")
    assert micro.counts == ConfusionCounts(3, 1, 1, 195)
    assert micro.dsc == 0.75
    mean = aggregate(per, "per_image_mean")
    assert mean.dsc == pytest.approx(0.875)
    assert mean.aggregation == "per_image_mean"
    with pytest.raises(ConfigError):
        aggregate(per, "macro")
    with pytest.raises(ConfigError):
        aggregate([], "micro")


def test_report_json_round_trip():
    r = metrics(ConfusionCounts(3, 1, 1, 95))
    again = MetricsReport.from_json(r.to_json())
    assert again == r
    assert set(r.to_dict()) == {"accuracy", "precision", "recall", "dsc", "counts", "aggregation"}


def test_table_row_round_trip():
    text = "0.9930 0.8135 0.9648 0.9107"
    values = parse_row(text)
    assert values == (0.9930, 0.8135, 0.9648, 0.9107)
    assert format_row(values) == text.replace(" ", "\t")
    assert parse_row(format_row(values)) == values
    with pytest.raises(ConfigError):
        parse_row("0.1 0.2")
