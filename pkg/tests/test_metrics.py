import csv
import json
from decimal import Decimal

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from stainmtl.exceptions import InvalidInput
from stainmtl.metrics import cosas_score, dice, evaluate_dataset, iou, threshold_logits, tta_predict


def masks_from_sets(shape, p, g):
    pred = np.zeros(shape, bool)
    gt = np.zeros(shape, bool)
    pred.flat[list(p)] = True
    gt.flat[list(g)] = True
    return pred, gt


def test_dice_iou_reference_cases():
    a = np.zeros((4, 4), bool)
    a[0, :2] = True
    assert dice(a, a) == 1.0 and iou(a, a) == 1.0
    b = np.zeros((4, 4), bool)
    b[3, :2] = True
    assert dice(a, b) == 0.0 and iou(a, b) == 0.0
    pred, gt = masks_from_sets((4, 4), {0, 1}, {1, 2})
    assert dice(pred, gt) == 0.5
    assert iou(pred, gt) == pytest.approx(1 / 3, abs=1e-15)


def test_both_empty_convention():
    z = np.zeros((3, 3), bool)
    assert dice(z, z) == 1.0 and iou(z, z) == 1.0


def test_dimension_mismatch():
    with pytest.raises(InvalidInput):
        dice(np.zeros((2, 2)), np.zeros((2, 3)))
    with pytest.raises(InvalidInput):
        iou(np.zeros((2, 2)), np.zeros((3, 2)))


mask_pair = st.tuples(
    arrays(bool, (6, 5)),
    arrays(bool, (6, 5)),
)


@settings(max_examples=300)
@given(mask_pair)
def test_metric_properties(pair):
    p, g = pair
    d, i = dice(p, g), iou(p, g)
    assert d == dice(g, p) and i == iou(g, p)
    assert 0.0 <= i <= d <= 1.0
    assert d == pytest.approx(2 * i / (1 + i), abs=1e-12)
    c = cosas_score(d, i)
    assert min(d, i) <= c <= max(d, i)


def test_cosas_reference_arithmetic():
    assert cosas_score(Decimal("0.887"), Decimal("0.805")) == Decimal("0.846")
    assert cosas_score(0.887, 0.805) == pytest.approx(0.846, abs=2e-16)
    assert cosas_score(1, 1) == 1
    assert cosas_score(0.5, 0.25) == 0.375


def test_threshold_logits():
    assert not threshold_logits(np.full((3, 3), -1.0)).any()
    assert threshold_logits(np.full((3, 3), 1.0)).all()
    z = np.random.default_rng(0).normal(size=(8, 8))
    out = threshold_logits(z, 0.3)
    for idx, v in np.ndenumerate(z):
        assert out[idx] == (v > 0.3)
    assert not threshold_logits(np.zeros((1, 1))).any()
    with pytest.raises(InvalidInput):
        threshold_logits(np.array([[np.nan]]))


def test_tta_constant_predictor():
    img = np.zeros((5, 7, 3))
    out = tta_predict(lambda x: np.full(x.shape[:2], 0.37), img)
    assert np.array_equal(out, np.full((5, 7), 0.37))


def test_tta_equivariant_predictor_exact():
    rng = np.random.default_rng(1)
    img = rng.normal(size=(6, 9, 3))

    def pred(x):
        return x[..., 0] * 1.7 - x[..., 2]

    assert np.array_equal(tta_predict(pred, img), pred(img))


def test_tta_corner_marker():
    def marker(x):
        out = np.zeros(x.shape[:2])
        out[0, 0] = 8.0
        return out

    out = tta_predict(marker, np.zeros((4, 6, 3)))
    expected = np.zeros((4, 6))
    # rotation k puts the top-left of the rotated frame at these source corners
    for corner in [(0, 5), (3, 5), (3, 0), (0, 0)]:
        expected[corner] = 2.0
    assert np.array_equal(out, expected)


def test_tta_rotation_invariance():
    rng = np.random.default_rng(2)
    img = rng.normal(size=(5, 5, 3))
    weights = rng.normal(size=(5, 5))

    def pred(x):
        return x[..., 0] * weights  # not equivariant

    base = tta_predict(pred, img)
    for k in range(1, 4):
        out = np.rot90(tta_predict(pred, np.rot90(img, k)), -k)
        assert np.allclose(out, base, atol=1e-12, rtol=0)


def test_tta_probability_space():
    img = np.zeros((3, 3, 3))
    out = tta_predict(lambda x: np.full(x.shape[:2], 1.5), img, space="probability")
    assert out == pytest.approx(np.full((3, 3), 1.5), abs=1e-12)


def test_tta_shape_mismatch():
    with pytest.raises(InvalidInput):
        tta_predict(lambda x: np.zeros((2, 2)), np.zeros((3, 4, 3)))


def test_evaluate_single_identical():
    m = np.eye(4, dtype=bool)
    rep = evaluate_dataset([("a", m, m)])
    for metric in ("dice", "iou", "cosas"):
        assert rep.aggregate[metric]["mean"] == 1.0
        assert rep.aggregate[metric]["std"] == 0.0


def test_evaluate_two_pairs_mean_std():
    a = np.eye(3, dtype=bool)
    rep = evaluate_dataset([("x", a, a), ("y", a, ~a)])
    assert rep.aggregate["dice"]["mean"] == 0.5
    assert rep.aggregate["dice"]["std"] == 0.5


def test_evaluate_random_set_recompute():
    rng = np.random.default_rng(3)
    pairs = [(f"p{i}", rng.random((8, 8)) > 0.5, rng.random((8, 8)) > 0.4, {"scanner": f"s{i % 3}"}) for i in range(10)]
    rep = evaluate_dataset(pairs)
    for metric in ("dice", "iou", "cosas"):
        vals = [row[metric] for row in rep.rows]
        m = sum(vals) / len(vals)
        sd = (sum((v - m) ** 2 for v in vals) / len(vals)) ** 0.5
        assert rep.aggregate[metric]["mean"] == pytest.approx(m, abs=1e-12)
        assert rep.aggregate[metric]["std"] == pytest.approx(sd, abs=1e-12)
    s0 = [row["dice"] for row in rep.rows if row["groups"]["scanner"] == "s0"]
    assert rep.groups["scanner"]["s0"]["dice"]["mean"] == pytest.approx(np.mean(s0), abs=1e-12)
    assert rep.groups["scanner"]["s0"]["dice"]["n"] == 4


def test_evaluate_error_rows():
    a = np.eye(3, dtype=bool)
    rep = evaluate_dataset([("ok", a, a), ("bad", a, np.zeros((2, 2), bool)), ("missing", None, None, {}, "unreadable")])
    assert [r["error"] is None for r in rep.rows] == [True, False, False]
    assert rep.rows[2]["error"] == "unreadable"
    assert rep.aggregate["dice"]["n"] == 1


def test_evaluate_empty():
    with pytest.raises(InvalidInput):
        evaluate_dataset([])


def test_report_files(tmp_path):
    a = np.eye(3, dtype=bool)
    rep = evaluate_dataset([("x", a, a, {"scanner": "s1"}), ("y", a, ~a, {"scanner": "s2"})])
    rep.to_json(tmp_path / "r.json")
    rep.to_csv(tmp_path / "r.csv")
    data = json.loads((tmp_path / "r.json").read_text())
    assert data["aggregate"]["cosas"]["mean"] == 0.5
    rows = list(csv.DictReader(open(tmp_path / "r.csv")))
    assert [r["id"] for r in rows] == ["x", "y", "__mean__", "__std__"]
    assert float(rows[2]["dice"]) == 0.5
    assert rows[0]["scanner"] == "s1"
