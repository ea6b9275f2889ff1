"""Segmentation metrics (Dice, IoU, COSAS), logit thresholding, four-way
rotation test-time augmentation and dataset-level reporting."""

import csv
import json
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, logit

from ._validation import check_mask, check_same_shape
from .exceptions import InvalidInput

METRICS = ("dice", "iou", "cosas")


def _counts(pred, gt):
    pred = check_mask(pred, "pred")
    gt = check_mask(gt, "gt")
    check_same_shape(pred, gt)
    inter = int(np.count_nonzero(pred & gt))
    return inter, int(np.count_nonzero(pred)), int(np.count_nonzero(gt))


def dice(pred, gt):
    """``2|P & G| / (|P| + |G|)``; two empty masks score 1."""
    inter, p, g = _counts(pred, gt)
    if p + g == 0:
        return 1.0
    return 2.0 * inter / (p + g)


def iou(pred, gt):
    """``|P & G| / |P | G|``; two empty masks score 1."""
    inter, p, g = _counts(pred, gt)
    union = p + g - inter
    if union == 0:
        return 1.0
    return inter / union


def cosas_score(dice_score, iou_score):
    """Arithmetic mean of Dice and IoU.

    Works with any numeric type, so Decimal inputs give an exact decimal mean.
    """
    return (dice_score + iou_score) / 2


def threshold_logits(logits, tau=0.0):
    """Binary mask of pixels with ``logit > tau`` (tau 0 is probability 0.5)."""
    logits = np.asarray(logits, dtype=float)
    if not np.all(np.isfinite(logits)):
        raise InvalidInput("logits must be finite")
    return logits > tau


def tta_predict(predict, img, space="logit"):
    """Average ``predict`` over the four 90-degree rotations of ``img``.

    Each prediction is rotated back before averaging. ``space="probability"``
    averages sigmoid outputs and returns the logit of that mean. The sum is
    taken pairwise, so four identical maps average to exactly that map.
    """
    if space not in ("logit", "probability"):
        raise InvalidInput(f"unknown averaging space {space!r}")
    img = np.asarray(img)
    maps = []
    for k in (1, 2, 3, 4):
        rotated = np.rot90(img, k)
        out = np.asarray(predict(rotated), dtype=float)
        if out.shape != rotated.shape[:2]:
            raise InvalidInput(
                f"predictor returned shape {out.shape} for input of shape {rotated.shape[:2]}"
            )
        back = np.rot90(out, -k)
        maps.append(expit(back) if space == "probability" else back)
    mean = ((maps[0] + maps[1]) + (maps[2] + maps[3])) / 4.0
    return logit(mean) if space == "probability" else mean


@dataclass
class MetricsReport:
    """Per-image rows plus unweighted mean / population std aggregates.

    ``groups`` maps a group column (e.g. "scanner") to
    ``{label: {metric: {"mean", "std", "n"}}}``.
    """

    rows: list
    aggregate: dict
    groups: dict = field(default_factory=dict)

    def to_dict(self):
        return {"rows": self.rows, "aggregate": self.aggregate, "groups": self.groups}

    def to_json(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2)
            fh.write("\n")

    def to_csv(self, path):
        group_cols = sorted({k for row in self.rows for k in row.get("groups", {})})
        header = ["id", *METRICS, "both_empty", "error", *group_cols]
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            for row in self.rows:
                writer.writerow(
                    [row["id"]]
                    + [_fmt(row.get(m)) for m in METRICS]
                    + [int(bool(row.get("both_empty"))), row.get("error") or ""]
                    + [row.get("groups", {}).get(g, "") for g in group_cols]
                )
            for stat in ("mean", "std"):
                agg = [self.aggregate[m][stat] if self.aggregate else None for m in METRICS]
                writer.writerow(
                    [f"__{stat}__"] + [_fmt(v) for v in agg] + ["", ""] + [""] * len(group_cols)
                )


def _fmt(v):
    return "" if v is None else repr(float(v))


def _summarise(rows):
    if not rows:
        return {}
    out = {}
    for m in METRICS:
        vals = np.array([row[m] for row in rows], dtype=float)
        out[m] = {"mean": float(vals.mean()), "std": float(vals.std()), "n": int(vals.size)}
    return out


def score_pair(pred, gt):
    d = dice(pred, gt)
    i = iou(pred, gt)
    both_empty = not np.any(pred) and not np.any(gt)
    return {"dice": d, "iou": i, "cosas": cosas_score(d, i), "both_empty": bool(both_empty)}


def evaluate_dataset(pairs):
    """Score ``(id, pred, gt[, groups[, error]])`` tuples into a :class:`MetricsReport`.

    Pairs whose masks differ in shape, or that carry ``None`` masks (with an
    optional error message as fifth element), become error rows and are left
    out of every aggregate. ``groups`` is an optional mapping such as
    ``{"scanner": "s1", "fold": 0}``.
    """
    pairs = list(pairs)
    if not pairs:
        raise InvalidInput("nothing to evaluate")
    rows = []
    for item in pairs:
        id_, pred, gt = item[:3]
        groups = dict(item[3]) if len(item) > 3 and item[3] else {}
        row = {"id": str(id_), "groups": {k: str(v) for k, v in groups.items()}}
        try:
            if pred is None or gt is None:
                raise InvalidInput(item[4] if len(item) > 4 and item[4] else "missing mask")
            row.update(score_pair(np.asarray(pred, bool), np.asarray(gt, bool)))
            row["error"] = None
        except InvalidInput as exc:
            row.update({m: None for m in METRICS})
            row["both_empty"] = False
            row["error"] = str(exc)
        rows.append(row)

    scored = [row for row in rows if row["error"] is None]
    report_groups = {}
    for key in sorted({k for row in scored for k in row["groups"]}):
        labels = sorted({row["groups"][key] for row in scored if key in row["groups"]})
        report_groups[key] = {
            label: _summarise([row for row in scored if row["groups"].get(key) == label])
            for label in labels
        }
    return MetricsReport(rows, _summarise(scored), report_groups)
