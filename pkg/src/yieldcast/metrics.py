"""Forecast evaluation metrics and grouped reports.

RMSE and MBE are in kg/ha, RRMSE is a fraction of the mean actual yield, and
MDA is the fraction of aligned locations whose predicted change direction
matches the actual change direction across consecutive years.
"""

import csv
import json
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .dataset import RowKey

GROUPINGS = ("overall", "year", "region", "state")


@dataclass
class MetricsReport:
    group: str
    n: int
    rmse: float
    rrmse: float
    mbe: float
    mda: Optional[float] = None


def _check_pair(y, yhat):
    y = np.asarray(y, dtype=np.float64)
    yhat = np.asarray(yhat, dtype=np.float64)
    if y.shape != yhat.shape or y.ndim != 1:
        raise ValueError(f"length mismatch: {y.shape} vs {yhat.shape}")
    if y.size == 0:
        raise ValueError("empty vectors")
    return y, yhat


def rmse(y, yhat) -> float:
    y, yhat = _check_pair(y, yhat)
    d = y - yhat
    return float(np.sqrt(np.mean(d * d)))


def rrmse(y, yhat) -> float:
    y, yhat = _check_pair(y, yhat)
    mean = float(np.mean(y))
    if mean == 0.0:
        raise ValueError("rrmse undefined: mean of actual values is zero")
    return rmse(y, yhat) / mean


def mbe(y, yhat) -> float:
    """Mean bias error; positive means the model overestimates."""
    y, yhat = _check_pair(y, yhat)
    return float(np.mean(yhat - y))


def mda(prev_truth, curr_truth, prev_pred, curr_pred, anchor_prev_truth: bool = False) -> float:
    """Fraction of locations whose change direction is predicted correctly.

    All four vectors are aligned by location for two consecutive years.
    sign(0) counts as its own direction and must match exactly. With
    anchor_prev_truth the predicted change is measured from the previous
    actual value instead of the previous prediction.
    """
    prev_truth, curr_truth = _check_pair(prev_truth, curr_truth)
    prev_pred, curr_pred = _check_pair(prev_pred, curr_pred)
    if prev_truth.shape != prev_pred.shape:
        raise ValueError("truth and prediction vectors must align")
    actual = np.sign(curr_truth - prev_truth)
    base = prev_truth if anchor_prev_truth else prev_pred
    predicted = np.sign(curr_pred - base)
    return float(np.mean(actual == predicted))


def _mda_over_pairs(
    rows: Sequence[RowKey], truth: np.ndarray, pred: np.ndarray, anchor_prev_truth: bool
) -> Optional[float]:
    """Pool every (location, consecutive-year) pair present in the rows."""
    by_loc_year: Dict[Tuple[str, int], int] = {}
    for i, key in enumerate(rows):
        by_loc_year[(key.location_id, key.year)] = i
    prev_idx, curr_idx = [], []
    for (loc, year), i in sorted(by_loc_year.items()):
        j = by_loc_year.get((loc, year + 1))
        if j is not None:
            prev_idx.append(i)
            curr_idx.append(j)
    if not prev_idx:
        return None
    return mda(
        truth[prev_idx], truth[curr_idx], pred[prev_idx], pred[curr_idx], anchor_prev_truth
    )


def report(
    rows: Sequence[RowKey],
    truth,
    pred,
    grouping: str = "overall",
    anchor_prev_truth: bool = False,
) -> List[MetricsReport]:
    """One MetricsReport per group; MDA only where consecutive years align.

    Groupings: overall (single report, MDA pooled over all adjacent-year
    pairs), year (one report per year, MDA vs the preceding year), region /
    state (one report per region or state, MDA pooled within the group).
    """
    if grouping not in GROUPINGS:
        raise ValueError(f"grouping must be one of {GROUPINGS}, got '{grouping}'")
    truth = np.asarray(truth, dtype=np.float64)
    pred = np.asarray(pred, dtype=np.float64)
    if not (len(rows) == truth.shape[0] == pred.shape[0]):
        raise ValueError("rows, truth, and pred must align")
    if len(rows) == 0:
        raise ValueError("empty input")

    if grouping == "overall":
        groups = {"overall": list(range(len(rows)))}
    else:
        groups = {}
        for i, key in enumerate(rows):
            if grouping == "year":
                gid = str(key.year)
            elif grouping == "region":
                gid = key.region_id
            else:
                gid = key.state_id
            groups.setdefault(gid, []).append(i)

    out: List[MetricsReport] = []
    for gid in sorted(groups):
        idx = groups[gid]
        gt, gp = truth[idx], pred[idx]
        if grouping == "year":
            year = int(gid)
            prev = [i for i, k in enumerate(rows) if k.year == year - 1]
            pair_rows = [rows[i] for i in prev + idx]
            pair_idx = prev + idx
            value = _mda_over_pairs(pair_rows, truth[pair_idx], pred[pair_idx], anchor_prev_truth)
        else:
            value = _mda_over_pairs([rows[i] for i in idx], gt, gp, anchor_prev_truth)
        out.append(
            MetricsReport(
                group=gid,
                n=len(idx),
                rmse=rmse(gt, gp),
                rrmse=rrmse(gt, gp),
                mbe=mbe(gt, gp),
                mda=value,
            )
        )
    return out


def write_report_csv(reports: List[MetricsReport], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["group", "n", "rmse", "rrmse", "mbe", "mda"])
        for r in reports:
            writer.writerow(
                [
                    r.group,
                    r.n,
                    repr(r.rmse),
                    repr(r.rrmse),
                    repr(r.mbe),
                    "" if r.mda is None else repr(r.mda),
                ]
            )


def read_report_csv(path) -> List[MetricsReport]:
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        for rec in csv.DictReader(fh):
            out.append(
                MetricsReport(
                    group=rec["group"],
                    n=int(rec["n"]),
                    rmse=float(rec["rmse"]),
                    rrmse=float(rec["rrmse"]),
                    mbe=float(rec["mbe"]),
                    mda=float(rec["mda"]) if rec["mda"] != "" else None,
                )
            )
    return out


def write_report_json(reports: List[MetricsReport], path) -> None:
    doc = {
        "format_version": 1,
        "reports": [
            {"group": r.group, "n": r.n, "rmse": r.rmse, "rrmse": r.rrmse, "mbe": r.mbe, "mda": r.mda}
            for r in reports
        ],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, allow_nan=False, indent=1)
        fh.write("\n")
