"""Rank-based detection metrics and calibration diagnostics.

AUROC and FPR95 treat OOD as the positive class and require score vectors
already oriented OOD-larger; passing an id_larger vector is an error rather
than a silent flip, so orientation stays an explicit step in every pipeline.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from oodaudit._num import logsumexp, softmax
from oodaudit.scores import ScoreVector


class MetricError(Exception):
    """Metric precondition failure."""


def _oriented_values(sv: ScoreVector, side: str) -> np.ndarray:
    if not isinstance(sv, ScoreVector):
        raise MetricError(f"{side} scores must be a ScoreVector (got {type(sv).__name__})")
    if sv.direction != "ood_larger":
        raise MetricError(f"{side} scores not oriented ood_larger; call orient_ood_larger first")
    if len(sv) == 0:
        raise MetricError(f"empty {side} score set")
    return sv.values


def auroc(id_scores: ScoreVector, ood_scores: ScoreVector) -> float:
    """P(s_ood > s_id) + 0.5 P(s_ood = s_id) via midrank statistics.

    O((n+m) log(n+m)); ties handled exactly through average ranks.
    """
    id_vals = _oriented_values(id_scores, "id")
    ood_vals = _oriented_values(ood_scores, "ood")
    n, m = len(id_vals), len(ood_vals)
    ranks = rankdata(np.concatenate([id_vals, ood_vals]), method="average")
    u = ranks[n:].sum() - m * (m + 1) / 2.0
    return float(u / (n * m))


def _auroc_values(id_vals: np.ndarray, ood_vals: np.ndarray) -> float:
    """Midrank AUROC on raw oriented arrays (internal reuse)."""
    n, m = len(id_vals), len(ood_vals)
    ranks = rankdata(np.concatenate([id_vals, ood_vals]), method="average")
    return float((ranks[n:].sum() - m * (m + 1) / 2.0) / (n * m))


def fpr_at_95_tpr(
    id_scores: ScoreVector, ood_scores: ScoreVector, convention: str = "id_accept"
) -> float:
    """Fraction of OOD accepted at the operating point keeping 95% of ID.

    Default convention: threshold = 95th percentile of ID scores (linear
    interpolation); returns mean(ood <= threshold). convention="ood_recall"
    instead fixes 95% OOD recall and returns the fraction of ID above that
    threshold, for cross-paper comparison.
    """
    id_vals = _oriented_values(id_scores, "id")
    ood_vals = _oriented_values(ood_scores, "ood")
    if convention == "id_accept":
        if len(id_vals) < 20:
            raise MetricError("unstable percentile: need at least 20 ID samples")
        tau = np.percentile(id_vals, 95.0, method="linear")
        return float(np.mean(ood_vals <= tau))
    if convention == "ood_recall":
        if len(ood_vals) < 20:
            raise MetricError("unstable percentile: need at least 20 OOD samples")
        tau = np.percentile(ood_vals, 5.0, method="linear")
        return float(np.mean(id_vals > tau))
    raise MetricError(f"unknown fpr95 convention {convention!r}")


def accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    """Percent of argmax predictions matching labels; ties go to the lowest class."""
    if labels is None:
        raise MetricError("accuracy requires labels")
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(labels)
    preds = np.argmax(z, axis=1)
    return float(100.0 * np.mean(preds == y)) if len(y) else 0.0


def ece(logits: np.ndarray, labels: np.ndarray, n_bins: int = 15) -> float:
    """Expected calibration error on MSP confidence, equal-width bins on (0, 1]."""
    if labels is None:
        raise MetricError("ece requires labels")
    if n_bins < 1:
        raise MetricError("n_bins must be >= 1")
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(labels)
    conf = softmax(z).max(axis=1)
    correct = (np.argmax(z, axis=1) == y).astype(np.float64)
    edges = np.linspace(0.0, 1.0, n_bins + 1)
    idx = np.clip(np.digitize(conf, edges[1:], right=True), 0, n_bins - 1)
    total = 0.0
    n = len(y)
    for b in range(n_bins):
        mask = idx == b
        cnt = int(mask.sum())
        if cnt == 0:
            continue
        total += (cnt / n) * abs(correct[mask].mean() - conf[mask].mean())
    return float(total)


def nll(logits: np.ndarray, labels: np.ndarray) -> float:
    """Mean negative log softmax probability of the true class."""
    if labels is None:
        raise MetricError("nll requires labels")
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(labels)
    lse = logsumexp(z, axis=1)
    return float(np.mean(lse - z[np.arange(len(y)), y]))


def spearman(xs: np.ndarray, ys: np.ndarray) -> float:
    """Rank correlation with midranks for ties."""
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if xs.shape != ys.shape or xs.ndim != 1:
        raise MetricError("length mismatch")
    if len(xs) < 3:
        raise MetricError("spearman requires at least 3 pairs")
    rx = rankdata(xs, method="average")
    ry = rankdata(ys, method="average")
    if rx.std() == 0 or ry.std() == 0:
        raise MetricError("spearman undefined for constant input")
    return float(np.corrcoef(rx, ry)[0, 1])


# --- row schema ---------------------------------------------------------------

CSV_COLUMNS = (
    "method",
    "dataset",
    "noise",
    "score",
    "acc",
    "near_auroc",
    "near_fpr95",
    "far_auroc",
    "far_fpr95",
    "ece",
    "nll",
)


@dataclass(frozen=True)
class MetricRow:
    """One benchmark row; detection fields are percents, ece a fraction."""

    method: str
    dataset: str
    noise: str
    score_name: str
    acc: float | None = None
    near_auroc: float | None = None
    near_fpr95: float | None = None
    far_auroc: float | None = None
    far_fpr95: float | None = None
    ece: float | None = None
    nll: float | None = None

    def __post_init__(self):
        for f in ("acc", "near_auroc", "near_fpr95", "far_auroc", "far_fpr95"):
            v = getattr(self, f)
            if v is not None and not 0.0 <= v <= 100.0:
                raise MetricError(f"{f}={v} outside [0, 100]")
        if self.ece is not None and not 0.0 <= self.ece <= 1.0:
            raise MetricError(f"ece={self.ece} outside [0, 1]")

    def to_json_obj(self) -> dict:
        return {
            "method": self.method,
            "dataset": self.dataset,
            "noise": self.noise,
            "score": self.score_name,
            "acc": self.acc,
            "near_auroc": self.near_auroc,
            "near_fpr95": self.near_fpr95,
            "far_auroc": self.far_auroc,
            "far_fpr95": self.far_fpr95,
            "ece": self.ece,
            "nll": self.nll,
        }


def rows_to_csv(rows: list[MetricRow]) -> str:
    """Fixed-column-order CSV with full float precision (empty cell = missing)."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for row in rows:
        obj = row.to_json_obj()
        writer.writerow(["" if obj[c] is None else repr(obj[c]) if isinstance(obj[c], float) else obj[c]
                         for c in CSV_COLUMNS])
    return buf.getvalue()


def rows_from_csv(text: str) -> list[MetricRow]:
    reader = csv.DictReader(io.StringIO(text))
    out = []
    for rec in reader:
        def num(c):
            return None if rec[c] == "" else float(rec[c])

        out.append(
            MetricRow(
                method=rec["method"],
                dataset=rec["dataset"],
                noise=rec["noise"],
                score_name=rec["score"],
                acc=num("acc"),
                near_auroc=num("near_auroc"),
                near_fpr95=num("near_fpr95"),
                far_auroc=num("far_auroc"),
                far_fpr95=num("far_fpr95"),
                ece=num("ece"),
                nll=num("nll"),
            )
        )
    return out
