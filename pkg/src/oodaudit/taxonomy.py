"""Uncertainty-collapse diagnostics.

ID test samples are stratified by correctness and by a global MSP-median
confidence split into four groups; the pooled OOD set is the fifth
population. Each ID group is then scored against pooled OOD with the same
oriented score the detector uses, exposing the low-confidence ID-wrong
stratum whose scores overlap the OOD band.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from oodaudit.dump import EvalDump
from oodaudit.metrics import _auroc_values
from oodaudit.scores import ScoreVector, energy, msp, orient_ood_larger

GROUP_NAMES = ("id_correct_high", "id_correct_low", "id_wrong_high", "id_wrong_low")

DEFAULT_COLLAPSE_THRESHOLD = 0.6
DEFAULT_MASS_GATE_PCT = 1.0


class TaxonomyError(Exception):
    pass


def id_wrong_set(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Indices of clean-labeled test samples the frozen classifier misclassifies."""
    if labels is None:
        raise TaxonomyError("id_wrong_set requires labels")
    preds = np.argmax(np.asarray(logits, dtype=np.float64), axis=1)
    return np.flatnonzero(preds != np.asarray(labels))


@dataclass(frozen=True)
class GroupAssignment:
    """Per-sample group labels plus the confidence threshold(s) used."""

    group: np.ndarray  # (n,) strings from GROUP_NAMES
    msp_median: float
    split_thresholds: dict = field(default_factory=dict)  # per-subset medians when enabled

    def mask(self, name: str) -> np.ndarray:
        return self.group == name

    def masses_pct(self) -> dict[str, float]:
        n = len(self.group)
        return {g: float(100.0 * np.sum(self.group == g) / n) for g in GROUP_NAMES}


def five_group_split(
    msp_scores: ScoreVector, wrong: np.ndarray, per_group_median: bool = False
) -> GroupAssignment:
    """Assign each ID sample to a correctness x confidence stratum.

    High-confidence means MSP strictly above the global median; ties at the
    median fall to the low-confidence side. per_group_median=True splits the
    correct and wrong subsets at their own medians (sensitivity mode).
    """
    conf = msp_scores.values
    n = len(conf)
    if n == 0:
        raise TaxonomyError("empty ID set")
    wrong_mask = np.zeros(n, dtype=bool)
    wrong_mask[np.asarray(wrong, dtype=int)] = True

    median = float(np.median(conf))
    thresholds = {}
    if per_group_median:
        thr_correct = float(np.median(conf[~wrong_mask])) if (~wrong_mask).any() else median
        thr_wrong = float(np.median(conf[wrong_mask])) if wrong_mask.any() else median
        thresholds = {"correct": thr_correct, "wrong": thr_wrong}
        high = np.where(wrong_mask, conf > thr_wrong, conf > thr_correct)
    else:
        high = conf > median

    group = np.empty(n, dtype="<U16")
    group[~wrong_mask & high] = "id_correct_high"
    group[~wrong_mask & ~high] = "id_correct_low"
    group[wrong_mask & high] = "id_wrong_high"
    group[wrong_mask & ~high] = "id_wrong_low"
    return GroupAssignment(group, median, thresholds)


@dataclass(frozen=True)
class TaxonomyReport:
    score_name: str
    msp_median: float
    n_id: int
    n_ood: int
    masses: dict[str, float]  # percent of ID test per group
    subgroup_auroc: dict[str, float | None]
    id_wrong_vs_ood_auroc: float | None
    collapse_flags: dict[str, bool]

    def wrong_mass_pct(self) -> float:
        return self.masses["id_wrong_high"] + self.masses["id_wrong_low"]

    def to_json_obj(self) -> dict:
        return {
            "score_name": self.score_name,
            "median": self.msp_median,
            "n_id": self.n_id,
            "n_ood": self.n_ood,
            "groups": [
                {
                    "name": g,
                    "mass_pct": self.masses[g],
                    "auroc": self.subgroup_auroc[g],
                    "flagged": self.collapse_flags[g],
                }
                for g in GROUP_NAMES
            ],
            "id_wrong_vs_ood_auroc": self.id_wrong_vs_ood_auroc,
        }


def collapse_flags(
    report: TaxonomyReport,
    threshold: float = DEFAULT_COLLAPSE_THRESHOLD,
    mass_gate_pct: float = DEFAULT_MASS_GATE_PCT,
) -> dict[str, bool]:
    """Flag groups whose vs-OOD AUROC collapsed below threshold at non-trivial mass."""
    out = {}
    for g in GROUP_NAMES:
        au = report.subgroup_auroc.get(g)
        out[g] = au is not None and au < threshold and report.masses[g] > mass_gate_pct
    return out


def _flags_from_parts(masses, aurocs, threshold, mass_gate_pct):
    return {
        g: (aurocs[g] is not None and aurocs[g] < threshold and masses[g] > mass_gate_pct)
        for g in GROUP_NAMES
    }


def taxonomy_report(
    id_dump: EvalDump,
    ood_dumps: list[EvalDump],
    scorer: Callable[[EvalDump], ScoreVector] | None = None,
    *,
    include_correct_high_auroc: bool = False,
    collapse_threshold: float = DEFAULT_COLLAPSE_THRESHOLD,
    mass_gate_pct: float = DEFAULT_MASS_GATE_PCT,
    per_group_median: bool = False,
) -> TaxonomyReport:
    """Five-group masses and per-group vs-pooled-OOD AUROC.

    OOD dumps are pooled by plain concatenation. AUROC uses the group as
    negatives and pooled OOD as positives. The ID-correct high-confidence
    AUROC is skipped by default (it is not part of the collapse diagnostic);
    empty groups get auroc None rather than an error.
    """
    if id_dump.labels is None:
        raise TaxonomyError("taxonomy requires a labeled id_test dump")
    if not ood_dumps:
        raise TaxonomyError("taxonomy requires at least one OOD dump")
    if scorer is None:
        scorer = lambda d: energy(d.logits)

    id_sv = orient_ood_larger(scorer(id_dump))
    ood_vals = np.concatenate([orient_ood_larger(scorer(d)).values for d in ood_dumps])
    if len(id_sv) != id_dump.n_samples:
        raise TaxonomyError("scorer returned wrong-length score vector")

    wrong = id_wrong_set(id_dump.logits, id_dump.labels)
    assignment = five_group_split(msp(id_dump.logits), wrong, per_group_median=per_group_median)
    masses = assignment.masses_pct()

    aurocs: dict[str, float | None] = {}
    for g in GROUP_NAMES:
        if g == "id_correct_high" and not include_correct_high_auroc:
            aurocs[g] = None
            continue
        mask = assignment.mask(g)
        aurocs[g] = (
            _auroc_values(id_sv.values[mask], ood_vals) if mask.any() and len(ood_vals) else None
        )

    wrong_vals = id_sv.values[wrong]
    wrong_auroc = (
        _auroc_values(wrong_vals, ood_vals) if len(wrong_vals) and len(ood_vals) else None
    )

    flags = _flags_from_parts(masses, aurocs, collapse_threshold, mass_gate_pct)
    return TaxonomyReport(
        score_name=id_sv.score_name,
        msp_median=assignment.msp_median,
        n_id=id_dump.n_samples,
        n_ood=int(len(ood_vals)),
        masses=masses,
        subgroup_auroc=aurocs,
        id_wrong_vs_ood_auroc=wrong_auroc,
        collapse_flags=flags,
    )


@dataclass(frozen=True)
class CleanNoiseDelta:
    """Paired clean-vs-noisy movement of the ID-wrong/OOD interface."""

    delta_wrong_auroc: float
    delta_wrong_mass_pct: float
    verdict: str  # "collapse-worsened" | "improved" | "unchanged"


def clean_vs_noise_delta(
    report_clean: TaxonomyReport, report_noisy: TaxonomyReport, point: float = 0.01
) -> CleanNoiseDelta:
    """Compare the same diagnostic across clean- and noise-trained checkpoints.

    Verdict is on the ID-wrong-vs-OOD AUROC with a +/- one point (0.01) dead
    band. Reports must come from the same score family.
    """
    if report_clean.score_name != report_noisy.score_name:
        raise TaxonomyError(
            f"score-family mismatch: {report_clean.score_name} vs {report_noisy.score_name}"
        )
    if report_clean.id_wrong_vs_ood_auroc is None or report_noisy.id_wrong_vs_ood_auroc is None:
        raise TaxonomyError("both reports need a nonempty ID-wrong set")
    d_au = report_noisy.id_wrong_vs_ood_auroc - report_clean.id_wrong_vs_ood_auroc
    d_mass = report_noisy.wrong_mass_pct() - report_clean.wrong_mass_pct()
    if d_au < -point:
        verdict = "collapse-worsened"
    elif d_au > point:
        verdict = "improved"
    else:
        verdict = "unchanged"
    return CleanNoiseDelta(float(d_au), float(d_mass), verdict)


def wrong_low_share(reports: list[TaxonomyReport], mode: str = "mass") -> float:
    """Fraction of ID-wrong mass carried by the low-confidence stratum, pooled.

    mode="mass" pools by sample counts across reports; mode="mean" averages
    the per-report fractions (the two readings of a pooled aggregate).
    """
    if not reports:
        raise TaxonomyError("no reports")
    if mode == "mass":
        low = sum(r.n_id * r.masses["id_wrong_low"] for r in reports)
        total = sum(r.n_id * r.wrong_mass_pct() for r in reports)
        if total == 0:
            raise TaxonomyError("no ID-wrong mass")
        return float(low / total)
    if mode == "mean":
        fracs = [
            r.masses["id_wrong_low"] / r.wrong_mass_pct()
            for r in reports
            if r.wrong_mass_pct() > 0
        ]
        if not fracs:
            raise TaxonomyError("no ID-wrong mass")
        return float(np.mean(fracs))
    raise TaxonomyError(f"unknown pooling mode {mode!r}")
