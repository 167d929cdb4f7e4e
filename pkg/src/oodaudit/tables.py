"""Markdown table rendering and paired-report comparison.

The benchmark layout pivots metric rows into method-by-setting blocks of five
co-primary metrics; best values per column are bolded and the unique
runner-up underlined, with descending-is-better columns ranked ascending.
Rendering never rewrites numbers beyond display rounding; the CSV/JSON
exports stay the data interface.
"""

from __future__ import annotations

from dataclasses import dataclass

from oodaudit.metrics import MetricRow
from oodaudit.taxonomy import GROUP_NAMES, TaxonomyReport


class RenderError(Exception):
    pass


METRIC_DIRECTIONS = {
    "acc": "up",
    "near_auroc": "up",
    "near_fpr95": "down",
    "far_auroc": "up",
    "far_fpr95": "down",
    "ece": "down",
    "nll": "down",
}

BENCHMARK_METRICS = (
    ("acc", "Accuracy (up)"),
    ("near_auroc", "Near AUROC (up)"),
    ("near_fpr95", "Near FPR95 (down)"),
    ("far_auroc", "Far AUROC (up)"),
    ("far_fpr95", "Far FPR95 (down)"),
)


def _mark_cells(values: dict[str, float | None], direction: str) -> dict[str, str]:
    """Map method -> marker ("best" | "runner_up" | "") for one column."""
    present = {m: v for m, v in values.items() if v is not None}
    out = {m: "" for m in values}
    if not present:
        return out
    distinct = sorted(set(present.values()), reverse=(direction == "up"))
    best = distinct[0]
    for m, v in present.items():
        if v == best:
            out[m] = "best"
    if len(distinct) > 1:
        runner = distinct[1]
        holders = [m for m, v in present.items() if v == runner]
        if len(holders) == 1:
            out[holders[0]] = "runner_up"
    return out


def _fmt(v: float | None, marker: str = "") -> str:
    if v is None:
        return "---"
    text = f"{v:.1f}"
    if marker == "best":
        return f"**{text}**"
    if marker == "runner_up":
        return f"<u>{text}</u>"
    return text


def render_benchmark(rows: list[MetricRow]) -> str:
    """Method-by-setting grid with the five co-primary metric lines per method."""
    if not rows:
        raise RenderError("no rows to render")
    score_names = {r.score_name for r in rows}
    if len(score_names) > 1:
        raise RenderError(f"mixed score families in one table: {sorted(score_names)}")
    key_counts = {}
    for r in rows:
        key = (r.method, r.dataset, r.noise)
        key_counts[key] = key_counts.get(key, 0) + 1
        if key_counts[key] > 1:
            raise RenderError(f"duplicate row for {key}")

    settings = sorted({(r.dataset, r.noise) for r in rows})
    methods = sorted({r.method for r in rows})
    by_key = {(r.method, r.dataset, r.noise): r for r in rows}

    # markers per (setting, metric) across methods
    markers: dict[tuple, dict[str, str]] = {}
    for setting in settings:
        for field, _ in BENCHMARK_METRICS:
            col = {}
            for m in methods:
                row = by_key.get((m, *setting))
                col[m] = getattr(row, field) if row is not None else None
            markers[(setting, field)] = _mark_cells(col, METRIC_DIRECTIONS[field])

    header = "| Method | Metric | " + " | ".join(f"{d} {n}" for d, n in settings) + " |"
    rule = "|" + "---|" * (2 + len(settings))
    lines = [header, rule]
    for m in methods:
        for i, (field, label) in enumerate(BENCHMARK_METRICS):
            cells = []
            for setting in settings:
                row = by_key.get((m, *setting))
                val = getattr(row, field) if row is not None else None
                cells.append(_fmt(val, markers[(setting, field)].get(m, "")))
            name = f"**{m}**" if i == 0 else ""
            lines.append(f"| {name} | {label} | " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class PairedDeltaRow:
    """One baseline-vs-repair line: headline metric plus the closed-set delta."""

    setting: str
    baseline: float
    repaired: float
    id_delta: float | None = None

    @property
    def delta(self) -> float:
        return self.repaired - self.baseline


def render_paired(rows: list[PairedDeltaRow], metric_label: str = "far-OOD AUROC") -> str:
    """BL / repaired / delta / ID-delta grid with signed deltas."""
    if not rows:
        raise RenderError("no rows to render")
    lines = [
        f"| Setting | BL | VMR | Delta ({metric_label}) | ID Delta |",
        "|---|---|---|---|---|",
    ]
    for r in rows:
        bl, vm = f"{r.baseline:.1f}", f"{r.repaired:.1f}"
        if r.repaired > r.baseline:
            vm = f"**{vm}**"
        elif r.baseline > r.repaired:
            bl = f"**{bl}**"
        idd = "---" if r.id_delta is None else f"{r.id_delta:+.1f}"
        lines.append(f"| {r.setting} | {bl} | {vm} | {r.delta:+.1f} | {idd} |")
    return "\n".join(lines) + "\n"


GROUP_LABELS = {
    "id_correct_high": "ID-correct high-conf",
    "id_correct_low": "ID-correct low-conf",
    "id_wrong_high": "ID-wrong high-conf",
    "id_wrong_low": "ID-wrong low-conf",
}


def render_taxonomy(reports: list[tuple[str, TaxonomyReport]]) -> str:
    """Group-by-regime grid of AU / mass-percent column pairs; flagged cells bold."""
    if not reports:
        raise RenderError("no reports to render")
    header = "| Group | " + " | ".join(f"{label} AU | {label} m%" for label, _ in reports) + " |"
    rule = "|" + "---|" * (1 + 2 * len(reports))
    lines = [header, rule]
    for g in GROUP_NAMES:
        cells = []
        for _, rep in reports:
            au = rep.subgroup_auroc[g]
            au_txt = "---" if au is None else f"{au:.1f}"
            if rep.collapse_flags[g]:
                au_txt = f"**{au_txt}**"
            cells.append(au_txt)
            cells.append(f"{rep.masses[g]:.1f}")
        lines.append(f"| {GROUP_LABELS[g]} | " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def render_table(rows, layout: str) -> str:
    """Dispatch on layout: benchmark (MetricRow), paired (PairedDeltaRow), taxonomy."""
    if layout == "benchmark":
        if not all(isinstance(r, MetricRow) for r in rows):
            raise RenderError("benchmark layout expects MetricRow items")
        return render_benchmark(list(rows))
    if layout == "paired":
        if not all(isinstance(r, PairedDeltaRow) for r in rows):
            raise RenderError("paired layout expects PairedDeltaRow items")
        return render_paired(list(rows))
    if layout == "taxonomy":
        return render_taxonomy(list(rows))
    raise RenderError(f"unknown layout {layout!r}")


def compare_rows(rows_a: list[MetricRow], rows_b: list[MetricRow]) -> list[dict]:
    """Per-metric deltas (b - a) with improve/degrade direction metadata.

    Rows are paired on (dataset, noise, score); the method tag is treated as
    an arm label (baseline vs repaired runs legitimately differ in it). When
    either report carries several methods for one setting, pairing falls back
    to the full key including method.
    """
    setting_key = lambda r: (r.dataset, r.noise, r.score_name)
    full_key = lambda r: (r.method, r.dataset, r.noise, r.score_name)
    ambiguous = len({setting_key(r) for r in rows_a}) < len(rows_a) or len(
        {setting_key(r) for r in rows_b}
    ) < len(rows_b)
    key = full_key if ambiguous else setting_key
    a_map = {key(r): r for r in rows_a}
    b_map = {key(r): r for r in rows_b}
    if set(a_map) != set(b_map):
        raise RenderError("schema mismatch: row keys differ between reports")
    out = []
    for k in sorted(a_map):
        ra, rb = a_map[k], b_map[k]
        deltas = {}
        for field, direction in METRIC_DIRECTIONS.items():
            va, vb = getattr(ra, field), getattr(rb, field)
            if va is None or vb is None:
                deltas[field] = None
                continue
            d = vb - va
            if d == 0:
                verdict = "equal"
            elif (d > 0) == (direction == "up"):
                verdict = "improve"
            else:
                verdict = "degrade"
            deltas[field] = {"a": va, "b": vb, "delta": d, "verdict": verdict}
        out.append(
            {
                "method_a": ra.method,
                "method_b": rb.method,
                "dataset": ra.dataset,
                "noise": ra.noise,
                "score": ra.score_name,
                "metrics": deltas,
            }
        )
    return out
