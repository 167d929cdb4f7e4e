"""Command-line orchestration.

Subcommands do one module's job each so pipelines stay scriptable:
validate, score, eval, taxonomy, geometry, vmr-demo, compare, render.

Exit codes: 0 success, 2 invalid plan/arguments, 3 data error,
4 partial (some scores skipped). All JSON outputs are byte-reproducible;
wall-clock metadata is isolated in run_meta.json.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from oodaudit import geometry as geo
from oodaudit import scores as sc
from oodaudit import tables
from oodaudit import taxonomy as tax
from oodaudit.dump import DumpError, load_dump, validate_dump
from oodaudit.metrics import (
    MetricError,
    MetricRow,
    accuracy,
    auroc,
    ece,
    fpr_at_95_tpr,
    nll,
    rows_from_csv,
    rows_to_csv,
)

EXIT_OK = 0
EXIT_INVALID_PLAN = 2
EXIT_DATA_ERROR = 3
EXIT_PARTIAL = 4

OUTPUT_ROOT_ENV = "OODAUDIT_OUT"


class PlanError(Exception):
    pass


def _dump_json(obj, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _output_dir(explicit: str | None) -> Path:
    if explicit:
        return Path(explicit)
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "oodaudit_out"))


# --- plan ---------------------------------------------------------------------


@dataclasses.dataclass
class RunPlan:
    id_test: str
    fit: str | None
    near_ood: list[str]
    far_ood: list[str]
    scores: list[str]
    output_dir: str | None
    options: dict

    @classmethod
    def load(cls, path: str | None, args: argparse.Namespace) -> "RunPlan":
        raw = {}
        if path:
            p = Path(path)
            if not p.is_file():
                raise PlanError(f"plan file not found: {p}")
            raw = json.loads(p.read_text(encoding="utf-8"))
        # flags override plan-file fields
        id_test = args.id_test or raw.get("id_test")
        fit = args.fit or raw.get("fit")
        near = list(args.near or raw.get("near_ood", []))
        far = list(args.far or raw.get("far_ood", []))
        score_list = list(args.score or raw.get("scores", []))
        out = args.out or raw.get("output_dir")
        options = dict(raw.get("options", {}))
        for key in (
            "temperature",
            "odin_temperature",
            "knn_k",
            "clip_percentile",
            "vim_dim",
            "mahalanobis_shrinkage",
            "primary_score",
            "fpr95_convention",
        ):
            flag = getattr(args, key, None)
            if flag is not None:
                options[key] = flag

        if not id_test:
            raise PlanError("plan needs an id_test dump path")
        if not score_list:
            raise PlanError("plan needs at least one score")
        unknown = [s for s in score_list if s not in sc.SCORE_NAMES]
        if unknown:
            raise PlanError(f"unknown scores in plan: {unknown}")
        return cls(id_test, fit, near, far, score_list, out, options)

    def score_options(self) -> sc.ScoreOptions:
        opt = self.options
        return sc.ScoreOptions(
            temperature=float(opt.get("temperature", 1.0)),
            odin_temperature=float(opt.get("odin_temperature", 1000.0)),
            knn_k=opt.get("knn_k"),
            clip_percentile=float(opt.get("clip_percentile", 90.0)),
            vim_dim=opt.get("vim_dim"),
            mahalanobis_shrinkage=opt.get("mahalanobis_shrinkage"),
        )


# --- subcommands ----------------------------------------------------------------


def cmd_validate(args) -> int:
    try:
        dump = load_dump(args.dump)
    except DumpError as exc:
        print(f"INVALID: {exc}")
        return EXIT_DATA_ERROR
    report = validate_dump(dump)
    for v in report.violations:
        print(f"{v.severity}: [{v.code}] {v.message}")
    print(f"ok: {report.ok} ({dump.role}, n={dump.n_samples}, K={dump.n_classes}, D={dump.feat_dim})")
    return EXIT_OK if report.ok else EXIT_DATA_ERROR


def cmd_score(args) -> int:
    dump = load_dump(args.dump)
    fit = load_dump(args.fit) if args.fit else None
    options = sc.ScoreOptions(
        temperature=args.temperature,
        odin_temperature=args.odin_temperature,
        knn_k=args.knn_k,
        clip_percentile=args.clip_percentile,
        vim_dim=args.vim_dim,
        mahalanobis_shrinkage=args.mahalanobis_shrinkage,
    )
    sv = sc.compute_score(args.score_name, dump, fit, options)
    if args.oriented:
        sv = sc.orient_ood_larger(sv)
    if args.binary:
        sc.save_score_binary(sv, Path(args.binary))
    out = Path(args.out) if args.out else None
    obj = sc.score_to_json_obj(sv)
    if out:
        _dump_json(obj, out)
    else:
        print(json.dumps(obj, sort_keys=True))
    return EXIT_OK


def _pooled_score_values(name, dumps, fit, options, cache):
    vals = [
        sc.orient_ood_larger(sc.compute_score(name, d, fit, options, _fit_cache=cache)).values
        for d in dumps
    ]
    return np.concatenate(vals) if vals else None


def cmd_eval(args) -> int:
    plan = RunPlan.load(args.plan, args)
    out_dir = _output_dir(plan.output_dir)

    try:
        id_dump = load_dump(plan.id_test)
    except DumpError as exc:
        print(f"error: id_test dump unreadable: {exc}", file=sys.stderr)
        return EXIT_DATA_ERROR
    fit_dump = load_dump(plan.fit) if plan.fit else None
    near_dumps = [load_dump(p) for p in plan.near_ood]
    far_dumps = [load_dump(p) for p in plan.far_ood]

    options = plan.score_options()
    convention = plan.options.get("fpr95_convention", "id_accept")
    method = id_dump.meta.get("method", id_dump.meta.get("arm", "model"))
    noise = id_dump.meta.get("noise_kind", "")
    if id_dump.meta.get("noise_rate"):
        noise = f"{noise}{'-' if noise else ''}{id_dump.meta['noise_rate']}"

    acc_val = accuracy(id_dump.logits, id_dump.labels)
    ece_val = ece(id_dump.logits, id_dump.labels)
    nll_val = nll(id_dump.logits, id_dump.labels)

    rows = []
    skipped = []
    cache: dict = {}
    for name in plan.scores:
        try:
            sv_id = sc.orient_ood_larger(
                sc.compute_score(name, id_dump, fit_dump, options, _fit_cache=cache)
            )
            near_vals = _pooled_score_values(name, near_dumps, fit_dump, options, cache)
            far_vals = _pooled_score_values(name, far_dumps, fit_dump, options, cache)

            def pool_metrics(vals):
                if vals is None:
                    return None, None
                pool_sv = sc.ScoreVector(vals, name, "ood_larger")
                return (
                    100.0 * auroc(sv_id, pool_sv),
                    100.0 * fpr_at_95_tpr(sv_id, pool_sv, convention=convention),
                )

            near_auroc, near_fpr = pool_metrics(near_vals)
            far_auroc, far_fpr = pool_metrics(far_vals)
            rows.append(
                MetricRow(
                    method=method,
                    dataset=id_dump.name,
                    noise=noise,
                    score_name=name,
                    acc=acc_val,
                    near_auroc=near_auroc,
                    near_fpr95=near_fpr,
                    far_auroc=far_auroc,
                    far_fpr95=far_fpr,
                    ece=ece_val,
                    nll=nll_val,
                )
            )
        except (sc.ScoreError, MetricError) as exc:
            skipped.append({"score": name, "error": str(exc)})

    metrics_obj = {"rows": [r.to_json_obj() for r in rows], "skipped": skipped}
    _dump_json(metrics_obj, out_dir / "metrics.json")
    (out_dir / "metrics.csv").write_text(rows_to_csv(rows), encoding="utf-8")

    # taxonomy + geometry on the primary score over the far pool
    primary = plan.options.get("primary_score", "energy")
    ood_pool = far_dumps if far_dumps else near_dumps
    if ood_pool:
        scorer = lambda d: sc.compute_score(primary, d, fit_dump, options, _fit_cache=cache)
        tax_rep = tax.taxonomy_report(
            id_dump,
            ood_pool,
            scorer,
            include_correct_high_auroc=bool(plan.options.get("include_correct_high_auroc", False)),
            per_group_median=bool(plan.options.get("per_group_median", False)),
        )
        _dump_json(tax_rep.to_json_obj(), out_dir / "taxonomy.json")
        geo_rep = geo.geometry_report(id_dump, ood_pool)
        _dump_json(geo_rep.to_json_obj(), out_dir / "geometry.json")
        (out_dir / "tables").mkdir(parents=True, exist_ok=True)
        (out_dir / "tables" / "taxonomy.md").write_text(
            tables.render_taxonomy([(id_dump.name or "run", tax_rep)]), encoding="utf-8"
        )

    if rows:
        (out_dir / "tables").mkdir(parents=True, exist_ok=True)
        for name in plan.scores:
            per_score = [r for r in rows if r.score_name == name]
            if per_score:
                (out_dir / "tables" / f"benchmark_{name}.md").write_text(
                    tables.render_benchmark(per_score), encoding="utf-8"
                )

    _dump_json({"timestamp": time.strftime("%Y-%m-%dT%H:%M:%S")}, out_dir / "run_meta.json")
    print(f"wrote {out_dir} ({len(rows)} rows, {len(skipped)} skipped)")
    return EXIT_PARTIAL if skipped else EXIT_OK


def cmd_taxonomy(args) -> int:
    id_dump = load_dump(args.id_test)
    ood = [load_dump(p) for p in args.ood]
    fit = load_dump(args.fit) if args.fit else None
    options = sc.ScoreOptions()
    scorer = lambda d: sc.compute_score(args.score_name, d, fit, options)
    rep = tax.taxonomy_report(
        id_dump,
        ood,
        scorer,
        include_correct_high_auroc=args.include_correct_high,
        per_group_median=args.per_group_median,
    )
    obj = rep.to_json_obj()
    if args.out:
        _dump_json(obj, Path(args.out))
    else:
        print(json.dumps(obj, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_geometry(args) -> int:
    id_dump = load_dump(args.id_test)
    ood = [load_dump(p) for p in args.ood]
    rep = geo.geometry_report(id_dump, ood, per_class_pr=args.per_class_pr)
    obj = rep.to_json_obj()
    if args.out:
        _dump_json(obj, Path(args.out))
    else:
        print(json.dumps(obj, indent=2, sort_keys=True))
    if args.projections:
        preds = np.argmax(id_dump.logits, axis=1)
        correct = preds == id_dump.labels
        pops = [
            ("id_correct", id_dump.features[correct]),
            ("id_wrong", id_dump.features[~correct]),
            ("ood", np.vstack([d.features for d in ood])),
        ]
        names = [n for n, p in pops if len(p)]
        coords = geo.pca_project_2d([p for _, p in pops if len(p)])
        path = Path(args.projections)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(
            geo.projections_to_csv(list(zip(names, coords))), encoding="utf-8"
        )
    return EXIT_OK


def cmd_vmr_demo(args) -> int:
    from oodaudit.vmr import TaskConfig, VmrConfig, vmr_experiment

    task_kwargs = {}
    vmr_kwargs = {}
    if args.config:
        raw = json.loads(Path(args.config).read_text(encoding="utf-8"))
        task_kwargs = raw.get("task", {})
        vmr_kwargs = raw.get("vmr", {})
    if args.noise_rate is not None:
        task_kwargs["noise_rate"] = args.noise_rate
    if args.noise_kind is not None:
        task_kwargs["noise_kind"] = args.noise_kind
    if args.lambda_vos is not None:
        vmr_kwargs["lambda_vos"] = args.lambda_vos

    out_dir = _output_dir(args.out)
    report = vmr_experiment(
        TaskConfig(**task_kwargs), VmrConfig(**vmr_kwargs), list(args.seeds), out_dir
    )
    paired = [
        tables.PairedDeltaRow(
            setting=f"seed {r.seed}",
            baseline=r.baseline.far_auroc,
            repaired=r.repaired.far_auroc,
            id_delta=r.deltas()["acc"],
        )
        for r in report.per_seed
    ]
    if paired:
        (out_dir / "tables").mkdir(parents=True, exist_ok=True)
        (out_dir / "tables" / "paired.md").write_text(
            tables.render_paired(paired), encoding="utf-8"
        )
    md = report.mean_deltas
    print(
        f"seeds={len(report.per_seed)} failures={len(report.failures)} "
        f"mean d(far_auroc)={md['far_auroc']} mean d(acc)={md['acc']} "
        f"repair_partial={report.repair_partial}"
    )
    return EXIT_OK if not report.failures else EXIT_PARTIAL


def cmd_compare(args) -> int:
    rows_a = _load_rows(Path(args.report_a))
    rows_b = _load_rows(Path(args.report_b))
    deltas = tables.compare_rows(rows_a, rows_b)
    obj = {"comparison": deltas}
    if args.out:
        _dump_json(obj, Path(args.out))
    else:
        print(json.dumps(obj, indent=2, sort_keys=True))
    return EXIT_OK


def _load_rows(path: Path) -> list[MetricRow]:
    if not path.is_file():
        raise PlanError(f"report not found: {path}")
    if path.suffix == ".csv":
        return rows_from_csv(path.read_text(encoding="utf-8"))
    raw = json.loads(path.read_text(encoding="utf-8"))
    items = raw["rows"] if isinstance(raw, dict) else raw
    return [
        MetricRow(
            method=r["method"],
            dataset=r["dataset"],
            noise=r["noise"],
            score_name=r["score"],
            acc=r.get("acc"),
            near_auroc=r.get("near_auroc"),
            near_fpr95=r.get("near_fpr95"),
            far_auroc=r.get("far_auroc"),
            far_fpr95=r.get("far_fpr95"),
            ece=r.get("ece"),
            nll=r.get("nll"),
        )
        for r in items
    ]


def cmd_render(args) -> int:
    rows = _load_rows(Path(args.metrics))
    if args.score_name:
        rows = [r for r in rows if r.score_name == args.score_name]
        if not rows:
            raise PlanError(f"no rows with score {args.score_name!r}")
    text = tables.render_benchmark(rows)
    if args.out:
        path = Path(args.out)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text, encoding="utf-8")
    else:
        print(text)
    return EXIT_OK


# --- parser -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="oodaudit",
        description="Open-world reliability audits over frozen-checkpoint dumps",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="validate a dump directory")
    p.add_argument("dump")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("score", help="compute one score on one dump")
    p.add_argument("--dump", required=True)
    p.add_argument("--score", dest="score_name", required=True, choices=sc.SCORE_NAMES)
    p.add_argument("--fit")
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--odin-temperature", dest="odin_temperature", type=float, default=1000.0)
    p.add_argument("--knn-k", dest="knn_k", type=int)
    p.add_argument("--clip-percentile", dest="clip_percentile", type=float, default=90.0)
    p.add_argument("--vim-dim", dest="vim_dim", type=int)
    p.add_argument("--shrinkage", dest="mahalanobis_shrinkage", type=float)
    p.add_argument("--oriented", action="store_true", help="emit in the OOD-larger direction")
    p.add_argument("--out")
    p.add_argument("--binary", help="also write raw float32 values with a sidecar manifest")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("eval", help="full metric/taxonomy/geometry run from a plan")
    p.add_argument("--plan", help="JSON plan file; flags override its fields")
    p.add_argument("--id-test", dest="id_test")
    p.add_argument("--fit")
    p.add_argument("--near", nargs="*", default=None)
    p.add_argument("--far", nargs="*", default=None)
    p.add_argument("--score", nargs="*", default=None)
    p.add_argument("--out")
    p.add_argument("--temperature", type=float, default=None)
    p.add_argument("--odin-temperature", dest="odin_temperature", type=float, default=None)
    p.add_argument("--knn-k", dest="knn_k", type=int, default=None)
    p.add_argument("--clip-percentile", dest="clip_percentile", type=float, default=None)
    p.add_argument("--vim-dim", dest="vim_dim", type=int, default=None)
    p.add_argument("--shrinkage", dest="mahalanobis_shrinkage", type=float, default=None)
    p.add_argument("--primary-score", dest="primary_score", default=None)
    p.add_argument("--fpr95-convention", dest="fpr95_convention", default=None,
                   choices=("id_accept", "ood_recall"))
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("taxonomy", help="five-group collapse report")
    p.add_argument("--id-test", dest="id_test", required=True)
    p.add_argument("--ood", nargs="+", required=True)
    p.add_argument("--score", dest="score_name", default="energy", choices=sc.SCORE_NAMES)
    p.add_argument("--fit")
    p.add_argument("--include-correct-high", action="store_true")
    p.add_argument("--per-group-median", action="store_true")
    p.add_argument("--out")
    p.set_defaults(func=cmd_taxonomy)

    p = sub.add_parser("geometry", help="representation-geometry report")
    p.add_argument("--id-test", dest="id_test", required=True)
    p.add_argument("--ood", nargs="+", required=True)
    p.add_argument("--per-class-pr", action="store_true")
    p.add_argument("--out")
    p.add_argument("--projections", help="write 2-D PCA projection CSV here")
    p.set_defaults(func=cmd_geometry)

    p = sub.add_parser("vmr-demo", help="paired baseline-vs-repair toy experiment")
    p.add_argument("--config", help="JSON with {task: {...}, vmr: {...}} overrides")
    p.add_argument("--seeds", nargs="+", type=int, default=[0])
    p.add_argument("--noise-rate", dest="noise_rate", type=float, default=None)
    p.add_argument("--noise-kind", dest="noise_kind", default=None)
    p.add_argument("--lambda", dest="lambda_vos", type=float, default=None)
    p.add_argument("--out")
    p.set_defaults(func=cmd_vmr_demo)

    p = sub.add_parser("compare", help="paired deltas between two metric reports")
    p.add_argument("report_a")
    p.add_argument("report_b")
    p.add_argument("--out")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("render", help="render a metrics report as a markdown table")
    p.add_argument("--metrics", required=True)
    p.add_argument("--score", dest="score_name", help="filter to one score family")
    p.add_argument("--out")
    p.set_defaults(func=cmd_render)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except PlanError as exc:
        print(f"plan error: {exc}", file=sys.stderr)
        return EXIT_INVALID_PLAN
    except (DumpError, sc.ScoreError, MetricError, tax.TaxonomyError, geo.GeometryError,
            tables.RenderError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA_ERROR
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA_ERROR
    except Exception as exc:  # train/task errors and anything else data-shaped
        from oodaudit.vmr.task import TaskError
        from oodaudit.vmr.train import TrainError

        if isinstance(exc, (TaskError, TrainError)):
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_DATA_ERROR
        raise


if __name__ == "__main__":
    sys.exit(main())
