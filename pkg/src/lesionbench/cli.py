"""``lesionbench`` command line: preprocess, evaluate, ensemble, schedule, folds.

Exit codes: 0 success, 1 usage or configuration error, 2 partial data failure.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .ensemble import (
    PrecisionMode,
    argmax_labels,
    compare_labelings,
    ensemble_probs,
    read_prob_stack,
    write_prob_stack,
)
from .evaluation import (
    AggregationPolicy,
    CaseResult,
    JoinError,
    SubgroupSpec,
    aggregate,
    evaluate_case,
    subgroup_report,
    summary_document,
    write_results_csv,
    write_subgroup_csv,
    write_summary_json,
)
from .preprocess import PREPROCESSING_ORDER, preprocess_image, resample_isotropic
from .schedules import LrSchedule, make_folds, sampling_weights
from .volume_io import (
    LabelMask,
    MetaTableError,
    ShapeMismatchError,
    list_volumes,
    read_meta_table,
    read_nifti,
    read_nifti_array,
    write_nifti,
)

EXIT_OK, EXIT_USAGE, EXIT_PARTIAL = 0, 1, 2
JOBS_ENV = "LESIONBENCH_JOBS"

log = logging.getLogger("lesionbench")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _jobs(value: int | None) -> int:
    if value is None:
        value = int(os.environ.get(JOBS_ENV, "1") or 1)
    return max(1, value)


def _map(fn, items, jobs: int):
    items = list(items)
    if jobs == 1 or len(items) <= 1:
        return [fn(i) for i in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items, chunksize=max(1, len(items) // (4 * jobs))))


def _out_name(path: Path) -> str:
    return path.name if path.name.endswith((".nii", ".nii.gz")) else path.name + ".nii.gz"


# ---------------------------------------------------------------------------
# preprocess


def _preprocess_one(task):
    src, dst, target_mm, mode = task
    try:
        if mode == "nearest":
            mask = read_nifti(src, as_mask=True)
            out = resample_isotropic(mask, target_mm, "nearest")
        else:
            out = preprocess_image(read_nifti(src), target_mm)
        write_nifti(out, dst)
        return src.name, None, out.dims
    except Exception as exc:  # recorded in the failure manifest
        return src.name, f"{type(exc).__name__}: {exc}", None


def cmd_preprocess(args) -> int:
    in_dir, out_dir = Path(args.in_dir), Path(args.out_dir)
    if not in_dir.is_dir():
        raise UsageError(f"{in_dir} is not a directory")
    files = [p for p in sorted(in_dir.iterdir()) if p.name.endswith((".nii", ".nii.gz"))]
    if not files:
        raise UsageError(f"no .nii/.nii.gz files in {in_dir}; usage: lesionbench preprocess IN_DIR OUT_DIR")
    if args.target_mm <= 0:
        raise UsageError("--target-mm must be positive")
    out_dir.mkdir(parents=True, exist_ok=True)
    tasks = [(p, out_dir / _out_name(p), args.target_mm, args.mode) for p in files]
    failures = []
    for name, error, dims in _map(_preprocess_one, tasks, _jobs(args.jobs)):
        if error:
            log.error("FAIL %s: %s", name, error)
            failures.append((name, error))
        else:
            log.info("ok   %s -> dims %s", name, dims)
    with open(out_dir / "preprocess.json", "w", encoding="utf-8") as fh:
        json.dump(
            {
                "toolkit_version": __version__,
                "target_mm": args.target_mm,
                "mode": args.mode,
                "preprocessing_order": PREPROCESSING_ORDER if args.mode == "trilinear" else "resample_only",
                "processed": len(files) - len(failures),
                "failed": len(failures),
            },
            fh,
            indent=2,
        )
    if failures:
        with open(out_dir / "failures.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["file", "error"])
            w.writerows(failures)
        return EXIT_PARTIAL
    return EXIT_OK


# ---------------------------------------------------------------------------
# evaluate


def _read_binary_mask(path) -> LabelMask:
    data, geometry = read_nifti_array(path)
    if data.ndim != 3:
        raise ShapeMismatchError(f"{path}: expected a 3D mask, got {data.shape}")
    return LabelMask((data != 0).astype(np.uint8), geometry)


def _evaluate_one(task):
    case_id, gt_path, pred_path, tolerance = task
    try:
        gt = _read_binary_mask(gt_path)
        pred = _read_binary_mask(pred_path)
        return evaluate_case(gt, pred, tolerance, case_id=case_id), None
    except Exception as exc:
        return None, (case_id, f"{type(exc).__name__}: {exc}")


def _expand_edges(text: str) -> list[float]:
    parts = [p.strip() for p in text.split(",") if p.strip()]
    if "..." not in parts:
        return [float(p) for p in parts]
    i = parts.index("...")
    if i < 2 or i == len(parts) - 1:
        raise UsageError(f"cannot expand '...' in {text!r}")
    a, b = float(parts[i - 2]), float(parts[i - 1])
    stop = float(parts[i + 1])
    step = b - a
    if step <= 0:
        raise UsageError(f"bin edges must increase in {text!r}")
    head = [float(p) for p in parts[:i]]
    x = head[-1] + step
    while x < stop - 1e-9 * step:
        head.append(x)
        x += step
    return head + [float(p) for p in parts[i + 1 :]]


def _parse_bins(values, exclusion: bool) -> list[SubgroupSpec]:
    specs = []
    for v in values:
        axis, _, edges = v.partition("=")
        axis = axis.strip()
        try:
            specs.append(SubgroupSpec(axis, tuple(_expand_edges(edges)) if edges else (), exclusion))
        except ValueError as exc:
            raise UsageError(f"--bins {v}: {exc}") from None
    return specs


def cmd_evaluate(args) -> int:
    gt_dir, pred_dir, out_dir = Path(args.gt_dir), Path(args.pred_dir), Path(args.out)
    for d in (gt_dir, pred_dir):
        if not d.is_dir():
            raise UsageError(f"{d} is not a directory")
    if args.tolerance <= 0:
        raise UsageError("--tolerance must be positive")
    policy = AggregationPolicy(args.policy)
    gts, preds = list_volumes(gt_dir), list_volumes(pred_dir)
    unmatched = sorted(set(gts) ^ set(preds))
    for stem in unmatched:
        side = "ground truth" if stem in gts else "prediction"
        log.error("unmatched case %s (only a %s file)", stem, side)
    if unmatched and not args.allow_partial:
        log.error("aborting: %d unmatched case(s); pass --allow-partial to continue", len(unmatched))
        return EXIT_PARTIAL
    stems = sorted(set(gts) & set(preds))
    if not stems:
        raise UsageError("no matching cases between the two directories")

    metas = None
    if args.meta:
        try:
            metas = read_meta_table(args.meta)
        except (OSError, MetaTableError) as exc:
            raise UsageError(f"--meta: {exc}") from None
    specs = _parse_bins(args.bins, exclusion=policy is AggregationPolicy.IGNORE_NAN)
    if metas is not None and not args.bins:
        specs = [SubgroupSpec(a, (), policy is AggregationPolicy.IGNORE_NAN) for a in ("sex", "age", "tsi")]
    if specs and metas is None:
        raise UsageError("--bins requires --meta")

    tasks = [(s, gts[s], preds[s], args.tolerance) for s in stems]
    results: list[CaseResult] = []
    failures = []
    for result, failure in _map(_evaluate_one, tasks, _jobs(args.jobs)):
        if failure:
            log.error("FAIL %s: %s", *failure)
            failures.append(failure)
        else:
            results.append(result)
    if not results:
        log.error("no case could be evaluated")
        return EXIT_PARTIAL
    results.sort(key=lambda r: r.case_id)

    out_dir.mkdir(parents=True, exist_ok=True)
    write_results_csv(results, out_dir / "cases.csv")
    for pol in AggregationPolicy:
        rows = [aggregate(results, pol, group="all")]
        if metas is not None:
            try:
                sex_rows = subgroup_report(
                    results, metas, SubgroupSpec("sex", (), pol is AggregationPolicy.IGNORE_NAN)
                )
            except JoinError as exc:
                raise UsageError(str(exc)) from None
            rows = [r for r in sex_rows if r.group != "unknown" or r.n_included] + rows
        doc = summary_document(
            rows, pol, args.tolerance, n_cases=len(results), failed_cases=[f[0] for f in failures]
        )
        write_summary_json(doc, out_dir / f"summary_{pol.value}.json")
        log.info("%s: all n=%d dice=%s", pol.value, rows[-1].n_included, doc["rows"][-1]["mean_dice_pct"])

    if specs:
        from .report import subgroup_chart

        for spec in specs:
            try:
                rows = subgroup_report(results, metas, spec)
            except JoinError as exc:
                raise UsageError(str(exc)) from None
            write_subgroup_csv(rows, out_dir / f"subgroups_{spec.axis}.csv")
            subgroup_chart(rows, spec.axis, out_dir / f"subgroups_{spec.axis}.svg")
    return EXIT_PARTIAL if (failures or unmatched) else EXIT_OK


# ---------------------------------------------------------------------------
# ensemble


def _ensemble_one(task):
    stem, paths, mode, compare, out_dir = task
    try:
        stacks = [read_prob_stack(p) for p in paths]
        merged = ensemble_probs(stacks, mode)
        labels = argmax_labels(merged)
        write_prob_stack(merged, out_dir / "probs" / f"{stem}.nii.gz")
        write_nifti(labels, out_dir / "labels" / f"{stem}.nii.gz")
        report = None
        if compare:
            reference = argmax_labels(ensemble_probs(stacks, PrecisionMode.DOUBLE))
            report = compare_labelings(labels, reference).as_dict()
        return stem, None, report
    except Exception as exc:
        return stem, f"{type(exc).__name__}: {exc}", None


def cmd_ensemble(args) -> int:
    mode = PrecisionMode(args.mode)
    if mode is PrecisionMode.HALF:
        log.warning(
            "half precision ensembling rounds every partial sum to 11 significant bits; "
            "near-tie voxels can flip labels. Use single or double for reported results."
        )
    dirs = [Path(d) for d in args.model_dirs]
    for d in dirs:
        if not d.is_dir():
            raise UsageError(f"{d} is not a directory")
    listings = [list_volumes(d) for d in dirs]
    stems = sorted(set.intersection(*(set(x) for x in listings)))
    missing = sorted(set.union(*(set(x) for x in listings)) - set(stems))
    for stem in missing:
        log.error("case %s is missing from at least one model directory; skipped", stem)
    if not stems:
        raise UsageError("no case is present in every model directory")
    out_dir = Path(args.out)
    (out_dir / "probs").mkdir(parents=True, exist_ok=True)
    (out_dir / "labels").mkdir(parents=True, exist_ok=True)
    tasks = [(s, [x[s] for x in listings], mode, args.compare_mode, out_dir) for s in stems]
    failures, reports = [], {}
    for stem, error, report in _map(_ensemble_one, tasks, _jobs(args.jobs)):
        if error:
            log.error("FAIL %s: %s", stem, error)
            failures.append({"case_id": stem, "error": error})
        elif report is not None:
            reports[stem] = report
    summary = {
        "toolkit_version": __version__,
        "precision_mode": mode.value,
        "accumulation": "input order, one division by model count",
        "models": [str(d) for d in dirs],
        "cases": len(stems) - len(failures),
        "skipped": failures + [{"case_id": s, "error": "missing in a model directory"} for s in missing],
    }
    if args.compare_mode:
        summary["disagreement_vs_double"] = {
            "total": sum(r["count"] for r in reports.values()),
            "cases": reports,
        }
    with open(out_dir / "ensemble_summary.json", "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2)
        fh.write("\n")
    return EXIT_PARTIAL if (failures or missing) else EXIT_OK


# ---------------------------------------------------------------------------
# schedule / folds


def _emit(rows, header, out) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    if out:
        Path(out).write_text(buf.getvalue(), encoding="utf-8")
    else:
        sys.stdout.write(buf.getvalue())


def _read_sizes_csv(path) -> tuple[list[str], list[int]]:
    ids, sizes = [], []
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            for lineno, row in enumerate(csv.reader(fh), start=1):
                if not row or not "".join(row).strip():
                    continue
                if len(row) != 2:
                    raise UsageError(f"{path}: line {lineno}: expected 'dataset,count'")
                name, count = row[0].strip(), row[1].strip()
                if lineno == 1 and not count.lstrip("-").isdigit():
                    continue  # header
                try:
                    sizes.append(int(count))
                except ValueError:
                    raise UsageError(f"{path}: line {lineno}: bad count {count!r}") from None
                ids.append(name)
    except OSError as exc:
        raise UsageError(str(exc)) from None
    if not sizes:
        raise UsageError(f"{path}: no dataset rows")
    return ids, sizes


def cmd_schedule(args) -> int:
    if args.sizes or args.sizes_csv:
        if args.sizes_csv:
            ids, sizes = _read_sizes_csv(args.sizes_csv)
        else:
            try:
                sizes = [int(s) for s in args.sizes.split(",")]
            except ValueError:
                raise UsageError(f"--sizes: cannot parse {args.sizes!r}") from None
            ids = [f"dataset_{i}" for i in range(len(sizes))]
        try:
            plan = sampling_weights(sizes, ids)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        rows = [(d, s, repr(p)) for d, s, p in zip(plan.dataset_ids, plan.sizes, plan.probabilities)]
        _emit(rows, ["dataset", "images", "probability"], args.out)
        return EXIT_OK

    try:
        if args.warmup:
            target = args.target if args.target is not None else args.lr0
            schedule = LrSchedule.warmup_then_poly(target, args.warmup, args.epochs, args.exponent)
        else:
            schedule = LrSchedule.poly(args.lr0, args.epochs, args.exponent)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    log.info("schedule metadata: %s", json.dumps(schedule.metadata, sort_keys=True))
    _emit([(e, repr(lr)) for e, lr in schedule.table()], ["epoch", "lr"], args.out)
    return EXIT_OK


def cmd_folds(args) -> int:
    if args.ids_file:
        ids = [line.strip() for line in Path(args.ids_file).read_text(encoding="utf-8").splitlines()]
        ids = [i for i in ids if i]
    elif args.from_dir:
        ids = sorted(list_volumes(args.from_dir))
    else:
        ids = [i.strip() for i in args.ids.split(",") if i.strip()]
    try:
        folds = make_folds(ids, args.k, args.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    rows = sorted(((cid, f) for f, fold in enumerate(folds) for cid in fold), key=lambda r: r[0])
    _emit(rows, ["case_id", "fold"], args.out)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(
        prog="lesionbench",
        description="Lesion segmentation evaluation toolkit.",
        epilog="exit codes: 0 success, 1 usage or configuration error, 2 partial data failure",
    )
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-q", "--quiet", action="store_true", help="only log warnings and errors")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    pp = sub.add_parser("preprocess", help="resample to isotropic spacing and z-score")
    pp.add_argument("in_dir")
    pp.add_argument("out_dir")
    pp.add_argument("--target-mm", type=float, default=1.0)
    pp.add_argument(
        "--mode",
        choices=["trilinear", "nearest"],
        default="trilinear",
        help="trilinear for images (then z-scored); nearest for label masks",
    )
    pp.add_argument("--jobs", type=int, default=None)
    pp.set_defaults(func=cmd_preprocess)

    ev = sub.add_parser("evaluate", help="Dice/NSD per case, policy summaries, subgroup tables")
    ev.add_argument("gt_dir")
    ev.add_argument("pred_dir")
    ev.add_argument("--out", required=True)
    ev.add_argument("--meta", help="case metadata CSV (case_id,sex,age_years,tsi_months,cohort)")
    ev.add_argument("--tolerance", type=float, default=1.0, help="NSD tolerance in mm")
    ev.add_argument(
        "--policy",
        choices=[p.value for p in AggregationPolicy],
        default=AggregationPolicy.IGNORE_NAN.value,
        help="policy for subgroup tables; summaries are written for both",
    )
    ev.add_argument(
        "--bins",
        action="append",
        default=[],
        metavar="AXIS[=EDGES]",
        help="subgroup axis (sex, age, tsi) with optional comma-separated edges, e.g. age=0,10,...,80",
    )
    ev.add_argument("--allow-partial", action="store_true")
    ev.add_argument("--jobs", type=int, default=None)
    ev.set_defaults(func=cmd_evaluate)

    en = sub.add_parser("ensemble", help="average probability stacks and take the argmax")
    en.add_argument("model_dirs", nargs="+")
    en.add_argument("--out", required=True)
    en.add_argument("--mode", choices=[m.value for m in PrecisionMode], default="single")
    en.add_argument(
        "--compare-mode", action="store_true", help="report label disagreements against double precision"
    )
    en.add_argument("--jobs", type=int, default=None)
    en.set_defaults(func=cmd_ensemble)

    sc = sub.add_parser("schedule", help="sampling probabilities or learning-rate tables as CSV")
    src = sc.add_mutually_exclusive_group(required=True)
    src.add_argument("--sizes", help="comma-separated image counts")
    src.add_argument("--sizes-csv", help="CSV of dataset,count")
    src.add_argument("--poly", action="store_true", help="poly decay from --lr0")
    src.add_argument("--warmup", type=int, metavar="EPOCHS", help="linear warm-up length")
    sc.add_argument("--lr0", type=float, default=0.01)
    sc.add_argument("--target", type=float, default=None, help="warm-up target rate (default --lr0)")
    sc.add_argument("--epochs", type=int, default=1000)
    sc.add_argument("--exponent", type=float, default=0.9)
    sc.add_argument("--out")
    sc.set_defaults(func=cmd_schedule)

    fo = sub.add_parser("folds", help="seeded k-fold split of case ids")
    ids = fo.add_mutually_exclusive_group(required=True)
    ids.add_argument("--ids", help="comma-separated case ids")
    ids.add_argument("--ids-file", help="one case id per line")
    ids.add_argument("--from-dir", help="use the case stems of NIfTI files in a directory")
    fo.add_argument("--k", type=int, default=5)
    fo.add_argument("--seed", type=int, default=0)
    fo.add_argument("--out")
    fo.set_defaults(func=cmd_folds)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING if args.quiet else logging.INFO,
        format="%(levelname)s %(message)s",
        stream=sys.stderr,
        force=True,
    )
    try:
        return args.func(args)
    except UsageError as exc:
        log.error("%s", exc)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
