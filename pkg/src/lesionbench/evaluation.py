"""Per-case evaluation, aggregation policies, fold averages and subgroup tables."""
from __future__ import annotations

import csv
import enum
import json
import math
from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal
from typing import Iterable, Sequence

import numpy as np

from . import __version__
from .metrics import MetricValue, dice, nsd
from .preprocess import PREPROCESSING_ORDER
from .volume_io import CaseMeta, LabelMask, ShapeMismatchError

RESULT_COLUMNS = ("case_id", "dice", "nsd", "gt_empty", "pred_empty")

DEFAULT_AGE_EDGES = tuple(float(e) for e in range(0, 90, 10))
DEFAULT_TSI_EDGES = (0.0, 6.0, 12.0, 24.0, 60.0, math.inf)
UNKNOWN = "unknown"


class AggregationPolicy(enum.Enum):
    # challenge rule: an empty/empty case scores full marks
    NAN_AS_ONE = "nan_as_one"
    # framework rule: empty/empty cases are left out of the mean
    IGNORE_NAN = "ignore_nan"


class JoinError(KeyError):
    def __init__(self, missing: Sequence[str]):
        self.missing = list(missing)
        super().__init__(f"no metadata for cases: {', '.join(self.missing)}")


def round_half_away(x: float, ndigits: int = 2) -> float:
    """Round for display; halves go away from zero on the shortest decimal repr."""
    q = Decimal(1).scaleb(-ndigits)
    return float(Decimal(repr(float(x))).quantize(q, rounding=ROUND_HALF_UP))


def format_pct(x: float | None) -> str:
    return "" if x is None else f"{round_half_away(x, 2):.2f}"


@dataclass(frozen=True)
class CaseResult:
    case_id: str
    dice: MetricValue
    nsd: MetricValue
    gt_empty: bool
    pred_empty: bool

    def __post_init__(self):
        both = self.gt_empty and self.pred_empty
        if (not self.dice.defined) != both or (not self.nsd.defined) != both:
            raise ValueError(f"{self.case_id}: undefined metrics must match empty/empty flags")


@dataclass(frozen=True)
class SummaryRow:
    group: str
    n_included: int
    mean_dice_pct: float | None
    mean_nsd_pct: float | None

    @property
    def empty(self) -> bool:
        return self.n_included == 0

    def as_dict(self, rounded: bool = True) -> dict:
        conv = (lambda v: None if v is None else round_half_away(v)) if rounded else (lambda v: v)
        return {
            "group": self.group,
            "n": self.n_included,
            "mean_dice_pct": conv(self.mean_dice_pct),
            "mean_nsd_pct": conv(self.mean_nsd_pct),
        }


@dataclass(frozen=True)
class SubgroupSpec:
    """Stratification axis; bins are [lo, hi) except the last, which is closed.

    With ``exclusion`` set, empty/empty cases are dropped before binning.
    """

    axis: str
    bin_edges: tuple[float, ...] = ()
    exclusion: bool = True

    def __post_init__(self):
        if self.axis not in ("sex", "age", "tsi"):
            raise ValueError(f"unknown axis {self.axis!r}")
        edges = tuple(float(e) for e in self.bin_edges)
        if self.axis != "sex":
            if not edges:
                edges = DEFAULT_AGE_EDGES if self.axis == "age" else DEFAULT_TSI_EDGES
            if len(edges) < 2 or any(b <= a for a, b in zip(edges, edges[1:])):
                raise ValueError(f"bin edges must be strictly increasing, got {edges}")
        object.__setattr__(self, "bin_edges", edges)

    def labels(self) -> list[str]:
        if self.axis == "sex":
            return ["male", "female"]
        out = []
        last = len(self.bin_edges) - 2
        for i, (lo, hi) in enumerate(zip(self.bin_edges, self.bin_edges[1:])):
            if math.isinf(hi):
                out.append(f"{_num(lo)}+")
            else:
                out.append(f"[{_num(lo)},{_num(hi)}{']' if i == last else ')'}")
        return out

    def bin_of(self, meta: CaseMeta) -> str:
        if self.axis == "sex":
            return meta.sex if meta.sex in ("male", "female") else UNKNOWN
        value = meta.age_years if self.axis == "age" else meta.tsi_months
        if value is None:
            return UNKNOWN
        edges = self.bin_edges
        if value < edges[0] or value > edges[-1]:
            return UNKNOWN
        i = int(np.searchsorted(edges, value, side="right")) - 1
        return self.labels()[min(i, len(edges) - 2)]


def _num(x: float) -> str:
    return str(int(x)) if float(x).is_integer() else repr(x)


def evaluate_case(
    gt: LabelMask, pred: LabelMask, tolerance_mm: float = 1.0, case_id: str = ""
) -> CaseResult:
    if gt.geometry.dims != pred.geometry.dims or not gt.geometry.same_lattice(pred.geometry):
        raise ShapeMismatchError(
            f"gt {gt.dims}/{gt.spacing} vs pred {pred.dims}/{pred.spacing}", case_id or None
        )
    gt_empty = not gt.foreground().any()
    pred_empty = not pred.foreground().any()
    return CaseResult(
        case_id=case_id,
        dice=dice(gt, pred),
        nsd=nsd(gt, pred, tolerance_mm),
        gt_empty=gt_empty,
        pred_empty=pred_empty,
    )


def _policy_value(v: MetricValue, policy: AggregationPolicy) -> float | None:
    if v.defined:
        return v.value
    return 1.0 if policy is AggregationPolicy.NAN_AS_ONE else None


def aggregate(
    results: Iterable[CaseResult], policy: AggregationPolicy, group: str = "all"
) -> SummaryRow:
    """Mean Dice and NSD in percent under ``policy``.

    Summation runs in case_id order. When every case is excluded the row has
    ``n_included == 0`` and no means.
    """
    results = list(results)
    if not results:
        raise ValueError("aggregate needs at least one result")
    return _mean_row(results, AggregationPolicy(policy), group)


def _mean_row(results: list[CaseResult], policy: AggregationPolicy, group: str) -> SummaryRow:
    results = sorted(results, key=lambda r: r.case_id)
    dices, nsds = [], []
    for r in results:
        d = _policy_value(r.dice, policy)
        s = _policy_value(r.nsd, policy)
        if d is None:
            continue
        dices.append(d)
        nsds.append(s)
    if not dices:
        return SummaryRow(group, 0, None, None)
    n = len(dices)
    return SummaryRow(group, n, 100.0 * math.fsum(dices) / n, 100.0 * math.fsum(nsds) / n)


def fold_average(per_fold_means_pct: Sequence[float]) -> float:
    """Arithmetic mean of five per-fold scores; format with ``format_pct`` for display."""
    values = [float(v) for v in per_fold_means_pct]
    if len(values) != 5:
        raise ValueError(f"expected 5 fold values, got {len(values)}")
    return math.fsum(values) / 5


def subgroup_report(
    results: Iterable[CaseResult], metas: Iterable[CaseMeta], spec: SubgroupSpec
) -> list[SummaryRow]:
    """One row per bin, plus an ``unknown`` row for missing or out-of-range values."""
    by_id = {m.case_id: m for m in metas}
    results = list(results)
    missing = sorted(r.case_id for r in results if r.case_id not in by_id)
    if missing:
        raise JoinError(missing)
    policy = AggregationPolicy.IGNORE_NAN if spec.exclusion else AggregationPolicy.NAN_AS_ONE
    labels = spec.labels() + [UNKNOWN]
    buckets: dict[str, list[CaseResult]] = {label: [] for label in labels}
    for r in results:
        buckets[spec.bin_of(by_id[r.case_id])].append(r)
    return [_mean_row(buckets[label], policy, label) for label in labels]


# ---------------------------------------------------------------------------
# file formats


def _metric_cell(v: MetricValue) -> str:
    return "" if not v.defined else repr(float(v.value))


def write_results_csv(results: Iterable[CaseResult], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RESULT_COLUMNS)
        for r in sorted(results, key=lambda r: r.case_id):
            w.writerow(
                [
                    r.case_id,
                    _metric_cell(r.dice),
                    _metric_cell(r.nsd),
                    str(r.gt_empty).lower(),
                    str(r.pred_empty).lower(),
                ]
            )


def _parse_metric(cell: str) -> MetricValue:
    cell = cell.strip()
    return MetricValue.undefined() if cell == "" else MetricValue(float(cell))


def _parse_flag(cell: str) -> bool:
    cell = cell.strip().lower()
    if cell in ("true", "1"):
        return True
    if cell in ("false", "0"):
        return False
    raise ValueError(f"bad flag {cell!r}")


def read_results_csv(path) -> list[CaseResult]:
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            try:
                out.append(
                    CaseResult(
                        case_id=row["case_id"],
                        dice=_parse_metric(row["dice"]),
                        nsd=_parse_metric(row["nsd"]),
                        gt_empty=_parse_flag(row["gt_empty"]),
                        pred_empty=_parse_flag(row["pred_empty"]),
                    )
                )
            except (KeyError, ValueError) as exc:
                raise ValueError(f"{path}: line {reader.line_num}: {exc}") from None
    return out


def write_subgroup_csv(rows: Iterable[SummaryRow], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["group", "n", "mean_dice_pct", "mean_nsd_pct"])
        for row in rows:
            w.writerow(
                [row.group, row.n_included, format_pct(row.mean_dice_pct), format_pct(row.mean_nsd_pct)]
            )


def summary_document(
    rows: Sequence[SummaryRow],
    policy: AggregationPolicy,
    tolerance_mm: float,
    precision_mode: str | None = None,
    **extra,
) -> dict:
    doc = {
        "toolkit_version": __version__,
        "policy": AggregationPolicy(policy).value,
        "tolerance_mm": tolerance_mm,
        "precision_mode": precision_mode,
        "preprocessing_order": PREPROCESSING_ORDER,
        "rows": [r.as_dict() for r in rows],
    }
    doc.update(extra)
    return doc


def write_summary_json(doc: dict, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=False)
        fh.write("\n")
