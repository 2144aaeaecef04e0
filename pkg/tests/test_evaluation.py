import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lesionbench.evaluation import (
    AggregationPolicy,
    CaseResult,
    JoinError,
    SubgroupSpec,
    aggregate,
    evaluate_case,
    fold_average,
    format_pct,
    read_results_csv,
    round_half_away,
    subgroup_report,
    summary_document,
    write_results_csv,
    write_subgroup_csv,
)
from lesionbench.metrics import MetricValue
from lesionbench.volume_io import CaseMeta, LabelMask, ShapeMismatchError

NAN1 = AggregationPolicy.NAN_AS_ONE
IGN = AggregationPolicy.IGNORE_NAN


def case(cid, d, s=None, gt_empty=False, pred_empty=False):
    if d is None:
        return CaseResult(cid, MetricValue.undefined(), MetricValue.undefined(), True, True)
    return CaseResult(cid, MetricValue(d), MetricValue(d if s is None else s), gt_empty, pred_empty)


def sex_split_corpus():
    results = [case(f"m{i:03d}", 0.6402) for i in range(175)]
    results += [case(f"f{i:03d}", 0.5885) for i in range(100)]
    metas = [CaseMeta(r.case_id, "male" if r.case_id[0] == "m" else "female") for r in results]
    return results, metas


def test_evaluate_case_flags():
    m = np.zeros((4, 4, 4), np.uint8)
    m[1:3, 1:3, 1:3] = 1
    r = evaluate_case(LabelMask.from_array(m), LabelMask.from_array(m), 1.0, "a")
    assert (r.dice.value, r.nsd.value, r.gt_empty, r.pred_empty) == (1.0, 1.0, False, False)
    empty = LabelMask.from_array(np.zeros((4, 4, 4), np.uint8))
    r = evaluate_case(empty, empty, 1.0, "b")
    assert not r.dice.defined and not r.nsd.defined and r.gt_empty and r.pred_empty
    one = np.zeros((4, 4, 4), np.uint8)
    one[0, 0, 0] = 1
    r = evaluate_case(empty, LabelMask.from_array(one), 1.0, "c")
    assert (r.dice.value, r.nsd.value, r.gt_empty, r.pred_empty) == (0.0, 0.0, True, False)


def test_evaluate_case_mismatch_names_case():
    a = LabelMask.from_array(np.zeros((2, 2, 2), np.uint8))
    b = LabelMask.from_array(np.zeros((2, 2, 3), np.uint8))
    with pytest.raises(ShapeMismatchError) as info:
        evaluate_case(a, b, 1.0, "case7")
    assert info.value.case_id == "case7"


def test_case_result_invariant():
    with pytest.raises(ValueError):
        CaseResult("x", MetricValue.undefined(), MetricValue.undefined(), True, False)


def test_aggregate_three_terms():
    results = [case("a", 0.8), case("b", None), case("c", 0.6)]
    row = aggregate(results, NAN1)
    assert row.n_included == 3 and abs(row.mean_dice_pct - 80.0) < 1e-12
    row = aggregate(results, IGN)
    assert row.n_included == 2 and abs(row.mean_dice_pct - 70.0) < 1e-12
    assert format_pct(aggregate(results, NAN1).mean_dice_pct) == "80.00"


def test_aggregate_all_excluded():
    row = aggregate([case("a", None)], IGN)
    assert row.empty and row.mean_dice_pct is None and row.mean_nsd_pct is None
    with pytest.raises(ValueError):
        aggregate([], NAN1)


def test_sex_split_weighted_mean():
    results, metas = sex_split_corpus()
    for policy in AggregationPolicy:
        row = aggregate(results, policy)
        assert abs(row.mean_dice_pct - 62.14) <= 0.005
        assert format_pct(row.mean_dice_pct) == "62.14"
    rows = {r.group: r for r in subgroup_report(results, metas, SubgroupSpec("sex"))}
    assert rows["male"].n_included == 175 and format_pct(rows["male"].mean_dice_pct) == "64.02"
    assert rows["female"].n_included == 100 and format_pct(rows["female"].mean_dice_pct) == "58.85"
    assert rows["unknown"].n_included == 0


@pytest.mark.parametrize(
    "folds, shown",
    [
        ([54.22, 53.54, 55.18, 43.09, 56.66], "52.54"),
        ([58.62, 54.30, 56.36, 45.40, 56.36], "54.21"),
        ([54.62, 58.08, 54.95, 43.42, 56.15], "53.44"),
        ([57.65, 55.80, 55.39, 43.59, 56.57], "53.80"),
        ([56.86, 51.53, 55.62, 47.35, 55.03], "53.28"),
        ([61.5] * 5, "61.50"),
    ],
)
def test_fold_average_rows(folds, shown):
    assert format_pct(fold_average(folds)) == shown


def test_fold_average_needs_five():
    with pytest.raises(ValueError):
        fold_average([1, 2, 3])


@pytest.mark.parametrize(
    "x, want", [(0.125, 0.13), (-0.125, -0.13), (2.675, 2.68), (52.538, 52.54), (1.004999, 1.0)]
)
def test_round_half_away(x, want):
    assert round_half_away(x, 2) == want


def test_age_bins():
    results = [case("a", 1.0), case("b", 0.5), case("c", 0.5), case("d", 0.9)]
    metas = [
        CaseMeta("a", "male", 12),
        CaseMeta("b", "male", 15),
        CaseMeta("c", "female", 27),
        CaseMeta("d", "female", None),
    ]
    rows = {r.group: r for r in subgroup_report(results, metas, SubgroupSpec("age"))}
    assert rows["[10,20)"].n_included == 2 and abs(rows["[10,20)"].mean_dice_pct - 75.0) < 1e-12
    assert rows["[20,30)"].n_included == 1 and abs(rows["[20,30)"].mean_dice_pct - 50.0) < 1e-12
    assert rows["unknown"].n_included == 1
    assert rows["[0,10)"].n_included == 0 and rows["[0,10)"].mean_dice_pct is None
    assert "[70,80]" in rows


def test_bin_edges_half_open_last_closed():
    spec = SubgroupSpec("age", (0, 10, 20))
    assert spec.bin_of(CaseMeta("a", age_years=10)) == "[10,20]"
    assert spec.bin_of(CaseMeta("a", age_years=20)) == "[10,20]"
    assert spec.bin_of(CaseMeta("a", age_years=9.99)) == "[0,10)"
    assert spec.bin_of(CaseMeta("a", age_years=20.5)) == "unknown"
    tsi = SubgroupSpec("tsi")
    assert tsi.labels() == ["[0,6)", "[6,12)", "[12,24)", "[24,60)", "60+"]
    assert tsi.bin_of(CaseMeta("a", tsi_months=400)) == "60+"
    with pytest.raises(ValueError):
        SubgroupSpec("age", (0, 10, 10))


def test_exclusion_rule_in_subgroups():
    results = [case("a", 0.4), case("b", None)]
    metas = [CaseMeta("a", "male"), CaseMeta("b", "male")]
    excl = {r.group: r for r in subgroup_report(results, metas, SubgroupSpec("sex", exclusion=True))}
    keep = {r.group: r for r in subgroup_report(results, metas, SubgroupSpec("sex", exclusion=False))}
    assert excl["male"].n_included == 1 and abs(excl["male"].mean_dice_pct - 40.0) < 1e-12
    assert keep["male"].n_included == 2 and abs(keep["male"].mean_dice_pct - 70.0) < 1e-12


def test_join_error_lists_cases():
    with pytest.raises(JoinError) as info:
        subgroup_report([case("a", 1.0), case("z", 1.0)], [CaseMeta("a")], SubgroupSpec("sex"))
    assert info.value.missing == ["z"]


result_lists = st.lists(
    st.one_of(st.none(), st.floats(0, 1)), min_size=1, max_size=30
).map(lambda ds: [case(f"c{i:02d}", d) for i, d in enumerate(ds)])


@settings(max_examples=80, deadline=None)
@given(results=result_lists, data=st.data())
def test_policy_properties(results, data):
    perm = data.draw(st.permutations(results))
    for policy in AggregationPolicy:
        assert aggregate(results, policy) == aggregate(perm, policy)
    n1, ig = aggregate(results, NAN1), aggregate(results, IGN)
    if all(r.dice.defined for r in results):
        assert n1 == ig
    elif not ig.empty:
        assert n1.mean_dice_pct >= ig.mean_dice_pct - 1e-9


@settings(max_examples=80, deadline=None)
@given(results=result_lists, data=st.data())
def test_partition_and_weighted_mean(results, data):
    sexes = data.draw(st.lists(st.sampled_from(["male", "female", "unknown"]), min_size=len(results), max_size=len(results)))
    metas = [CaseMeta(r.case_id, s) for r, s in zip(results, sexes)]
    for exclusion in (True, False):
        rows = subgroup_report(results, metas, SubgroupSpec("sex", exclusion=exclusion))
        overall = aggregate(results, IGN if exclusion else NAN1)
        assert sum(r.n_included for r in rows) == overall.n_included
        if not overall.empty:
            weighted = math.fsum(r.n_included * r.mean_dice_pct for r in rows if not r.empty)
            assert abs(weighted / overall.n_included - overall.mean_dice_pct) < 1e-9


def test_results_csv_round_trip(tmp_path):
    results = [case("b", 0.1 + 0.2, 0.7), case("a", None), case("c", 0.0, 0.0, True, False)]
    write_results_csv(results, tmp_path / "r.csv")
    text = (tmp_path / "r.csv").read_text().splitlines()
    assert text[0] == "case_id,dice,nsd,gt_empty,pred_empty"
    assert text[1] == "a,,,true,true"
    back = read_results_csv(tmp_path / "r.csv")
    assert back == sorted(results, key=lambda r: r.case_id)


def test_summary_document_fields(tmp_path):
    row = aggregate([case("a", 0.123456)], NAN1)
    doc = summary_document([row], NAN1, 1.0)
    assert doc["policy"] == "nan_as_one"
    assert doc["tolerance_mm"] == 1.0
    assert doc["preprocessing_order"] == "resample_then_zscore"
    assert "toolkit_version" in doc and "precision_mode" in doc
    assert doc["rows"] == [{"group": "all", "n": 1, "mean_dice_pct": 12.35, "mean_nsd_pct": 12.35}]
    json.dumps(doc)
    write_subgroup_csv([row], tmp_path / "s.csv")
    assert (tmp_path / "s.csv").read_text().splitlines()[1] == "all,1,12.35,12.35"
