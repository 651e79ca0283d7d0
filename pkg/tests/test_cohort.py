import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mddreason import cohort
from mddreason.cohort import FEATURE_NAMES, ParticipantRecord


def _complete_values():
    values = {}
    for r in cohort.generate_cohort(100, 0.5, seed=4):
        for name, v in r.values.items():
            if v is not None:
                values.setdefault(name, v)
    assert len(values) == 22
    return values


def _record_missing_exactly(k):
    values = _complete_values()
    for name in FEATURE_NAMES[:k]:
        values[name] = None
    return ParticipantRecord(f"k{k}", values, "HC")


def test_generation_is_deterministic():
    a = cohort.generate_cohort(100, 0.5, seed=1)
    b = cohort.generate_cohort(100, 0.5, seed=1)
    assert a == b
    assert a != cohort.generate_cohort(100, 0.5, seed=2)


def test_csv_round_trip_is_byte_identical(tmp_path):
    records = cohort.generate_cohort(100, 0.5, seed=1)
    cohort.write_csv(records, tmp_path / "a.csv")
    cohort.write_csv(cohort.generate_cohort(100, 0.5, seed=1), tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    back = cohort.read_csv(tmp_path / "a.csv")
    assert [r.id for r in back] == [r.id for r in records]
    assert [r.label for r in back] == [r.label for r in records]
    header = (tmp_path / "a.csv").read_text().splitlines()[0].split(",")
    assert header[1:] == list(FEATURE_NAMES) + ["label"]


@pytest.mark.parametrize("prevalence", [0.0, 1.0, 1.5, -0.1])
def test_invalid_prevalence_rejected(prevalence):
    with pytest.raises(ValueError, match="prevalence"):
        cohort.generate_cohort(10, prevalence, seed=0)


def test_values_stay_in_domain():
    for r in cohort.generate_cohort(500, 0.3, seed=5):
        r.validate()


@pytest.mark.parametrize("k, kept", [(0, True), (6, True), (7, False), (22, False)])
def test_missingness_boundary(k, kept):
    r = _record_missing_exactly(k)
    assert r.missing_count == k
    k_out, x_out = cohort.filter_missing([r], 0.30)
    assert (k_out == [r]) is kept and (x_out == [r]) is (not kept)


def test_fraction_equal_to_threshold_is_kept():
    r = _record_missing_exactly(6)
    kept, excluded = cohort.filter_missing([r], 6 / 22)
    assert kept == [r] and excluded == []


def test_filter_empty_input():
    assert cohort.filter_missing([]) == ([], [])


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.05, 0.95))
def test_filter_partitions_in_order(seed, threshold):
    records = cohort.generate_cohort(100, 0.3, seed=seed)
    kept, excluded = cohort.filter_missing(records, threshold)
    assert len(kept) + len(excluded) == len(records)
    assert {r.id for r in kept}.isdisjoint(r.id for r in excluded)
    order = {r.id: i for i, r in enumerate(records)}
    assert [order[r.id] for r in kept] == sorted(order[r.id] for r in kept)
    assert all(r.missing_fraction <= threshold for r in kept)
    assert all(r.missing_fraction > threshold for r in excluded)


def test_quartiles_linear_interpolation():
    assert cohort.quartiles([1, 2, 3, 4, 5]) == (2.0, 3.0, 4.0)
    assert cohort.quartiles([1, 2, 3, 4]) == (1.75, 2.5, 3.25)


def test_summary_closure_and_partition():
    records = cohort.generate_cohort(2000, 0.2, seed=9)
    s = cohort.summarize(records)
    d = s.to_dict()
    assert d["n_total"] == d["n_mdd"] + d["n_hc"] == 2000
    assert sorted(d["features"]) == sorted(FEATURE_NAMES)
    json.dumps(d)  # serializable


def test_summary_single_class_has_no_p_values():
    records = [r for r in cohort.generate_cohort(200, 0.5, seed=9) if r.label == "HC"]
    d = cohort.summarize(records).to_dict()
    assert all(f["p_value"] is None for f in d["features"].values())


def test_identical_groups_give_p_value_one():
    values = _complete_values()
    records = [ParticipantRecord(f"r{i}", values, "MDD" if i % 2 else "HC") for i in range(20)]
    d = cohort.summarize(records).to_dict()
    for f in d["features"].values():
        assert f["p_value"] is None or f["p_value"] == pytest.approx(1.0)


def test_comorbid_exclusion_flag():
    everyone = cohort.generate_cohort(3000, 0.2, seed=4, exclude_comorbid=False)
    assert any(r.comorbid for r in everyone)
    assert not any(r.comorbid for r in cohort.generate_cohort(3000, 0.2, seed=4))
    assert all(not r.comorbid for r in cohort.exclude_comorbid(everyone))


def test_data_dictionary_lists_every_feature(tmp_path):
    cohort.write_data_dictionary(tmp_path / "dd.json")
    d = json.loads((tmp_path / "dd.json").read_text())
    assert [f["name"] for f in d["features"]] == list(FEATURE_NAMES)


def test_large_cohort_marginals():
    records = cohort.generate_cohort(20_000, 9755 / 208406, seed=7)
    ages = [r.get("age") for r in records if r.label == "HC" and r.get("age") is not None]
    assert 60 <= np.median(ages) <= 62
    assert abs(np.mean([r.label == "MDD" for r in records]) - 0.0468) <= 0.005
