"""Synthetic participant cohorts: feature registry, generation, filtering, summaries.

Continuous features are drawn from per-class two-piece normal distributions whose
25/50/75 percentiles equal the reference baseline medians and IQRs. Categorical
features use the reference class-wise proportions (missing values included) where
they exist, and declared defaults otherwise.
"""
from __future__ import annotations

import csv
import json
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy import stats
from scipy.special import ndtri

LABELS = ("MDD", "HC")
Value = float | str | None

# Probability-integral transform constant: the 75th percentile of N(0, 1).
_Z75 = 0.6744897501960817


@dataclass(frozen=True)
class FeatureSpec:
    name: str
    kind: str  # "continuous" | "categorical"
    categories: tuple[str, ...] = ()
    unit: str = ""
    decimals: int = 0
    bounds: tuple[float, float] | None = None
    # category -> reporting group, for features Table-1-style tables aggregate
    groups: tuple[tuple[str, str], ...] = ()
    description: str = ""

    def __post_init__(self):
        if self.kind not in ("continuous", "categorical"):
            raise ValueError(f"{self.name}: unknown kind {self.kind!r}")
        if self.kind == "categorical" and len(self.categories) < 2:
            raise ValueError(f"{self.name}: categorical features need at least 2 categories")

    def group_of(self, category: str) -> str:
        return dict(self.groups).get(category, category)

    def validate(self, value: Value) -> None:
        """Raise ValueError naming this feature if ``value`` lies outside its domain."""
        if value is None:
            return
        if self.kind == "categorical":
            if value not in self.categories:
                raise ValueError(f"{self.name}: {value!r} is not one of {list(self.categories)}")
            return
        if isinstance(value, (bool, str)) or not isinstance(value, (int, float)):
            raise ValueError(f"{self.name}: expected a number, got {value!r}")
        if not math.isfinite(value):
            raise ValueError(f"{self.name}: value must be finite, got {value!r}")
        lo, hi = self.bounds if self.bounds else (-math.inf, math.inf)
        if not lo <= value <= hi:
            raise ValueError(f"{self.name}: {value!r} outside [{lo}, {hi}]")
        if abs(round(value, self.decimals) - value) > 1e-9:
            raise ValueError(f"{self.name}: {value!r} has more than {self.decimals} decimals")

    def to_dict(self) -> dict:
        d = {"name": self.name, "kind": self.kind, "unit": self.unit}
        if self.kind == "categorical":
            d["categories"] = list(self.categories)
        else:
            d["decimals"] = self.decimals
            d["bounds"] = list(self.bounds) if self.bounds else None
        if self.groups:
            d["groups"] = dict(self.groups)
        if self.description:
            d["description"] = self.description
        return d


_HAPPINESS = (
    "extremely happy",
    "very happy",
    "moderately happy",
    "moderately unhappy",
    "very unhappy",
    "extremely unhappy",
)

FEATURES: tuple[FeatureSpec, ...] = (
    FeatureSpec("age", "continuous", unit="years", decimals=0, bounds=(40, 70)),
    FeatureSpec("sex", "categorical", ("female", "male")),
    FeatureSpec(
        "education",
        "categorical",
        ("none", "CSEs", "O-levels", "A-levels", "NVQ/HND/HNC", "other professional", "degree"),
        groups=(
            ("none", "low"),
            ("CSEs", "intermediate"),
            ("O-levels", "intermediate"),
            ("A-levels", "intermediate"),
            ("NVQ/HND/HNC", "intermediate"),
            ("other professional", "intermediate"),
            ("degree", "high"),
        ),
    ),
    FeatureSpec(
        "income",
        "continuous",
        unit="GBP/year",
        decimals=0,
        bounds=(0, 1_000_000),
        description="average total household income before tax",
    ),
    FeatureSpec(
        "employment",
        "categorical",
        (
            "paid employment",
            "self-employed",
            "student",
            "retired",
            "unable to work",
            "unemployed",
            "home or family",
            "unpaid or voluntary work",
            "none of the above",
        ),
        groups=(
            ("paid employment", "employed"),
            ("self-employed", "employed"),
            ("student", "employed"),
            ("retired", "not employed"),
            ("unable to work", "not employed"),
            ("unemployed", "not employed"),
            ("home or family", "not employed"),
            ("unpaid or voluntary work", "other"),
            ("none of the above", "other"),
        ),
    ),
    FeatureSpec("work_hours", "continuous", unit="hours/week", decimals=0, bounds=(1, 100),
                description="length of the working week for the main job"),
    FeatureSpec("bmi", "continuous", unit="kg/m²", decimals=1, bounds=(12, 70)),
    FeatureSpec("sleep_duration", "continuous", unit="hours", decimals=0, bounds=(1, 23)),
    FeatureSpec("sleeplessness", "categorical", ("usually", "sometimes", "never")),
    FeatureSpec(
        "alcohol_frequency",
        "categorical",
        ("daily", "3-4/week", "1-2/week", "1-3/month", "special occasions", "never"),
        groups=(
            ("daily", "usually"),
            ("3-4/week", "usually"),
            ("1-2/week", "sometimes"),
            ("1-3/month", "sometimes"),
            ("special occasions", "sometimes"),
            ("never", "never"),
        ),
    ),
    FeatureSpec("self_harm", "categorical", ("yes", "no", "prefer not to answer")),
    FeatureSpec("suicidal_behaviour", "categorical", ("yes", "no", "prefer not to answer")),
    FeatureSpec("happiness", "categorical", _HAPPINESS),
    FeatureSpec("work_satisfaction", "categorical", _HAPPINESS),
    FeatureSpec("health_satisfaction", "categorical", _HAPPINESS),
    FeatureSpec("family_satisfaction", "categorical", _HAPPINESS),
    FeatureSpec("finance_satisfaction", "categorical", _HAPPINESS),
    FeatureSpec("longstanding_illness", "categorical", ("yes", "no", "do not know")),
    FeatureSpec("hdl", "continuous", unit="mmol/L", decimals=2, bounds=(0.2, 5.0)),
    FeatureSpec("ldl", "continuous", unit="mmol/L", decimals=2, bounds=(0.2, 10.0)),
    FeatureSpec("total_cholesterol", "continuous", unit="mmol/L", decimals=2, bounds=(1.0, 15.0)),
    FeatureSpec("triglycerides", "continuous", unit="mmol/L", decimals=2, bounds=(0.1, 12.0)),
)
REGISTRY: dict[str, FeatureSpec] = {f.name: f for f in FEATURES}
FEATURE_NAMES: tuple[str, ...] = tuple(REGISTRY)
assert len(FEATURES) == 22 and len(REGISTRY) == 22


@dataclass(frozen=True)
class ParticipantRecord:
    id: str
    values: Mapping[str, Value]
    label: str
    comorbid: bool = False

    def __post_init__(self):
        if self.label not in LABELS:
            raise ValueError(f"label must be one of {LABELS}, got {self.label!r}")
        unknown = set(self.values) - set(REGISTRY)
        if unknown:
            raise ValueError(f"unknown features: {sorted(unknown)}")

    def get(self, name: str) -> Value:
        return self.values.get(name)

    @property
    def missing_count(self) -> int:
        return sum(self.values.get(name) is None for name in FEATURE_NAMES)

    @property
    def missing_fraction(self) -> float:
        return self.missing_count / len(FEATURE_NAMES)

    def validate(self) -> None:
        for name, value in self.values.items():
            REGISTRY[name].validate(value)


# --- generation targets -----------------------------------------------------
# Continuous: (q1, median, q3) per class. Age, BMI and sleep come from the
# reference baseline table; the rest are declared raw-unit defaults.
_QUARTILES: dict[str, dict[str, tuple[float, float, float]]] = {
    "age": {"HC": (53, 61, 66), "MDD": (50, 56, 63)},
    "bmi": {"HC": (24.29, 26.36, 30.18), "MDD": (24.13, 25.97, 30.30)},
    "sleep_duration": {"HC": (6, 7, 8), "MDD": (6, 7, 8)},
    "work_hours": {"HC": (30, 38, 42), "MDD": (28, 37, 41)},
    "hdl": {"HC": (1.19, 1.42, 1.71), "MDD": (1.18, 1.41, 1.70)},
    "ldl": {"HC": (2.96, 3.52, 4.12), "MDD": (2.95, 3.51, 4.11)},
    "total_cholesterol": {"HC": (4.90, 5.62, 6.36), "MDD": (4.88, 5.60, 6.34)},
    "triglycerides": {"HC": (1.04, 1.48, 2.13), "MDD": (1.04, 1.48, 2.12)},
}
_CONTINUOUS_MISSING = {"bmi": 0.006, "sleep_duration": 0.007, "hdl": 0.08, "ldl": 0.07,
                       "total_cholesterol": 0.065, "triglycerides": 0.066}

# Categorical (or grouped) proportions per class; "" is the missing share.
_PROPORTIONS: dict[str, dict[str, dict[str, float]]] = {
    "sex": {
        "HC": {"female": 53.61, "male": 46.39},
        "MDD": {"female": 59.83, "male": 40.17},
    },
    "sleeplessness": {
        "HC": {"usually": 27.96, "sometimes": 48.31, "never": 23.40, "": 0.21},
        "MDD": {"usually": 33.82, "sometimes": 47.83, "never": 18.32, "": 0.03},
    },
    "alcohol_frequency": {  # grouped
        "HC": {"usually": 22.31, "sometimes": 67.50, "never": 10.14, "": 0.05},
        "MDD": {"usually": 21.46, "sometimes": 68.71, "never": 9.58, "": 0.25},
    },
    "self_harm": {
        "HC": {"yes": 1.49, "no": 29.33, "prefer not to answer": 0.12, "": 69.06},
        "MDD": {"yes": 4.38, "no": 59.03, "prefer not to answer": 0.01, "": 36.58},
    },
    "education": {  # grouped
        "HC": {"low": 19.31, "intermediate": 45.08, "high": 33.19, "": 2.42},
        "MDD": {"low": 18.08, "intermediate": 45.06, "high": 34.68, "": 2.18},
    },
    "income": {  # bands of the continuous value
        "HC": {"low": 17.24, "medium": 63.50, "high": 4.89, "": 14.37},
        "MDD": {"low": 15.32, "medium": 62.95, "high": 5.53, "": 16.31},
    },
    "employment": {  # grouped
        "HC": {"employed": 51.88, "not employed": 44.96, "other": 2.37, "": 0.79},
        "MDD": {"employed": 49.36, "not employed": 47.80, "other": 2.01, "": 0.83},
    },
    # Declared defaults: no reference marginals.
    "longstanding_illness": {
        "HC": {"yes": 30.0, "no": 67.0, "do not know": 2.0, "": 1.0},
        "MDD": {"yes": 45.0, "no": 52.0, "do not know": 2.0, "": 1.0},
    },
    "suicidal_behaviour": {  # conditional on the mental-health questionnaire being answered
        "HC": {"yes": 3.0, "no": 96.0, "prefer not to answer": 1.0},
        "MDD": {"yes": 12.0, "no": 87.0, "prefer not to answer": 1.0},
    },
}
_WELLBEING = {
    "HC": dict(zip(_HAPPINESS, (8.0, 35.0, 45.0, 8.0, 3.0, 1.0))),
    "MDD": dict(zip(_HAPPINESS, (3.0, 18.0, 45.0, 20.0, 9.0, 5.0))),
}
_WELLBEING_MISSING = 0.08
_WITHIN_GROUP = {
    "alcohol_frequency": {
        "usually": {"daily": 0.45, "3-4/week": 0.55},
        "sometimes": {"1-2/week": 0.45, "1-3/month": 0.20, "special occasions": 0.35},
        "never": {"never": 1.0},
    },
    "education": {
        "low": {"none": 1.0},
        "intermediate": {"CSEs": 0.10, "O-levels": 0.35, "A-levels": 0.25,
                         "NVQ/HND/HNC": 0.15, "other professional": 0.15},
        "high": {"degree": 1.0},
    },
    "employment": {
        "employed": {"paid employment": 0.85, "self-employed": 0.12, "student": 0.03},
        "not employed": {"retired": 0.75, "unable to work": 0.10, "unemployed": 0.05,
                         "home or family": 0.10},
        "other": {"unpaid or voluntary work": 0.6, "none of the above": 0.4},
    },
}
INCOME_BANDS = {"low": (6_000, 17_000), "medium": (18_000, 100_000), "high": (101_000, 200_000)}
SPARSE_RATE = 0.03  # records with a block of extra missing features
SPARSE_BLOCK = 8
COMORBID_RATE = 0.08
_N_UNIFORMS = 96


def _pick(u: float, table: Mapping[str, float]) -> str:
    """Inverse-CDF draw from an (unnormalized) categorical table, in insertion order."""
    total = sum(table.values())
    acc = 0.0
    for key, weight in table.items():
        acc += weight / total
        if u < acc:
            return key
    return key


def _split_normal(u: float, q1: float, med: float, q3: float) -> float:
    """Two-piece normal with quartiles exactly (q1, med, q3)."""
    z = float(ndtri(u))
    return med + z * ((med - q1) if z < 0 else (q3 - med)) / _Z75


def _clip_round(spec: FeatureSpec, x: float) -> float:
    lo, hi = spec.bounds
    return float(round(min(max(x, lo), hi), spec.decimals))


def _generate_one(index: int, prevalence: float, seed: int, exclude_comorbid: bool) -> ParticipantRecord:
    ss = np.random.SeedSequence(seed, spawn_key=(index,))
    u = iter(np.random.Generator(np.random.PCG64(ss)).random(_N_UNIFORMS).tolist())
    label = "MDD" if next(u) < prevalence else "HC"
    comorbid = (not exclude_comorbid) and next(u) < COMORBID_RATE
    v: dict[str, Value] = {}

    v["age"] = _clip_round(REGISTRY["age"], _split_normal(next(u), *_QUARTILES["age"][label]))
    v["sex"] = _pick(next(u), _PROPORTIONS["sex"][label])

    for name in ("education", "employment"):
        group = _pick(next(u), _PROPORTIONS[name][label])
        v[name] = _pick(next(u), _WITHIN_GROUP[name][group]) if group else None
    band = _pick(next(u), _PROPORTIONS["income"][label])
    if band:
        lo, hi = INCOME_BANDS[band]
        x = math.exp(math.log(lo) + next(u) * (math.log(hi) - math.log(lo)))
        v["income"] = float(min(max(round(x, -3), lo), hi))
    else:
        next(u)
        v["income"] = None

    employed = v["employment"] is not None and REGISTRY["employment"].group_of(v["employment"]) == "employed"
    x = _clip_round(REGISTRY["work_hours"], _split_normal(next(u), *_QUARTILES["work_hours"][label]))
    v["work_hours"] = x if employed else None

    for name in ("bmi", "sleep_duration", "hdl", "ldl", "total_cholesterol", "triglycerides"):
        x = _clip_round(REGISTRY[name], _split_normal(next(u), *_QUARTILES[name][label]))
        v[name] = None if next(u) < _CONTINUOUS_MISSING[name] else x

    v["sleeplessness"] = _pick(next(u), _PROPORTIONS["sleeplessness"][label]) or None
    group = _pick(next(u), _PROPORTIONS["alcohol_frequency"][label])
    v["alcohol_frequency"] = _pick(next(u), _WITHIN_GROUP["alcohol_frequency"][group]) if group else None
    v["self_harm"] = _pick(next(u), _PROPORTIONS["self_harm"][label]) or None
    # Same questionnaire: suicidal behaviour is answered iff self-harm is.
    x = _pick(next(u), _PROPORTIONS["suicidal_behaviour"][label])
    v["suicidal_behaviour"] = x if v["self_harm"] is not None else None

    for name in ("happiness", "work_satisfaction", "health_satisfaction",
                 "family_satisfaction", "finance_satisfaction"):
        x = _pick(next(u), _WELLBEING[label])
        missing = next(u) < _WELLBEING_MISSING or (name == "work_satisfaction" and not employed)
        v[name] = None if missing else x
    v["longstanding_illness"] = _pick(next(u), _PROPORTIONS["longstanding_illness"][label]) or None

    if next(u) < SPARSE_RATE:
        keys = [next(u) for _ in FEATURE_NAMES]
        for i in np.argsort(keys, kind="stable")[:SPARSE_BLOCK]:
            v[FEATURE_NAMES[i]] = None

    values = {name: v[name] for name in FEATURE_NAMES}
    return ParticipantRecord(id=f"P{index:06d}", values=values, label=label, comorbid=comorbid)


def generate_cohort(n: int, prevalence: float, seed: int, *,
                    exclude_comorbid: bool = True) -> list[ParticipantRecord]:
    """Generate ``n`` synthetic participants.

    Record ``i`` depends only on ``(seed, i, prevalence)``, so cohorts are prefix-stable
    and generation can be split across workers by index. With ``exclude_comorbid``
    (the default) no anxiety/bipolar comorbidity is ever generated; otherwise a
    declared fraction of records carries ``comorbid=True`` for a later exclusion step.
    """
    if not (isinstance(prevalence, (int, float)) and 0 < prevalence < 1):
        raise ValueError(f"prevalence must lie in (0, 1), got {prevalence!r}")
    if n < 100:
        raise ValueError(f"n must be at least 100, got {n}")
    return [_generate_one(i, float(prevalence), seed, exclude_comorbid) for i in range(n)]


def filter_missing(records: Iterable[ParticipantRecord], threshold: float = 0.30
                   ) -> tuple[list[ParticipantRecord], list[ParticipantRecord]]:
    """Split records into (kept, excluded); a record is excluded iff its missing fraction > threshold."""
    if not 0 < threshold <= 1:
        raise ValueError(f"threshold must lie in (0, 1], got {threshold!r}")
    kept, excluded = [], []
    for r in records:
        (excluded if r.missing_fraction > threshold else kept).append(r)
    return kept, excluded


def exclude_comorbid(records: Iterable[ParticipantRecord]) -> list[ParticipantRecord]:
    return [r for r in records if not r.comorbid]


# --- summaries --------------------------------------------------------------

@dataclass
class ContinuousStats:
    n: int
    median: float | None
    q1: float | None
    q3: float | None
    missing_fraction: float


@dataclass
class CategoricalStats:
    n: int
    proportions: dict[str, float]  # includes "missing"
    grouped: dict[str, float] | None = None


@dataclass
class FeatureSummary:
    name: str
    kind: str
    by_class: dict[str, ContinuousStats | CategoricalStats]
    p_value: float | None
    note: str = ""


@dataclass
class CohortSummary:
    n_total: int
    n_mdd: int
    n_hc: int
    features: dict[str, FeatureSummary] = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = {"n_total": self.n_total, "n_mdd": self.n_mdd, "n_hc": self.n_hc, "features": {}}
        for name, fs in self.features.items():
            out["features"][name] = {
                "kind": fs.kind,
                "p_value": fs.p_value,
                "note": fs.note,
                "by_class": {k: vars(s).copy() for k, s in fs.by_class.items()},
            }
        return out


def quartiles(values: Sequence[float]) -> tuple[float, float, float]:
    """(q1, median, q3) with linear interpolation between order statistics."""
    q1, med, q3 = np.percentile(np.asarray(values, dtype=float), [25, 50, 75], method="linear")
    return float(q1), float(med), float(q3)


def _continuous_stats(vals: list[Value]) -> ContinuousStats:
    present = [float(x) for x in vals if x is not None]
    frac = 1 - len(present) / len(vals) if vals else 0.0
    if not present:
        return ContinuousStats(0, None, None, None, frac)
    q1, med, q3 = quartiles(present)
    return ContinuousStats(len(present), med, q1, q3, frac)


def _categorical_stats(spec: FeatureSpec, vals: list[Value]) -> CategoricalStats:
    n = len(vals)
    counts = Counter("missing" if x is None else x for x in vals)
    props = {c: counts.get(c, 0) / n for c in spec.categories} if n else {}
    if n:
        props["missing"] = counts.get("missing", 0) / n
    grouped = None
    if spec.groups and n:
        grouped = {}
        for c in spec.categories:
            g = spec.group_of(c)
            grouped[g] = grouped.get(g, 0.0) + props[c]
        grouped["missing"] = props["missing"]
    return CategoricalStats(n, props, grouped)


def _p_continuous(a: list[float], b: list[float]) -> tuple[float | None, str]:
    if not a or not b:
        return None, "unavailable: empty group"
    if len(set(a) | set(b)) == 1:
        return 1.0, "degenerate: all values identical"
    return float(stats.mannwhitneyu(a, b, alternative="two-sided").pvalue), ""


def _p_categorical(a: list[str], b: list[str], categories: Sequence[str]) -> tuple[float | None, str]:
    if not a or not b:
        return None, "unavailable: empty group"
    table = np.array([[Counter(a)[c] for c in categories], [Counter(b)[c] for c in categories]])
    table = table[:, table.sum(axis=0) > 0]
    if table.shape[1] < 2:
        return 1.0, "degenerate: a single observed category"
    return float(stats.chi2_contingency(table).pvalue), ""


def summarize(records: Sequence[ParticipantRecord]) -> CohortSummary:
    """Per-class medians/IQRs and proportions, with rank-sum / chi-square p-values."""
    by_label = {lab: [r for r in records if r.label == lab] for lab in LABELS}
    summary = CohortSummary(len(records), len(by_label["MDD"]), len(by_label["HC"]))
    two_classes = all(by_label[lab] for lab in LABELS)
    for spec in FEATURES:
        cols = {lab: [r.get(spec.name) for r in rs] for lab, rs in by_label.items()}
        if spec.kind == "continuous":
            by_class = {lab: _continuous_stats(cols[lab]) for lab in LABELS}
            present = {lab: [float(x) for x in cols[lab] if x is not None] for lab in LABELS}
            p, note = _p_continuous(present["MDD"], present["HC"])
        else:
            by_class = {lab: _categorical_stats(spec, cols[lab]) for lab in LABELS}
            present = {lab: [x for x in cols[lab] if x is not None] for lab in LABELS}
            p, note = _p_categorical(present["MDD"], present["HC"], spec.categories)
        if not two_classes:
            p, note = None, "unavailable: single-class cohort"
        summary.features[spec.name] = FeatureSummary(spec.name, spec.kind, by_class, p, note)
    return summary


# --- persistence ------------------------------------------------------------

def _format_value(spec: FeatureSpec, value: Value) -> str:
    if value is None:
        return ""
    if spec.kind == "categorical":
        return str(value)
    return f"{value:.{spec.decimals}f}"


def write_csv(records: Iterable[ParticipantRecord], path: str | Path) -> None:
    """Columns: ``id``, the registry features in order, then ``label``; missing is empty."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", *FEATURE_NAMES, "label"])
        for r in records:
            w.writerow([r.id, *(_format_value(REGISTRY[n], r.get(n)) for n in FEATURE_NAMES), r.label])


def read_csv(path: str | Path) -> list[ParticipantRecord]:
    records = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        expected = ["id", *FEATURE_NAMES, "label"]
        if reader.fieldnames != expected:
            raise ValueError(f"{path}: unexpected header {reader.fieldnames}")
        for row in reader:
            values: dict[str, Value] = {}
            for name in FEATURE_NAMES:
                raw = row[name]
                if raw == "":
                    values[name] = None
                elif REGISTRY[name].kind == "continuous":
                    values[name] = float(raw)
                else:
                    values[name] = raw
            rec = ParticipantRecord(row["id"], values, row["label"])
            rec.validate()
            records.append(rec)
    return records


def data_dictionary() -> dict:
    return {
        "version": 1,
        "features": [f.to_dict() for f in FEATURES],
        "notes": [
            "Lipids are in raw mmol/L units; the reference baseline lipid columns are "
            "standardized and not usable as ordered quartiles.",
            "work_hours and work_satisfaction are only recorded for employed participants.",
            "suicidal_behaviour is recorded iff self_harm is (same questionnaire).",
            "Wellbeing, satisfaction, illness, work-hours and lipid distributions are declared "
            "defaults, not reference marginals.",
        ],
    }


def write_data_dictionary(path: str | Path) -> None:
    Path(path).write_text(json.dumps(data_dictionary(), indent=2, ensure_ascii=False) + "\n",
                          encoding="utf-8")
