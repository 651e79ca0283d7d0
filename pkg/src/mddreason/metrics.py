"""Diagnostic metrics, ROC/AUC, DeLong comparison, text overlap and token statistics.

Rates that cannot be computed (zero denominator) are reported as ``None``,
never NaN.
"""
from __future__ import annotations

import csv
import math
from collections import Counter
from dataclasses import asdict, dataclass
from fractions import Fraction
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.stats import rankdata

from .tokenizer import tokenize


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.tn, self.fn) < 0:
            raise ValueError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    @classmethod
    def from_predictions(cls, truth: Sequence[str], predicted: Sequence[str],
                         positive: str = "MDD") -> ConfusionCounts:
        """Anything other than the positive label (including unparseable) counts as negative."""
        if len(truth) != len(predicted):
            raise ValueError("truth and predictions differ in length")
        c = Counter((t == positive, p == positive) for t, p in zip(truth, predicted))
        return cls(c[True, True], c[False, True], c[False, False], c[True, False])


def _rate(num: float, den: float) -> float | None:
    return None if den == 0 else num / den


def f1_from(ppv: float | None, sens: float | None) -> float | None:
    if ppv is None or sens is None:
        return None
    return 0.0 if ppv + sens == 0 else 2 * ppv * sens / (ppv + sens)


def classification_metrics(counts: ConfusionCounts) -> dict[str, float | None]:
    tp, fp, tn, fn = counts.tp, counts.fp, counts.tn, counts.fn
    ppv, sens = _rate(tp, tp + fp), _rate(tp, tp + fn)
    return {"ACC": _rate(tp + tn, counts.total), "F1": f1_from(ppv, sens),
            "SPE": _rate(tn, tn + fp), "SENS": sens, "PPV": ppv, "NPV": _rate(tn, tn + fn)}


# --- ROC / AUC ---------------------------------------------------------------

@dataclass(frozen=True)
class RocCurve:
    fpr: tuple[float, ...]
    tpr: tuple[float, ...]
    thresholds: tuple[float, ...]  # points[k] classifies score >= thresholds[k] as positive
    auc: float


def _split(labels, scores) -> tuple[np.ndarray, np.ndarray]:
    y = np.asarray(labels).astype(bool)
    s = np.asarray(scores, dtype=np.float64)
    if y.shape != s.shape or y.ndim != 1:
        raise ValueError("labels and scores must be 1-D and equally long")
    if y.all() or not y.any():
        raise ValueError("both classes must be present")
    return s[y], s[~y]


def auc_score(labels, scores) -> float:
    """Mann-Whitney AUC via midranks; ties between classes count one half."""
    pos, neg = _split(labels, scores)
    ranks = rankdata(np.concatenate([pos, neg]))
    m, n = len(pos), len(neg)
    return float((ranks[:m].sum() - m * (m + 1) / 2) / (m * n))


def roc_auc(labels, scores) -> RocCurve:
    pos, neg = _split(labels, scores)
    thresholds = np.unique(np.concatenate([pos, neg]))[::-1]
    tpr = [0.0] + [float((pos >= t).mean()) for t in thresholds]
    fpr = [0.0] + [float((neg >= t).mean()) for t in thresholds]
    return RocCurve(tuple(fpr), tuple(tpr), (math.inf,) + tuple(thresholds.tolist()),
                    auc_score(labels, scores))


def write_roc_csv(curve: RocCurve, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["threshold", "fpr", "tpr"])
        for t, f, p in zip(curve.thresholds, curve.fpr, curve.tpr):
            w.writerow([t, f"{f:.6f}", f"{p:.6f}"])


@dataclass(frozen=True)
class DelongResult:
    auc_a: float
    auc_b: float
    var_diff: float
    z: float
    p_value: float

    def to_dict(self) -> dict:
        return asdict(self)


def _placements(pos: np.ndarray, neg: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Structural components: each positive's share of negatives it beats, and
    each negative's share of positives that beat it (ties count one half)."""
    m, n = len(pos), len(neg)
    tz = rankdata(np.concatenate([pos, neg]))
    v10 = (tz[:m] - rankdata(pos)) / n
    v01 = 1.0 - (tz[m:] - rankdata(neg)) / m
    return v10, v01


def delong_test(labels, scores_a, scores_b) -> DelongResult:
    pos_a, neg_a = _split(labels, scores_a)
    pos_b, neg_b = _split(labels, scores_b)
    m, n = len(pos_a), len(neg_a)
    v10a, v01a = _placements(pos_a, neg_a)
    v10b, v01b = _placements(pos_b, neg_b)
    auc_a, auc_b = float(v10a.mean()), float(v10b.mean())
    s10 = np.cov(np.vstack([v10a, v10b])) if m > 1 else np.zeros((2, 2))
    s01 = np.cov(np.vstack([v01a, v01b])) if n > 1 else np.zeros((2, 2))
    s = s10 / m + s01 / n
    var = float(s[0, 0] + s[1, 1] - 2 * s[0, 1])
    diff = auc_a - auc_b
    if var <= 0 or diff == 0:
        if diff == 0:
            return DelongResult(auc_a, auc_b, max(var, 0.0), 0.0, 1.0)
        return DelongResult(auc_a, auc_b, 0.0, math.copysign(math.inf, diff), 0.0)
    z = diff / math.sqrt(var)
    return DelongResult(auc_a, auc_b, var, z, math.erfc(abs(z) / math.sqrt(2)))


# --- text overlap ----------------------------------------------------------------

Tokenizer = Callable[[str], list[str]]


@dataclass(frozen=True)
class TextOverlapScores:
    bleu: float
    rouge_l: float
    meteor: float
    avg_tokens: float

    def to_dict(self) -> dict:
        return asdict(self)


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def modified_precision(hypothesis: Sequence[str], references: Sequence[Sequence[str]], n: int) -> Fraction:
    """Clipped n-gram precision: each hypothesis n-gram counts at most as often
    as it appears in any single reference."""
    hyp = _ngrams(hypothesis, n)
    total = sum(hyp.values())
    if total == 0:
        return Fraction(0)
    max_ref: Counter = Counter()
    for ref in references:
        for gram, c in _ngrams(ref, n).items():
            max_ref[gram] = max(max_ref[gram], c)
    return Fraction(sum(min(c, max_ref[g]) for g, c in hyp.items()), total)


def bleu(hypothesis: Sequence[str], references: Sequence[Sequence[str]], max_order: int = 4) -> float:
    """Sentence BLEU with uniform weights and brevity penalty.

    The order is capped at the hypothesis length so that short exact matches
    score 1 rather than 0.
    """
    c = len(hypothesis)
    if c == 0:
        return 0.0
    order = min(max_order, c)
    precisions = [modified_precision(hypothesis, references, n) for n in range(1, order + 1)]
    if min(precisions) == 0:
        return 0.0
    log_p = sum(math.log(p) for p in precisions) / order
    r = min((abs(len(ref) - c), len(ref)) for ref in references)[1]
    bp = 1.0 if c > r else math.exp(1 - r / c)
    return min(1.0, bp * math.exp(log_p))


def _lcs(a: Sequence[str], b: Sequence[str]) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(hypothesis: Sequence[str], references: Sequence[Sequence[str]]) -> float:
    best = 0.0
    for ref in references:
        lcs = _lcs(hypothesis, ref)
        if lcs:
            p, r = lcs / len(hypothesis), lcs / len(ref)
            best = max(best, 2 * p * r / (p + r))
    return best


def _align(hyp: Sequence[str], ref: Sequence[str]) -> list[tuple[int, int]]:
    used, pairs = set(), []
    for i, w in enumerate(hyp):
        for j, v in enumerate(ref):
            if j not in used and v == w:
                used.add(j)
                pairs.append((i, j))
                break
    return pairs


def meteor(hypothesis: Sequence[str], references: Sequence[Sequence[str]],
           alpha: float = 0.9, gamma: float = 0.5, beta: float = 3.0) -> float:
    """Exact-match METEOR-style score: recall-weighted unigram F-mean times a
    fragmentation penalty. No stemming or synonym matching."""
    best = 0.0
    for ref in references:
        pairs = _align(hypothesis, ref)
        m = len(pairs)
        if m == 0:
            continue
        p, r = m / len(hypothesis), m / len(ref)
        fmean = p * r / (alpha * p + (1 - alpha) * r)
        chunks = 1 + sum(1 for (i0, j0), (i1, j1) in zip(pairs, pairs[1:]) if not (i1 == i0 + 1 and j1 == j0 + 1))
        best = max(best, fmean * (1 - gamma * (chunks / m) ** beta))
    return best


def text_overlap(hypothesis: str, references: Sequence[str], tokenizer: Tokenizer = tokenize) -> TextOverlapScores:
    if not references:
        raise ValueError("at least one reference is required")
    hyp = tokenizer(hypothesis)
    refs = [tokenizer(r) for r in references]
    if not hyp:
        return TextOverlapScores(0.0, 0.0, 0.0, 0.0)
    return TextOverlapScores(bleu(hyp, refs), rouge_l(hyp, refs), meteor(hyp, refs), float(len(hyp)))


def corpus_text_overlap(hypotheses: Sequence[str], references: Sequence[Sequence[str]],
                        tokenizer: Tokenizer = tokenize) -> TextOverlapScores | None:
    """Mean of per-pair scores."""
    if not hypotheses:
        return None
    scores = [text_overlap(h, r, tokenizer) for h, r in zip(hypotheses, references)]
    return TextOverlapScores(*(float(np.mean([getattr(s, f) for s in scores]))
                               for f in ("bleu", "rouge_l", "meteor", "avg_tokens")))


# --- token statistics ------------------------------------------------------------

def mean_tokens(outputs: Sequence[str], tokenizer: Tokenizer = tokenize) -> float | None:
    if not outputs:
        return None
    return float(np.mean([len(tokenizer(o)) for o in outputs]))


def token_stats(outputs_by_tier: Mapping[str, Sequence[str]],
                tokenizer: Tokenizer = tokenize) -> dict[str, float | None]:
    return {tier: mean_tokens(outs, tokenizer) for tier, outs in outputs_by_tier.items()}


# --- report schemas ---------------------------------------------------------------

TABLE2_COLUMNS = ("ACC", "F1", "AUC", "SPE", "SENS", "PPV", "NPV")
TABLE3_COLUMNS = ("Accuracy", "F1-Score", "Average Tokens")


def table2_row(truth: Sequence[str], predicted: Sequence[str], scores: Sequence[float] | None = None
               ) -> dict[str, float | None]:
    row = classification_metrics(ConfusionCounts.from_predictions(truth, predicted))
    labels = [t == "MDD" for t in truth]
    row["AUC"] = auc_score(labels, scores) if scores is not None and 0 < sum(labels) < len(labels) else None
    return {k: row[k] for k in TABLE2_COLUMNS}


def table3_row(truth: Sequence[str], predicted: Sequence[str], outputs: Sequence[str],
               tokenizer: Tokenizer = tokenize) -> dict[str, float | None]:
    m = classification_metrics(ConfusionCounts.from_predictions(truth, predicted))
    return {"Accuracy": m["ACC"], "F1-Score": m["F1"], "Average Tokens": mean_tokens(outputs, tokenizer)}
