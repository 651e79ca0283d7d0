"""Synthetic diagnosis task used to train and evaluate the toy policy.

Labels come from a fixed integer-weight rule over a handful of discretized
features, so the task is linearly separable in the prompt bag-of-tokens and
a log-linear policy can solve it exactly.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, replace
from typing import Iterable, Mapping, Sequence

import numpy as np

from .answers import extract_answer, is_well_formed
from .cohort import ParticipantRecord, Value, filter_missing, generate_cohort
from .grpo import GrpoConfig, RlTask, decode_output, train_rl
from .narrative import parse_narrative
from .policy import PolicyParams, TokenSeq, batch_log_probs, sample_batch, train_sft
from .tokenizer import Vocab

_UNHAPPY = {"moderately unhappy", "very unhappy", "extremely unhappy"}
RISK_THRESHOLD = 3  # MDD iff score >= threshold


def discretize(values: Mapping[str, Value]) -> dict[str, str]:
    """Map raw feature values to the coarse levels the rule and prompts use."""
    def get(name):
        return values.get(name)

    age = get("age")
    happy = get("happiness")
    hsat = get("health_satisfaction")
    return {
        "age": "na" if age is None else "young" if age < 50 else "mid" if age < 60 else "old",
        "sex": {"female": "f", "male": "m"}.get(get("sex"), "na"),
        "sleep": get("sleeplessness") or "na",
        "harm": {"yes": "yes", "no": "no"}.get(get("self_harm"), "na"),
        "happy": "na" if happy is None else "low" if happy in _UNHAPPY
        else "mid" if happy == "moderately happy" else "high",
        "hsat": "na" if hsat is None else "low" if hsat in _UNHAPPY else "ok",
        "ill": {"yes": "yes", "no": "no"}.get(get("longstanding_illness"), "na"),
        "alc": {"daily": "often", "3-4/week": "often", "1-2/week": "some", "1-3/month": "some",
                "special occasions": "some", "never": "never"}.get(get("alcohol_frequency"), "na"),
    }


# (feature, level) -> weight; everything else weighs 0. Alcohol is a distractor.
RULE_WEIGHTS: dict[tuple[str, str], int] = {
    ("sleep", "usually"): 2, ("sleep", "sometimes"): 1,
    ("harm", "yes"): 2,
    ("happy", "low"): 2, ("happy", "mid"): 1,
    ("hsat", "low"): 1,
    ("ill", "yes"): 1,
    ("age", "young"): 1,
    ("sex", "f"): 1,
}

FINDING_TEXT: dict[tuple[str, str], str] = {
    ("sleep", "usually"): "frequent sleeplessness",
    ("sleep", "sometimes"): "occasional sleeplessness",
    ("harm", "yes"): "a history of self-harm",
    ("happy", "low"): "low general happiness",
    ("happy", "mid"): "only moderate happiness",
    ("hsat", "low"): "dissatisfaction with health",
    ("ill", "yes"): "a long-standing illness",
    ("age", "young"): "age under 50",
    ("sex", "f"): "female sex",
}


def risk_factors(values: Mapping[str, Value]) -> list[tuple[str, int]]:
    levels = discretize(values)
    return [(FINDING_TEXT[k], w) for k, w in RULE_WEIGHTS.items() if levels.get(k[0]) == k[1]]


def risk_score(values: Mapping[str, Value]) -> int:
    return sum(w for _, w in risk_factors(values))


def toy_label(values: Mapping[str, Value]) -> str:
    return "MDD" if risk_score(values) >= RISK_THRESHOLD else "HC"


# --- prompts, vocabulary and corpora ------------------------------------------

FEATURE_LEVELS: dict[str, tuple[str, ...]] = {
    "age": ("young", "mid", "old", "na"),
    "sex": ("f", "m", "na"),
    "sleep": ("usually", "sometimes", "never", "na"),
    "harm": ("yes", "no", "na"),
    "happy": ("low", "mid", "high", "na"),
    "hsat": ("low", "ok", "na"),
    "ill": ("yes", "no", "na"),
    "alc": ("often", "some", "never", "na"),
}
EOS = "<eos>"
RESPONSE_TOKENS = ("<think>", "risk", "high", "low", "</think>", "<answer>", "MDD", "HC", "</answer>", EOS)
MAX_RESPONSE = 10


def build_vocab() -> Vocab:
    words = [f"{f}:{lvl}" for f, levels in FEATURE_LEVELS.items() for lvl in levels]
    return Vocab(words + list(RESPONSE_TOKENS))


def prompt_words(values: Mapping[str, Value]) -> list[str]:
    levels = discretize(values)
    return [f"{f}:{levels[f]}" for f in FEATURE_LEVELS]


def response_text(answer: str, risk: str | None = None) -> str:
    risk = risk or ("high" if answer == "MDD" else "low")
    return f"<think> risk {risk} </think> <answer> {answer} </answer>"


@dataclass(frozen=True)
class ToyTask:
    vocab: Vocab
    train: tuple[RlTask, ...]
    test: tuple[RlTask, ...]

    @property
    def eos(self) -> int:
        return self.vocab.index[EOS]


def to_tasks(records: Sequence[ParticipantRecord], vocab: Vocab) -> tuple[RlTask, ...]:
    return tuple(RlTask(r.id, tuple(vocab.encode(prompt_words(r.values))), toy_label(r.values))
                 for r in records)


def relabel(records: Sequence[ParticipantRecord]) -> list[ParticipantRecord]:
    """Replace each record's label with the toy rule's label."""
    return [replace(r, label=toy_label(r.values)) for r in records]


def make_task(n_train: int, n_test: int, seed: int, prevalence: float = 0.0468) -> ToyTask:
    vocab = build_vocab()
    records = filter_missing(generate_cohort(max(100, int(1.1 * (n_train + n_test)) + 20), prevalence, seed))[0]
    if len(records) < n_train + n_test:
        raise ValueError("not enough records after filtering; raise n_train or n_test")
    return ToyTask(vocab, to_tasks(records[:n_train], vocab),
                   to_tasks(records[n_train:n_train + n_test], vocab))


_RISK = re.compile(r"risk of MDD is (high|low)")


def sft_corpus(samples: Iterable, vocab: Vocab) -> list[TokenSeq]:
    """Map usable reasoning samples to (prompt, response) token sequences.

    The narrative is re-read from the question, and the stated overall risk
    (if any) and final answer are taken from the reasoning path.
    """
    out = []
    for s in samples:
        if s.status not in ("valid_generated", "valid_refined", "fallback_original"):
            continue
        values = parse_narrative(s.qa.question)
        risks = _RISK.findall(s.path)
        prompt = vocab.encode(prompt_words(values))
        response = vocab.encode(response_text(s.predicted, risks[-1] if risks else None)) + [vocab.index[EOS]]
        out.append(TokenSeq(tuple(prompt + response), len(prompt)))
    return out


def labelled_corpus(tasks: Sequence[RlTask], vocab: Vocab, answers: Sequence[str] | None = None
                    ) -> list[TokenSeq]:
    answers = answers or [t.truth for t in tasks]
    eos = vocab.index[EOS]
    return [TokenSeq(t.prompt + tuple(vocab.encode(response_text(a))) + (eos,), len(t.prompt))
            for t, a in zip(tasks, answers)]


def pretrain_base(task: ToyTask, seed: int, epochs: int = 6, lr: float = 2.0) -> PolicyParams:
    """Format-following starting policy: trained on random answers, so it knows
    the response scaffold but carries no diagnostic signal."""
    rng = np.random.default_rng(seed)
    answers = rng.choice(["MDD", "HC"], size=len(task.train)).tolist()
    params = PolicyParams.zeros(len(task.vocab), MAX_RESPONSE, context=32)
    params, _ = train_sft(params, labelled_corpus(task.train, task.vocab, answers),
                          epochs, lr, batch_size=64, seed=seed)
    return params


@dataclass(frozen=True)
class ToyEval:
    accuracy: float
    format_rate: float
    labels: tuple[int, ...]        # 1 = MDD
    predictions: tuple[str, ...]
    scores: tuple[float, ...]      # log-likelihood ratio of the MDD vs HC response
    mean_tokens: float


def evaluate(params: PolicyParams, task: ToyTask, tasks: Sequence[RlTask] | None = None) -> ToyEval:
    tasks = tasks if tasks is not None else task.test
    vocab, eos = task.vocab, task.eos
    seqs, _ = sample_batch(params, [list(t.prompt) for t in tasks], MAX_RESPONSE, 0.0,
                           np.random.default_rng(0), eos)
    texts = [decode_output(vocab, s, eos) for s in seqs]
    preds = [extract_answer(t) for t in texts]
    mdd = batch_log_probs(params, labelled_corpus(tasks, vocab, ["MDD"] * len(tasks)))
    hc = batch_log_probs(params, labelled_corpus(tasks, vocab, ["HC"] * len(tasks)))
    return ToyEval(
        accuracy=float(np.mean([p == t.truth for p, t in zip(preds, tasks)])),
        format_rate=float(np.mean([is_well_formed(x) for x in texts])),
        labels=tuple(int(t.truth == "MDD") for t in tasks),
        predictions=tuple(preds), scores=tuple((mdd - hc).tolist()),
        mean_tokens=float(np.mean([len(s.target) for s in seqs])))


@dataclass(frozen=True)
class ToySettings:
    n_train: int = 2000
    n_test: int = 2000
    base_epochs: int = 6
    base_lr: float = 0.5
    sft_epochs: int = 3
    sft_lr: float = 0.2
    sft_batch: int = 32
    sft_momentum: float = 0.9
    rl_lr: float = 2.0
    rl_queries: int = 32
    rl_updates: int = 150
    beta: float = 0.01

    def grpo_config(self, seed: int, **overrides) -> GrpoConfig:
        kw = dict(lr=self.rl_lr, beta=self.beta, queries_per_update=self.rl_queries,
                  epochs=10 ** 6, max_updates=self.rl_updates, max_new_tokens=MAX_RESPONSE, seed=seed)
        kw.update(overrides)
        return GrpoConfig(**kw)


@dataclass(frozen=True)
class AblationResult:
    seed: int
    evals: dict[str, ToyEval]  # base, sft, rl, sft_rl

    @property
    def accuracy(self) -> dict[str, float]:
        return {k: v.accuracy for k, v in self.evals.items()}

    def ordering_holds(self) -> bool:
        a = self.accuracy
        return a["sft_rl"] >= a["sft"] >= a["base"] and a["sft_rl"] >= a["rl"] >= a["base"]


def run_ablation(seed: int, settings: ToySettings = ToySettings(), task_seed: int | None = None
                 ) -> AblationResult:
    """Base, SFT-only, RL-only and SFT+RL on one seeded toy task."""
    s = settings
    task = make_task(s.n_train, s.n_test, task_seed if task_seed is not None else 100 + seed)
    base = pretrain_base(task, seed, s.base_epochs, s.base_lr)
    sft, _ = train_sft(base, labelled_corpus(task.train, task.vocab), s.sft_epochs, s.sft_lr,
                       s.sft_batch, seed, momentum=s.sft_momentum)
    cfg = s.grpo_config(seed)
    rl, _ = train_rl(base, task.train, task.vocab, cfg, eos=task.eos)
    sft_rl, _ = train_rl(sft, task.train, task.vocab, cfg, eos=task.eos)
    return AblationResult(seed, {name: evaluate(p, task) for name, p in
                                 (("base", base), ("sft", sft), ("rl", rl), ("sft_rl", sft_rl))})
