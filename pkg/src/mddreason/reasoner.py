"""Reasoning-path construction: generate with up to T attempts, refine the
prompt, regenerate with up to N attempts, fall back to the original path."""
from __future__ import annotations

import json
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

from .answers import UNPARSEABLE, extract_answer
from .narrative import TIERS, QaPair, prompt_template
from .oracle import REFINE_MARKER, OracleClient, OracleError, stable_seed

STATUSES = ("valid_generated", "valid_refined", "fallback_original", "discarded", "deferred")
VALID = frozenset({"valid_generated", "valid_refined"})

REFINER_INSTRUCTION = (
    f"You improve diagnostic instructions. {REFINE_MARKER} so that a model following them "
    "reaches the correct diagnosis more reliably. Keep the answer format unchanged and reply "
    "with the rewritten instructions only."
)


@dataclass(frozen=True)
class PipelineConfig:
    T: int = 4
    N: int = 3
    tier: str = "complex_cot"
    gen_temperature: float = 0.7
    refine_temperature: float = 0.0
    max_tokens: int = 1024
    seed: int = 0
    workers: int = 4

    def __post_init__(self):
        if self.T < 1:
            raise ValueError("T must be >= 1")
        if self.N < 0:
            raise ValueError("N must be >= 0")
        if self.tier not in TIERS:
            raise ValueError(f"tier must be one of {TIERS}")


@dataclass(frozen=True)
class ReasoningSample:
    qa: QaPair
    path: str
    predicted: str
    status: str
    gen_attempts: int
    refine_attempts: int = 0
    refined_prompt: str | None = None
    notes: tuple[str, ...] = ()
    deferred_stage: str | None = None  # generate | refine, only while deferred

    @property
    def id(self) -> str:
        return self.qa.id

    @property
    def attempts_used(self) -> tuple[int, int]:
        return self.gen_attempts, self.refine_attempts

    def to_json(self) -> dict:
        d = self.qa.to_json()
        d.update(path=self.path, predicted=self.predicted, status=self.status,
                 refined_prompt=self.refined_prompt,
                 attempts={"gen": self.gen_attempts, "refine": self.refine_attempts})
        return d


def _messages(prompt: str, question: str) -> list[tuple[str, str]]:
    return [("system", prompt), ("user", question)]


def generate_path(qa: QaPair, client: OracleClient, config: PipelineConfig) -> ReasoningSample:
    prompt = qa.prompt.render()
    last_path, last_pred = "", UNPARSEABLE
    for k in range(1, config.T + 1):
        try:
            ex = client.complete(_messages(prompt, qa.question), config.gen_temperature,
                                 config.max_tokens, stable_seed(config.seed, qa.id, "generate", k))
        except OracleError as e:
            return ReasoningSample(qa, "", UNPARSEABLE, "deferred", k - 1,
                                   notes=(f"generation attempt {k}: {e}",), deferred_stage="generate")
        last_path, last_pred = ex.response, extract_answer(ex.response)
        if last_pred == qa.answer:
            return ReasoningSample(qa, last_path, last_pred, "valid_generated", k)
    return ReasoningSample(qa, last_path, last_pred, "discarded", config.T)


def refine_path(sample: ReasoningSample, client: OracleClient, config: PipelineConfig) -> ReasoningSample:
    if sample.status != "valid_generated":
        raise ValueError(f"{sample.id}: only valid_generated samples can be refined, got {sample.status}")
    if config.N == 0:
        return replace(sample, notes=sample.notes + ("refinement skipped: N=0",))
    qa = sample.qa
    request = (f"Original instructions:\n{qa.prompt.render()}\n\nQuestion:\n{qa.question}"
               f"\n\nReasoning:\n{sample.path}")
    try:
        ex = client.complete([("system", REFINER_INSTRUCTION), ("user", request)],
                             config.refine_temperature, config.max_tokens,
                             stable_seed(config.seed, qa.id, "refine-prompt"))
    except OracleError as e:
        return replace(sample, status="deferred", deferred_stage="refine",
                       notes=sample.notes + (f"prompt refinement: {e}",))
    refined = ex.response.strip()
    for j in range(1, config.N + 1):
        try:
            ex = client.complete(_messages(refined, qa.question), config.gen_temperature,
                                 config.max_tokens, stable_seed(config.seed, qa.id, "regenerate", j))
        except OracleError as e:
            return replace(sample, status="deferred", deferred_stage="refine", refine_attempts=j - 1,
                           notes=sample.notes + (f"regeneration attempt {j}: {e}",))
        pred = extract_answer(ex.response)
        if pred == qa.answer:
            return replace(sample, path=ex.response, predicted=pred, status="valid_refined",
                           refine_attempts=j, refined_prompt=refined)
    return replace(sample, status="fallback_original", refine_attempts=config.N)


def process(qa: QaPair, client: OracleClient, config: PipelineConfig) -> ReasoningSample:
    sample = generate_path(qa, client, config)
    return refine_path(sample, client, config) if sample.status == "valid_generated" else sample


def _resume(sample: ReasoningSample, client: OracleClient, config: PipelineConfig) -> ReasoningSample:
    if sample.deferred_stage == "refine":
        restored = replace(sample, status="valid_generated", deferred_stage=None, refine_attempts=0)
        return refine_path(restored, client, config)
    return process(sample.qa, client, config)


@dataclass
class SynthesisReport:
    n: int
    status_counts: dict[str, int]
    gen_attempt_hist: dict[int, int]
    refine_attempt_hist: dict[int, int]
    discard_rate: float
    tier: str
    T: int
    N: int

    def to_dict(self) -> dict:
        d = asdict(self)
        d["gen_attempt_hist"] = {str(k): v for k, v in sorted(self.gen_attempt_hist.items())}
        d["refine_attempt_hist"] = {str(k): v for k, v in sorted(self.refine_attempt_hist.items())}
        return d


def synthesis_report(samples: Sequence[ReasoningSample], config: PipelineConfig) -> SynthesisReport:
    counts = Counter(s.status for s in samples)
    settled = len(samples) - counts["deferred"]
    return SynthesisReport(
        n=len(samples),
        status_counts={s: counts.get(s, 0) for s in STATUSES},
        gen_attempt_hist=dict(Counter(s.gen_attempts for s in samples)),
        refine_attempt_hist=dict(Counter(s.refine_attempts for s in samples if s.status != "discarded")),
        discard_rate=counts["discarded"] / settled if settled else 0.0,
        tier=config.tier, T=config.T, N=config.N)


def run_corpus(qas: Iterable[QaPair], client: OracleClient, config: PipelineConfig
               ) -> tuple[list[ReasoningSample], SynthesisReport]:
    """Run every QA pair through generation and refinement.

    Output is sorted by id, so it does not depend on completion order. Deferred
    samples get one more pass at the end.
    """
    qas = list(qas)
    if len({q.id for q in qas}) != len(qas):
        raise ValueError("QA ids must be unique")
    with ThreadPoolExecutor(max_workers=max(1, config.workers)) as pool:
        samples = list(pool.map(lambda q: process(q, client, config), qas))
        retry = [i for i, s in enumerate(samples) if s.status == "deferred"]
        for i, s in zip(retry, pool.map(lambda s: _resume(s, client, config), [samples[i] for i in retry])):
            samples[i] = s
    samples.sort(key=lambda s: s.id)
    return samples, synthesis_report(samples, config)


def qa_for_tier(qa: QaPair, tier: str) -> QaPair:
    return replace(qa, prompt=prompt_template(tier))


def write_corpus(samples: Iterable[ReasoningSample], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            fh.write(json.dumps(s.to_json(), ensure_ascii=False, sort_keys=True) + "\n")


def read_corpus(path: str | Path) -> list[ReasoningSample]:
    out = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        d = json.loads(line)
        qa = QaPair.from_json(d)
        out.append(ReasoningSample(qa, d["path"], d["predicted"], d["status"], d["attempts"]["gen"],
                                   d["attempts"]["refine"], d.get("refined_prompt")))
    return out
