"""Deterministic record-to-narrative serialization and question/answer assembly."""
from __future__ import annotations

import configparser
import functools
import json
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping

from .cohort import FEATURE_NAMES, REGISTRY, ParticipantRecord, Value

TIERS = ("direct", "simple_cot", "complex_cot")

_NUMBER_WORDS = (
    "zero one two three four five six seven eight nine ten eleven twelve thirteen fourteen "
    "fifteen sixteen seventeen eighteen nineteen twenty twenty-one twenty-two twenty-three "
    "twenty-four"
).split()
_WELLBEING_FIELDS = ("happiness", "work_satisfaction", "health_satisfaction",
                     "family_satisfaction", "finance_satisfaction")
_PLACEHOLDER = re.compile(r"\{([a-z_]+)(?::([a-z_]+))?\}")


def _read_ini(name: str) -> configparser.ConfigParser:
    cp = configparser.ConfigParser(interpolation=None, delimiters=("=",))
    cp.optionxform = str
    cp.read_string(resources.files("mddreason.templates").joinpath(name).read_text(encoding="utf-8"))
    return cp


@dataclass(frozen=True)
class Sentence:
    key: str
    fields: tuple[str, ...]
    clauses: Mapping[str, str]
    lead: str = ""
    full: str = ""
    pair: str = " and "
    extension: bool = False


@dataclass(frozen=True, eq=False)
class NarrativeTemplate:
    version: int
    sentences: tuple[Sentence, ...]
    missing: str
    labels: Mapping[str, str]
    phrases: Mapping[str, Mapping[str, str]]  # feature -> category -> phrase

    @classmethod
    def from_ini(cls, cp: configparser.ConfigParser) -> NarrativeTemplate:
        sentences = []
        for section in cp.sections():
            if not section.startswith("sentence:"):
                continue
            s = cp[section]
            fields = tuple(s["fields"].split())
            clauses = {f: s[f"clause.{f}"] for f in fields}
            pair = s.get("pair", " and ")
            if not pair.startswith(","):
                pair = f" {pair.strip()} "
            else:
                pair = pair + " "
            sentences.append(Sentence(section.split(":", 1)[1], fields, clauses, s.get("lead", ""),
                                      s.get("full", ""), pair, s.getboolean("extension", False)))
        phrases = {}
        for name, spec in REGISTRY.items():
            if spec.kind != "categorical":
                continue
            section = "values:wellbeing" if name in _WELLBEING_FIELDS else f"values:{name}"
            table = dict(cp[section])
            if set(table) != set(spec.categories):
                raise ValueError(f"template phrases for {name} do not cover its categories")
            if len(set(table.values())) != len(table):
                raise ValueError(f"template phrases for {name} are not unique")
            phrases[name] = table
        covered = [f for s in sentences for f in s.fields]
        if sorted(covered) != sorted(FEATURE_NAMES):
            raise ValueError("template sentences must cover every registry feature exactly once")
        return cls(cp.getint("meta", "version"), tuple(sentences), cp["meta"]["missing"],
                   dict(cp["labels"]), phrases)


@functools.lru_cache(maxsize=None)
def default_template() -> NarrativeTemplate:
    return NarrativeTemplate.from_ini(_read_ini("narrative_v1.ini"))


@dataclass(frozen=True)
class NarrativeDoc:
    text: str
    provenance: Mapping[str, tuple[int, int]]
    template_version: int = 1

    def span_text(self, name: str) -> str:
        start, end = self.provenance[name]
        return self.text[start:end]


def _pronouns(sex: Value) -> dict[str, str]:
    if sex == "female":
        return {"subj": "she", "poss": "her"}
    if sex == "male":
        return {"subj": "he", "poss": "his"}
    return {"subj": "the participant", "poss": "the participant's"}


def render_value(name: str, value: Value, template: NarrativeTemplate | None = None) -> str:
    """Surface form of one feature value, exactly as it appears in the narrative."""
    tpl = template or default_template()
    spec = REGISTRY[name]
    if spec.kind == "categorical":
        return tpl.phrases[name][value]
    if name == "income":
        return f"£{value:,.0f}"
    if name == "sleep_duration":
        return _NUMBER_WORDS[int(value)]
    return f"{value:.{spec.decimals}f}"


def parse_value(name: str, text: str, template: NarrativeTemplate | None = None) -> Value:
    """Inverse of :func:`render_value`."""
    tpl = template or default_template()
    spec = REGISTRY[name]
    if spec.kind == "categorical":
        for category, phrase in tpl.phrases[name].items():
            if phrase == text:
                return category
        raise ValueError(f"{name}: unrecognised phrase {text!r}")
    if name == "income":
        return float(text.lstrip("£").replace(",", ""))
    if name == "sleep_duration":
        return float(_NUMBER_WORDS.index(text))
    return float(text)


Segment = tuple[str, str | None]  # (text, feature name when the text is a value span)


def _expand(pattern: str, values: Mapping[str, Value], pron: Mapping[str, str],
            tpl: NarrativeTemplate, own: str | None = None) -> list[Segment]:
    segments: list[Segment] = []
    pos = 0
    for m in _PLACEHOLDER.finditer(pattern):
        segments.append((pattern[pos:m.start()], None))
        key, arg = m.groups()
        if key in pron:
            segments.append((pron[key], None))
        elif key == "s":
            target = arg or own
            segments.append(("" if values[target] == 1 else "s", None))
        elif key == "value":
            segments.append((render_value(own, values[own], tpl), own))
        elif key in REGISTRY:
            segments.append((render_value(key, values[key], tpl), key))
        else:
            raise ValueError(f"unknown placeholder {{{key}}} in template")
        pos = m.end()
    segments.append((pattern[pos:], None))
    return [s for s in segments if s[0]]


def _join(clauses: list[list[Segment]], pair: str) -> list[Segment]:
    if len(clauses) == 1:
        return clauses[0]
    if len(clauses) == 2:
        return clauses[0] + [(pair, None)] + clauses[1]
    out: list[Segment] = []
    for i, c in enumerate(clauses):
        if i:
            out.append((", and " if i == len(clauses) - 1 else ", ", None))
        out.extend(c)
    return out


def _capitalize(segments: list[Segment]) -> list[Segment]:
    text, name = segments[0]
    if name is not None:
        raise ValueError("a sentence may not start with a value span")
    return [(text[0].upper() + text[1:], None)] + segments[1:]


def _sentences(record: ParticipantRecord, tpl: NarrativeTemplate) -> list[list[Segment]]:
    values = {n: record.get(n) for n in FEATURE_NAMES}
    pron = _pronouns(values["sex"])
    out = []
    for sent in tpl.sentences:
        present = [f for f in sent.fields if values[f] is not None]
        if present:
            if sent.full and len(present) == len(sent.fields):
                segs = _expand(sent.full, values, pron, tpl)
            else:
                clauses = [_expand(sent.clauses[f], values, pron, tpl, own=f) for f in present]
                lead = _expand(sent.lead, values, pron, tpl)
                segs = lead + ([(" ", None)] if lead else []) + _join(clauses, sent.pair) + [(".", None)]
            out.append(_capitalize(segs))
        if not sent.extension:
            for f in sent.fields:
                if values[f] is None:
                    note = tpl.missing.replace("{label}", tpl.labels[f])
                    out.append(_capitalize(_expand(note, values, pron, tpl)))
    return out


def serialize(record: ParticipantRecord, template: NarrativeTemplate | None = None) -> NarrativeDoc:
    """Render a participant as a clinical paragraph, recording where each value sits."""
    tpl = template or default_template()
    record.validate()
    text_parts: list[str] = []
    provenance: dict[str, tuple[int, int]] = {}
    offset = 0
    for i, sentence in enumerate(_sentences(record, tpl)):
        if i:
            text_parts.append(" ")
            offset += 1
        for text, name in sentence:
            if name is not None:
                provenance[name] = (offset, offset + len(text))
            text_parts.append(text)
            offset += len(text)
    return NarrativeDoc("".join(text_parts), provenance, tpl.version)


def extract_values(doc: NarrativeDoc, template: NarrativeTemplate | None = None) -> dict[str, Value]:
    """Recover every recorded value from its provenance span."""
    return {name: parse_value(name, doc.span_text(name), template) for name in doc.provenance}


# --- text-level parsing -----------------------------------------------------

def _alternation(options: Iterable[str]) -> str:
    return "(?:" + "|".join(re.escape(o) for o in sorted(options, key=len, reverse=True)) + ")"


def _value_regex(name: str, tpl: NarrativeTemplate) -> str:
    spec = REGISTRY[name]
    if spec.kind == "categorical":
        return _alternation(tpl.phrases[name].values())
    if name == "income":
        return r"£\d{1,3}(?:,\d{3})*"
    if name == "sleep_duration":
        return r"\b" + _alternation(_NUMBER_WORDS) + r"\b"
    if spec.decimals:
        return r"\d+\.\d{%d}" % spec.decimals
    return r"\d+"


_PRONOUN_RE = r"(?:[Ss]he|[Hh]e|[Hh]er|[Hh]is|[Tt]he participant(?:'s)?)"


def _pattern_regex(pattern: str, tpl: NarrativeTemplate, own: str | None = None) -> str:
    out, pos = [], 0
    for m in _PLACEHOLDER.finditer(pattern):
        lit = pattern[pos:m.start()]
        out.append(re.escape(lit))
        key, _ = m.groups()
        if key in ("subj", "poss"):
            out.append(_PRONOUN_RE)
        elif key == "s":
            out.append("s?")
        else:
            name = own if key == "value" else key
            out.append(f"(?P<{name}>{_value_regex(name, tpl)})")
        pos = m.end()
    out.append(re.escape(pattern[pos:]))
    return "".join(out)


_PARSER_CACHE: dict[int, tuple[NarrativeTemplate, list, dict]] = {}


def _parsers(tpl: NarrativeTemplate) -> tuple[list[re.Pattern], dict[str, re.Pattern]]:
    cached = _PARSER_CACHE.get(id(tpl))
    if cached is not None and cached[0] is tpl:
        return cached[1], cached[2]
    full = [re.compile(_pattern_regex(s.full, tpl)) for s in tpl.sentences if s.full]
    clauses = {f: re.compile(_pattern_regex(s.clauses[f], tpl, own=f))
               for s in tpl.sentences for f in s.fields}
    _PARSER_CACHE[id(tpl)] = (tpl, full, clauses)
    return full, clauses


def parse_narrative(text: str, template: NarrativeTemplate | None = None) -> dict[str, Value]:
    """Read feature values back out of narrative text (no provenance needed).

    Features that are not mentioned (missing ones) are absent from the result.
    """
    tpl = template or default_template()
    full, clauses = _parsers(tpl)
    found: dict[str, Value] = {}
    for rx in full:
        m = rx.search(text)
        if m:
            for name, raw in m.groupdict().items():
                found[name] = parse_value(name, raw, tpl)
    for name, rx in clauses.items():
        if name in found:
            continue
        m = rx.search(text)
        if m:
            found[name] = parse_value(name, m.group(name), tpl)
    return found


# --- prompts and QA pairs ---------------------------------------------------

@dataclass(frozen=True)
class PromptTemplate:
    tier: str
    instruction_text: str
    step_scaffold: tuple[str, ...]
    format_text: str = ""

    def render(self) -> str:
        lines = [self.instruction_text]
        if self.step_scaffold:
            lines.append("Follow these stages in order:")
            lines.extend(f"Step {i}: {stage}" for i, stage in enumerate(self.step_scaffold, 1))
        if self.format_text:
            lines.append(self.format_text)
        return "\n".join(lines)


@functools.lru_cache(maxsize=None)
def _prompt_config() -> configparser.ConfigParser:
    return _read_ini("prompts_v1.ini")


def prompt_template(tier: str) -> PromptTemplate:
    if tier not in TIERS:
        raise ValueError(f"unknown tier {tier!r}; expected one of {TIERS}")
    s = _prompt_config()[tier]
    stages = tuple(x.strip() for x in s.get("stages", "").split("|") if x.strip())
    return PromptTemplate(tier, s["instruction"], stages, s.get("format", ""))


def task_instruction() -> str:
    return _prompt_config()["meta"]["task"]


@dataclass(frozen=True)
class QaPair:
    id: str
    prompt: PromptTemplate
    question: str
    answer: str
    narrative: NarrativeDoc | None = field(default=None, compare=False)

    @property
    def tier(self) -> str:
        return self.prompt.tier

    def to_json(self) -> dict:
        return {"id": self.id, "tier": self.tier, "prompt": self.prompt.render(),
                "question": self.question, "answer": self.answer}

    @classmethod
    def from_json(cls, d: Mapping) -> QaPair:
        prompt = prompt_template(d["tier"])
        if prompt.render() != d["prompt"]:
            prompt = PromptTemplate(d["tier"], d["prompt"], (), "")
        return cls(d["id"], prompt, d["question"], d["answer"])


def make_qa(record: ParticipantRecord, tier: str) -> QaPair:
    prompt = prompt_template(tier)
    doc = serialize(record)
    return QaPair(record.id, prompt, f"{doc.text}\n\n{task_instruction()}", record.label, doc)


def write_jsonl(rows: Iterable[Mapping], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, ensure_ascii=False, sort_keys=True) + "\n")


def read_jsonl(path: str | Path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]
