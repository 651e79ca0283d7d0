"""Run configuration: TOML file + command-line overrides, validated per field.

Precedence is command line > config file > built-in default. Every error
names the offending field and, when it came from the file, its line.
"""
from __future__ import annotations

import copy
import hashlib
import json
import re
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .grpo import GrpoConfig
from .narrative import TIERS
from .reasoner import PipelineConfig


class ConfigError(ValueError):
    pass


# Learning rates are the nominal values times a toy-scale factor; the
# effective rate (lr * lr_scale) is what the optimizer sees and is stamped.
DEFAULTS: dict[str, Any] = {
    "seed": 7,
    "task": "toy",
    "cohort": {"n": 4000, "prevalence": 0.0468, "missing_threshold": 0.30,
               "exclude_comorbid": True, "n_test": 1000},
    "pipeline": {"T": 4, "N": 3, "tier": "complex_cot", "gen_temperature": 0.7,
                 "refine_temperature": 0.0, "workers": 4, "tier_report_size": 200},
    "oracle": {"mock": False, "consensus_error_rates": [0.1, 0.15, 0.2],
               "generator_error_rate": 0.2, "endpoints": []},
    "base": {"epochs": 6, "lr": 0.5},
    "sft": {"epochs": 3, "lr": 1e-5, "lr_scale": 2e4, "batch_size": 256, "batch_divisor": 8,
            "momentum": 0.9},
    "grpo": {"group_size": 8, "clip_eps": 0.2, "beta": 0.01, "mu": 0.9, "nu": 0.1,
             "lr": 1e-6, "lr_scale": 2e6, "epochs": 2, "max_updates": 150,
             "queries_per_update": 32, "updates_per_sync": 1, "temperature": 1.0,
             "advantage": "std"},
    "eval": {"delong_pair": ["sft_rl", "sft"], "text_overlap_size": 200},
}

ENDPOINT_KEYS = {"base_url": str, "model_name": str, "token_env": str, "timeout": float,
                 "max_retries": int, "max_in_flight": int, "rate_per_s": float, "name": str}

Check = Callable[[Any], str | None]  # returns an error message or None


def _num(lo=None, hi=None, *, integer=False, lo_open=False, hi_open=False) -> Check:
    def check(v):
        if isinstance(v, bool) or not isinstance(v, (int, float)) or (integer and not isinstance(v, int)):
            return f"must be {'an integer' if integer else 'a number'}, got {v!r}"
        if lo is not None and (v <= lo if lo_open else v < lo):
            return f"must be {'>' if lo_open else '>='} {lo}, got {v}"
        if hi is not None and (v >= hi if hi_open else v > hi):
            return f"must be {'<' if hi_open else '<='} {hi}, got {v}"
        return None
    return check


def _choice(*options) -> Check:
    return lambda v: None if v in options else f"must be one of {list(options)}, got {v!r}"


def _bool(v):
    return None if isinstance(v, bool) else f"must be true or false, got {v!r}"


def _rates(v):
    if not isinstance(v, list) or len(v) != 3:
        return "must be a list of exactly 3 error rates"
    bad = [x for x in v if _num(0, 1)(x)]
    return f"entries must be numbers in [0, 1], got {bad}" if bad else None


def _pair(v):
    ok = {"base", "sft", "rl", "sft_rl"}
    if not (isinstance(v, list) and len(v) == 2 and set(v) <= ok and v[0] != v[1]):
        return f"must name two different variants from {sorted(ok)}"
    return None


def _endpoints(v):
    if not isinstance(v, list):
        return "must be an array of tables"
    for i, ep in enumerate(v):
        if not isinstance(ep, dict):
            return f"entry {i} must be a table"
        unknown = set(ep) - set(ENDPOINT_KEYS)
        if unknown:
            return f"entry {i} has unknown keys {sorted(unknown)}"
        for key in ("base_url", "model_name"):
            if not isinstance(ep.get(key), str):
                return f"entry {i} needs a string {key}"
    return None


SCHEMA: dict[str, Any] = {
    "seed": _num(0, integer=True),
    "task": _choice("toy", "cohort"),
    "cohort": {"n": _num(100, integer=True), "prevalence": _num(0, 1, lo_open=True, hi_open=True),
               "missing_threshold": _num(0, 1, lo_open=True), "exclude_comorbid": _bool,
               "n_test": _num(10, integer=True)},
    "pipeline": {"T": _num(1, integer=True), "N": _num(0, integer=True), "tier": _choice(*TIERS),
                 "gen_temperature": _num(0), "refine_temperature": _num(0),
                 "workers": _num(1, integer=True), "tier_report_size": _num(1, integer=True)},
    "oracle": {"mock": _bool, "consensus_error_rates": _rates, "generator_error_rate": _num(0, 1),
               "endpoints": _endpoints},
    "base": {"epochs": _num(0, integer=True), "lr": _num(0)},
    "sft": {"epochs": _num(0, integer=True), "lr": _num(0), "lr_scale": _num(0, lo_open=True),
            "batch_size": _num(1, integer=True), "batch_divisor": _num(1, integer=True),
            "momentum": _num(0, 1, hi_open=True)},
    "grpo": {"group_size": _num(2, integer=True), "clip_eps": _num(0, 1, lo_open=True, hi_open=True),
             "beta": _num(0), "mu": _num(0), "nu": _num(0), "lr": _num(0),
             "lr_scale": _num(0, lo_open=True), "epochs": _num(1, integer=True),
             "max_updates": _num(1, integer=True), "queries_per_update": _num(1, integer=True),
             "updates_per_sync": _num(1, integer=True), "temperature": _num(0, lo_open=True),
             "advantage": _choice("std", "mean")},
    "eval": {"delong_pair": _pair, "text_overlap_size": _num(1, integer=True)},
}


def _key_line(text: str, section: str | None, key: str) -> int | None:
    current = None
    for no, line in enumerate(text.splitlines(), 1):
        s = line.strip()
        m = re.match(r"^\[+\s*([^\]]+?)\s*\]+", s)
        if m:
            current = m.group(1)
            continue
        if current == section and re.match(rf"^{re.escape(key)}\s*=", s):
            return no
    return None


def _where(source: str | None, text: str | None, dotted: str) -> str:
    if not text:
        return f"{source or '<command line>'}"
    parts = dotted.split(".")
    line = _key_line(text, ".".join(parts[:-1]) or None, parts[-1])
    return f"{source}:{line}" if line else str(source)


def _merge(base: dict, update: dict, prefix: str, where: Callable[[str], str]) -> None:
    for key, value in update.items():
        dotted = f"{prefix}{key}"
        schema = _lookup(SCHEMA, dotted)
        if schema is None:
            raise ConfigError(f"{where(dotted)}: unknown key '{dotted}'")
        if isinstance(schema, dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{where(dotted)}: '{dotted}' must be a table")
            _merge(base[key], value, dotted + ".", where)
        else:
            base[key] = value


def _lookup(tree: dict, dotted: str):
    node = tree
    for part in dotted.split("."):
        if not isinstance(node, dict) or part not in node:
            return None
        node = node[part]
    return node


def _validate(cfg: dict, where: Callable[[str], str]) -> None:
    def walk(schema, values, prefix):
        for key, check in schema.items():
            dotted = f"{prefix}{key}"
            if isinstance(check, dict):
                walk(check, values[key], dotted + ".")
            else:
                err = check(values[key])
                if err:
                    raise ConfigError(f"{where(dotted)}: {dotted} {err}")
    walk(SCHEMA, cfg, "")
    g = cfg["grpo"]
    if g["mu"] + g["nu"] <= 0:
        raise ConfigError(f"{where('grpo.mu')}: grpo.mu + grpo.nu must be > 0")
    if cfg["cohort"]["n_test"] >= cfg["cohort"]["n"]:
        raise ConfigError(f"{where('cohort.n_test')}: cohort.n_test must be smaller than cohort.n")


def parse_override(text: str) -> tuple[str, Any]:
    if "=" not in text:
        raise ConfigError(f"override {text!r} must look like section.key=value")
    key, raw = (s.strip() for s in text.split("=", 1))
    try:
        value = tomllib.loads(f"v = {raw}")["v"]
    except tomllib.TOMLDecodeError:
        value = raw
    return key, value


@dataclass(frozen=True)
class RunConfig:
    data: dict
    source: str | None = None

    @classmethod
    def load(cls, path: str | Path | None = None, overrides: list[tuple[str, Any]] = ()) -> RunConfig:
        cfg = copy.deepcopy(DEFAULTS)
        text, source = None, None
        if path is not None:
            source = str(path)
            try:
                text = Path(path).read_text(encoding="utf-8")
            except OSError as e:
                raise ConfigError(f"{path}: cannot read config ({e.strerror})") from None
            try:
                loaded = tomllib.loads(text)
            except tomllib.TOMLDecodeError as e:
                raise ConfigError(f"{path}: {e}") from None
            _merge(cfg, loaded, "", lambda d: _where(source, text, d))
        file_where = lambda d: _where(source, text, d)
        cli_keys = set()
        for dotted, value in overrides:
            schema = _lookup(SCHEMA, dotted)
            if schema is None or isinstance(schema, dict):
                raise ConfigError(f"<command line>: unknown key '{dotted}'")
            node = cfg
            *parents, leaf = dotted.split(".")
            for p in parents:
                node = node[p]
            if isinstance(node[leaf], float) and isinstance(value, int) and not isinstance(value, bool):
                value = float(value)
            node[leaf] = value
            cli_keys.add(dotted)
        _validate(cfg, lambda d: "<command line>" if d in cli_keys else file_where(d))
        return cls(cfg, source)

    def __getitem__(self, key):
        return self.data[key]

    def canonical(self) -> str:
        return json.dumps(self.data, sort_keys=True, separators=(",", ":"))

    @property
    def hash(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()

    def pipeline_config(self, seed: int) -> PipelineConfig:
        p = self["pipeline"]
        return PipelineConfig(T=p["T"], N=p["N"], tier=p["tier"], gen_temperature=p["gen_temperature"],
                              refine_temperature=p["refine_temperature"], seed=seed, workers=p["workers"])

    def sft_effective(self) -> dict:
        s = self["sft"]
        return {"epochs": s["epochs"], "lr": s["lr"] * s["lr_scale"],
                "batch_size": max(1, s["batch_size"] // s["batch_divisor"]), "momentum": s["momentum"]}

    def grpo_config(self, seed: int, max_new_tokens: int) -> GrpoConfig:
        g = self["grpo"]
        return GrpoConfig(group_size=g["group_size"], clip_eps=g["clip_eps"], beta=g["beta"], mu=g["mu"],
                          nu=g["nu"], lr=g["lr"] * g["lr_scale"], updates_per_sync=g["updates_per_sync"],
                          queries_per_update=g["queries_per_update"], epochs=g["epochs"],
                          max_updates=g["max_updates"], max_new_tokens=max_new_tokens,
                          temperature=g["temperature"], advantage=g["advantage"], seed=seed)
