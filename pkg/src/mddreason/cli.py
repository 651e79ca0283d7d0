"""Command-line pipeline: synth -> filter -> reason -> train-sft -> train-rl -> eval -> report.

Each stage reads its predecessors' artifacts from --out-dir, writes its own,
and records a ``<stage>.stamp.json`` with the config hash and file digests.
Exit codes: 0 ok, 1 usage or configuration error, 2 runtime or dependency error.
"""
from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Any, Sequence

import filelock
import numpy as np

from . import cohort, metrics, narrative, reasoner, toytask
from .answers import extract_answer
from .config import ConfigError, RunConfig, parse_override
from .grpo import decode_output, train_rl
from .oracle import (TOKEN_ENV, ClinicianOracle, LocalTransport, OracleClient, OracleEndpoint,
                     consensus_filter, stable_seed)
from .policy import load_checkpoint, sample_batch, save_checkpoint, train_sft

log = logging.getLogger("mddreason")

STAGES = ("synth", "filter", "reason", "train-sft", "train-rl", "eval", "report")
VARIANTS = ("base", "sft", "rl", "sft_rl")


class DependencyError(RuntimeError):
    pass


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def sha256_file(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _dump(obj: Any, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, ensure_ascii=False) + "\n", encoding="utf-8")


def _load(path: Path) -> Any:
    return json.loads(path.read_text(encoding="utf-8"))


class Run:
    def __init__(self, cfg: RunConfig, out_dir: Path):
        self.cfg = cfg
        self.out = out_dir
        self.seed = cfg["seed"]

    def path(self, name: str) -> Path:
        return self.out / name

    def sub_seed(self, label: str) -> int:
        return stable_seed(self.seed, label) % 2 ** 32

    def require(self, *names: str, stage: str) -> None:
        missing = [n for n in names if not self.path(n).exists()]
        if missing:
            raise DependencyError(f"{stage}: missing upstream artifact(s) {', '.join(missing)} in {self.out}; "
                                  "run the earlier stages first")

    def stamp(self, stage: str, inputs: Sequence[str], outputs: Sequence[str], extra: dict | None = None) -> None:
        _dump({"stage": stage, "config_hash": self.cfg.hash, "config": self.cfg.data,
               "inputs": {n: sha256_file(self.path(n)) for n in inputs},
               "outputs": {n: sha256_file(self.path(n)) for n in outputs},
               **(extra or {})}, self.path(f"{stage}.stamp.json"))

    # --- oracles ---------------------------------------------------------------

    def _endpoints(self) -> list[OracleEndpoint]:
        eps = []
        for i, e in enumerate(self.cfg["oracle"]["endpoints"]):
            token = os.environ.get(e.get("token_env", TOKEN_ENV), "")
            eps.append(OracleEndpoint(e["base_url"], e["model_name"], token, e.get("timeout", 30.0),
                                      e.get("max_retries", 3), max_in_flight=e.get("max_in_flight", 4),
                                      rate_per_s=e.get("rate_per_s"), name=e.get("name", f"{e['model_name']}#{i}")))
        return eps

    def consensus_clients(self) -> list[OracleClient]:
        o = self.cfg["oracle"]
        if o["mock"]:
            return [OracleClient(OracleEndpoint("mock://", f"mock-{i}", backoff=0.0),
                                 LocalTransport(ClinicianOracle(rate)))
                    for i, rate in enumerate(o["consensus_error_rates"])]
        eps = self._endpoints()
        if len(eps) < 3:
            raise ConfigError("oracle.endpoints: consensus filtering needs 3 endpoints (or use --mock-oracle)")
        return [OracleClient(ep) for ep in eps[:3]]

    def generator_client(self) -> OracleClient:
        o = self.cfg["oracle"]
        if o["mock"]:
            return OracleClient(OracleEndpoint("mock://", "mock-generator", backoff=0.0),
                                LocalTransport(ClinicianOracle(o["generator_error_rate"])))
        eps = self._endpoints()
        if not eps:
            raise ConfigError("oracle.endpoints: at least one endpoint is required (or use --mock-oracle)")
        return OracleClient(eps[0])

    # --- shared loaders ----------------------------------------------------------

    def qas(self) -> dict[str, narrative.QaPair]:
        return {d["id"]: narrative.QaPair.from_json(d) for d in narrative.read_jsonl(self.path("qa.jsonl"))}

    def toy_task(self) -> toytask.ToyTask:
        records = {r.id: r for r in cohort.read_csv(self.path("cohort.csv"))}
        split = _load(self.path("split.json"))
        vocab = toytask.build_vocab()
        return toytask.ToyTask(vocab, toytask.to_tasks([records[i] for i in split["train"]], vocab),
                               toytask.to_tasks([records[i] for i in split["test"]], vocab))


# --- stages -----------------------------------------------------------------------

def cmd_synth(run: Run) -> None:
    c = run.cfg["cohort"]
    records = cohort.generate_cohort(c["n"], c["prevalence"], run.sub_seed("cohort"),
                                     exclude_comorbid=c["exclude_comorbid"])
    kept, excluded = cohort.filter_missing(records, c["missing_threshold"])
    if run.cfg["task"] == "toy":
        kept = toytask.relabel(kept)
    if len(kept) <= c["n_test"]:
        raise RuntimeError(f"only {len(kept)} records survived filtering; lower cohort.n_test")
    cohort.write_csv(kept, run.path("cohort.csv"))
    cohort.write_data_dictionary(run.path("data_dictionary.json"))
    summary = cohort.summarize(kept).to_dict()
    summary.update(n_generated=len(records), n_excluded_missing=len(excluded))
    _dump(summary, run.path("cohort_summary.json"))
    split = {"train": [r.id for r in kept[:-c["n_test"]]], "test": [r.id for r in kept[-c["n_test"]:]]}
    _dump(split, run.path("split.json"))
    tier = run.cfg["pipeline"]["tier"]
    narrative.write_jsonl((narrative.make_qa(r, tier).to_json() for r in kept), run.path("qa.jsonl"))
    outputs = ["cohort.csv", "data_dictionary.json", "cohort_summary.json", "split.json", "qa.jsonl"]
    run.stamp("synth", [], outputs)
    print(f"synth: {len(records)} generated, {len(excluded)} excluded for missingness, "
          f"{len(split['train'])} train / {len(split['test'])} test")


def cmd_filter(run: Run) -> None:
    run.require("qa.jsonl", "split.json", stage="filter")
    qas = run.qas()
    train = [qas[i] for i in _load(run.path("split.json"))["train"]]
    clients = run.consensus_clients()
    seed = run.sub_seed("consensus")
    with ThreadPoolExecutor(max_workers=run.cfg["pipeline"]["workers"]) as pool:
        results = list(pool.map(lambda qa: consensus_filter(qa, clients, seed), train))
    retained = [qa for qa, r in zip(train, results) if r.decision == "retain"]
    counts = {k: sum(r.decision == k for r in results) for k in ("retain", "exclude", "deferred")}
    narrative.write_jsonl((qa.to_json() for qa in retained), run.path("filtered.jsonl"))
    _dump({"counts": counts, "oracles": [c.id for c in clients],
           "deferred_ids": [qa.id for qa, r in zip(train, results) if r.decision == "deferred"]},
          run.path("consensus.json"))
    run.stamp("filter", ["qa.jsonl", "split.json"], ["filtered.jsonl", "consensus.json"])
    print(f"filter: {counts['retain']} retained, {counts['exclude']} excluded, {counts['deferred']} deferred")


def _tier_report(run: Run, client: OracleClient, test: list[narrative.QaPair]) -> dict:
    p = run.cfg["pipeline"]
    seed = run.sub_seed("tier-report")
    rows = {}
    for tier in narrative.TIERS:
        qas = [reasoner.qa_for_tier(q, tier) for q in test]
        def ask(qa):
            return client.complete([("system", qa.prompt.render()), ("user", qa.question)],
                                   p["gen_temperature"], seed=stable_seed(seed, qa.id, tier)).response
        with ThreadPoolExecutor(max_workers=p["workers"]) as pool:
            outputs = list(pool.map(ask, qas))
        preds = [extract_answer(o) for o in outputs]
        rows[tier] = metrics.table3_row([q.answer for q in qas], preds, outputs)
    return rows


def cmd_reason(run: Run) -> None:
    run.require("filtered.jsonl", "qa.jsonl", "split.json", stage="reason")
    qas = [narrative.QaPair.from_json(d) for d in narrative.read_jsonl(run.path("filtered.jsonl"))]
    client = run.generator_client()
    config = run.cfg.pipeline_config(run.sub_seed("reason"))
    samples, report = reasoner.run_corpus(qas, client, config)
    reasoner.write_corpus(samples, run.path("corpus.jsonl"))
    _dump(report.to_dict(), run.path("synthesis.json"))
    all_qas = run.qas()
    test = [all_qas[i] for i in _load(run.path("split.json"))["test"][:run.cfg["pipeline"]["tier_report_size"]]]
    _dump(_tier_report(run, client, test), run.path("cot_tiers.json"))
    run.stamp("reason", ["filtered.jsonl"], ["corpus.jsonl", "synthesis.json", "cot_tiers.json"])
    sc = report.status_counts
    print(f"reason: {sc['valid_generated'] + sc['valid_refined']} valid, {sc['fallback_original']} fallback, "
          f"{sc['discarded']} discarded, {sc['deferred']} deferred")


def cmd_train_sft(run: Run) -> None:
    run.require("corpus.jsonl", "cohort.csv", "split.json", stage="train-sft")
    task = run.toy_task()
    b = run.cfg["base"]
    base = toytask.pretrain_base(task, run.sub_seed("base"), b["epochs"], b["lr"])
    save_checkpoint(base, run.path("base.ckpt"), run.cfg.hash)
    corpus = toytask.sft_corpus(reasoner.read_corpus(run.path("corpus.jsonl")), task.vocab)
    if not corpus:
        raise RuntimeError("train-sft: the reasoning corpus has no usable samples")
    s = run.cfg.sft_effective()
    params, curve = train_sft(base, corpus, s["epochs"], s["lr"], s["batch_size"], run.sub_seed("sft"),
                              momentum=s["momentum"])
    save_checkpoint(params, run.path("sft.ckpt"), run.cfg.hash)
    with open(run.path("sft_loss.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "per_token_nll"])
        w.writerows((i, f"{v:.10f}") for i, v in enumerate(curve))
    run.stamp("train-sft", ["corpus.jsonl", "cohort.csv", "split.json"],
              ["base.ckpt", "sft.ckpt", "sft_loss.csv"],
              {"effective": {**s, "batch_size": min(s["batch_size"], len(corpus)), "corpus_size": len(corpus)}})
    print(f"train-sft: {len(corpus)} sequences, per-token NLL {curve[0]:.4f} -> {curve[-1]:.4f}")


def cmd_train_rl(run: Run) -> None:
    run.require("base.ckpt", "sft.ckpt", "cohort.csv", "split.json", stage="train-rl")
    task = run.toy_task()
    cfg = run.cfg.grpo_config(run.sub_seed("grpo"), toytask.MAX_RESPONSE)
    rows = []
    for variant, start in (("sft_rl", "sft.ckpt"), ("rl", "base.ckpt")):
        params, _ = load_checkpoint(run.path(start))
        trained, history = train_rl(params, task.train, task.vocab, cfg, eos=task.eos)
        save_checkpoint(trained, run.path(f"{variant}.ckpt"), run.cfg.hash)
        rows += [(variant, i, s) for i, s in enumerate(history, 1)]
    with open(run.path("rl_updates.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["variant", "update", "reward", "kl", "clip_fraction", "objective", "accuracy"])
        w.writerows((v, i, f"{s.mean_reward:.10f}", f"{s.kl:.10f}", f"{s.clip_fraction:.10f}",
                     f"{s.objective:.10f}", f"{s.accuracy:.10f}") for v, i, s in rows)
    run.stamp("train-rl", ["base.ckpt", "sft.ckpt"], ["sft_rl.ckpt", "rl.ckpt", "rl_updates.csv"],
              {"effective": {"lr": cfg.lr, "beta": cfg.beta, "clip_eps": cfg.clip_eps,
                             "group_size": cfg.group_size}})
    last = {v: s for v, _, s in rows}
    print("train-rl: " + ", ".join(f"{v} final reward {s.mean_reward:.3f}" for v, s in last.items()))


def cmd_eval(run: Run) -> None:
    run.require("base.ckpt", "sft.ckpt", "cohort.csv", "split.json", stage="eval")
    task = run.toy_task()
    evals = {}
    for v in VARIANTS:
        if run.path(f"{v}.ckpt").exists():
            evals[v] = toytask.evaluate(load_checkpoint(run.path(f"{v}.ckpt"))[0], task)
    truth = [t.truth for t in task.test]
    table2 = {v: metrics.table2_row(truth, e.predictions, e.scores) for v, e in evals.items()}
    for v, e in evals.items():
        metrics.write_roc_csv(metrics.roc_auc(e.labels, e.scores), run.path(f"roc_{v}.csv"))
    a, b = run.cfg["eval"]["delong_pair"]
    delong = None
    if a in evals and b in evals:
        delong = {"compared": [a, b], **metrics.delong_test(evals[a].labels, evals[a].scores,
                                                            evals[b].scores).to_dict()}
    base_acc = table2["base"]["ACC"]
    ablation = {v: {"ACC": r["ACC"], "F1": r["F1"], "AUC": r["AUC"],
                    "relative_gain_ACC": (r["ACC"] - base_acc) / base_acc if base_acc else None}
                for v, r in table2.items()}
    best = "sft_rl" if "sft_rl" in evals else "sft"
    k = run.cfg["eval"]["text_overlap_size"]
    params = load_checkpoint(run.path(f"{best}.ckpt"))[0]
    seqs, _ = sample_batch(params, [list(t.prompt) for t in task.test[:k]], toytask.MAX_RESPONSE,
                                   0.0, np.random.default_rng(0), task.eos)
    hyps = [decode_output(task.vocab, s, task.eos) for s in seqs]
    refs = [[toytask.response_text(t.truth)] for t in task.test[:k]]
    overlap = metrics.corpus_text_overlap(hyps, refs)
    report = {"table2": table2, "ablation": ablation, "delong": delong,
              "text_overlap": {"variant": best, **overlap.to_dict()},
              "token_stats": {v: e.mean_tokens for v, e in evals.items()},
              "n_test": len(task.test)}
    if run.path("cot_tiers.json").exists():
        report["table3"] = _load(run.path("cot_tiers.json"))
    _dump(report, run.path("eval.json"))
    run.stamp("eval", [f"{v}.ckpt" for v in evals], ["eval.json"] + [f"roc_{v}.csv" for v in evals])
    print("eval: " + ", ".join(f"{v} ACC {r['ACC']:.4f}" for v, r in table2.items()))


def _read_csv(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def cmd_report(run: Run) -> None:
    needed = ["cohort_summary.json", "synthesis.json", "sft_loss.csv", "eval.json"]
    run.require(*needed, stage="report")
    artifacts = {}
    for stamp in sorted(run.out.glob("*.stamp.json")):
        s = _load(stamp)
        for name, digest in s["outputs"].items():
            artifacts[name] = {"sha256": digest, "stage": s["stage"], "config_hash": s["config_hash"],
                               "exists": run.path(name).exists()}
    rl_curve = {}
    if run.path("rl_updates.csv").exists():
        for row in _read_csv(run.path("rl_updates.csv")):
            rl_curve.setdefault(row["variant"], []).append(
                {k: float(row[k]) for k in ("reward", "kl", "clip_fraction", "objective")})
    evaluation = _load(run.path("eval.json"))
    bundle = {
        "config_hash": run.cfg.hash,
        "config": run.cfg.data,
        "cohort_summary": _load(run.path("cohort_summary.json")),
        "consensus": _load(run.path("consensus.json")) if run.path("consensus.json").exists() else None,
        "synthesis": _load(run.path("synthesis.json")),
        "curves": {"sft_loss": [float(r["per_token_nll"]) for r in _read_csv(run.path("sft_loss.csv"))],
                   "rl": rl_curve},
        "evaluation": evaluation,
        "ablation": evaluation["ablation"],
        "artifacts": artifacts,
    }
    _dump(bundle, run.path("report.json"))
    run.stamp("report", needed, ["report.json"])
    print(f"report: {run.path('report.json')} sha256 {sha256_file(run.path('report.json'))[:16]}")


COMMANDS = {"synth": cmd_synth, "filter": cmd_filter, "reason": cmd_reason, "train-sft": cmd_train_sft,
            "train-rl": cmd_train_rl, "eval": cmd_eval, "report": cmd_report}


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", type=Path, help="TOML run configuration")
    common.add_argument("--seed", type=int, help="root seed (overrides the config)")
    common.add_argument("--out-dir", type=Path, help="artifact directory (default: ./run)")
    common.add_argument("--mock-oracle", action="store_true", default=None,
                        help="use the built-in mock oracles instead of HTTP endpoints")
    common.add_argument("--set", dest="overrides", action="append", metavar="KEY=VALUE",
                        help="override one config field, e.g. --set grpo.beta=0.1 (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true", default=None)
    parser = _Parser(prog="mddreason", description=__doc__.splitlines()[0], parents=[common])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub_common = _Parser(add_help=False)
    for action in common._actions:
        sub_common._add_action(_suppressed(action))
    for name in STAGES + ("all",):
        sub.add_parser(name, parents=[sub_common],
                       help="run every stage in order" if name == "all" else f"run the {name} stage")
    return parser


def _suppressed(action: argparse.Action) -> argparse.Action:
    a = copy.copy(action)
    a.default = argparse.SUPPRESS
    return a


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        overrides = [parse_override(o) for o in (args.overrides or [])]
        if args.seed is not None:
            overrides.append(("seed", args.seed))
        if args.mock_oracle:
            overrides.append(("oracle.mock", True))
        cfg = RunConfig.load(args.config, overrides)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    out = args.out_dir or Path("run")
    out.mkdir(parents=True, exist_ok=True)
    run = Run(cfg, out)
    stages = STAGES if args.command == "all" else (args.command,)
    try:
        with filelock.FileLock(str(out / ".mddreason.lock"), timeout=0):
            for stage in stages:
                COMMANDS[stage](run)
    except filelock.Timeout:
        print(f"error: another stage is running in {out}", file=sys.stderr)
        return 2
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 1
    except DependencyError as e:
        print(f"dependency error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # runtime failures in a stage
        log.debug("stage failed", exc_info=True)
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
