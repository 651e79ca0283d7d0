"""Acceptance criteria, one test per criterion, at the stated tolerances.

A summary line per criterion is printed in the terminal summary section.
"""
import hashlib
import json
import math
import time
from pathlib import Path

import numpy as np
import pytest
from scipy.stats import binomtest, rankdata

from _oracles import (brute_force_auc, central_difference, loop_grpo_objective, loop_logprob_grad,
                      loop_softmax_logprob, max_relative_error)
from mddreason import cli, cohort, narrative
from mddreason.grpo import (GrpoConfig, RewardBreakdown, RolloutGroup, clipped_term, group_advantages,
                            grpo_objective_and_grad, kl_to_reference, train_rl)
from mddreason.metrics import auc_score, delong_test, f1_from
from mddreason.oracle import (REFINE_MARKER, LocalTransport, OracleClient, OracleEndpoint, ScriptedResponder,
                              ScriptRule, completion_body, stable_seed)
from mddreason.policy import PolicyParams, TokenSeq, batch_log_probs, sample_batch, sft_loss_and_grad
from mddreason.reasoner import PipelineConfig, generate_path, refine_path, run_corpus
from mddreason.toytask import ToySettings, evaluate, make_task, pretrain_base, run_ablation

FIXTURES = Path(__file__).parent / "fixtures"


def _random_batch(rng, V, L, n):
    out = []
    for _ in range(n):
        split = int(rng.integers(1, 5))
        out.append(TokenSeq(tuple(int(x) for x in rng.integers(0, V, split + int(rng.integers(1, L + 1)))), split))
    return out


def _groups(rng, old, V, L, n_groups, G):
    groups = []
    for q in range(n_groups):
        outs = _random_batch(rng, V, L, G)
        rewards = [RewardBreakdown(int(b), 1, 0.9 * int(b) + 0.1) for b in rng.integers(0, 2, G)]
        groups.append(RolloutGroup(f"q{q}", outs[0].prompt, "MDD", outs, [""] * G, batch_log_probs(old, outs),
                                   rewards, group_advantages([r.combined for r in rewards])))
    return groups


@pytest.mark.criterion(1, "SFT and GRPO gradients match central finite differences")
def test_c01_gradient_oracles(detail):
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    V, L = 14, 5
    p = PolicyParams.random(V, L, 0.5, seed=1)
    batch = _random_batch(rng, V, L, 8)
    _, g_sft = sft_loss_and_grad(p, batch)
    coords = rng.choice(p.theta.size, 120, replace=False)
    sft_loss = lambda th: -np.mean([loop_softmax_logprob(p.with_theta(th), s.tokens, s.split) for s in batch])
    err_sft = max_relative_error(g_sft[coords], central_difference(sft_loss, p.theta, coords))

    old = PolicyParams.random(V, L, 1.0, seed=2)
    new = old.with_theta(old.theta + rng.normal(0, 0.15, old.theta.size))
    ref = PolicyParams.random(V, L, 1.0, seed=3)
    groups = _groups(rng, old, V, L, 3, 4)
    cfg = GrpoConfig(group_size=4, beta=0.2)
    stats, g_rl = grpo_objective_and_grad(new, old, ref, groups, cfg)
    coords = rng.choice(new.theta.size, 120, replace=False)
    objective = lambda th: loop_grpo_objective(new.with_theta(th), old, ref, groups, cfg.clip_eps, cfg.beta)
    err_rl = max_relative_error(g_rl[coords], central_difference(objective, new.theta, coords))
    elapsed = time.perf_counter() - start
    detail(f"SFT max rel err {err_sft:.2e}, GRPO {err_rl:.2e} (clip fraction {stats.clip_fraction:.2f}), "
           f"120 probes each, {elapsed:.1f}s")
    assert err_sft < 1e-4 and err_rl < 1e-4
    assert elapsed < 10


@pytest.mark.criterion(2, "uniform-policy per-token NLL equals ln V")
def test_c02_uniform_policy(detail):
    V = 16
    report, _ = sft_loss_and_grad(PolicyParams.zeros(V, 6), _random_batch(np.random.default_rng(0), V, 6, 10))
    gap = abs(report.per_token - math.log(V))
    detail(f"|NLL - ln 16| = {gap:.1e}")
    assert gap <= 1e-9


@pytest.mark.criterion(3, "GRPO advantages, ratio identity, REINFORCE equivalence, scalar clip cases")
def test_c03_grpo_structure(detail):
    rng = np.random.default_rng(3)
    worst_mean = max(abs(group_advantages(rng.random(8) * rng.integers(0, 2, 8)).mean()) for _ in range(1000))
    V, L = 12, 5
    p = PolicyParams.random(V, L, 1.0, seed=5)
    groups = _groups(rng, p, V, L, 4, 8)
    stats, grad = grpo_objective_and_grad(p, p, p, groups, GrpoConfig(beta=0.0))
    reinforce = np.zeros_like(grad)
    for g in groups:
        for seq, adv in zip(g.outputs, g.advantages):
            reinforce += adv * loop_logprob_grad(p, seq.tokens, seq.split) / (len(groups) * len(g.outputs))
    gap = float(np.max(np.abs(grad - reinforce)))
    up, down = clipped_term(1.5, 1.0, 0.2), clipped_term(0.5, -1.0, 0.2)
    detail(f"max |mean A| {worst_mean:.1e}, clip fraction {stats.clip_fraction}, REINFORCE gap {gap:.1e}, "
           f"clip cases {up}, {down}")
    assert worst_mean <= 1e-9
    assert stats.clip_fraction == 0 and gap <= 1e-6
    assert up == 1.2 and down == -0.8


@pytest.fixture(scope="module")
def toy():
    task = make_task(2000, 2000, seed=100)
    return task, pretrain_base(task, seed=0, epochs=6, lr=0.5)


@pytest.mark.criterion(4, "toy RL: mean reward increases over the first 50 updates, accuracy >= 0.95")
def test_c04_toy_rl_convergence(toy, detail):
    start = time.perf_counter()
    task, base = toy
    cfg = ToySettings().grpo_config(seed=0)
    assert cfg.group_size == 8
    trained, history = train_rl(base, task.train, task.vocab, cfg, eos=task.eos)
    windows = [float(np.mean([s.mean_reward for s in history[i:i + 10]])) for i in range(0, 50, 10)]
    accuracy = evaluate(trained, task).accuracy
    elapsed = time.perf_counter() - start
    detail("10-update reward means " + " < ".join(f"{w:.3f}" for w in windows)
           + f", accuracy {accuracy:.4f}, {elapsed:.1f}s")
    assert all(b > a for a, b in zip(windows, windows[1:]))
    assert accuracy >= 0.95
    assert elapsed < 60


@pytest.mark.criterion(5, "ablation ordering SFT+RL >= SFT >= base and SFT+RL >= RL >= base on 3 seeds")
def test_c05_ablation_direction(detail):
    results = [run_ablation(seed) for seed in (0, 1, 2)]
    detail("; ".join(f"seed {r.seed}: " + ", ".join(f"{k} {v:.4f}" for k, v in r.accuracy.items())
                     for r in results))
    assert all(r.ordering_holds() for r in results)


@pytest.mark.criterion(6, "KL to reference after training: beta=100 < 1e-2 and < beta=0")
def test_c06_beta_sweep(toy, detail):
    task, base = toy
    prompts = [list(t.prompt) for t in task.test[:500]]
    kls = {}
    for beta in (0.0, 100.0):
        cfg = ToySettings().grpo_config(seed=0, lr=0.005, beta=beta)
        trained, _ = train_rl(base, task.train, task.vocab, cfg, eos=task.eos)
        seqs, _ = sample_batch(trained, prompts, cfg.max_new_tokens, 1.0, np.random.default_rng(1), task.eos)
        kls[beta] = kl_to_reference(trained, base, seqs)
    detail(f"KL beta=0 {kls[0.0]:.2e}, beta=100 {kls[100.0]:.2e}")
    assert kls[100.0] < 1e-2 and kls[100.0] < kls[0.0]


@pytest.mark.criterion(7, "fast AUC equals pair counting; worked case 0.75")
def test_c07_auc_equivalence(detail):
    rng = np.random.default_rng(7)
    mismatches = 0
    for _ in range(1000):
        n = int(rng.integers(2, 201))
        labels = rng.integers(0, 2, n)
        labels[rng.choice(n, 2, replace=False)] = [0, 1]
        scores = rng.integers(0, 10, n) / 9 if rng.random() < 0.5 else rng.normal(size=n)
        mismatches += auc_score(labels, scores) != brute_force_auc(labels, scores)
    worked = auc_score([1, 0, 1, 0], [0.9, 0.8, 0.7, 0.2])
    detail(f"{mismatches} mismatches in 1000 cases, worked case {worked}")
    assert mismatches == 0 and worked == 0.75


@pytest.mark.criterion(8, "DeLong self-comparison and variance vs 10,000-replicate bootstrap")
def test_c08_delong(detail):
    rng = np.random.default_rng(8)
    n = 200
    labels = rng.integers(0, 2, n)
    latent = rng.normal(size=n)
    a = latent + 1.0 * labels + rng.normal(0, 0.8, n)
    b = latent + 0.6 * labels + rng.normal(0, 0.8, n)
    same = delong_test(labels, a, a)
    result = delong_test(labels, a, b)
    pos, neg = np.flatnonzero(labels == 1), np.flatnonzero(labels == 0)

    def auc(idx_p, idx_n, s):
        ranks = rankdata(np.concatenate([s[idx_p], s[idx_n]]))
        m = len(idx_p)
        return (ranks[:m].sum() - m * (m + 1) / 2) / (m * len(idx_n))

    boot = np.empty(10_000)
    for i in range(boot.size):
        bp, bn = rng.choice(pos, pos.size), rng.choice(neg, neg.size)
        boot[i] = auc(bp, bn, a) - auc(bp, bn, b)
    ratio = result.var_diff / boot.var(ddof=1)
    detail(f"self z={same.z} p={same.p_value}; DeLong/bootstrap variance ratio {ratio:.3f}; "
           f"p-value field {result.p_value:.4f}")
    assert same.z == 0 and same.p_value == 1
    assert abs(ratio - 1) <= 0.10
    assert "p_value" in result.to_dict()


@pytest.mark.criterion(9, "baseline table: F1 from PPV and SENS within 0.01 for all 11 rows")
def test_c09_table2_crosscheck(detail):
    rows = json.loads((FIXTURES / "table2_baselines.json").read_text())
    gaps = {r["model"]: abs(f1_from(r["PPV"], r["SENS"]) - r["F1"]) for r in rows}
    worst = max(gaps, key=gaps.get)
    detail(f"{len(rows)} rows, largest gap {gaps[worst]:.4f} ({worst}), "
           f"SVM recomputed {f1_from(rows[0]['PPV'], rows[0]['SENS']):.4f}")
    assert len(rows) == 11 and all(g <= 0.01 for g in gaps.values())


@pytest.mark.criterion(10, "worked narrative reproduced exactly; round trip over 1,000 records")
def test_c10_serializer(worked_record, detail):
    expected = (
        "The participant is a 60-year-old female with a body mass index (BMI) of 24.5 kg/m². "
        "She experiences occasional sleeplessness and typically sleeps six hours per night. "
        "She consumes alcohol about three times per week and has no history of self-harm. "
        "She is employed in paid work, earning £45,000 annually, and works 38 hours per week. "
        "Her highest education level is O-levels, and she does not have any long-standing illnesses. "
        "Clinically, her HDL cholesterol is 2.08 mmol/L, LDL cholesterol is 2.61 mmol/L, "
        "total cholesterol is 4.78 mmol/L, and triglycerides are 1.33 mmol/L.")
    text = narrative.serialize(worked_record).text
    records = cohort.generate_cohort(1000, 0.3, seed=10)
    failures = 0
    for r in records:
        present = {k: v for k, v in r.values.items() if v is not None}
        doc = narrative.serialize(r)
        failures += narrative.extract_values(doc) != present or narrative.parse_narrative(doc.text) != present
    detail(f"worked example {'identical' if text == expected else 'differs'}; "
           f"{failures} round-trip failures in {len(records)} records")
    assert text.split() == expected.split() and text == expected
    assert failures == 0


def _scripted(gen, regen=("none",)):
    rules = [ScriptRule(REFINE_MARKER, "REFINED guidance"), ScriptRule("REFINED guidance", list(regen)),
             ScriptRule("", list(gen))]
    ep = OracleEndpoint("mock://", "m", max_retries=0, backoff=0.0)
    return OracleClient(ep, LocalTransport(ScriptedResponder(rules)))


class _Coin:
    def __init__(self, answers, p=0.5):
        self.answers, self.p = answers, p

    def __call__(self, payload):
        truth = self.answers[payload["messages"][-1]["content"]]
        ok = np.random.default_rng(stable_seed(payload["seed"], "coin")).random() < self.p
        return 200, completion_body(f"<answer>{truth if ok else ('HC' if truth == 'MDD' else 'MDD')}</answer>")


@pytest.mark.criterion(11, "reasoner acceptance/fallback sweeps; discard rate vs 0.5^4 at 2,000 samples")
def test_c11_reasoner_state_machine(detail):
    qa = narrative.make_qa(cohort.generate_cohort(100, 0.5, seed=11)[0], "complex_cot")
    right = f"<answer>{qa.answer}</answer>"
    wrong = f"<answer>{'HC' if qa.answer == 'MDD' else 'MDD'}</answer>"
    checked = 0
    for T in range(1, 6):
        for k in range(T + 1):
            s = generate_path(qa, _scripted([wrong] * k + [right]), PipelineConfig(T=T, N=0))
            expected = ("valid_generated", k + 1) if k < T else ("discarded", T)
            assert (s.status, s.gen_attempts) == expected
            checked += 1
    for N in range(1, 5):
        for j in range(N + 1):
            client = _scripted([right], regen=[wrong] * j + [right + " refined"])
            cfg = PipelineConfig(T=1, N=N)
            before = generate_path(qa, client, cfg)
            after = refine_path(before, client, cfg)
            if j < N:
                assert (after.status, after.refine_attempts) == ("valid_refined", j + 1)
            else:
                assert (after.status, after.refine_attempts) == ("fallback_original", N)
                assert (after.qa, after.path, after.predicted) == (before.qa, before.path, before.predicted)
            checked += 1
    records = cohort.generate_cohort(2000, 0.5, seed=12)
    qas = [narrative.make_qa(r, "direct") for r in records]
    client = OracleClient(OracleEndpoint("mock://", "coin", backoff=0.0),
                          LocalTransport(_Coin({q.question: q.answer for q in qas})))
    _, report = run_corpus(qas, client, PipelineConfig(T=4, N=0, seed=5))
    k = report.status_counts["discarded"]
    ci = binomtest(k, len(qas), 0.0625).proportion_ci(0.95)
    detail(f"{checked} scripted cases; discard rate {k / len(qas):.4f}, 95% CI [{ci.low:.4f}, {ci.high:.4f}]")
    assert ci.low <= 0.0625 <= ci.high


@pytest.mark.criterion(12, "cohort at n=20,000: HC median age, MDD fraction, missingness boundary")
def test_c12_cohort_targets(detail):
    records = cohort.generate_cohort(20_000, 9755 / 208406, seed=7)
    hc_age = float(np.median([r.get("age") for r in records if r.label == "HC" and r.get("age") is not None]))
    frac = float(np.mean([r.label == "MDD" for r in records]))
    full = {}
    for r in records[:200]:
        for k, v in r.values.items():
            if v is not None:
                full.setdefault(k, v)
    boundary = []
    for missing, kept in ((6, True), (7, False)):
        values = dict(full)
        for name in cohort.FEATURE_NAMES[:missing]:
            values[name] = None
        rec = cohort.ParticipantRecord(f"b{missing}", values, "HC")
        k_out, _ = cohort.filter_missing([rec], 0.30)
        boundary.append((k_out == [rec]) == kept)
    at_threshold = cohort.ParticipantRecord("eq", {**full, **{n: None for n in cohort.FEATURE_NAMES[:6]}}, "HC")
    boundary.append(cohort.filter_missing([at_threshold], 6 / 22)[0] == [at_threshold])
    detail(f"HC median age {hc_age}, MDD fraction {frac:.4f}, boundary cases {sum(boundary)}/3")
    assert 60 <= hc_age <= 62
    assert abs(frac - 0.0468) <= 0.005
    assert all(boundary)


@pytest.fixture(scope="module")
def pipeline_runs(tmp_path_factory):
    outs = []
    for name in ("run_a", "run_b"):
        out = tmp_path_factory.mktemp(name)
        assert cli.main(["--mock-oracle", "--seed", "7", "--out-dir", str(out), "all"]) == 0
        outs.append(out)
    return outs


@pytest.mark.criterion(13, "tier report (accuracy, F1, average tokens) with direct < simple < complex mean tokens")
def test_c13_cot_tiers(pipeline_runs, detail):
    tiers = json.loads((pipeline_runs[0] / "cot_tiers.json").read_text())
    tokens = [tiers[t]["Average Tokens"] for t in narrative.TIERS]
    detail(", ".join(f"{t}: acc {tiers[t]['Accuracy']:.3f}, F1 {tiers[t]['F1-Score']:.3f}, "
                     f"{tiers[t]['Average Tokens']:.1f} tokens" for t in narrative.TIERS))
    assert all(set(tiers[t]) == {"Accuracy", "F1-Score", "Average Tokens"} for t in narrative.TIERS)
    assert tokens[0] < tokens[1] < tokens[2]


@pytest.mark.criterion(14, "two mock-oracle pipeline runs give hash-identical report bundles")
def test_c14_reproducibility(pipeline_runs, detail):
    digests = [hashlib.sha256((out / "report.json").read_bytes()).hexdigest() for out in pipeline_runs]
    ablation = json.loads((pipeline_runs[0] / "report.json").read_text())["ablation"]
    detail(f"sha256 {digests[0][:16]} vs {digests[1][:16]}; ablation ACC "
           + ", ".join(f"{k} {v['ACC']:.4f}" for k, v in ablation.items()))
    assert digests[0] == digests[1]
    acc = {k: v["ACC"] for k, v in ablation.items()}
    assert acc["sft_rl"] >= acc["sft"] >= acc["base"]
