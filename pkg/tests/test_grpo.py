import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from _oracles import central_difference, loop_grpo_objective, loop_kl, loop_logprob_grad, max_relative_error
from mddreason.grpo import (GrpoConfig, RewardBreakdown, RolloutGroup, clipped_term, group_advantages,
                            grpo_objective_and_grad, kl_to_reference, reward, train_rl)
from mddreason.policy import PolicyParams, TokenSeq, batch_log_probs, params_hash
from mddreason.toytask import MAX_RESPONSE, evaluate, pretrain_base

V, L = 12, 5
WELL = "<think> risk high </think> <answer> MDD </answer>"


def _groups(rng, old, n_groups=3, G=4, advantages=None):
    groups = []
    for q in range(n_groups):
        prompt = tuple(int(x) for x in rng.integers(0, V, 3))
        outs = [TokenSeq(prompt + tuple(int(x) for x in rng.integers(0, V, int(rng.integers(1, L + 1)))), 3)
                for _ in range(G)]
        rewards = [RewardBreakdown(int(b), 1, 0.9 * int(b) + 0.1) for b in rng.integers(0, 2, G)]
        adv = advantages[q] if advantages is not None else group_advantages([r.combined for r in rewards])
        groups.append(RolloutGroup(f"q{q}", prompt, "MDD", outs, [""] * G, batch_log_probs(old, outs),
                                   rewards, np.asarray(adv, dtype=float)))
    return groups


# --- reward and advantages ---------------------------------------------------------

def test_reward_examples():
    assert reward(WELL, "MDD", 0.9, 0.1).combined == pytest.approx(1.0)
    assert reward(WELL, "HC", 0.9, 0.1).combined == pytest.approx(0.1)
    assert reward("<answer>MDD</answer>", "MDD", 0.9, 0.1).combined == pytest.approx(0.9)
    r = reward("gibberish", "MDD")
    assert (r.r_acc, r.r_fmt, r.combined) == (0, 0, 0.0)


def test_advantage_examples():
    assert np.allclose(group_advantages([1, 0, 1, 0, 1, 0, 1, 0]), [1, -1, 1, -1, 1, -1, 1, -1], atol=1e-7)
    assert np.array_equal(group_advantages([0.3] * 8), np.zeros(8))
    assert np.allclose(group_advantages([1, 0, 0, 0], mode="mean"), [0.75, -0.25, -0.25, -0.25])
    with pytest.raises(ValueError):
        group_advantages([1.0])


@given(st.lists(st.floats(0, 1), min_size=2, max_size=16))
def test_advantages_sum_to_zero(rewards):
    assert abs(group_advantages(rewards).sum()) <= 1e-9


def test_clip_scalar_cases():
    assert clipped_term(1.5, 1.0, 0.2) == 1.2
    assert clipped_term(0.5, -1.0, 0.2) == -0.8
    assert clipped_term(1.5, -1.0, 0.2) == -1.5
    assert clipped_term(0.5, 1.0, 0.2) == 0.5


def test_config_validation():
    for bad in [dict(group_size=1), dict(clip_eps=0), dict(clip_eps=1), dict(beta=-1),
                dict(mu=0, nu=0), dict(mu=-1), dict(advantage="rank")]:
        with pytest.raises(ValueError):
            GrpoConfig(**bad)


# --- objective and gradient ---------------------------------------------------------

def test_ratio_identity_at_sync():
    rng = np.random.default_rng(0)
    p = PolicyParams.random(V, L, 1.0, seed=0)
    groups = _groups(rng, p)
    stats, _ = grpo_objective_and_grad(p, p, p, groups, GrpoConfig(beta=0.0))
    assert stats.clip_fraction == 0 and stats.mean_ratio == pytest.approx(1.0)
    unclipped = np.mean([np.mean(g.advantages) for g in groups])
    assert stats.surrogate == pytest.approx(unclipped, abs=1e-12)
    assert stats.kl == pytest.approx(0.0, abs=1e-9)


def test_gradient_equals_reinforce_at_sync():
    rng = np.random.default_rng(1)
    p = PolicyParams.random(V, L, 1.0, seed=1)
    groups = _groups(rng, p, n_groups=4, G=6)
    _, grad = grpo_objective_and_grad(p, p, p, groups, GrpoConfig(beta=0.0, group_size=6))
    expected = np.zeros_like(grad)
    for g in groups:
        for seq, adv in zip(g.outputs, g.advantages):
            expected += adv * loop_logprob_grad(p, seq.tokens, seq.split) / (len(groups) * len(g.outputs))
    assert np.max(np.abs(grad - expected)) < 1e-6


def test_gradient_matches_finite_differences_with_clipping_and_kl():
    rng = np.random.default_rng(2)
    old = PolicyParams.random(V, L, 1.0, seed=2)
    new = old.with_theta(old.theta + rng.normal(0, 0.15, old.theta.size))
    ref = PolicyParams.random(V, L, 1.0, seed=3)
    groups = _groups(rng, old, n_groups=3, G=4)
    cfg = GrpoConfig(group_size=4, beta=0.3, clip_eps=0.2)
    stats, grad = grpo_objective_and_grad(new, old, ref, groups, cfg)
    assert 0 < stats.clip_fraction < 1
    oracle = lambda th: loop_grpo_objective(new.with_theta(th), old, ref, groups, 0.2, 0.3)
    assert stats.objective == pytest.approx(oracle(new.theta), abs=1e-10)
    coords = rng.choice(new.theta.size, 120, replace=False)
    assert max_relative_error(grad[coords], central_difference(oracle, new.theta, coords)) < 1e-4


def test_kl_is_exact_and_non_negative():
    rng = np.random.default_rng(4)
    p = PolicyParams.random(V, L, 1.0, seed=4)
    q = PolicyParams.random(V, L, 1.0, seed=5)
    seqs = [g for grp in _groups(rng, p) for g in grp.outputs]
    assert kl_to_reference(p, p, seqs) == pytest.approx(0.0, abs=1e-12)
    kl = kl_to_reference(p, q, seqs)
    assert kl > 0
    assert kl == pytest.approx(np.mean([loop_kl(p, q, s.tokens, s.split) for s in seqs]), abs=1e-10)


def test_non_finite_ratio_names_the_query():
    rng = np.random.default_rng(6)
    p = PolicyParams.random(V, L, 1.0, seed=6)
    groups = _groups(rng, p)
    old = p.with_theta(p.theta.copy())
    old.views()["bias"][:] = -1e6 * np.arange(V)  # old policy gives sampled outputs ~zero mass
    with np.errstate(all="ignore"), pytest.raises(FloatingPointError, match="query q"):
        grpo_objective_and_grad(p, old, p, groups, GrpoConfig())


def test_clip_fraction_counts_strictly_smaller_branch():
    rng = np.random.default_rng(7)
    old = PolicyParams.random(V, L, 1.0, seed=7)
    new = old.with_theta(old.theta + rng.normal(0, 0.3, old.theta.size))
    groups = _groups(rng, old)
    stats, _ = grpo_objective_and_grad(new, old, old, groups, GrpoConfig(beta=0.0))
    seqs = [s for g in groups for s in g.outputs]
    ratio = np.exp(batch_log_probs(new, seqs) - batch_log_probs(old, seqs))
    adv = np.concatenate([g.advantages for g in groups])
    active = np.clip(ratio, 0.8, 1.2) * adv < ratio * adv
    assert stats.clip_fraction == pytest.approx(active.mean())


# --- training -----------------------------------------------------------------------

def test_zero_lr_keeps_params(small_task):
    base = pretrain_base(small_task, seed=0, lr=0.5)
    cfg = GrpoConfig(lr=0.0, queries_per_update=8, max_updates=5, max_new_tokens=MAX_RESPONSE)
    trained, history = train_rl(base, small_task.train, small_task.vocab, cfg, eos=small_task.eos)
    assert np.array_equal(trained.theta, base.theta) and len(history) == 5


def test_training_is_deterministic(small_task):
    base = pretrain_base(small_task, seed=0, lr=0.5)
    cfg = GrpoConfig(lr=1.0, queries_per_update=8, max_updates=6, max_new_tokens=MAX_RESPONSE, seed=3)
    a, ha = train_rl(base, small_task.train, small_task.vocab, cfg, eos=small_task.eos)
    b, hb = train_rl(base, small_task.train, small_task.vocab, cfg, eos=small_task.eos)
    assert params_hash(a) == params_hash(b) and ha == hb


def test_reward_collapse_warns(small_task, caplog):
    p = PolicyParams.zeros(len(small_task.vocab), MAX_RESPONSE, context=32)
    p.views()["bias"][small_task.eos] = 60.0  # always emits EOS: every reward is 0
    cfg = GrpoConfig(lr=1.0, queries_per_update=64, epochs=1, max_new_tokens=MAX_RESPONSE)
    with caplog.at_level("WARNING"):
        trained, history = train_rl(p, small_task.train[:64], small_task.vocab, cfg, eos=small_task.eos)
    assert "reward collapse" in caplog.text
    assert np.array_equal(trained.theta, p.theta)


def test_multiple_updates_per_sync_reuse_rollouts(small_task):
    base = pretrain_base(small_task, seed=0, lr=0.5)
    cfg = GrpoConfig(lr=1.0, queries_per_update=8, max_updates=4, updates_per_sync=2,
                     max_new_tokens=MAX_RESPONSE)
    _, history = train_rl(base, small_task.train, small_task.vocab, cfg, eos=small_task.eos)
    assert history[0].mean_reward == history[1].mean_reward
    assert history[0].mean_ratio == pytest.approx(1.0) and history[1].mean_ratio != pytest.approx(1.0)
