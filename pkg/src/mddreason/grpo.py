"""Group relative policy optimization for the toy policy.

Objective per update, averaged over queries and over the G outputs of each:

    min(rho_i * A_i, clip(rho_i, 1 - eps, 1 + eps) * A_i) - beta * KL_i

with rho_i the sequence-level probability ratio new/old, A_i the
group-normalized reward, and KL_i the exact KL from the new policy to the
reference policy summed over the output's positions.
"""
from __future__ import annotations

import logging
import re
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .answers import FORMAT_GRAMMAR, extract_answer
from .policy import PolicyParams, TokenSeq, _backward, _forward, _per_sequence, batch_log_probs, sample_batch
from .tokenizer import Vocab

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class GrpoConfig:
    group_size: int = 8
    clip_eps: float = 0.2
    beta: float = 0.01
    mu: float = 0.9
    nu: float = 0.1
    lr: float = 1e-6
    updates_per_sync: int = 1
    queries_per_update: int = 16
    epochs: int = 2
    max_updates: int | None = None
    max_new_tokens: int = 12
    temperature: float = 1.0
    advantage: str = "std"  # std | mean
    max_grad_norm: float | None = None
    seed: int = 0

    def __post_init__(self):
        if self.group_size < 2:
            raise ValueError("group_size must be >= 2")
        if not 0 < self.clip_eps < 1:
            raise ValueError("clip_eps must be in (0, 1)")
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if self.mu < 0 or self.nu < 0 or self.mu + self.nu <= 0:
            raise ValueError("reward weights need mu, nu >= 0 and mu + nu > 0")
        if self.lr < 0:
            raise ValueError("lr must be >= 0")
        if self.advantage not in ("std", "mean"):
            raise ValueError("advantage must be 'std' or 'mean'")
        if self.updates_per_sync < 1 or self.queries_per_update < 1:
            raise ValueError("updates_per_sync and queries_per_update must be >= 1")


@dataclass(frozen=True)
class RewardBreakdown:
    r_acc: int
    r_fmt: int
    combined: float


def reward(output: str, ground_truth: str, mu: float = 0.9, nu: float = 0.1,
           grammar: re.Pattern = FORMAT_GRAMMAR) -> RewardBreakdown:
    r_acc = int(extract_answer(output) == ground_truth)
    r_fmt = int(grammar.match(output) is not None)
    return RewardBreakdown(r_acc, r_fmt, mu * r_acc + nu * r_fmt)


def group_advantages(rewards: Sequence[float], mode: str = "std", delta: float = 1e-8) -> np.ndarray:
    r = np.asarray(rewards, dtype=np.float64)
    if r.size < 2:
        raise ValueError("a group needs at least 2 rewards")
    centered = r - r.mean()
    if mode == "mean":
        return centered
    if np.ptp(r) == 0:  # identical rewards: r.std() can be a rounding residue, not 0
        return np.zeros_like(r)
    return centered / (r.std() + delta)


def clipped_term(ratio: float, advantage: float, eps: float) -> float:
    return min(ratio * advantage, float(np.clip(ratio, 1 - eps, 1 + eps)) * advantage)


@dataclass
class RolloutGroup:
    query_id: str
    prompt: tuple[int, ...]
    truth: str
    outputs: list[TokenSeq]
    texts: list[str]
    old_log_probs: np.ndarray
    rewards: list[RewardBreakdown]
    advantages: np.ndarray


@dataclass(frozen=True)
class UpdateStats:
    objective: float
    surrogate: float
    kl: float           # mean over outputs of the summed per-position KL to the reference
    mean_ratio: float
    max_ratio: float
    clip_fraction: float
    mean_reward: float
    accuracy: float     # share of outputs with r_acc = 1
    format_rate: float
    grad_norm: float

    def to_dict(self) -> dict:
        return asdict(self)


def grpo_objective_and_grad(params_new: PolicyParams, params_old: PolicyParams, params_ref: PolicyParams,
                            groups: Sequence[RolloutGroup], config: GrpoConfig
                            ) -> tuple[UpdateStats, np.ndarray]:
    """Objective value and its exact gradient (for ascent) w.r.t. params_new."""
    if not (params_new.theta.shape == params_old.theta.shape == params_ref.theta.shape):
        raise ValueError("new, old and reference params must share a shape")
    seqs = [o for g in groups for o in g.outputs]
    owner = [(g.query_id, j) for g in groups for j in range(len(g.outputs))]
    weights = np.concatenate([np.full(len(g.outputs), 1.0 / (len(groups) * len(g.outputs))) for g in groups])
    adv = np.concatenate([g.advantages for g in groups])
    flat = _forward(params_new, seqs)
    m = len(flat.target)
    rows = np.arange(m)
    seq_new = _per_sequence(flat, flat.logp[rows, flat.target], len(seqs))
    seq_old = batch_log_probs(params_old, seqs)
    ratio = np.exp(seq_new - seq_old)
    bad = np.flatnonzero(~np.isfinite(ratio))
    if bad.size:
        q, j = owner[bad[0]]
        raise FloatingPointError(f"non-finite importance ratio for query {q}, output {j}")
    eps = config.clip_eps
    unclipped = ratio * adv
    clipped = np.clip(ratio, 1 - eps, 1 + eps) * adv
    clip_active = clipped < unclipped
    surrogate = float(np.sum(weights * np.minimum(unclipped, clipped)))

    p_new = np.exp(flat.logp)
    log_ratio_ref = flat.logp - _forward(params_ref, seqs).logp
    kl_t = np.sum(p_new * log_ratio_ref, axis=1)
    kl_seq = _per_sequence(flat, kl_t, len(seqs))
    objective = surrogate - config.beta * float(np.sum(weights * kl_seq))

    coef = np.where(clip_active, 0.0, weights * adv * ratio)[flat.seq]
    dlogits = -coef[:, None] * p_new
    dlogits[rows, flat.target] += coef
    dlogits -= (config.beta * weights[flat.seq])[:, None] * p_new * (log_ratio_ref - kl_t[:, None])
    grad = _backward(params_new, flat, dlogits)

    rewards = [r for g in groups for r in g.rewards]
    stats = UpdateStats(
        objective=objective, surrogate=surrogate, kl=float(kl_seq.mean()),
        mean_ratio=float(ratio.mean()), max_ratio=float(ratio.max()),
        clip_fraction=float(clip_active.mean()),
        mean_reward=float(np.mean([r.combined for r in rewards])),
        accuracy=float(np.mean([r.r_acc for r in rewards])),
        format_rate=float(np.mean([r.r_fmt for r in rewards])),
        grad_norm=float(np.linalg.norm(grad)))
    return stats, grad


def kl_to_reference(params: PolicyParams, ref: PolicyParams, seqs: Sequence[TokenSeq]) -> float:
    """Mean over sequences of the exact per-position KL(params || ref), summed over target positions."""
    if not seqs:
        raise ValueError("need at least one sequence")
    flat = _forward(params, seqs)
    kl_t = np.sum(np.exp(flat.logp) * (flat.logp - _forward(ref, seqs).logp), axis=1)
    return float(_per_sequence(flat, kl_t, len(seqs)).mean())


@dataclass(frozen=True)
class RlTask:
    id: str
    prompt: tuple[int, ...]
    truth: str


def decode_output(vocab: Vocab, seq: TokenSeq, eos: int | None) -> str:
    return vocab.decode(t for t in seq.target if t != eos)


def rollout(params: PolicyParams, tasks: Sequence[RlTask], vocab: Vocab, config: GrpoConfig,
            rng: np.random.Generator, eos: int | None) -> list[RolloutGroup]:
    G = config.group_size
    prompts = [list(t.prompt) for t in tasks for _ in range(G)]
    seqs, lps = sample_batch(params, prompts, config.max_new_tokens, config.temperature, rng, eos)
    groups = []
    for k, task in enumerate(tasks):
        outs = seqs[k * G:(k + 1) * G]
        texts = [decode_output(vocab, s, eos) for s in outs]
        rewards = [reward(t, task.truth, config.mu, config.nu) for t in texts]
        groups.append(RolloutGroup(task.id, task.prompt, task.truth, outs, texts,
                                   np.array([lp.sum() for lp in lps[k * G:(k + 1) * G]]), rewards,
                                   group_advantages([r.combined for r in rewards], config.advantage)))
    return groups


def train_rl(params: PolicyParams, tasks: Sequence[RlTask], vocab: Vocab, config: GrpoConfig,
             eos: int | None = None) -> tuple[PolicyParams, list[UpdateStats]]:
    """Run GRPO from ``params``; the reference policy is ``params`` itself."""
    if not tasks:
        raise ValueError("task corpus must be non-empty")
    ref = params.copy()
    current = params.copy()
    history: list[UpdateStats] = []
    order_rng = np.random.default_rng([config.seed, 0])
    n_batches = 0
    for epoch in range(config.epochs):
        order = order_rng.permutation(len(tasks))
        collapsed = True
        for start in range(0, len(tasks), config.queries_per_update):
            if config.max_updates is not None and len(history) >= config.max_updates:
                return current, history
            batch = [tasks[i] for i in order[start:start + config.queries_per_update]]
            old = current.copy()
            n_batches += 1
            groups = rollout(old, batch, vocab, config, np.random.default_rng([config.seed, 1, n_batches]), eos)
            collapsed &= all(not g.advantages.any() for g in groups)
            for _ in range(config.updates_per_sync):
                stats, grad = grpo_objective_and_grad(current, old, ref, groups, config)
                if config.max_grad_norm is not None and stats.grad_norm > config.max_grad_norm:
                    grad = grad * (config.max_grad_norm / stats.grad_norm)
                current = current.with_theta(current.theta + config.lr * grad)
                history.append(stats)
                if config.max_updates is not None and len(history) >= config.max_updates:
                    break
        if collapsed:
            log.warning("reward collapse: every group had zero reward variance in epoch %d; "
                        "advantages are all zero", epoch + 1)
    return current, history
