"""Toy log-linear autoregressive token policy with exact gradients.

The next-token logits at a target position ``t`` are

    bias + trans[prev token] + pos[t - split] + counts(prompt) @ ctx

so every conditional is a softmax over the vocabulary and the log-likelihood
gradient is available in closed form. Positions before ``split`` are prompt
and never contribute to the loss.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

CHECKPOINT_MAGIC = b"MDDPOLv1"
LAYOUT = ("bias", "trans", "ctx", "pos")


@dataclass(frozen=True)
class TokenSeq:
    tokens: tuple[int, ...]
    split: int

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(int(t) for t in self.tokens))
        if not 0 <= self.split <= len(self.tokens):
            raise ValueError(f"split {self.split} outside [0, {len(self.tokens)}]")

    @property
    def prompt(self) -> tuple[int, ...]:
        return self.tokens[:self.split]

    @property
    def target(self) -> tuple[int, ...]:
        return self.tokens[self.split:]


@dataclass
class PolicyParams:
    theta: np.ndarray
    vocab_size: int
    max_target: int
    context: int = 128
    seed: int | None = None

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=np.float64)
        if self.theta.shape != (self.size(self.vocab_size, self.max_target),):
            raise ValueError("theta has the wrong length for this layout")

    @staticmethod
    def size(V: int, L: int) -> int:
        return V + 2 * V * V + L * V

    @classmethod
    def zeros(cls, V: int, L: int, context: int = 128) -> PolicyParams:
        return cls(np.zeros(cls.size(V, L)), V, L, context)

    @classmethod
    def random(cls, V: int, L: int, scale: float, seed: int, context: int = 128) -> PolicyParams:
        rng = np.random.default_rng(seed)
        return cls(rng.normal(0.0, scale, cls.size(V, L)), V, L, context, seed)

    def copy(self) -> PolicyParams:
        return PolicyParams(self.theta.copy(), self.vocab_size, self.max_target, self.context, self.seed)

    def with_theta(self, theta: np.ndarray) -> PolicyParams:
        return PolicyParams(theta, self.vocab_size, self.max_target, self.context, self.seed)

    def views(self) -> dict[str, np.ndarray]:
        V, L = self.vocab_size, self.max_target
        t, out, at = self.theta, {}, 0
        for name, shape in zip(LAYOUT, [(V,), (V, V), (V, V), (L, V)]):
            n = int(np.prod(shape))
            out[name] = t[at:at + n].reshape(shape)
            at += n
        return out


# --- batched forward/backward -----------------------------------------------

@dataclass
class _Flat:
    """All target positions of a batch, flattened."""
    seq: np.ndarray       # (m,) owning sequence
    prev: np.ndarray      # (m,) previous token, -1 when none
    pos: np.ndarray       # (m,) position index into the pos table
    target: np.ndarray    # (m,)
    bag: np.ndarray       # (n_seq, V) prompt token counts
    logp: np.ndarray = field(default=None)  # (m, V) log-softmax


def _check(params: PolicyParams, seq: TokenSeq) -> None:
    if len(seq.tokens) > params.context:
        raise ValueError(f"sequence length {len(seq.tokens)} exceeds context {params.context}")
    for t in seq.tokens:
        if not 0 <= t < params.vocab_size:
            raise ValueError(f"token id {t} outside vocabulary of size {params.vocab_size}")


def _flatten(params: PolicyParams, batch: Sequence[TokenSeq]) -> _Flat:
    V, L = params.vocab_size, params.max_target
    seq_i, prev, pos, target = [], [], [], []
    bag = np.zeros((len(batch), V))
    for i, s in enumerate(batch):
        _check(params, s)
        if s.split:
            np.add.at(bag[i], list(s.prompt), 1.0)
        for t in range(s.split, len(s.tokens)):
            seq_i.append(i)
            prev.append(s.tokens[t - 1] if t > 0 else -1)
            pos.append(min(t - s.split, L - 1))
            target.append(s.tokens[t])
    as_int = lambda x: np.asarray(x, dtype=np.int64)
    return _Flat(as_int(seq_i), as_int(prev), as_int(pos), as_int(target), bag)


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _logits(params: PolicyParams, seq: np.ndarray, prev: np.ndarray, pos: np.ndarray,
            bag: np.ndarray) -> np.ndarray:
    w = params.views()
    trans = np.where((prev >= 0)[:, None], w["trans"][np.maximum(prev, 0)], 0.0)
    return w["bias"] + trans + w["pos"][pos] + (bag @ w["ctx"])[seq]


def _forward(params: PolicyParams, batch: Sequence[TokenSeq]) -> _Flat:
    flat = _flatten(params, batch)
    flat.logp = _log_softmax(_logits(params, flat.seq, flat.prev, flat.pos, flat.bag))
    return flat


def _backward(params: PolicyParams, flat: _Flat, dlogits: np.ndarray) -> np.ndarray:
    """Chain a gradient w.r.t. every position's logits back onto theta."""
    grad = PolicyParams.zeros(params.vocab_size, params.max_target)
    g = grad.views()
    g["bias"] += dlogits.sum(axis=0)
    has_prev = flat.prev >= 0
    np.add.at(g["trans"], flat.prev[has_prev], dlogits[has_prev])
    np.add.at(g["pos"], flat.pos, dlogits)
    per_seq = np.zeros((flat.bag.shape[0], params.vocab_size))
    np.add.at(per_seq, flat.seq, dlogits)
    g["ctx"] += flat.bag.T @ per_seq
    return grad.theta


def _per_sequence(flat: _Flat, values: np.ndarray, n: int) -> np.ndarray:
    return np.bincount(flat.seq, weights=values, minlength=n).astype(np.float64)


# --- public API ---------------------------------------------------------------

def next_token_distribution(params: PolicyParams, seq: TokenSeq) -> np.ndarray:
    """Conditional distribution for the token that would follow ``seq``."""
    _check(params, seq)
    s = TokenSeq(seq.tokens + (0,), seq.split)
    return np.exp(_forward(params, [s]).logp[-1])


def token_log_probs(params: PolicyParams, seq: TokenSeq) -> np.ndarray:
    flat = _forward(params, [seq])
    return flat.logp[np.arange(len(flat.target)), flat.target]


def log_prob(params: PolicyParams, seq: TokenSeq) -> float:
    return float(token_log_probs(params, seq).sum())


def batch_log_probs(params: PolicyParams, batch: Sequence[TokenSeq]) -> np.ndarray:
    flat = _forward(params, batch)
    return _per_sequence(flat, flat.logp[np.arange(len(flat.target)), flat.target], len(batch))


@dataclass(frozen=True)
class LossReport:
    total: float        # summed NLL over every target token in the batch
    per_token: float
    token_count: int
    grad_norm: float
    loss: float         # mean over sequences of each sequence's summed NLL


def sft_loss_and_grad(params: PolicyParams, batch: Sequence[TokenSeq]) -> tuple[LossReport, np.ndarray]:
    if not batch:
        raise ValueError("batch must be non-empty")
    flat = _forward(params, batch)
    m = len(flat.target)
    nll = -flat.logp[np.arange(m), flat.target]
    dlogits = np.exp(flat.logp)
    dlogits[np.arange(m), flat.target] -= 1.0
    grad = _backward(params, flat, dlogits / len(batch))
    total = float(nll.sum())
    report = LossReport(total, total / m if m else 0.0, m, float(np.linalg.norm(grad)),
                        total / len(batch))
    return report, grad


def sample_batch(params: PolicyParams, prompts: Sequence[Sequence[int]], max_len: int,
                 temperature: float, rng: np.random.Generator,
                 eos: int | None = None) -> tuple[list[TokenSeq], list[np.ndarray]]:
    """Sample continuations for many prompts at once.

    Temperature 0 is greedy. Returned log-probs are under the untempered
    policy so they equal ``token_log_probs`` of the sampled sequence.
    """
    if temperature < 0:
        raise ValueError("temperature must be >= 0")
    V, L = params.vocab_size, params.max_target
    n = len(prompts)
    bag = np.zeros((n, V))
    prev = np.full(n, -1, dtype=np.int64)
    for i, p in enumerate(prompts):
        if p:
            np.add.at(bag[i], list(p), 1.0)
            prev[i] = p[-1]
    out = [[] for _ in range(n)]
    lps = [[] for _ in range(n)]
    alive = np.ones(n, dtype=bool)
    rows = np.arange(n)
    for step in range(max_len):
        if not alive.any():
            break
        idx = rows[alive]
        pos = np.full(len(idx), min(step, L - 1))
        logp = _log_softmax(_logits(params, idx, prev[idx], pos, bag))
        if temperature == 0:
            tok = logp.argmax(axis=1)
        else:
            p = np.exp(_log_softmax(logp / temperature))
            u = rng.random(len(idx))[:, None]
            tok = np.minimum((np.cumsum(p, axis=1) < u).sum(axis=1), V - 1)
        for j, i in enumerate(idx):
            out[i].append(int(tok[j]))
            lps[i].append(float(logp[j, tok[j]]))
            if eos is not None and tok[j] == eos:
                alive[i] = False
        prev[idx] = tok
    seqs = [TokenSeq(tuple(p) + tuple(o), len(p)) for p, o in zip(prompts, out)]
    return seqs, [np.asarray(x) for x in lps]


def sample(params: PolicyParams, prompt: Sequence[int], max_len: int, temperature: float,
           seed: int, eos: int | None = None) -> tuple[TokenSeq, np.ndarray]:
    seqs, lps = sample_batch(params, [list(prompt)], max_len, temperature,
                             np.random.default_rng(seed), eos)
    return seqs[0], lps[0]


class DivergenceError(RuntimeError):
    pass


def train_sft(params: PolicyParams, corpus: Sequence[TokenSeq], epochs: int, lr: float,
              batch_size: int, seed: int, momentum: float = 0.0
              ) -> tuple[PolicyParams, list[float]]:
    """Minibatch SGD on the sequence-mean NLL.

    Returns the trained params and the per-token NLL over the whole corpus
    before training and after each epoch. Batch size is clamped to the corpus.
    """
    if not corpus:
        raise ValueError("corpus must be non-empty")
    batch_size = max(1, min(batch_size, len(corpus)))
    rng = np.random.default_rng(seed)
    theta = params.theta.copy()
    velocity = np.zeros_like(theta)
    curve = [sft_loss_and_grad(params, corpus)[0].per_token]
    for epoch in range(epochs):
        order = rng.permutation(len(corpus))
        for start in range(0, len(corpus), batch_size):
            batch = [corpus[i] for i in order[start:start + batch_size]]
            with np.errstate(over="ignore", invalid="ignore"):  # divergence is reported below
                report, grad = sft_loss_and_grad(params.with_theta(theta), batch)
                velocity = momentum * velocity + grad
                theta = theta - lr * velocity
            if not np.isfinite(report.total) or not np.all(np.isfinite(theta)):
                raise DivergenceError(f"non-finite SFT loss or parameters at epoch {epoch + 1}; "
                                      "lower the learning rate")
        curve.append(sft_loss_and_grad(params.with_theta(theta), corpus)[0].per_token)
    return params.with_theta(theta), curve


# --- checkpoints ---------------------------------------------------------------

def params_hash(params: PolicyParams) -> str:
    return hashlib.sha256(params.theta.tobytes()).hexdigest()


def save_checkpoint(params: PolicyParams, path: str | Path, config_hash: str = "") -> None:
    header = json.dumps({"V": params.vocab_size, "max_target": params.max_target,
                         "context": params.context, "layout": list(LAYOUT), "seed": params.seed,
                         "config_hash": config_hash, "dtype": "<f8"}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(params.theta.astype("<f8").tobytes())


def load_checkpoint(path: str | Path) -> tuple[PolicyParams, dict]:
    data = Path(path).read_bytes()
    if not data.startswith(CHECKPOINT_MAGIC):
        raise ValueError(f"{path}: not a policy checkpoint")
    at = len(CHECKPOINT_MAGIC)
    (n,) = struct.unpack("<I", data[at:at + 4])
    header = json.loads(data[at + 4:at + 4 + n])
    if header["layout"] != list(LAYOUT):
        raise ValueError(f"{path}: unsupported parameter layout {header['layout']}")
    theta = np.frombuffer(data[at + 4 + n:], dtype="<f8").astype(np.float64)
    params = PolicyParams(theta, header["V"], header["max_target"], header["context"], header["seed"])
    return params, header
