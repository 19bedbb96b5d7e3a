"""Adam optimization over the caption pipeline, plus greedy and beam decoding."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tape
from .corpus import BOS_ID, EOS_ID
from .errors import DataError
from .model import ModelConfig, TransformerParams, decode_forward


@dataclass
class TrainConfig:
    batch_size: int = 24
    epochs: int = 32
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9
    grad_clip_norm: float | None = None
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 1:
            raise DataError("batch_size and epochs must be >= 1")
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise DataError("Adam betas must lie in (0, 1)")


@dataclass
class AdamState:
    """Per-parameter first/second moments plus the shared step counter."""

    m: dict
    v: dict
    t: int = 0

    @classmethod
    def for_params(cls, named_params: dict) -> "AdamState":
        return cls(
            m={name: np.zeros_like(p.data) for name, p in named_params.items()},
            v={name: np.zeros_like(p.data) for name, p in named_params.items()},
        )


def global_grad_norm(named_params: dict) -> float:
    total = 0.0
    for p in named_params.values():
        if p.grad is not None:
            total += float((p.grad * p.grad).sum())
    return math.sqrt(total)


def adam_step(named_params: dict, state: AdamState, cfg: TrainConfig) -> None:
    """Bias-corrected Adam update in place; optional global-norm clipping first."""
    missing = [name for name, p in named_params.items() if p.grad is None]
    if missing:
        raise DataError(f"parameters missing gradients: {missing[:5]}")
    clip_scale = 1.0
    if cfg.grad_clip_norm is not None:
        norm = global_grad_norm(named_params)
        if norm > cfg.grad_clip_norm and norm > 0.0:
            clip_scale = cfg.grad_clip_norm / norm
    state.t += 1
    bc1 = 1.0 - cfg.beta1**state.t
    bc2 = 1.0 - cfg.beta2**state.t
    for name, p in named_params.items():
        g = p.grad if clip_scale == 1.0 else p.grad * clip_scale
        m = state.m[name]
        v = state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * (g * g)
        p.data -= cfg.lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)


@dataclass
class StepRecord:
    step: int
    epoch: int
    loss: float


def train(pipeline, entries, cfg: TrainConfig) -> list[StepRecord]:
    """Teacher-forced NLL training; deterministic given cfg.seed.

    One RNG stream drives epoch shuffling and dropout draws, so two runs
    from the same initial parameters produce bitwise-identical histories.
    """
    entries = list(entries)
    if not entries:
        raise DataError("cannot train on an empty corpus")
    rng = np.random.default_rng(cfg.seed)
    named = pipeline.named_parameters()
    state = AdamState.for_params(named)
    dropout_rng = rng if pipeline.config.dropout_rate > 0 else None
    history: list[StepRecord] = []
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(entries))
        for start in range(0, len(entries), cfg.batch_size):
            batch = order[start : start + cfg.batch_size]
            with Tape():
                total = None
                for idx in batch:
                    loss = pipeline.sample_loss(entries[int(idx)], dropout_rng)
                    total = loss if total is None else ad.add(total, loss)
                total = ad.scale(total, 1.0 / len(batch))
                ad.backward(total)
            adam_step(named, state, cfg)
            pipeline.zero_grads()
            history.append(StepRecord(step=step, epoch=epoch, loss=total.item()))
            step += 1
    return history


def write_loss_csv(path: str, history) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "epoch", "loss"])
        for rec in history:
            writer.writerow([rec.step, rec.epoch, repr(rec.loss)])


# ---------------------------------------------------------------------------
# decoding
# ---------------------------------------------------------------------------


@dataclass
class DecodeConfig:
    strategy: str = "greedy"
    beam_width: int = 1
    max_len: int = 64

    def __post_init__(self):
        if self.strategy not in ("greedy", "beam"):
            raise DataError(f"unknown decode strategy {self.strategy!r}")
        if self.beam_width < 1:
            raise DataError("beam_width must be >= 1")
        if self.max_len < 1:
            raise DataError("decode max_len must be >= 1")


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def _next_log_probs(prefixes: np.ndarray, trace, cfg, params) -> np.ndarray:
    with ad.no_grad():
        logits = decode_forward(prefixes, trace, cfg, params)
    return _log_softmax(logits.data[:, -1, :])


def _decode_cap(cfg: ModelConfig, max_len: int) -> int:
    # leave one slot so EOS can always be scored on a <= max_len prefix
    return min(max_len, cfg.max_len - 1)


def _greedy_rollout(trace, cfg, params, cap):
    """Argmax rollout; returns (seq incl BOS/EOS-if-any, total logprob, n_generated).

    The score always prices termination: if the cap cuts the rollout short,
    the EOS log-probability of the final prefix is added, so scores are
    comparable to finished hypotheses' full-sequence log-probabilities.
    """
    seq = [BOS_ID]
    score = 0.0
    for _ in range(cap):
        logp = _next_log_probs(np.asarray([seq]), trace, cfg, params)[0]
        token = int(np.argmax(logp))
        score += float(logp[token])
        if token == EOS_ID:
            return seq + [token], score, len(seq)
        seq.append(token)
    logp = _next_log_probs(np.asarray([seq]), trace, cfg, params)[0]
    return seq, score + float(logp[EOS_ID]), len(seq) - 1


def _strip(seq: list[int]) -> list[int]:
    seq = seq[1:]  # drop BOS
    if seq and seq[-1] == EOS_ID:
        seq = seq[:-1]
    return seq


def greedy_decode(
    trace, cfg: ModelConfig, params: TransformerParams, max_len: int
) -> list[int]:
    """Argmax decoding from BOS until EOS or the length cap."""
    seq, _, _ = _greedy_rollout(trace, cfg, params, _decode_cap(cfg, max_len))
    return _strip(seq)


def beam_decode(
    trace,
    cfg: ModelConfig,
    params: TransformerParams,
    beam_width: int,
    max_len: int,
) -> list[int]:
    """Beam search, final ranking by length-normalized log-probability.

    Live hypotheses expand in lockstep (they share the encoder trace, so
    each step is one batched decoder call).  The top beam_width expansions
    survive each step; ones emitting EOS retire to the finished pool and
    consume their slot, which makes width 1 coincide with greedy exactly.

    Final selection maximizes logprob/length over the finished pool, but
    only among candidates whose raw log-probability is at least the greedy
    rollout's (the rollout itself is always a candidate).  That keeps the
    guarantee that beam search never returns a sequence the model scores
    below the greedy one, while normalization still arbitrates between
    stronger candidates of different lengths.
    """
    cap = _decode_cap(cfg, max_len)
    live: list[tuple[list[int], float]] = [([BOS_ID], 0.0)]
    finished: list[tuple[list[int], float, int]] = []  # (seq, logprob, n_generated)
    for _ in range(cap):
        prefixes = np.asarray([seq for seq, _ in live])
        logp = _next_log_probs(prefixes, trace, cfg, params)
        vocab = logp.shape[1]
        scores = np.asarray([s for _, s in live])[:, None] + logp
        order = np.argsort(-scores.reshape(-1), kind="stable")
        next_live: list[tuple[list[int], float]] = []
        for flat in order[:beam_width]:
            hyp_idx, token = divmod(int(flat), vocab)
            seq, _ = live[hyp_idx]
            score = float(scores[hyp_idx, token])
            if token == EOS_ID:
                finished.append((seq + [token], score, len(seq)))
            else:
                next_live.append((seq + [token], score))
        live = next_live
        if not live:
            break
    if live:  # cap reached: price the EOS continuation into each score
        logp = _next_log_probs(np.asarray([seq for seq, _ in live]), trace, cfg, params)
        for (seq, score), row in zip(live, logp):
            finished.append((seq, score + float(row[EOS_ID]), len(seq) - 1))

    baseline = _greedy_rollout(trace, cfg, params, cap)
    finished.append(baseline)
    floor = baseline[1] - 1e-12
    eligible = [c for c in finished if c[1] >= floor]

    best = max(eligible, key=lambda c: c[1] / max(1, c[2]))
    return _strip(best[0])


def generate(
    trace,
    cfg: ModelConfig,
    params: TransformerParams,
    decode_cfg: DecodeConfig,
) -> list[int]:
    """Decode one report's token ids from an encoder trace."""
    if decode_cfg.strategy == "greedy":
        return greedy_decode(trace, cfg, params, decode_cfg.max_len)
    return beam_decode(trace, cfg, params, decode_cfg.beam_width, decode_cfg.max_len)


def sequence_log_prob(
    token_ids: list[int],
    trace,
    cfg: ModelConfig,
    params: TransformerParams,
) -> float:
    """Model log-probability of BOS -> tokens -> EOS under teacher forcing."""
    seq = [BOS_ID, *token_ids, EOS_ID]
    inputs = np.asarray([seq[:-1]])
    targets = seq[1:]
    with ad.no_grad():
        logits = decode_forward(inputs, trace, cfg, params)
    logp = _log_softmax(logits.data[0])
    return float(sum(logp[t, tok] for t, tok in enumerate(targets)))
