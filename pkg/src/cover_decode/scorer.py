"""Scorers and the synthetic autoregressive generator.

A scorer exposes the conformity score of token prefixes.  The concrete
implementation here is a tabular Markov model whose full conditional tables
are known, which makes every coverage guarantee in this package checkable by
direct simulation or exhaustive enumeration.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import UnsupportedOperationError, ValidationError
from .traces import ScoreTrace

__all__ = [
    "Scorer",
    "TabularARModel",
    "LongTailConfig",
    "make_longtail_model",
    "make_uniform_model",
    "sequence_score",
    "sequence_logscore",
    "next_token_scores",
    "sample_dataset",
    "save_model",
    "load_model",
]

_PROB_TOL = 1e-9


class Scorer:
    """Behavioral contract for prefix scorers.

    ``next_token_logprobs`` returns the length-V vector of conditional log
    probabilities for the next position.  Trace-backed scorers cannot expand
    and advertise ``supports_expansion = False``.
    """

    supports_expansion: bool = False
    vocab_size: int
    max_len: int
    terminator: int

    def next_token_logprobs(self, prefix: Sequence[int]) -> np.ndarray:
        raise UnsupportedOperationError(
            f"{type(self).__name__} does not support expansion"
        )


@dataclass
class TabularARModel(Scorer):
    """Order-k Markov model over a finite vocabulary with explicit tables.

    ``conditional_probs`` maps a context tuple (the last ``min(order, l)``
    tokens of the prefix) to a probability vector over the vocabulary.  One
    reserved id is the terminator; every context must give it positive mass
    so sampled sequences terminate.
    """

    vocab_size: int
    order: int
    max_len: int
    terminator: int
    conditional_probs: dict[tuple[int, ...], np.ndarray]
    supports_expansion: bool = True

    def __post_init__(self):
        if not 0 <= self.terminator < self.vocab_size:
            raise ValidationError("terminator outside vocabulary")
        for ctx, p in self.conditional_probs.items():
            p = np.asarray(p, dtype=np.float64)
            if p.shape != (self.vocab_size,):
                raise ValidationError(f"context {ctx}: wrong vector length")
            if (p < 0).any():
                raise ValidationError(f"context {ctx}: negative probability")
            if abs(float(p.sum()) - 1.0) > _PROB_TOL:
                raise ValidationError(f"context {ctx}: probabilities sum to {p.sum()}")
            self.conditional_probs[ctx] = p

    def _context(self, prefix: Sequence[int]) -> tuple[int, ...]:
        k = min(self.order, len(prefix))
        return tuple(int(t) for t in prefix[len(prefix) - k:])

    def next_token_probs(self, prefix: Sequence[int]) -> np.ndarray:
        ctx = self._context(prefix)
        try:
            return self.conditional_probs[ctx]
        except KeyError:
            raise ValidationError(f"no conditional table for context {ctx}") from None

    def next_token_logprobs(self, prefix: Sequence[int]) -> np.ndarray:
        p = self.next_token_probs(prefix)
        with np.errstate(divide="ignore"):
            return np.log(p)


def sequence_logscore(scorer: Scorer, prefix: Sequence[int]) -> float:
    """Log of the conditional-probability product over the prefix."""
    if len(prefix) == 0:
        raise ValidationError("sequence_score: empty prefix")
    if len(prefix) > scorer.max_len:
        raise ValidationError(
            f"sequence_score: prefix length {len(prefix)} exceeds L={scorer.max_len}"
        )
    total = 0.0
    for k, tok in enumerate(prefix):
        total += float(scorer.next_token_logprobs(prefix[:k])[tok])
    return total


def sequence_score(scorer: Scorer, prefix: Sequence[int]) -> float:
    """Probability-product conformity score of a prefix."""
    return math.exp(sequence_logscore(scorer, prefix))


def next_token_scores(scorer: Scorer, prefix: Sequence[int]) -> np.ndarray:
    """Vector over the vocabulary: entry ``a`` is the score of ``prefix + a``."""
    if not scorer.supports_expansion:
        raise UnsupportedOperationError("scorer does not support expansion")
    if len(prefix) >= scorer.max_len:
        raise ValidationError("prefix too long to extend within max_len")
    base = sequence_logscore(scorer, prefix) if len(prefix) else 0.0
    return np.exp(base + scorer.next_token_logprobs(prefix))


@dataclass(frozen=True)
class LongTailConfig:
    """Generator config for a head/tail token regime.

    ``tail_mass`` is the total per-step conditional mass routed to the tail
    group; the remainder goes to the head group (which must contain the
    terminator).  ``noise`` jitters within-group masses per context, bounded
    so that every head token strictly dominates every tail token.
    """

    vocab_size: int
    order: int
    max_len: int
    head_tokens: frozenset[int]
    tail_tokens: frozenset[int]
    tail_mass: float
    noise: float
    seed: int
    terminator: int = 0

    def __post_init__(self):
        object.__setattr__(self, "head_tokens", frozenset(self.head_tokens))
        object.__setattr__(self, "tail_tokens", frozenset(self.tail_tokens))
        if self.head_tokens & self.tail_tokens:
            raise ValidationError("head and tail token sets overlap")
        if not 0.0 < self.tail_mass < 0.5:
            raise ValidationError(f"tail_mass={self.tail_mass} outside (0, 0.5)")
        if self.noise < 0:
            raise ValidationError("noise must be non-negative")
        if self.terminator not in self.head_tokens:
            raise ValidationError("terminator must belong to the head group")
        for tok in self.head_tokens | self.tail_tokens:
            if not 0 <= tok < self.vocab_size:
                raise ValidationError(f"token {tok} outside vocabulary")
        if self.order < 0 or self.max_len < 1:
            raise ValidationError("order must be >= 0 and max_len >= 1")


def _all_contexts(vocab: Sequence[int], order: int):
    """Context tuples of every length 0..order over the given alphabet."""
    ctxs: list[tuple[int, ...]] = [()]
    frontier: list[tuple[int, ...]] = [()]
    for _ in range(order):
        frontier = [c + (t,) for c in frontier for t in vocab]
        ctxs.extend(frontier)
    return ctxs


def make_longtail_model(config: LongTailConfig) -> TabularARModel:
    """Materialize the head/tail regime as a tabular model.

    Within each context the tail group gets exactly ``tail_mass`` and the
    head group the rest; masses inside a group are jittered by a bounded
    multiplicative factor in ``[1/(1+noise), 1+noise]`` and renormalized, so
    group totals are exact and head-over-tail dominance is provable from the
    separation precondition checked below.
    """
    head = sorted(config.head_tokens)
    tail = sorted(config.tail_tokens)
    factor = (1.0 + config.noise) ** 4
    if (1.0 - config.tail_mass) / len(head) < config.tail_mass / len(tail) * factor:
        raise ValidationError(
            "head/tail separation violated: reduce noise or tail_mass, "
            "or rebalance group sizes"
        )
    rng = np.random.default_rng(config.seed)
    emitting = [t for t in range(config.vocab_size)
                if t in config.head_tokens or t in config.tail_tokens]
    probs: dict[tuple[int, ...], np.ndarray] = {}
    for ctx in _all_contexts(emitting, config.order):
        if ctx and ctx[-1] == config.terminator:
            continue  # nothing follows the terminator
        p = np.zeros(config.vocab_size)
        for group, mass in ((head, 1.0 - config.tail_mass), (tail, config.tail_mass)):
            mult = (1.0 + config.noise) ** rng.uniform(-1.0, 1.0, size=len(group))
            mult /= mult.sum()
            for tok, w in zip(group, mult):
                p[tok] = mass * w
        probs[ctx] = p
    return TabularARModel(
        vocab_size=config.vocab_size,
        order=config.order,
        max_len=config.max_len,
        terminator=config.terminator,
        conditional_probs=probs,
    )


def make_uniform_model(vocab_size: int, max_len: int, terminator: int = 0) -> TabularARModel:
    """Order-0 model, uniform over the whole vocabulary (terminator included)."""
    p = np.full(vocab_size, 1.0 / vocab_size)
    return TabularARModel(
        vocab_size=vocab_size, order=0, max_len=max_len,
        terminator=terminator, conditional_probs={(): p},
    )


def sample_dataset(model: TabularARModel, n: int, seed: int,
                   id_prefix: str | None = None) -> list[ScoreTrace]:
    """Sample ``n`` i.i.d. traces autoregressively (terminator or length L).

    Per-trace child seeds keep the output independent of any sharding, and
    ids embed the seed so datasets from different seeds never collide.
    """
    if n < 1:
        raise ValidationError("sample_dataset: n must be >= 1")
    if id_prefix is None:
        id_prefix = f"s{seed}"
    children = np.random.SeedSequence(seed).spawn(n)
    traces = []
    for i, child in enumerate(children):
        rng = np.random.default_rng(child)
        tokens: list[int] = []
        logscores: list[float] = []
        total = 0.0
        while len(tokens) < model.max_len:
            p = model.next_token_probs(tokens)
            tok = int(rng.choice(model.vocab_size, p=p))
            total += math.log(p[tok])
            tokens.append(tok)
            logscores.append(total)
            if tok == model.terminator:
                break
        traces.append(
            ScoreTrace(
                id=f"{id_prefix}-{i:06d}",
                tokens=tuple(tokens),
                prefix_scores=tuple(math.exp(s) for s in logscores),
            )
        )
    return traces


def save_model(model: TabularARModel, path) -> None:
    doc = {
        "V": model.vocab_size,
        "order": model.order,
        "L": model.max_len,
        "terminator": model.terminator,
        "contexts": [
            {"ctx": list(ctx), "probs": [float(x) for x in p]}
            for ctx, p in sorted(model.conditional_probs.items())
        ],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)


def load_model(path) -> TabularARModel:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    try:
        return TabularARModel(
            vocab_size=int(doc["V"]),
            order=int(doc["order"]),
            max_len=int(doc["L"]),
            terminator=int(doc["terminator"]),
            conditional_probs={
                tuple(int(t) for t in e["ctx"]): np.asarray(e["probs"], dtype=np.float64)
                for e in doc["contexts"]
            },
        )
    except KeyError as exc:
        raise ValidationError(f"{path}: missing model field {exc}") from exc
