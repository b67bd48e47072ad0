"""Reference conformal methods: split CP, beam search, beam-subgroup CP,
and dynamic conformal beam search (DCBS).

Calibration routines are score-domain agnostic: they operate on whatever
``prefix_scores`` the traces carry.  The decode routines compare against the
scorer in log domain, so pair them with calibrations built from log-domain
traces (see :func:`cover_decode.traces.to_log_traces`).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ValidationError
from .scorer import Scorer
from .traces import ScoreTrace, quantile

__all__ = [
    "DCBSCalibration",
    "BeamSet",
    "split_cp_calibrate",
    "beam_search",
    "beam_subgroup_calibrate",
    "dcbs_calibrate",
    "dcbs_decode",
]


@dataclass(frozen=True)
class DCBSCalibration:
    """Per-step thresholds from iterative bottom-``k`` removal.

    ``surviving_counts[l]`` is the number of still-alive calibration traces
    after the step-``l`` removal (index 0 is the initial count); thresholds
    for steps where the survivor pool ran dry are ``+inf``.
    """

    alpha: float
    thresholds: tuple[float, ...]
    surviving_counts: tuple[int, ...]
    exhausted: bool = False


@dataclass(frozen=True)
class BeamSet:
    """Beam-search proposals: ``(tokens, cumulative log score)`` pairs,
    sorted by score descending with lower-token-id tie-break."""

    candidates: tuple[tuple[tuple[int, ...], float], ...]
    width: int

    def sequences(self) -> set[tuple[int, ...]]:
        return {toks for toks, _ in self.candidates}


def split_cp_calibrate(scores, alpha: float, n: int | None = None) -> float:
    """Eq.-(1)-style split-CP threshold: the quantile of the calibration
    scores at the inflated level ``(N + 1) * alpha / N``."""
    scores = list(scores)
    if not scores:
        raise ValidationError("split_cp_calibrate: empty score set")
    if not 0.0 < alpha < 1.0:
        raise ValidationError(f"split_cp_calibrate: alpha={alpha} outside (0, 1)")
    if n is None:
        n = len(scores)
    return quantile((n + 1) * alpha / n, scores)


def beam_search(scorer: Scorer, width: int, max_len: int) -> BeamSet:
    """Top-``width`` sequences by cumulative log score.

    Terminated sequences are frozen but keep competing for beam slots.
    Ties break toward the lexicographically smaller token sequence.
    """
    if width < 1:
        raise ValidationError("beam_search: width must be >= 1")
    if not scorer.supports_expansion:
        raise ValidationError("beam_search: scorer does not support expansion")

    beam: list[tuple[tuple[int, ...], float]] = [((), 0.0)]
    for _ in range(max_len):
        expanded: list[tuple[tuple[int, ...], float]] = []
        any_open = False
        for toks, score in beam:
            if toks and (toks[-1] == scorer.terminator or len(toks) >= max_len):
                expanded.append((toks, score))
                continue
            any_open = True
            logp = scorer.next_token_logprobs(toks)
            for a in range(scorer.vocab_size):
                if logp[a] == -math.inf:
                    continue
                expanded.append((toks + (a,), score + float(logp[a])))
        if not any_open:
            break
        expanded.sort(key=lambda c: (-c[1], c[0]))
        beam = expanded[:width]
    beam = [c for c in beam if c[0]]
    return BeamSet(candidates=tuple(beam), width=width)


def beam_subgroup_calibrate(
    traces: Sequence[ScoreTrace], scorer: Scorer, width: int, alpha: float
) -> tuple[float, int]:
    """Split-CP threshold restricted to the in-beam calibration subgroup.

    Returns ``(threshold, |B|)``; an empty subgroup yields the ``+inf``
    sentinel (downstream prediction sets are empty).
    """
    beam = beam_search(scorer, width, scorer.max_len).sequences()
    in_beam = [t for t in traces if t.tokens in beam]
    if not in_beam:
        return math.inf, 0
    scores = [t.prefix_scores[-1] for t in in_beam]
    return split_cp_calibrate(scores, alpha), len(in_beam)


def dcbs_calibrate(
    traces: Sequence[ScoreTrace], alpha: float, max_len: int
) -> DCBSCalibration:
    """Iterative per-step calibration.

    At step ``l`` the alive pool (survivors long enough to have a step-``l``
    score) is ordered by increasing ``r^{1:l}``; the bottom
    ``k = clamp(floor((N + 1) * alpha), 1, N)`` block is removed and its top
    element becomes the threshold.  Traces that terminated before ``l`` stay
    covered and are neither pruned nor counted.
    """
    if not 0.0 < alpha < 1.0:
        raise ValidationError(f"dcbs_calibrate: alpha={alpha} outside (0, 1)")
    if not traces:
        raise ValidationError("dcbs_calibrate: empty trace list")

    survivors = set(range(len(traces)))
    thresholds: list[float] = []
    counts: list[int] = []
    exhausted = False
    alive0 = [i for i in survivors if len(traces[i]) >= 1]
    counts.append(len(alive0))
    for l in range(1, max_len + 1):
        alive = [i for i in survivors if len(traces[i]) >= l]
        n_prev = len(alive)
        if n_prev == 0:
            exhausted = True
            thresholds.extend([math.inf] * (max_len - l + 1))
            counts.extend([0] * (max_len - l + 1))
            break
        k = math.floor((n_prev + 1) * alpha)
        k = min(max(k, 1), n_prev)
        order = sorted(alive, key=lambda i: (traces[i].prefix_scores[l - 1], i))
        thresholds.append(traces[order[k - 1]].prefix_scores[l - 1])
        for i in order[:k]:
            survivors.discard(i)
        counts.append(n_prev - k)
    return DCBSCalibration(
        alpha=alpha,
        thresholds=tuple(thresholds),
        surviving_counts=tuple(counts),
        exhausted=exhausted,
    )


def dcbs_decode(
    scorer: Scorer,
    calib: DCBSCalibration,
    max_len: int,
    max_nodes: int | None = None,
) -> tuple[set[tuple[int, ...]], int]:
    """Conformal beam expansion: keep every continuation whose cumulative
    log score passes the step threshold; terminator-ending paths freeze.

    Returns ``(sequences, expanded_node_count)`` where the node count is the
    total number of kept prefixes across all steps (search-space size).
    """
    if not scorer.supports_expansion:
        raise ValidationError("dcbs_decode: scorer does not support expansion")
    frontier: list[tuple[tuple[int, ...], float]] = [((), 0.0)]
    finished: set[tuple[int, ...]] = set()
    nodes = 0
    for l in range(1, max_len + 1):
        thr = calib.thresholds[l - 1] if l - 1 < len(calib.thresholds) else math.inf
        nxt: list[tuple[tuple[int, ...], float]] = []
        for toks, score in frontier:
            logp = scorer.next_token_logprobs(toks)
            for a in range(scorer.vocab_size):
                s = score + float(logp[a])
                if s < thr:
                    continue
                nodes += 1
                if max_nodes is not None and nodes > max_nodes:
                    raise ValidationError(
                        f"dcbs_decode: expansion exceeded {max_nodes} nodes"
                    )
                seq = toks + (a,)
                if a == scorer.terminator:
                    finished.add(seq)
                else:
                    nxt.append((seq, s))
        frontier = nxt
        if not frontier:
            break
    finished.update(toks for toks, _ in frontier)
    return finished, nodes
