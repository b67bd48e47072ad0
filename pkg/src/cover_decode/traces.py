"""Score traces, the calibration split, and the package-wide quantile rule.

A trace is one calibration/evaluation example: the token sequence plus the
conformity score of every prefix.  Everything downstream (split CP, dynamic
conformal beam search, cluster quantiles) goes through the single
order-statistic quantile convention defined here, so threshold arithmetic is
bit-identical across modules.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import ValidationError

__all__ = [
    "ScoreTrace",
    "CalibrationSplit",
    "quantile",
    "split_dataset",
    "load_traces",
    "save_traces",
    "to_log_traces",
]


@dataclass(frozen=True)
class ScoreTrace:
    """One example: token ids plus per-prefix conformity scores.

    ``prefix_scores[l-1]`` is the score of the length-``l`` prefix.  When the
    score is the conditional-probability product the sequence is
    non-increasing, but arbitrary finite scores are accepted.
    """

    id: str
    tokens: tuple[int, ...]
    prefix_scores: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(int(t) for t in self.tokens))
        object.__setattr__(
            self, "prefix_scores", tuple(float(s) for s in self.prefix_scores)
        )
        if len(self.tokens) != len(self.prefix_scores):
            raise ValidationError(
                f"trace {self.id!r}: {len(self.tokens)} tokens but "
                f"{len(self.prefix_scores)} prefix scores"
            )
        if len(self.tokens) == 0:
            raise ValidationError(f"trace {self.id!r}: empty token sequence")
        if any(t < 0 for t in self.tokens):
            raise ValidationError(f"trace {self.id!r}: negative token id")
        if not all(math.isfinite(s) for s in self.prefix_scores):
            raise ValidationError(f"trace {self.id!r}: non-finite prefix score")

    def __len__(self) -> int:
        return len(self.tokens)


@dataclass(frozen=True)
class CalibrationSplit:
    """Disjoint index split of a trace list into a clustering part (``i1``)
    and a proper calibration part (``i2``)."""

    i1: tuple[int, ...]
    i2: tuple[int, ...]
    gamma: float
    seed: int


def quantile(tau: float, values) -> float:
    """Order-statistic quantile: the k-th smallest value with
    ``k = clamp(floor((n + 1) * tau), 1, n)``.

    Returns ``+inf`` for an empty collection (the conservative sentinel that
    makes the downstream conformal set empty).  NaNs are rejected.
    """
    arr = np.asarray(list(values) if not isinstance(values, np.ndarray) else values,
                     dtype=np.float64)
    n = arr.size
    if n == 0:
        return math.inf
    if np.isnan(arr).any():
        raise ValidationError("quantile: NaN in values")
    k = math.floor((n + 1) * tau)
    k = min(max(k, 1), n)
    return float(np.partition(arr, k - 1)[k - 1])


def quantile_of_sorted(tau: float, sorted_arr: np.ndarray) -> float:
    """Same rule as :func:`quantile` but for a pre-sorted array (no checks)."""
    n = sorted_arr.size
    if n == 0:
        return math.inf
    k = math.floor((n + 1) * tau)
    k = min(max(k, 1), n)
    return float(sorted_arr[k - 1])


def split_dataset(traces: Sequence[ScoreTrace], gamma: float, seed: int) -> CalibrationSplit:
    """Randomly split trace indices into clustering (size ``floor(gamma*N)``)
    and proper-calibration parts.  Deterministic for a fixed seed."""
    if not traces:
        raise ValidationError("split_dataset: empty trace list")
    if not 0.0 <= gamma <= 1.0:
        raise ValidationError(f"split_dataset: gamma={gamma} outside [0, 1]")
    n = len(traces)
    n1 = math.floor(gamma * n)
    perm = np.random.default_rng(seed).permutation(n)
    i1 = tuple(sorted(int(i) for i in perm[:n1]))
    i2 = tuple(sorted(int(i) for i in perm[n1:]))
    return CalibrationSplit(i1=i1, i2=i2, gamma=gamma, seed=seed)


def load_traces(path) -> list[ScoreTrace]:
    """Load line-delimited trace records.

    Each line is an object with ``id`` (string), ``tokens`` (ints) and
    ``prefix_scores`` (doubles, same length).  Parse/validation failures
    report the offending line number; duplicate ids are rejected.
    """
    traces: list[ScoreTrace] = []
    seen: set[str] = set()
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValidationError(f"{path}:{lineno}: malformed record: {exc}") from exc
            try:
                trace = ScoreTrace(
                    id=str(rec["id"]),
                    tokens=tuple(rec["tokens"]),
                    prefix_scores=tuple(rec["prefix_scores"]),
                )
            except KeyError as exc:
                raise ValidationError(f"{path}:{lineno}: missing field {exc}") from exc
            except ValidationError as exc:
                raise ValidationError(f"{path}:{lineno}: {exc}") from exc
            if trace.id in seen:
                raise ValidationError(f"{path}:{lineno}: duplicate trace id {trace.id!r}")
            seen.add(trace.id)
            traces.append(trace)
    return traces


def save_traces(traces: Iterable[ScoreTrace], path) -> None:
    """Write traces in the line-delimited schema with round-trip precision."""
    with open(path, "w", encoding="utf-8") as fh:
        for t in traces:
            fh.write(
                json.dumps(
                    {"id": t.id, "tokens": list(t.tokens),
                     "prefix_scores": list(t.prefix_scores)}
                )
            )
            fh.write("\n")


def to_log_traces(traces: Sequence[ScoreTrace]) -> list[ScoreTrace]:
    """Map probability-product scores to log domain.

    Log scores are order-preserving, so every quantile threshold selects the
    same element; calibration and decoding work in log domain throughout to
    keep threshold values on a numerically sane scale.
    """
    out = []
    for t in traces:
        if any(s <= 0.0 for s in t.prefix_scores):
            raise ValidationError(
                f"trace {t.id!r}: non-positive score, cannot map to log domain"
            )
        out.append(
            ScoreTrace(
                id=t.id,
                tokens=t.tokens,
                prefix_scores=tuple(math.log(s) for s in t.prefix_scores),
            )
        )
    return out
