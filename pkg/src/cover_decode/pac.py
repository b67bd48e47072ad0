"""Executable concentration-bound calculators and exact audits.

Everything here is a pure function of empirical summaries; the aggregate
bounds are built compositionally from the two primitive inequalities so a
reported bound is always reproducible from its parts.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Literal, Sequence

from scipy.special import betainc

from .cover import PathEvalRecord
from .errors import ValidationError

__all__ = [
    "PairStats",
    "BoundReport",
    "empirical_bernstein",
    "hoeffding_upper",
    "pair_failure_bound",
    "full_path_bound",
    "beta_quantile",
    "decomposition_audit",
    "pair_stats_from_records",
]


@dataclass(frozen=True)
class PairStats:
    """Empirical summaries for one (step, cluster) pair.

    ``n`` is the survivor-and-cluster count, ``eps_hat`` the conditional
    failure rate, ``v_hat`` the (1/n-normalized) variance of the failure
    indicator, ``p_hat`` the marginal cluster frequency; ``delta`` and
    ``zeta`` are this pair's shares of the confidence budget.
    """

    step: int
    cluster: int
    n: int
    eps_hat: float
    v_hat: float
    p_hat: float
    delta: float
    zeta: float

    def __post_init__(self):
        if not 0.0 <= self.eps_hat <= 1.0 or not 0.0 <= self.p_hat <= 1.0:
            raise ValidationError("eps_hat and p_hat must lie in [0, 1]")
        if self.n > 0 and self.v_hat > self.eps_hat * (1 - self.eps_hat) + 1.0 / self.n:
            raise ValidationError("v_hat inconsistent with a Bernoulli indicator")


@dataclass(frozen=True)
class BoundReport:
    """Aggregate bound plus the per-pair terms it is assembled from."""

    variant: str
    base: float
    per_pair: tuple[dict, ...]
    aggregate: float
    aggregate_clipped: float
    total_confidence: float
    zeta_sample_size: str


def empirical_bernstein(mean: float, var: float, n: int, delta: float) -> float:
    """Variance-adaptive upper bound on a [0, 1] mean:
    ``mean + sqrt(2 v log(3/delta) / n) + 3 log(3/delta) / n``."""
    if n < 1:
        raise ValidationError("empirical_bernstein: n must be >= 1")
    if not 0.0 < delta < 1.0:
        raise ValidationError(f"empirical_bernstein: delta={delta} outside (0, 1)")
    if var < 0:
        raise ValidationError("empirical_bernstein: negative variance")
    log_term = math.log(3.0 / delta)
    return mean + math.sqrt(2.0 * var * log_term / n) + 3.0 * log_term / n


def hoeffding_upper(p_hat: float, n: int, zeta: float) -> float:
    """Hoeffding upper confidence bound on a frequency, clipped to <= 1:
    ``p_hat + sqrt(log(2/zeta) / (2n))``."""
    if n < 1:
        raise ValidationError("hoeffding_upper: n must be >= 1")
    if not 0.0 < zeta < 1.0:
        raise ValidationError(f"hoeffding_upper: zeta={zeta} outside (0, 1)")
    return min(1.0, p_hat + math.sqrt(math.log(2.0 / zeta) / (2.0 * n)))


def pair_failure_bound(stats: PairStats) -> float:
    """Upper bound on one pair's unconditional failure probability: the
    product of the Hoeffding-inflated frequency and the Bernstein-inflated
    conditional error, each factor clipped to [0, 1].

    A pair with no samples gets the vacuous factor 1 for both terms.
    """
    if stats.n == 0:
        return 1.0
    freq = hoeffding_upper(stats.p_hat, stats.n, stats.zeta)
    cond = min(1.0, empirical_bernstein(stats.eps_hat, stats.v_hat,
                                        stats.n, stats.delta))
    return freq * cond


def full_path_bound(
    stats: Sequence[PairStats],
    base: float,
    variant: Literal["main", "appendix"] = "main",
    zeta_sample_size: Literal["pair", "total"] = "pair",
    n_total: int | None = None,
) -> BoundReport:
    """Aggregate full-path non-coverage bound.

    ``base`` is the target level alpha (main variant) or the empirical
    full-path non-coverage rate (appendix variant); each pair adds a
    variance-adaptive slack weighted by its frequency plus a frequency slack
    weighted by its error rate.  ``zeta_sample_size`` selects whether the
    frequency slack uses the per-pair count or the total calibration size
    (the source material displays both; the report records the choice).
    """
    if variant not in ("main", "appendix"):
        raise ValidationError(f"unknown variant {variant!r}")
    keys = [(s.step, s.cluster) for s in stats]
    if len(set(keys)) != len(keys):
        raise ValidationError("full_path_bound: overlapping (step, cluster) pairs")
    total_conf = sum(s.delta + s.zeta for s in stats)
    if total_conf >= 1.0:
        raise ValidationError("full_path_bound: total confidence budget >= 1")
    if zeta_sample_size == "total" and n_total is None:
        raise ValidationError("full_path_bound: n_total required for total variant")

    per_pair = []
    agg = base
    for s in stats:
        if s.n == 0:
            term_b = term_h = 0.0
            vacuous = True
        else:
            # slack-only applications of the two primitives (mean/p_hat = 0)
            term_b = s.p_hat * empirical_bernstein(0.0, s.v_hat, s.n, s.delta)
            n_zeta = n_total if zeta_sample_size == "total" else s.n
            term_h = s.eps_hat * hoeffding_upper(0.0, n_zeta, s.zeta)
            vacuous = False
        per_pair.append({
            "step": s.step, "cluster": s.cluster, "n": s.n,
            "bernstein_term": term_b, "hoeffding_term": term_h,
            "vacuous": vacuous,
        })
        agg += term_b + term_h
    return BoundReport(
        variant=variant,
        base=base,
        per_pair=tuple(per_pair),
        aggregate=agg,
        aggregate_clipped=min(1.0, agg),
        total_confidence=total_conf,
        zeta_sample_size=zeta_sample_size,
    )


def beta_quantile(delta: float, a: float, b: float, tol: float = 1e-10) -> float:
    """delta-quantile of Beta(a, b) by bisection on the regularized
    incomplete beta function."""
    if a <= 0 or b <= 0:
        raise ValidationError("beta_quantile: a and b must be positive")
    if not 0.0 < delta < 1.0:
        raise ValidationError(f"beta_quantile: delta={delta} outside (0, 1)")
    lo, hi = 0.0, 1.0
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if betainc(a, b, mid) < delta:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def pair_stats_from_records(
    records: Sequence[PathEvalRecord],
    delta: float,
    zeta: float,
) -> list[PairStats]:
    """Build per-pair statistics from evaluation records.

    ``n`` counts traces that reached the pair's step alive in that cluster
    (survivor-and-cluster), ``eps_hat`` the fraction of those that failed
    there; ``p_hat`` is the pair's marginal frequency among all step events.
    The confidence budgets are split uniformly over the realized pairs.
    """
    n_traces = len(records)
    reach: dict[tuple[int, int], int] = {}
    fail: dict[tuple[int, int], int] = {}
    for rec in records:
        for st in rec.steps:
            key = (st.step, st.cluster)
            reach[key] = reach.get(key, 0) + 1
            if not st.passed:
                fail[key] = fail.get(key, 0) + 1
    pairs = sorted(reach)
    if not pairs:
        return []
    d_share = delta / len(pairs)
    z_share = zeta / len(pairs)
    out = []
    for key in pairs:
        n = reach[key]
        f = fail.get(key, 0)
        eps_hat = f / n
        v_hat = eps_hat * (1.0 - eps_hat)
        out.append(PairStats(
            step=key[0], cluster=key[1], n=n,
            eps_hat=eps_hat, v_hat=v_hat,
            p_hat=n / n_traces,
            delta=d_share, zeta=z_share,
        ))
    return out


def decomposition_audit(records: Sequence[PathEvalRecord]) -> dict:
    """Exact integer identity check: first-failure tallies must sum to the
    non-covered count, and each pair's tally must equal the failure count
    recomputed from its step events.  Raises on any violation."""
    failures: dict[tuple[int, int], int] = {}
    not_covered = 0
    for rec in records:
        if rec.covered != (rec.first_failure is None):
            raise ValidationError(
                f"audit: record {rec.trace_id!r} has inconsistent covered flag"
            )
        if rec.first_failure is not None:
            not_covered += 1
            failures[rec.first_failure] = failures.get(rec.first_failure, 0) + 1
    if sum(failures.values()) != not_covered:
        raise ValidationError("audit: failure tallies do not sum to non-covered count")
    recount: dict[tuple[int, int], int] = {}
    for rec in records:
        for st in rec.steps:
            if not st.passed:
                key = (st.step, st.cluster)
                recount[key] = recount.get(key, 0) + 1
    if recount != failures:
        bad = set(recount.items()) ^ set(failures.items())
        raise ValidationError(f"audit: per-pair recount mismatch at {sorted(bad)}")
    return {
        "n_records": len(records),
        "n_not_covered": not_covered,
        "pair_failures": {f"{l}:{m}": c for (l, m), c in sorted(failures.items())},
    }
