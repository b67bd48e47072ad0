"""Cluster-step conformal calibration: per-(step, cluster) quantile
thresholds, the full-path coverage indicator, the dual objective, the greedy
trade-off optimizer, and inference-time conformal expansion.

All calibration here runs in log score domain (see ``traces.to_log_traces``);
quantile thresholds select the same order statistics either way, and log
thresholds keep the objective's threshold sum on a scale comparable to the
error-regularization term.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .clustering import (
    DEFAULT_CLUSTERS,
    DEFAULT_MIN_COUNT,
    DEFAULT_TAU_GRID,
    ClusterAssignment,
    build_assignment,
)
from .errors import InfeasibleError, ValidationError
from .scorer import Scorer
from .traces import ScoreTrace, quantile_of_sorted, split_dataset, to_log_traces

__all__ = [
    "BetaMatrix",
    "CalibratedModel",
    "PathEvalRecord",
    "StepEval",
    "ScorePanel",
    "cluster_quantile",
    "coverage_indicator",
    "empirical_cluster_error",
    "objective",
    "optimize",
    "calibrate",
    "cover_decode",
    "evaluate_panel",
    "save_calibrated",
    "load_calibrated",
]

DEFAULT_BUDGET = 2000


@dataclass
class BetaMatrix:
    """Learnable quantile levels, one per (cluster, step bucket).

    Row ``m`` in ``0..M-1`` is a cluster, row ``M`` the null cluster; all
    steps in a bucket alias one column.
    """

    values: np.ndarray  # shape (M + 1, n_buckets)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if ((self.values < 0) | (self.values > 1)).any():
            raise ValidationError("beta entries must lie in [0, 1]")

    def copy(self) -> "BetaMatrix":
        return BetaMatrix(self.values.copy())

    @classmethod
    def zeros(cls, n_clusters: int, n_buckets: int) -> "BetaMatrix":
        return cls(np.zeros((n_clusters + 1, n_buckets)))


@dataclass(frozen=True)
class StepEval:
    step: int
    cluster: int
    score: float
    threshold: float
    passed: bool


@dataclass(frozen=True)
class PathEvalRecord:
    """Per-trace evaluation: step outcomes up to (and including) the first
    failing step; later steps are never marked passed."""

    trace_id: str
    steps: tuple[StepEval, ...]
    first_failure: tuple[int, int] | None
    covered: bool


class ScorePanel:
    """Vectorized view of a trace set under a cluster assignment.

    Holds padded (n, L) score and cluster-id matrices plus per-(step,
    cluster) sorted score arrays for O(1) quantile lookups.
    """

    def __init__(self, traces: Sequence[ScoreTrace], assignment: ClusterAssignment,
                 max_len: int, score_domain: str = "linear"):
        if score_domain not in ("linear", "log"):
            raise ValidationError(f"unknown score domain {score_domain!r}")
        self.traces = list(traces)
        self.assignment = assignment
        self.max_len = max_len
        self.score_domain = score_domain
        n = len(self.traces)
        m_null = assignment.null_id
        self.lengths = np.array([min(len(t), max_len) for t in self.traces])
        self.scores = np.zeros((n, max_len))
        self.clusters = np.full((n, max_len), m_null, dtype=np.int64)
        self.alive = np.zeros((n, max_len), dtype=bool)
        for i, t in enumerate(self.traces):
            ln = min(len(t), max_len)
            self.scores[i, :ln] = t.prefix_scores[:ln]
            self.alive[i, :ln] = True
            for l in range(1, ln + 1):
                self.clusters[i, l - 1] = assignment.cluster_of(l, t.tokens[l - 1])
        # sorted per-(l, m) score pools; null pool = all alive step-l scores
        self.sorted_lm: list[list[np.ndarray]] = []
        for l in range(1, max_len + 1):
            col_alive = self.alive[:, l - 1]
            row = []
            for m in range(m_null):
                vals = self.scores[col_alive & (self.clusters[:, l - 1] == m), l - 1]
                row.append(np.sort(vals))
            row.append(np.sort(self.scores[col_alive, l - 1]))
            self.sorted_lm.append(row)

    @property
    def n(self) -> int:
        return len(self.traces)

    def pool_size(self, step: int, cluster: int) -> int:
        return int(self.sorted_lm[step - 1][cluster].size)

    def thresholds(self, beta: BetaMatrix) -> np.ndarray:
        """(L, M+1) threshold matrix; empty pools give +inf."""
        m_null = self.assignment.null_id
        out = np.empty((self.max_len, m_null + 1))
        for l in range(1, self.max_len + 1):
            b = self.assignment.bucket_index(l)
            for m in range(m_null + 1):
                out[l - 1, m] = quantile_of_sorted(
                    beta.values[m, b], self.sorted_lm[l - 1][m]
                )
        return out

    def pass_matrix(self, thr: np.ndarray) -> np.ndarray:
        """(n, L) step-pass indicators; padded steps count as passed."""
        step_thr = thr[np.arange(self.max_len)[None, :], self.clusters]
        with np.errstate(invalid="ignore"):
            ok = self.scores >= step_thr
        return ok | ~self.alive

    def coverage(self, thr: np.ndarray) -> float:
        return float(self.pass_matrix(thr).all(axis=1).mean())

    def eps_matrix(self, thr: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Empirical cluster-step errors and their survivor denominators.

        ``eps[l-1, m]`` is the fraction of traces that reached step ``l``
        alive with step cluster ``m`` after passing every earlier step, and
        fail at ``l``; pairs with an empty conditioning set report 0.
        """
        m_null = self.assignment.null_id
        ok = self.pass_matrix(thr)
        survived_before = np.ones((self.n, self.max_len), dtype=bool)
        if self.max_len > 1:
            survived_before[:, 1:] = np.cumprod(ok[:, :-1], axis=1).astype(bool)
        eps = np.zeros((self.max_len, m_null + 1))
        denom = np.zeros((self.max_len, m_null + 1), dtype=np.int64)
        for l in range(self.max_len):
            mask = self.alive[:, l] & survived_before[:, l]
            cl = self.clusters[mask, l]
            d = np.bincount(cl, minlength=m_null + 1)
            f = np.bincount(cl[~ok[mask, l]], minlength=m_null + 1)
            denom[l] = d
            with np.errstate(invalid="ignore", divide="ignore"):
                eps[l] = np.where(d > 0, f / np.maximum(d, 1), 0.0)
        return eps, denom


def cluster_quantile(beta: BetaMatrix, step: int, cluster: int,
                     panel: ScorePanel) -> float:
    """Threshold for one (step, cluster) pair under the package quantile
    convention evaluated at the pair's beta level; +inf for an empty pool."""
    b = panel.assignment.bucket_index(step)
    return quantile_of_sorted(
        beta.values[cluster, b], panel.sorted_lm[step - 1][cluster]
    )


def _lambda_at(lam, step: int, cluster: int) -> float:
    if isinstance(lam, Mapping):
        return float(lam.get((step, cluster), 0.0))
    return float(lam)


def objective(beta: BetaMatrix, panel: ScorePanel, lam=1.0,
              thr: np.ndarray | None = None) -> tuple[float, float]:
    """Dual objective: sum of thresholds minus weighted cluster-step errors,
    over pairs with a non-empty score pool.  Also returns the constraint
    value (mean full-path coverage on the panel).

    Thresholds enter the sum on the conformity-score scale.  A panel built
    over log scores declares ``score_domain="log"`` and its thresholds are
    exponentiated back, so the size term stays commensurate with the
    lambda-weighted error fractions.
    """
    if thr is None:
        thr = panel.thresholds(beta)
    eps, _ = panel.eps_matrix(thr)
    total = 0.0
    m_null = panel.assignment.null_id
    log_domain = panel.score_domain == "log"
    for l in range(1, panel.max_len + 1):
        for m in range(m_null + 1):
            if panel.pool_size(l, m) == 0:
                continue
            t = math.exp(thr[l - 1, m]) if log_domain else thr[l - 1, m]
            total += t - _lambda_at(lam, l, m) * eps[l - 1, m]
    return total, panel.coverage(thr)


def coverage_indicator(
    trace: ScoreTrace,
    thresholds: Mapping[tuple[int, int], float],
    assignment: ClusterAssignment,
    max_len: int | None = None,
) -> tuple[int, PathEvalRecord]:
    """Full-path pass/fail of one trace against a threshold table.

    The record stops at the first failing (step, cluster) pair; missing
    table entries act as the +inf sentinel (automatic failure).
    """
    steps: list[StepEval] = []
    first_failure = None
    limit = len(trace) if max_len is None else min(len(trace), max_len)
    for l in range(1, limit + 1):
        m = assignment.cluster_of(l, trace.tokens[l - 1])
        thr = thresholds.get((l, m), math.inf)
        score = trace.prefix_scores[l - 1]
        passed = score >= thr
        steps.append(StepEval(step=l, cluster=m, score=score,
                              threshold=thr, passed=passed))
        if not passed:
            first_failure = (l, m)
            break
    covered = first_failure is None
    return int(covered), PathEvalRecord(
        trace_id=trace.id, steps=tuple(steps),
        first_failure=first_failure, covered=covered,
    )


def empirical_cluster_error(step: int, cluster: int, beta: BetaMatrix,
                            panel: ScorePanel) -> tuple[float, int]:
    """Error rate for one pair plus the size of its conditioning set."""
    eps, denom = panel.eps_matrix(panel.thresholds(beta))
    return float(eps[step - 1, cluster]), int(denom[step - 1, cluster])


def optimize(
    panel: ScorePanel,
    alpha: float,
    lam=1.0,
    init_coord: tuple[int, int] | None = None,
    budget: int = DEFAULT_BUDGET,
    increment: float | None = None,
    seed: int = 0,
) -> tuple[BetaMatrix, list[dict]]:
    """Greedy trade-off optimizer over the beta matrix.

    Phase 1 anchors a single coordinate at 1 and lowers it on the ``1/n``
    grid until mean panel coverage reaches ``1 - alpha + 1/n``.  Phase 2
    spends the budget on random coordinates, raising each as far as the
    coverage constraint allows (the raise search is a binary search over the
    epsilon grid, equivalent to stepwise raising) and accepting the move only
    when the objective strictly improves.  The returned beta always
    satisfies mean coverage >= 1 - alpha on the panel.
    """
    if not 0.0 < alpha < 1.0:
        raise ValidationError(f"optimize: alpha={alpha} outside (0, 1)")
    if budget < 0:
        raise ValidationError("optimize: budget must be >= 0")
    n = panel.n
    if n == 0:
        raise ValidationError("optimize: empty calibration panel")
    eps_step = 1.0 / n if increment is None else float(increment)
    m_null = panel.assignment.null_id
    n_buckets = len(panel.assignment.buckets)
    coords = [(m, b) for m in range(m_null + 1) for b in range(n_buckets)]

    if init_coord is None:
        # anchor on the (cluster, step) pair with the largest score pool
        best = max(
            ((m, panel.assignment.bucket_index(l), panel.pool_size(l, m))
             for l in range(1, panel.max_len + 1) for m in range(m_null)),
            key=lambda x: x[2],
            default=(m_null, 0, 0),
        )
        init_coord = (best[0], best[1])
    k, j = init_coord

    target = 1.0 - alpha + 1.0 / n
    if target > 1.0 + 1e-12:
        raise InfeasibleError(
            f"coverage target 1-alpha+1/n = {target} exceeds 1; "
            f"need more calibration data"
        )

    beta = BetaMatrix.zeros(m_null, n_buckets)
    audit: list[dict] = []

    def coverage_with(val_matrix: np.ndarray) -> float:
        return panel.coverage(panel.thresholds(BetaMatrix(val_matrix)))

    # Phase 1: lower the anchor on the 1/n grid until coverage >= target.
    # Coverage is monotone non-decreasing as the anchor drops, so binary
    # search over the grid reproduces the stepwise loop exactly.
    grid_lo, grid_hi = 0, n  # anchor value = 1 - t/n
    def phase1_cov(t: int) -> float:
        vals = beta.values.copy()
        vals[k, j] = max(0.0, 1.0 - t / n)
        return coverage_with(vals)

    if phase1_cov(n) < target - 1e-12:
        raise InfeasibleError("coverage constraint unsatisfiable even at beta=0")
    while grid_lo < grid_hi:
        mid = (grid_lo + grid_hi) // 2
        if phase1_cov(mid) >= target - 1e-12:
            grid_hi = mid
        else:
            grid_lo = mid + 1
    beta.values[k, j] = max(0.0, 1.0 - grid_lo / n)
    thr = panel.thresholds(beta)
    cov = panel.coverage(thr)
    obj, _ = objective(beta, panel, lam, thr)
    audit.append({
        "phase": 1, "coord": [k, j], "beta": float(beta.values[k, j]),
        "coverage": cov, "objective": obj,
    })

    floor = 1.0 - alpha
    rng = np.random.default_rng(seed)
    for it in range(budget):
        while True:
            m, b = coords[int(rng.integers(len(coords)))]
            if (m, b) != (k, j):
                break
        base_val = beta.values[m, b]
        t_max = int(math.floor((1.0 - base_val) / eps_step + 1e-9))

        def raised_cov(t: int) -> float:
            vals = beta.values.copy()
            vals[m, b] = min(1.0, base_val + t * eps_step)
            return coverage_with(vals)

        lo, hi = 0, t_max
        while lo < hi:
            mid = (lo + hi + 1) // 2
            if raised_cov(mid) >= floor - 1e-12:
                lo = mid
            else:
                hi = mid - 1
        accepted = False
        new_val = base_val
        cand_cov = cov
        cand_obj = obj
        if lo > 0:
            cand = beta.copy()
            cand.values[m, b] = min(1.0, base_val + lo * eps_step)
            cand_thr = panel.thresholds(cand)
            cand_cov = panel.coverage(cand_thr)
            cand_obj, _ = objective(cand, panel, lam, cand_thr)
            if cand_obj > obj:
                beta = cand
                cov = cand_cov
                obj = cand_obj
                accepted = True
                new_val = float(cand.values[m, b])
        audit.append({
            "phase": 2, "iter": it, "coord": [m, b],
            "beta_before": float(base_val), "beta_after": float(new_val),
            "coverage": cov, "coverage_candidate": cand_cov,
            "objective": obj, "objective_candidate": cand_obj,
            "accepted": accepted,
        })
    assert cov >= floor - 1e-12
    return beta, audit


@dataclass
class CalibratedModel:
    """Persisted calibration artifact: cluster assignment, learned beta,
    per-(step, cluster) thresholds, and run metadata.

    Thresholds are in log score domain (``metadata["score_domain"]``)."""

    assignment: ClusterAssignment
    beta: BetaMatrix
    thresholds: dict
    alpha: float
    lam: float
    metadata: dict = field(default_factory=dict)

    @property
    def max_len(self) -> int:
        return max(l for l, _ in self.thresholds)

    def threshold(self, step: int, cluster: int) -> float:
        return self.thresholds.get((step, cluster), math.inf)


def calibrate(
    traces: Sequence[ScoreTrace],
    alpha: float,
    gamma: float = 0.5,
    lam: float = 1.0,
    n_clusters: int = DEFAULT_CLUSTERS,
    min_count: int = DEFAULT_MIN_COUNT,
    bucket_width: int = 1,
    tau_grid: Sequence[float] = DEFAULT_TAU_GRID,
    budget: int = DEFAULT_BUDGET,
    max_len: int | None = None,
    seed: int = 0,
    init_coord: tuple[int, int] | None = None,
) -> tuple[CalibratedModel, list[dict]]:
    """End-to-end calibration: split, cluster on D1, optimize beta on D2,
    and freeze the per-(step, cluster) thresholds.

    Input traces carry raw probability-product scores; they are mapped to
    log domain internally and the persisted thresholds are log thresholds.
    """
    if max_len is None:
        max_len = max(len(t) for t in traces)
    log_traces = to_log_traces(traces)
    split = split_dataset(log_traces, gamma, seed)
    d1 = [log_traces[i] for i in split.i1]
    d2 = [log_traces[i] for i in split.i2]
    assignment = build_assignment(
        d1, max_len, bucket_width, n_clusters=n_clusters,
        min_count=min_count, tau_grid=tau_grid, seed=seed,
    )
    panel = ScorePanel(d2, assignment, max_len, score_domain="log")
    beta, audit = optimize(
        panel, alpha, lam=lam, budget=budget, seed=seed, init_coord=init_coord,
    )
    thr = panel.thresholds(beta)
    thresholds = {
        (l, m): float(thr[l - 1, m])
        for l in range(1, max_len + 1)
        for m in range(assignment.null_id + 1)
    }
    model = CalibratedModel(
        assignment=assignment,
        beta=beta,
        thresholds=thresholds,
        alpha=alpha,
        lam=lam,
        metadata={
            "score_domain": "log",
            "seed": seed,
            "gamma": gamma,
            "bucket_width": bucket_width,
            "tau_grid": list(tau_grid),
            "M": n_clusters,
            "min_count": min_count,
            "budget": budget,
            "n_total": len(traces),
            "n_d1": len(d1),
            "n_d2": len(d2),
            "max_len": max_len,
            "calibration_ids": [t.id for t in traces],
        },
    )
    return model, audit


def cover_decode(
    scorer: Scorer,
    model: CalibratedModel,
    max_len: int | None = None,
    max_nodes: int | None = None,
) -> tuple[set[tuple[int, ...]], int]:
    """Inference-time conformal expansion: keep a continuation iff its
    cumulative log score passes the threshold of its (step, cluster) pair.

    Returns ``(sequences, expanded_node_count)``; terminator-ending paths
    freeze into the output, all others run to ``max_len``.
    """
    if not scorer.supports_expansion:
        raise ValidationError("cover_decode: scorer does not support expansion")
    if max_len is None:
        max_len = model.max_len
    frontier: list[tuple[tuple[int, ...], float]] = [((), 0.0)]
    finished: set[tuple[int, ...]] = set()
    nodes = 0
    for l in range(1, max_len + 1):
        nxt: list[tuple[tuple[int, ...], float]] = []
        for toks, score in frontier:
            logp = scorer.next_token_logprobs(toks)
            for a in range(scorer.vocab_size):
                s = score + float(logp[a])
                if s < model.threshold(l, model.assignment.cluster_of(l, a)):
                    continue
                nodes += 1
                if max_nodes is not None and nodes > max_nodes:
                    raise ValidationError(
                        f"cover_decode: expansion exceeded {max_nodes} nodes"
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


def evaluate_panel(
    traces: Sequence[ScoreTrace], model: CalibratedModel
) -> tuple[float, list[PathEvalRecord]]:
    """Coverage and per-trace records for a (log-domain) trace set."""
    records = []
    hits = 0
    for t in traces:
        c, rec = coverage_indicator(
            t, model.thresholds, model.assignment, max_len=model.max_len
        )
        hits += c
        records.append(rec)
    return hits / len(traces) if traces else 0.0, records


def save_calibrated(model: CalibratedModel, path) -> None:
    doc = {
        "alpha": model.alpha,
        "lambda": model.lam,
        "bucket_width": model.assignment.bucket_width,
        "tau_grid": model.metadata.get("tau_grid"),
        "M": model.assignment.n_clusters,
        "min_count": model.metadata.get("min_count"),
        "assignment": {
            str(bi): {str(tok): int(m) for tok, m in mp.items()}
            for bi, mp in enumerate(model.assignment.maps)
        },
        "buckets": [list(b) for b in model.assignment.buckets],
        "beta": [[float(x) for x in row] for row in model.beta.values],
        "thresholds": {f"{l}:{m}": v for (l, m), v in model.thresholds.items()},
        "metadata": model.metadata,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)


def load_calibrated(path) -> CalibratedModel:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    buckets = tuple(tuple(b) for b in doc["buckets"])
    maps = tuple(
        {int(tok): int(m) for tok, m in doc["assignment"][str(bi)].items()}
        for bi in range(len(buckets))
    )
    assignment = ClusterAssignment(
        buckets=buckets, maps=maps,
        n_clusters=int(doc["M"]), bucket_width=int(doc["bucket_width"]),
    )
    thresholds = {}
    for key, v in doc["thresholds"].items():
        l, m = key.split(":")
        thresholds[(int(l), int(m))] = float(v)
    return CalibratedModel(
        assignment=assignment,
        beta=BetaMatrix(np.asarray(doc["beta"], dtype=np.float64)),
        thresholds=thresholds,
        alpha=float(doc["alpha"]),
        lam=float(doc["lambda"]),
        metadata=doc.get("metadata", {}),
    )
