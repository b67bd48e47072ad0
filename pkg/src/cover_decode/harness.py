"""Experiment orchestration: evaluation metrics, method comparison, and
report emission.

Evaluation always runs on fresh traces whose ids are disjoint from the
calibration ids recorded in the model artifact; every reported coverage
number is reproducible from the per-trace evaluation records.
"""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import dataclass, field, asdict
from typing import Sequence

import numpy as np

from .baseline import DCBSCalibration
from .clustering import ClusterAssignment
from .cover import (
    BetaMatrix,
    CalibratedModel,
    PathEvalRecord,
    evaluate_panel,
)
from . import cover as _cover
from .errors import ValidationError
from .pac import decomposition_audit
from .scorer import Scorer
from .traces import ScoreTrace, to_log_traces

__all__ = [
    "EvalReport",
    "evaluate",
    "compare",
    "emit_report",
    "dcbs_to_calibrated",
]


@dataclass
class EvalReport:
    """Evaluation summary for one calibrated method on one eval set."""

    method: str
    coverage: float
    n_eval: int
    path_count: int | None
    expanded_nodes: int | None
    per_pair: dict
    tail_step_coverage: float | None
    tail_events: int
    runtime_s: float
    eval_ids_digest: str
    config: dict = field(default_factory=dict)

    def to_doc(self) -> dict:
        doc = asdict(self)
        doc["per_pair"] = {f"{l}:{m}": v for (l, m), v in self.per_pair.items()}
        return doc

    @classmethod
    def from_doc(cls, doc: dict) -> "EvalReport":
        doc = dict(doc)
        doc["per_pair"] = {
            tuple(int(x) for x in key.split(":")): cell
            for key, cell in doc["per_pair"].items()
        }
        return cls(**doc)


def _ids_digest(traces: Sequence[ScoreTrace]) -> str:
    import hashlib

    h = hashlib.sha256()
    for t in traces:
        h.update(t.id.encode())
        h.update(b"\0")
    return h.hexdigest()[:16]


def dcbs_to_calibrated(calib: DCBSCalibration, max_len: int) -> CalibratedModel:
    """Wrap per-step DCBS thresholds as a single-threshold-per-step model so
    the shared evaluation machinery applies (every token maps to the null
    cluster, whose threshold is the step threshold)."""
    assignment = ClusterAssignment(
        buckets=tuple((l,) for l in range(1, max_len + 1)),
        maps=tuple({} for _ in range(max_len)),
        n_clusters=0,
        bucket_width=1,
    )
    thresholds = {
        (l, 0): (calib.thresholds[l - 1] if l - 1 < len(calib.thresholds) else math.inf)
        for l in range(1, max_len + 1)
    }
    return CalibratedModel(
        assignment=assignment,
        beta=BetaMatrix(np.zeros((1, max_len))),
        thresholds=thresholds,
        alpha=calib.alpha,
        lam=0.0,
        metadata={"score_domain": "log", "method": "dcbs",
                  "calibration_ids": []},
    )


def evaluate(
    model: CalibratedModel,
    eval_traces: Sequence[ScoreTrace],
    scorer: Scorer | None = None,
    tail_tokens: set[int] | None = None,
    method: str = "cover",
    max_nodes: int | None = None,
) -> tuple[EvalReport, list[PathEvalRecord]]:
    """Score an eval set against a calibrated model.

    Coverage is the mean full-path indicator; when a generative scorer is
    supplied, prediction-set size is measured by actually expanding the
    conformal set (path count and total kept nodes).  ``tail_tokens``
    switches on the tail step-coverage metric: among step events whose token
    is in the tail set and whose trace survived all earlier steps, the
    fraction that pass their own step.
    """
    if not eval_traces:
        raise ValidationError("evaluate: empty eval set")
    cal_ids = set(model.metadata.get("calibration_ids", []))
    overlap = cal_ids & {t.id for t in eval_traces}
    if overlap:
        raise ValidationError(
            f"evaluate: {len(overlap)} eval ids overlap the calibration set "
            f"(e.g. {sorted(overlap)[0]!r})"
        )
    t0 = time.perf_counter()
    log_traces = to_log_traces(eval_traces)
    coverage, records = evaluate_panel(log_traces, model)
    audit = decomposition_audit(records)
    assert audit["n_not_covered"] == len(records) - sum(r.covered for r in records)

    per_pair: dict[tuple[int, int], dict] = {}
    for rec in records:
        for st in rec.steps:
            cell = per_pair.setdefault(
                (st.step, st.cluster), {"reached": 0, "failed": 0}
            )
            cell["reached"] += 1
            if not st.passed:
                cell["failed"] += 1
    for cell in per_pair.values():
        cell["step_coverage"] = 1.0 - cell["failed"] / cell["reached"]

    tail_cov = None
    tail_events = 0
    if tail_tokens is not None:
        tail_pass = 0
        for t, rec in zip(log_traces, records):
            for st in rec.steps:
                if t.tokens[st.step - 1] in tail_tokens:
                    tail_events += 1
                    tail_pass += int(st.passed)
        tail_cov = tail_pass / tail_events if tail_events else None

    path_count = nodes = None
    if scorer is not None:
        paths, nodes = _cover.cover_decode(scorer, model, max_nodes=max_nodes)
        path_count = len(paths)
    report = EvalReport(
        method=method,
        coverage=coverage,
        n_eval=len(eval_traces),
        path_count=path_count,
        expanded_nodes=nodes,
        per_pair=per_pair,
        tail_step_coverage=tail_cov,
        tail_events=tail_events,
        runtime_s=time.perf_counter() - t0,
        eval_ids_digest=_ids_digest(eval_traces),
        config={"alpha": model.alpha, "lambda": model.lam,
                "M": model.assignment.n_clusters},
    )
    return report, records


def compare(reports: Sequence[EvalReport]) -> dict:
    """Side-by-side comparison of evaluations sharing one eval set."""
    if not reports:
        raise ValidationError("compare: no reports")
    digests = {r.eval_ids_digest for r in reports}
    if len(digests) != 1:
        raise ValidationError("compare: reports evaluate different eval sets")
    base = reports[0]
    deltas = {}
    for r in reports[1:]:
        deltas[r.method] = {
            "coverage_delta": r.coverage - base.coverage,
            "tail_step_coverage_delta": (
                r.tail_step_coverage - base.tail_step_coverage
                if r.tail_step_coverage is not None
                and base.tail_step_coverage is not None else None
            ),
            "node_ratio": (
                r.expanded_nodes / base.expanded_nodes
                if r.expanded_nodes and base.expanded_nodes else None
            ),
        }
    return {
        "baseline": base.method,
        "reports": {r.method: r.to_doc() for r in reports},
        "deltas": deltas,
    }


def emit_report(report, fmt: str, path) -> None:
    """Write a report document as JSON or CSV with stable field ordering.

    CSV emits one row per (step, cluster) cell plus a trailing summary row.
    """
    doc = report.to_doc() if isinstance(report, EvalReport) else report
    if fmt == "json":
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(doc, fh, indent=2)
    elif fmt == "csv":
        if not isinstance(report, EvalReport):
            raise ValidationError("CSV emission supports EvalReport only")
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "cluster", "reached", "failed",
                             "step_coverage"])
            for (l, m), cell in sorted(report.per_pair.items()):
                writer.writerow([l, m, cell["reached"], cell["failed"],
                                 repr(cell["step_coverage"])])
            writer.writerow(["summary", report.method, report.n_eval, "",
                             repr(report.coverage)])
    else:
        raise ValidationError(f"unknown report format {fmt!r}")
