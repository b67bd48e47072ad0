"""Evaluation harness, report emission, method comparison, and the
command-line front end."""

import json
import math

import numpy as np
import pytest

from cover_decode.baseline import dcbs_calibrate, dcbs_decode
from cover_decode.cli import main
from cover_decode.cover import calibrate, cover_decode
from cover_decode.errors import ValidationError
from cover_decode.harness import (
    EvalReport,
    compare,
    dcbs_to_calibrated,
    emit_report,
    evaluate,
)
from cover_decode.scorer import sample_dataset
from cover_decode.traces import to_log_traces

from test_scorer import random_model


@pytest.fixture(scope="module")
def setup():
    m = random_model(5, 1, 3, seed=80)
    cal = sample_dataset(m, 400, seed=81)
    ev = sample_dataset(m, 300, seed=82, id_prefix="e")
    model, _ = calibrate(cal, alpha=0.1, n_clusters=2, min_count=10,
                         budget=100, max_len=3, seed=0)
    return m, cal, ev, model


class TestEvaluate:
    def test_coverage_matches_records(self, setup):
        _, _, ev, model = setup
        report, records = evaluate(model, ev)
        assert report.coverage == pytest.approx(
            sum(r.covered for r in records) / len(records)
        )
        assert report.n_eval == len(ev)

    def test_coverage_equals_one_minus_failure_sum(self, setup):
        _, _, ev, model = setup
        report, records = evaluate(model, ev)
        failures = sum(c["failed"] for c in report.per_pair.values())
        assert report.coverage == pytest.approx(1 - failures / len(ev))

    def test_per_pair_reached_partitions_steps(self, setup):
        _, _, ev, model = setup
        report, records = evaluate(model, ev)
        for l in range(1, 4):
            reached = sum(c["reached"] for (s, _), c in report.per_pair.items()
                          if s == l)
            expected = sum(
                1 for r in records if any(st.step == l for st in r.steps)
            )
            assert reached == expected

    def test_id_overlap_rejected(self, setup):
        _, cal, _, model = setup
        with pytest.raises(ValidationError, match="overlap"):
            evaluate(model, cal[:10])

    def test_path_count_matches_decode(self, setup):
        m, _, ev, model = setup
        report, _ = evaluate(model, ev, scorer=m)
        seqs, nodes = cover_decode(m, model, max_len=3)
        assert report.path_count == len(seqs)
        assert report.expanded_nodes == nodes

    def test_tail_metric_replay(self, setup):
        _, _, ev, model = setup
        tail = {3, 4}
        report, records = evaluate(model, ev, tail_tokens=tail)
        events = passed = 0
        for t, rec in zip(to_log_traces(ev), records):
            for st in rec.steps:
                if t.tokens[st.step - 1] in tail:
                    events += 1
                    passed += st.passed
        assert report.tail_events == events
        assert report.tail_step_coverage == pytest.approx(passed / events)

    def test_deterministic_modulo_runtime(self, setup):
        _, _, ev, model = setup
        a, _ = evaluate(model, ev)
        b, _ = evaluate(model, ev)
        da, db = a.to_doc(), b.to_doc()
        da.pop("runtime_s"), db.pop("runtime_s")
        assert da == db


class TestDCBSAdapter:
    def test_evaluation_matches_manual_threshold_loop(self, setup):
        m, cal, ev, _ = setup
        calib = dcbs_calibrate(to_log_traces(cal), alpha=0.1, max_len=3)
        model = dcbs_to_calibrated(calib, max_len=3)
        report, _ = evaluate(model, ev, method="dcbs")
        hits = 0
        for t in to_log_traces(ev):
            hits += all(
                t.prefix_scores[l - 1] >= calib.thresholds[l - 1]
                for l in range(1, len(t) + 1)
            )
        assert report.coverage == pytest.approx(hits / len(ev))

    def test_decode_agrees_with_native(self, setup):
        m, cal, _, _ = setup
        calib = dcbs_calibrate(to_log_traces(cal), alpha=0.1, max_len=3)
        model = dcbs_to_calibrated(calib, max_len=3)
        native, _ = dcbs_decode(m, calib, max_len=3)
        wrapped, _ = cover_decode(m, model, max_len=3)
        assert wrapped == native


class TestReports:
    def test_json_round_trip(self, setup, tmp_path):
        _, _, ev, model = setup
        report, _ = evaluate(model, ev)
        path = tmp_path / "report.json"
        emit_report(report, "json", path)
        with open(path) as fh:
            loaded = EvalReport.from_doc(json.load(fh))
        assert loaded == report

    def test_json_emission_byte_stable(self, setup, tmp_path):
        _, _, ev, model = setup
        report, _ = evaluate(model, ev)
        p1, p2 = tmp_path / "a.json", tmp_path / "b.json"
        emit_report(report, "json", p1)
        emit_report(report, "json", p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_csv_row_count(self, setup, tmp_path):
        _, _, ev, model = setup
        report, _ = evaluate(model, ev)
        path = tmp_path / "report.csv"
        emit_report(report, "csv", path)
        lines = path.read_text().strip().splitlines()
        assert len(lines) == 1 + len(report.per_pair) + 1
        assert lines[-1].startswith("summary")

    def test_csv_coverage_repr_exact(self, setup, tmp_path):
        _, _, ev, model = setup
        report, _ = evaluate(model, ev)
        path = tmp_path / "report.csv"
        emit_report(report, "csv", path)
        last = path.read_text().strip().splitlines()[-1].split(",")
        assert float(last[-1]) == report.coverage

    def test_unknown_format_rejected(self, setup, tmp_path):
        _, _, ev, model = setup
        report, _ = evaluate(model, ev)
        with pytest.raises(ValidationError):
            emit_report(report, "xml", tmp_path / "x")


class TestCompare:
    def test_deltas(self, setup):
        m, cal, ev, model = setup
        r1, _ = evaluate(model, ev, scorer=m, method="cover")
        calib = dcbs_calibrate(to_log_traces(cal), alpha=0.1, max_len=3)
        r2, _ = evaluate(dcbs_to_calibrated(calib, 3), ev, scorer=m,
                         method="dcbs")
        out = compare([r2, r1])
        assert out["baseline"] == "dcbs"
        d = out["deltas"]["cover"]
        assert d["coverage_delta"] == pytest.approx(r1.coverage - r2.coverage)
        assert d["node_ratio"] == pytest.approx(
            r1.expanded_nodes / r2.expanded_nodes
        )

    def test_mismatched_eval_sets_rejected(self, setup):
        m, _, ev, model = setup
        other = sample_dataset(m, 50, seed=99, id_prefix="o")
        r1, _ = evaluate(model, ev)
        r2, _ = evaluate(model, other)
        with pytest.raises(ValidationError, match="different eval sets"):
            compare([r1, r2])

    def test_empty_rejected(self):
        with pytest.raises(ValidationError):
            compare([])


class TestCLI:
    CONFIG = {
        "V": 8, "order": 1, "L": 4,
        "head_tokens": [0, 1, 2], "tail_tokens": [3, 4, 5, 6],
        "tail_mass": 0.1, "noise": 0.2, "seed": 7, "terminator": 0,
    }

    def _simulate(self, tmp_path, n, seed, name, model_out=None):
        cfg = tmp_path / "config.json"
        cfg.write_text(json.dumps(self.CONFIG))
        argv = ["simulate", "--config", str(cfg), "--n", str(n),
                "--seed", str(seed), "--out", str(tmp_path / name)]
        if model_out:
            argv += ["--model-out", str(tmp_path / model_out)]
        assert main(argv) == 0
        return tmp_path / name

    def test_full_pipeline(self, tmp_path, capsys):
        cal = self._simulate(tmp_path, 500, 1, "cal.jsonl", "model.json")
        ev = self._simulate(tmp_path, 200, 2, "eval.jsonl")
        fitted = tmp_path / "fitted.json"
        assert main(["calibrate", "--traces", str(cal), "--alpha", "0.1",
                     "--clusters", "2", "--min-count", "10",
                     "--budget", "50", "--out", str(fitted)]) == 0
        report = tmp_path / "report.json"
        assert main(["evaluate", "--model", str(fitted), "--traces", str(ev),
                     "--ar-model", str(tmp_path / "model.json"),
                     "--tail-tokens", "3,4,5,6",
                     "--out", str(report)]) == 0
        doc = json.loads(report.read_text())
        assert 0.0 <= doc["coverage"] <= 1.0
        assert doc["path_count"] is not None
        assert doc["tail_step_coverage"] is not None
        out = capsys.readouterr().out
        assert "coverage=" in out

    def test_dcbs_and_decode_and_bounds(self, tmp_path):
        cal = self._simulate(tmp_path, 400, 3, "cal.jsonl", "model.json")
        ev = self._simulate(tmp_path, 150, 4, "eval.jsonl")
        dcbs_out = tmp_path / "dcbs.json"
        assert main(["dcbs", "--traces", str(cal), "--alpha", "0.1",
                     "--max-len", "4", "--out", str(dcbs_out)]) == 0
        doc = json.loads(dcbs_out.read_text())
        assert len(doc["thresholds"]) == 4
        fitted = tmp_path / "fitted.json"
        assert main(["calibrate", "--traces", str(cal), "--alpha", "0.1",
                     "--clusters", "2", "--min-count", "10",
                     "--budget", "20", "--out", str(fitted)]) == 0
        decoded = tmp_path / "decoded.jsonl"
        assert main(["decode", "--model", str(fitted),
                     "--ar-model", str(tmp_path / "model.json"),
                     "--out", str(decoded)]) == 0
        seqs = [json.loads(line) for line in decoded.read_text().splitlines()]
        assert all("tokens" in s for s in seqs)
        bounds = tmp_path / "bounds.json"
        assert main(["bounds", "--model", str(fitted), "--traces", str(ev),
                     "--out", str(bounds)]) == 0
        bdoc = json.loads(bounds.read_text())
        assert bdoc["aggregate"] >= bdoc["base"]
        assert bdoc["aggregate_clipped"] <= 1.0

    def test_compare_subcommand(self, tmp_path):
        cal = self._simulate(tmp_path, 300, 5, "cal.jsonl")
        ev = self._simulate(tmp_path, 150, 6, "eval.jsonl")
        fitted = tmp_path / "fitted.json"
        assert main(["calibrate", "--traces", str(cal), "--alpha", "0.1",
                     "--clusters", "2", "--min-count", "10",
                     "--budget", "20", "--out", str(fitted)]) == 0
        r1, r2 = tmp_path / "r1.json", tmp_path / "r2.json"
        for r in (r1, r2):
            assert main(["evaluate", "--model", str(fitted),
                         "--traces", str(ev), "--out", str(r)]) == 0
        out = tmp_path / "cmp.json"
        assert main(["compare", "--report", str(r1), "--report", str(r2),
                     "--out", str(out)]) == 0
        assert "deltas" in json.loads(out.read_text())

    def test_validation_error_exit_code(self, tmp_path, capsys):
        bad = tmp_path / "bad.jsonl"
        bad.write_text("{not json\n")
        assert main(["dcbs", "--traces", str(bad), "--alpha", "0.1",
                     "--max-len", "3", "--out", str(tmp_path / "o.json")]) == 2
        assert "error:" in capsys.readouterr().err

    def test_infeasible_exit_code(self, tmp_path, capsys):
        cal = self._simulate(tmp_path, 20, 8, "tiny.jsonl")
        # 1 - alpha + 1/n exceeds 1 on the optimization half
        assert main(["calibrate", "--traces", str(cal), "--alpha", "0.01",
                     "--clusters", "1", "--min-count", "2",
                     "--budget", "0", "--out", str(tmp_path / "o.json")]) == 3
        assert "infeasible:" in capsys.readouterr().err
