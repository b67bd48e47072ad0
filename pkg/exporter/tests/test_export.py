"""Exporter contract tests.

The downstream toolkit is exercised only through its installed command line
and the line-delimited trace file format; nothing here imports it.
"""

import json
import math
import shutil
import subprocess

import pytest
import torch

from cover_exporter import ExportError, ExportJob, export_traces
from cover_exporter.export import main, read_corpus, score_batch

VOCAB = [f"w{i}" for i in range(24)]


@pytest.fixture(scope="module")
def model_dir(tmp_path_factory):
    """Tiny randomly initialized causal LM plus a word-level tokenizer,
    saved as a loadable local checkpoint."""
    from tokenizers import Tokenizer, models, pre_tokenizers
    from transformers import GPT2Config, GPT2LMHeadModel, PreTrainedTokenizerFast

    path = tmp_path_factory.mktemp("ckpt")
    vocab = {"<bos>": 0}
    for w in VOCAB:
        vocab[w] = len(vocab)
    tok = Tokenizer(models.WordLevel(vocab, unk_token="<bos>"))
    tok.pre_tokenizer = pre_tokenizers.Whitespace()
    tokenizer = PreTrainedTokenizerFast(
        tokenizer_object=tok, bos_token="<bos>", unk_token="<bos>"
    )
    tokenizer.save_pretrained(path)
    torch.manual_seed(0)
    config = GPT2Config(
        vocab_size=len(vocab), n_positions=64, n_embd=32, n_layer=2, n_head=2
    )
    GPT2LMHeadModel(config).save_pretrained(path)
    return str(path)


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    path = tmp_path_factory.mktemp("data") / "corpus.txt"
    torch.manual_seed(1)
    lines = []
    for _ in range(60):
        n = int(torch.randint(2, 9, (1,)))
        lines.append(" ".join(VOCAB[int(i)] for i in torch.randint(0, 24, (n,))))
    path.write_text("\n".join(lines) + "\n")
    return str(path)


def run_export(model_dir, corpus, out, **kwargs):
    job = ExportJob(model_id=model_dir, corpus_path=corpus, max_len=8,
                    out_path=str(out), **kwargs)
    return export_traces(job)


class TestExportTraces:
    def test_one_record_per_corpus_line(self, model_dir, corpus, tmp_path):
        out = tmp_path / "t.jsonl"
        summary = run_export(model_dir, corpus, out)
        records = [json.loads(x) for x in out.read_text().splitlines()]
        assert summary.n_records == len(records) == len(read_corpus(corpus))

    def test_schema_fields_and_alignment(self, model_dir, corpus, tmp_path):
        out = tmp_path / "t.jsonl"
        run_export(model_dir, corpus, out)
        seen = set()
        for rec in map(json.loads, out.read_text().splitlines()):
            assert set(rec) == {"id", "tokens", "prefix_scores"}
            assert len(rec["tokens"]) == len(rec["prefix_scores"]) >= 1
            assert all(isinstance(t, int) and t >= 0 for t in rec["tokens"])
            assert rec["id"] not in seen
            seen.add(rec["id"])

    def test_prefix_scores_non_increasing_and_positive(self, model_dir, corpus,
                                                       tmp_path):
        out = tmp_path / "t.jsonl"
        run_export(model_dir, corpus, out)
        for rec in map(json.loads, out.read_text().splitlines()):
            s = rec["prefix_scores"]
            assert all(0.0 < v <= 1.0 for v in s)
            assert all(b <= a for a, b in zip(s, s[1:]))

    def test_tokens_match_tokenizer(self, model_dir, corpus, tmp_path):
        from transformers import AutoTokenizer

        out = tmp_path / "t.jsonl"
        run_export(model_dir, corpus, out)
        tokenizer = AutoTokenizer.from_pretrained(model_dir)
        lines = read_corpus(corpus)
        for rec, line in zip(map(json.loads, out.read_text().splitlines()),
                             lines):
            expected = tokenizer.encode(line, add_special_tokens=False)[:8]
            assert rec["tokens"] == expected

    def test_second_forward_pass_matches(self, model_dir, corpus, tmp_path):
        # independent re-inference: unbatched, step-by-step scoring of one
        # record agrees with the batched export within 1e-5 relative
        from transformers import AutoModelForCausalLM

        out = tmp_path / "t.jsonl"
        run_export(model_dir, corpus, out)
        rec = json.loads(out.read_text().splitlines()[7])
        model = AutoModelForCausalLM.from_pretrained(model_dir).eval()
        with torch.no_grad():
            total = 0.0
            for k, tok in enumerate(rec["tokens"]):
                ids = torch.tensor([[0] + rec["tokens"][:k]])
                logits = model(input_ids=ids).logits[0, -1].double()
                total += float(torch.log_softmax(logits, dim=-1)[tok])
                assert rec["prefix_scores"][k] == pytest.approx(
                    math.exp(total), rel=1e-5
                )

    def test_batching_does_not_change_scores(self, model_dir, corpus, tmp_path):
        a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        run_export(model_dir, corpus, a, batch_size=1)
        run_export(model_dir, corpus, b, batch_size=32)
        for ra, rb in zip(map(json.loads, a.read_text().splitlines()),
                          map(json.loads, b.read_text().splitlines())):
            assert ra["tokens"] == rb["tokens"]
            assert ra["prefix_scores"] == pytest.approx(
                rb["prefix_scores"], rel=1e-9
            )

    def test_truncation_counted(self, model_dir, tmp_path):
        corpus = tmp_path / "long.txt"
        corpus.write_text(" ".join(VOCAB[:20]) + "\nw1 w2\n")
        out = tmp_path / "t.jsonl"
        summary = run_export(model_dir, str(corpus), out)
        records = [json.loads(x) for x in out.read_text().splitlines()]
        assert summary.n_truncated == 1
        assert len(records[0]["tokens"]) == 8
        assert len(records[1]["tokens"]) == 2

    def test_empty_corpus_rejected(self, model_dir, tmp_path):
        corpus = tmp_path / "empty.txt"
        corpus.write_text("\n \n")
        with pytest.raises(ExportError, match="no non-blank"):
            run_export(model_dir, str(corpus), tmp_path / "t.jsonl")

    def test_bad_model_identifier(self, corpus, tmp_path):
        with pytest.raises(ExportError, match="cannot load model"):
            run_export(str(tmp_path / "nope"), corpus, tmp_path / "t.jsonl")

    def test_job_validation(self, model_dir, corpus, tmp_path):
        with pytest.raises(ExportError, match="max_len"):
            ExportJob(model_id=model_dir, corpus_path=corpus, max_len=0,
                      out_path="t")
        with pytest.raises(ExportError, match="score_type"):
            ExportJob(model_id=model_dir, corpus_path=corpus, max_len=4,
                      out_path="t", score_type="entropy")

    def test_deterministic_output(self, model_dir, corpus, tmp_path):
        a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        run_export(model_dir, corpus, a)
        run_export(model_dir, corpus, b)
        assert a.read_bytes() == b.read_bytes()


class TestScoreBatch:
    def test_padding_isolated(self, model_dir):
        # a short sequence scored next to a long one gets the same numbers
        # as when scored alone
        from transformers import AutoModelForCausalLM

        model = AutoModelForCausalLM.from_pretrained(model_dir).eval()
        with torch.no_grad():
            alone = score_batch(model, [[3, 4]], 0)
            padded = score_batch(model, [[3, 4], [5, 6, 7, 8, 9, 10]], 0)
        assert alone[0] == pytest.approx(padded[0], rel=1e-9)


class TestCLI:
    def test_main_round_trip(self, model_dir, corpus, tmp_path, capsys):
        out = tmp_path / "t.jsonl"
        rc = main(["--model", model_dir, "--corpus", corpus,
                   "--max-len", "8", "--out", str(out)])
        assert rc == 0
        assert "wrote 60 records" in capsys.readouterr().out
        assert len(out.read_text().splitlines()) == 60

    def test_main_error_exit_code(self, model_dir, tmp_path, capsys):
        rc = main(["--model", model_dir,
                   "--corpus", str(tmp_path / "missing.txt"),
                   "--max-len", "8", "--out", str(tmp_path / "t.jsonl")])
        assert rc == 2
        assert "error:" in capsys.readouterr().err


@pytest.mark.skipif(shutil.which("cover-decode") is None,
                    reason="downstream command line not installed")
class TestDownstreamPipeline:
    """The exported file drives the downstream toolkit unmodified, through
    its installed command line only."""

    def test_calibrate_then_evaluate(self, model_dir, corpus, tmp_path):
        cal = tmp_path / "cal.jsonl"
        ev = tmp_path / "eval.jsonl"
        run_export(model_dir, corpus, cal, id_prefix="c")
        run_export(model_dir, corpus, ev, id_prefix="e")
        fitted = tmp_path / "fitted.json"
        r = subprocess.run(
            ["cover-decode", "calibrate", "--traces", str(cal),
             "--alpha", "0.2", "--clusters", "2", "--min-count", "5",
             "--budget", "20", "--out", str(fitted)],
            capture_output=True, text=True,
        )
        assert r.returncode == 0, r.stderr
        report = tmp_path / "report.json"
        r = subprocess.run(
            ["cover-decode", "evaluate", "--model", str(fitted),
             "--traces", str(ev), "--out", str(report)],
            capture_output=True, text=True,
        )
        assert r.returncode == 0, r.stderr
        doc = json.loads(report.read_text())
        assert 0.0 <= doc["coverage"] <= 1.0
