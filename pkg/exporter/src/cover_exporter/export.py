"""Export ground-truth-path conformity scores from a causal language model.

Each corpus line becomes one line-delimited JSON record with the fields
``id``, ``tokens`` and ``prefix_scores``, where ``prefix_scores[l-1]`` is the
conditional-probability product of the first ``l`` tokens under the model.
The file format is the only contract with downstream consumers; nothing here
imports the calibration toolkit.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from dataclasses import dataclass
from typing import Sequence


class ExportError(Exception):
    """Invalid job configuration, unreadable inputs, or model failure."""


@dataclass(frozen=True)
class ExportJob:
    """One export run.

    ``model_id`` is anything ``transformers`` can load (a local directory or
    a hub name).  ``score_type`` names the conformity score; only the
    probability product is defined.  Lines longer than ``max_len`` tokens are
    truncated and counted in the summary.
    """

    model_id: str
    corpus_path: str
    max_len: int
    out_path: str
    score_type: str = "probability_product"
    batch_size: int = 16
    id_prefix: str = "x"

    def __post_init__(self):
        if self.max_len < 1:
            raise ExportError(f"max_len must be >= 1, got {self.max_len}")
        if self.batch_size < 1:
            raise ExportError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.score_type != "probability_product":
            raise ExportError(
                f"unsupported score_type {self.score_type!r}; "
                "only 'probability_product' is defined"
            )


@dataclass(frozen=True)
class ExportSummary:
    """What was written: record and truncation counts plus the output path."""

    n_records: int
    n_truncated: int
    out_path: str


def read_corpus(path: str) -> list[str]:
    """Non-blank corpus lines, in order."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = [line.rstrip("\n") for line in fh]
    except OSError as exc:
        raise ExportError(f"cannot read corpus {path!r}: {exc}") from exc
    lines = [line for line in lines if line.strip()]
    if not lines:
        raise ExportError(f"corpus {path!r} has no non-blank lines")
    return lines


def load_model(model_id: str):
    """Tokenizer and eval-mode model, loaded together so failures name the
    identifier they came from."""
    import torch
    from transformers import AutoModelForCausalLM, AutoTokenizer

    try:
        tokenizer = AutoTokenizer.from_pretrained(model_id)
        model = AutoModelForCausalLM.from_pretrained(model_id)
    except Exception as exc:
        raise ExportError(f"cannot load model {model_id!r}: {exc}") from exc
    model.eval()
    torch.set_grad_enabled(False)
    return tokenizer, model


def _bos_id(tokenizer) -> int:
    bos = tokenizer.bos_token_id
    if bos is None:
        bos = tokenizer.eos_token_id
    if bos is None:
        raise ExportError(
            "tokenizer defines neither a BOS nor an EOS token; the first "
            "token cannot be conditioned"
        )
    return int(bos)


def score_batch(
    model, token_ids: Sequence[Sequence[int]], bos_id: int
) -> list[list[float]]:
    """Per-prefix probability products for a batch of token-id sequences.

    Every sequence is conditioned on a leading BOS token, so position ``k``
    of the logits predicts token ``k`` of the sequence.  Cumulative log
    probabilities are summed in float64 before exponentiation.
    """
    import torch

    width = max(len(ids) for ids in token_ids)
    batch = torch.full((len(token_ids), width + 1), bos_id, dtype=torch.long)
    mask = torch.zeros((len(token_ids), width + 1), dtype=torch.long)
    for i, ids in enumerate(token_ids):
        batch[i, 1:1 + len(ids)] = torch.tensor(ids, dtype=torch.long)
        mask[i, :1 + len(ids)] = 1
    logits = model(input_ids=batch, attention_mask=mask).logits
    logprobs = torch.log_softmax(logits.double(), dim=-1)
    out = []
    for i, ids in enumerate(token_ids):
        per_token = logprobs[i, range(len(ids)), ids]
        cumulative = torch.cumsum(per_token, dim=0)
        out.append([math.exp(float(c)) for c in cumulative])
    return out


def export_traces(job: ExportJob) -> ExportSummary:
    """Run the job: tokenize, score in batches, and write the trace file."""
    lines = read_corpus(job.corpus_path)
    tokenizer, model = load_model(job.model_id)
    bos = _bos_id(tokenizer)
    encoded = []
    n_truncated = 0
    for lineno, text in enumerate(lines):
        ids = tokenizer.encode(text, add_special_tokens=False)
        if not ids:
            raise ExportError(
                f"corpus line {lineno + 1} tokenizes to zero tokens"
            )
        if len(ids) > job.max_len:
            ids = ids[:job.max_len]
            n_truncated += 1
        encoded.append([int(t) for t in ids])
    with open(job.out_path, "w", encoding="utf-8") as fh:
        for start in range(0, len(encoded), job.batch_size):
            chunk = encoded[start:start + job.batch_size]
            scores = score_batch(model, chunk, bos)
            for offset, (ids, prods) in enumerate(zip(chunk, scores)):
                record = {
                    "id": f"{job.id_prefix}{start + offset:06d}",
                    "tokens": ids,
                    "prefix_scores": prods,
                }
                fh.write(json.dumps(record))
                fh.write("\n")
    return ExportSummary(
        n_records=len(encoded), n_truncated=n_truncated, out_path=job.out_path
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cover-export",
        description="Export per-prefix probability-product traces from a "
                    "causal language model.",
    )
    parser.add_argument("--model", required=True,
                        help="model directory or hub identifier")
    parser.add_argument("--corpus", required=True,
                        help="text file, one sequence per line")
    parser.add_argument("--max-len", type=int, required=True,
                        help="truncate sequences beyond this many tokens")
    parser.add_argument("--out", required=True, help="output trace file")
    parser.add_argument("--score-type", default="probability_product")
    parser.add_argument("--batch-size", type=int, default=16)
    parser.add_argument("--id-prefix", default="x",
                        help="prefix for generated record ids")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        job = ExportJob(
            model_id=args.model,
            corpus_path=args.corpus,
            max_len=args.max_len,
            out_path=args.out,
            score_type=args.score_type,
            batch_size=args.batch_size,
            id_prefix=args.id_prefix,
        )
        summary = export_traces(job)
    except ExportError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(f"wrote {summary.n_records} records "
          f"({summary.n_truncated} truncated) -> {summary.out_path}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
