"""Greedy best-path transcription and edit-distance evaluation (WER / CER)."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .ctc_core import as_log_prob_matrix, collapse
from .glyphforge import DatasetManifest, iterate_split
from .net import Model, forward


def greedy_decode(log_probs) -> tuple[int, ...]:
    """Per-timestep argmax path followed by collapse. Ties break toward the
    lowest label index; the blank sits at the last index, so it loses ties
    against every label."""
    lp = as_log_prob_matrix(log_probs)
    path = np.argmax(lp, axis=1)
    return collapse(path.tolist(), blank=lp.shape[1] - 1)


def edit_distance(a, b) -> int:
    """Levenshtein distance: minimal insertions + deletions + substitutions."""
    a, b = tuple(a), tuple(b)
    if not a:
        return len(b)
    if not b:
        return len(a)
    prev = list(range(len(b) + 1))
    for i, sa in enumerate(a, start=1):
        cur = [i] + [0] * len(b)
        for j, sb in enumerate(b, start=1):
            cur[j] = min(
                prev[j] + 1,  # delete from a
                cur[j - 1] + 1,  # insert into a
                prev[j - 1] + (sa != sb),
            )
        prev = cur
    return prev[-1]


@dataclass(frozen=True)
class EvalRecord:
    word_id: str
    writer_id: int
    reference: tuple[int, ...]
    hypothesis: tuple[int, ...]
    edit_distance: int


@dataclass
class EvalReport:
    num_words: int
    num_chars: int
    word_errors: int
    char_edit_total: int
    wer: float  # percent; a word counts as an error iff hypothesis != reference
    cer: float  # percent; total edit distance over total reference characters
    records: list[EvalRecord]


def evaluate(model: Model, manifest: DatasetManifest, split: str) -> EvalReport:
    """Greedy-decode every sample of a split and aggregate WER/CER."""
    records = []
    word_errors = 0
    char_edit_total = 0
    num_chars = 0
    for sample in iterate_split(manifest, split):
        char_lp, _ = forward(model, sample.image)
        hyp = greedy_decode(char_lp)
        dist = edit_distance(sample.chars, hyp)
        records.append(
            EvalRecord(sample.word_id, sample.writer_id, sample.chars, hyp, dist)
        )
        word_errors += int(hyp != sample.chars)
        char_edit_total += dist
        num_chars += len(sample.chars)
    if not records:
        raise ValueError(f"split {split!r} has no samples to evaluate")
    num_words = len(records)
    return EvalReport(
        num_words=num_words,
        num_chars=num_chars,
        word_errors=word_errors,
        char_edit_total=char_edit_total,
        wer=100.0 * word_errors / num_words,
        cer=100.0 * char_edit_total / num_chars,
        records=records,
    )


# ---------------------------------------------------------------------------
# report serialization (line-delimited records + summary block)


def _seq_str(ids) -> str:
    return ",".join(str(int(x)) for x in ids)


def _seq_parse(text: str) -> tuple[int, ...]:
    return tuple(int(x) for x in text.split(",")) if text else ()


def render_eval_report(report: EvalReport, meta: dict[str, str] | None = None) -> str:
    lines = ["#rowctc-eval v=1"]
    for key in sorted(meta or {}):
        lines.append(f"#{key}={(meta or {})[key]}")
    lines.append("#fields=word_id writer_id reference hypothesis edit_distance")
    for rec in report.records:
        lines.append(
            "\t".join(
                (
                    rec.word_id,
                    str(rec.writer_id),
                    _seq_str(rec.reference),
                    _seq_str(rec.hypothesis),
                    str(rec.edit_distance),
                )
            )
        )
    lines.append(
        "#summary"
        f" num_words={report.num_words}"
        f" num_chars={report.num_chars}"
        f" word_errors={report.word_errors}"
        f" char_edit_total={report.char_edit_total}"
        f" wer={report.wer!r}"
        f" cer={report.cer!r}"
    )
    return "\n".join(lines) + "\n"


def save_eval_report(report: EvalReport, path, meta: dict[str, str] | None = None) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(render_eval_report(report, meta))


def parse_eval_report(path) -> tuple[EvalReport, dict[str, str]]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"eval report not found: {path}")
    meta: dict[str, str] = {}
    records: list[EvalRecord] = []
    summary: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as fh:
        first = fh.readline().rstrip("\n")
        if first != "#rowctc-eval v=1":
            raise ValueError(f"{path}: unrecognized eval report header {first!r}")
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            if line.startswith("#summary"):
                for pair in line.removeprefix("#summary").split():
                    key, _, value = pair.partition("=")
                    summary[key] = value
            elif line.startswith("#"):
                key, _, value = line[1:].partition("=")
                meta[key] = value
            else:
                parts = line.split("\t")
                if len(parts) != 5:
                    raise ValueError(f"{path}: malformed record line {line!r}")
                records.append(
                    EvalRecord(parts[0], int(parts[1]), _seq_parse(parts[2]),
                               _seq_parse(parts[3]), int(parts[4]))
                )
    needed = ("num_words", "num_chars", "word_errors", "char_edit_total", "wer", "cer")
    if any(k not in summary for k in needed):
        raise ValueError(f"{path}: summary block missing or incomplete")
    report = EvalReport(
        num_words=int(summary["num_words"]),
        num_chars=int(summary["num_chars"]),
        word_errors=int(summary["word_errors"]),
        char_edit_total=int(summary["char_edit_total"]),
        wer=float(summary["wer"]),
        cer=float(summary["cer"]),
        records=records,
    )
    return report, meta
