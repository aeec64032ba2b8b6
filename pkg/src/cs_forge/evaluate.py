"""From-scratch WER and corpus BLEU plus experiment report assembly.

BLEU is corpus-level, unsmoothed, with every punctuation character split
into its own token (a fully specified stand-in for the usual 13a-style
tokenizer) and precision denominators clamped to >= 1. One exact
definition, echoed into every report, so scores are stable across runs.
"""

import json
import math
import string
from collections import Counter
from dataclasses import dataclass, field

from .errors import UndefinedMetricError

BLEU_MAX_N = 4

_STRIP_CHARS = '.,;:!?"()«»'


def edit_distance(ref_tokens, hyp_tokens):
    """Levenshtein distance with unit costs, O(n*m) dynamic programming."""
    n, m = len(ref_tokens), len(hyp_tokens)
    if n == 0:
        return m
    if m == 0:
        return n
    prev = list(range(m + 1))
    for i, ref_tok in enumerate(ref_tokens, 1):
        cur = [i]
        append = cur.append
        diag = prev[0]
        left = i
        for j, hyp_tok in enumerate(hyp_tokens, 1):
            up = prev[j]
            if ref_tok == hyp_tok:
                # adjacent cells differ by at most one, so the diagonal
                # already is the minimum on a match
                val = diag
            else:
                val = diag + 1
                if up < diag:
                    val = up + 1
                if left < val - 1:
                    val = left + 1
            append(val)
            diag = up
            left = val
        prev = cur
    return prev[m]


def wer(references, hypotheses):
    """Word error rate: summed edit distance over total reference words."""
    if len(references) != len(hypotheses):
        raise ValueError("references and hypotheses differ in length")
    total_ref = 0
    total_dist = 0
    for ref, hyp in zip(references, hypotheses):
        ref_tokens = ref.split()
        hyp_tokens = hyp.split()
        total_ref += len(ref_tokens)
        total_dist += edit_distance(ref_tokens, hyp_tokens)
    if total_ref == 0:
        raise UndefinedMetricError("WER undefined: no reference words")
    return total_dist / total_ref


def bleu_tokenize(text):
    """Separate every punctuation character as its own token, then split on
    whitespace. Case-sensitive."""
    out = []
    for ch in text:
        if ch in string.punctuation:
            out.append(f" {ch} ")
        else:
            out.append(ch)
    return "".join(out).split()


def _ngram_counts(tokens, n):
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def corpus_bleu(references, hypotheses, max_n=BLEU_MAX_N):
    """Corpus BLEU in [0, 100]: geometric mean of modified n-gram precisions
    times the brevity penalty; no smoothing (any zero precision gives 0)."""
    if len(references) != len(hypotheses):
        raise ValueError("references and hypotheses differ in length")
    matches = [0] * max_n
    hyp_totals = [0] * max_n
    ref_len = 0
    hyp_len = 0
    for ref, hyp in zip(references, hypotheses):
        ref_tokens = bleu_tokenize(ref)
        hyp_tokens = bleu_tokenize(hyp)
        ref_len += len(ref_tokens)
        hyp_len += len(hyp_tokens)
        for n in range(1, max_n + 1):
            hyp_counts = _ngram_counts(hyp_tokens, n)
            ref_counts = _ngram_counts(ref_tokens, n)
            hyp_totals[n - 1] += sum(hyp_counts.values())
            matches[n - 1] += sum(min(c, ref_counts[g])
                                  for g, c in hyp_counts.items())
    if hyp_len == 0:
        return 0.0
    precisions = [matches[i] / max(1, hyp_totals[i]) for i in range(max_n)]
    if any(p == 0.0 for p in precisions):
        return 0.0
    log_mean = sum(math.log(p) for p in precisions) / max_n
    bp = 1.0 if hyp_len >= ref_len else math.exp(1.0 - ref_len / hyp_len)
    return 100.0 * bp * math.exp(log_mean)


def strip_punct(text):
    """Remove punctuation marks (hyphen treated as a separator), collapse
    whitespace; casing untouched."""
    out = []
    for ch in text:
        if ch in _STRIP_CHARS:
            continue
        out.append(" " if ch == "-" else ch)
    return " ".join("".join(out).split())


@dataclass
class EvalReport:
    systems: list = field(default_factory=list)
    testsets: list = field(default_factory=list)
    cells: list = field(default_factory=list)  # {"system","testset","metric","value","n_segments"}
    config: dict = field(default_factory=dict)
    notes: list = field(default_factory=list)

    def add(self, system, testset, metric, value, n_segments):
        if system not in self.systems:
            self.systems.append(system)
        if testset not in self.testsets:
            self.testsets.append(testset)
        self.cells.append({"system": system, "testset": testset,
                           "metric": metric, "value": value,
                           "n_segments": n_segments})

    def value(self, system, testset, metric):
        for cell in self.cells:
            if (cell["system"] == system and cell["testset"] == testset
                    and cell["metric"] == metric):
                return cell["value"]
        return None

    def to_json(self):
        return {"systems": self.systems, "testsets": self.testsets,
                "cells": self.cells, "config": self.config, "notes": self.notes}

    @classmethod
    def from_json(cls, obj):
        return cls(obj["systems"], obj["testsets"], obj["cells"],
                   obj.get("config", {}), obj.get("notes", []))

    def save(self, path):
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_json(), f, indent=2, sort_keys=True)
            f.write("\n")

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as f:
            return cls.from_json(json.load(f))

    def format_table(self):
        """Fixed-width table, one row per system, one column per
        (testset, metric) pair present in the cells."""
        columns = []
        for cell in self.cells:
            col = (cell["testset"], cell["metric"])
            if col not in columns:
                columns.append(col)
        header = ["system"] + [f"{t}/{m}" for t, m in columns]
        rows = [header]
        for system in self.systems:
            row = [system]
            for col in columns:
                v = self.value(system, col[0], col[1])
                row.append("--" if v is None else f"{v:.2f}")
            rows.append(row)
        widths = [max(len(r[i]) for r in rows) for i in range(len(header))]
        lines = []
        for r_i, row in enumerate(rows):
            lines.append("  ".join(cell.rjust(w) for cell, w in zip(row, widths)))
            if r_i == 0:
                lines.append("  ".join("-" * w for w in widths))
        return "\n".join(lines)


def evaluate_suite(systems, testsets, flags=None):
    """Assemble the metric table.

    systems: {system_name: {testset_name: [hypothesis, ...]}}
    testsets: {testset_name: {"kind": "asr"|"st"|"cs", "references": [...]}}

    WER on ASR test sets, BLEU on ST/CS sets, plus punctuation-stripped
    BLEU where flagged. Missing decode outputs become explicit gaps.
    """
    flags = dict(flags or {})
    nopunct_sets = set(flags.get("bleu_no_punct", []))
    report = EvalReport(config={
        "tokenizer": "punct-split+whitespace, case-sensitive",
        "bleu": f"corpus, unsmoothed, n=1..{BLEU_MAX_N}, denominators clamped to >=1",
        "wer": "whitespace tokens, unit-cost edit distance",
        "join": "pipeline outputs joined with a single space",
        "flags": {k: sorted(v) if isinstance(v, (list, set)) else v
                  for k, v in flags.items()},
    })
    for system, outputs in systems.items():
        for ts_name, spec in testsets.items():
            refs = spec["references"]
            hyps = outputs.get(ts_name)
            if hyps is None:
                report.notes.append(f"missing decode output: {system} on {ts_name}")
                report.add(system, ts_name, "missing", None, len(refs))
                continue
            if spec["kind"] == "asr":
                report.add(system, ts_name, "wer", wer(refs, hyps), len(refs))
            else:
                report.add(system, ts_name, "bleu", corpus_bleu(refs, hyps),
                           len(refs))
                if ts_name in nopunct_sets:
                    report.add(system, ts_name, "bleu_no_punct",
                               corpus_bleu([strip_punct(r) for r in refs],
                                           [strip_punct(h) for h in hyps]),
                               len(refs))
    return report
