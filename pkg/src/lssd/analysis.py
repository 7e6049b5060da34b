"""Convergence-inconsistency analysis and translation metrics."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Hashable, Sequence

import numpy as np

from .data import MultilingualCorpus
from .model import EOS, Seq2SeqModel, greedy_decode_batch
from .training import RunLog, dev_loss

Tokens = Sequence[Hashable]


@dataclass
class DubReport:
    """Dev-loss gap between the overall best epoch and each language's best."""

    languages: list[str]
    overall_best_epoch: int
    overall_best_losses: list[float]
    language_best_losses: list[float]
    language_best_epochs: list[int]
    gaps: list[float]
    total_dub: float
    k_prime: list[int | None]
    avg_dev_loss_at_best: float

    def to_text(self) -> str:
        lines = []
        for name, gap, kp, ep in zip(self.languages, self.gaps, self.k_prime, self.language_best_epochs):
            lines.append(f"{name} {gap!r} {'-' if kp is None else kp} {ep}")
        lines.append(f"total {self.total_dub!r} - {self.overall_best_epoch}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> dict[str, float]:
        """Gap per language plus ``total`` from a written report."""
        out = {}
        for line in text.splitlines():
            if line.strip():
                parts = line.split()
                out[parts[0]] = float(parts[1])
        return out


def compute_dub(run_log: RunLog) -> DubReport:
    if not run_log.epochs:
        raise ValueError("run log has no epoch records")
    losses = run_log.dev_matrix()
    best_row = run_log.epochs.index(next(r for r in run_log.epochs if r.epoch == run_log.overall_best_epoch()))
    at_best = losses[best_row]
    lang_min = losses.min(axis=0)
    gaps = [float(a - b) for a, b in zip(at_best, lang_min)]
    # the overall best can never beat a language's own minimum
    assert all(g >= 0 for g in gaps), f"negative performance deficit {gaps}"
    n = len(run_log.languages)
    return DubReport(
        languages=list(run_log.languages),
        overall_best_epoch=run_log.epochs[best_row].epoch,
        overall_best_losses=[float(x) for x in at_best],
        language_best_losses=[float(x) for x in lang_min],
        language_best_epochs=[run_log.best_epoch(l) for l in range(n)],
        gaps=gaps,
        total_dub=math.fsum(gaps),
        k_prime=[run_log.k_prime(l) for l in range(n)],
        avg_dev_loss_at_best=run_log.epochs[best_row].avg_dev_loss,
    )


def token_accuracy(hypotheses: Sequence[Tokens], references: Sequence[Tokens]) -> float:
    """Position-wise matches over the longer length of each pair."""
    if len(hypotheses) != len(references):
        raise ValueError("hypotheses and references differ in count")
    if not hypotheses:
        raise ValueError("empty corpus")
    matched = total = 0
    for hyp, ref in zip(hypotheses, references):
        matched += sum(1 for a, b in zip(hyp, ref) if a == b)
        total += max(len(hyp), len(ref))
    return matched / total if total else 1.0


def _ngrams(tokens: Tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i: i + n]) for i in range(len(tokens) - n + 1))


def corpus_bleu(hypotheses: Sequence[Tokens], references: Sequence[Tokens], max_n: int = 4,
                smooth_floor: float | None = None) -> float:
    """Corpus BLEU in [0, 100] against a single reference per sentence.

    Without ``smooth_floor`` any order with zero matches makes the score 0;
    with it, zero match counts are replaced by the floor value.
    """
    if len(hypotheses) != len(references):
        raise ValueError("hypotheses and references differ in count")
    if not hypotheses:
        raise ValueError("empty corpus")
    if max_n < 1:
        raise ValueError("max_n must be >= 1")
    matches = [0] * max_n
    totals = [0] * max_n
    hyp_len = ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        hyp, ref = list(hyp), list(ref)
        hyp_len += len(hyp)
        ref_len += len(ref)
        for n in range(1, max_n + 1):
            h = _ngrams(hyp, n)
            r = _ngrams(ref, n)
            matches[n - 1] += sum(min(c, r[g]) for g, c in h.items())
            totals[n - 1] += sum(h.values())
    if hyp_len == 0:
        return 0.0
    log_prec = 0.0
    for m, t in zip(matches, totals):
        if m == 0:
            if smooth_floor is None or t == 0:
                return 0.0
            m = smooth_floor
        log_prec += math.log(m / t)
    bp = 1.0 if hyp_len >= ref_len else math.exp(1.0 - ref_len / hyp_len)
    return 100.0 * bp * math.exp(log_prec / max_n)


@dataclass
class LanguageEval:
    name: str
    token_accuracy: float
    corpus_bleu: float
    sentences: int
    loss: float


@dataclass
class EvalReport:
    checkpoint: str
    split: str
    languages: list[LanguageEval] = field(default_factory=list)

    def to_text(self) -> str:
        lines = [f"checkpoint = {self.checkpoint}", f"split = {self.split}"]
        for le in self.languages:
            lines += [
                f"{le.name}.token_accuracy = {le.token_accuracy!r}",
                f"{le.name}.corpus_bleu = {le.corpus_bleu!r}",
                f"{le.name}.sentences = {le.sentences}",
                f"{le.name}.loss = {le.loss!r}",
            ]
        return "\n".join(lines) + "\n"

    def table(self) -> str:
        rows = [f"{'language':<12}{'acc':>8}{'bleu':>9}{'loss':>9}{'n':>6}"]
        for le in self.languages:
            rows.append(f"{le.name:<12}{le.token_accuracy:>8.4f}{le.corpus_bleu:>9.2f}{le.loss:>9.4f}{le.sentences:>6}")
        return "\n".join(rows)

    @staticmethod
    def parse(text: str) -> dict[str, str]:
        out = {}
        for line in text.splitlines():
            if "=" in line:
                key, value = line.split("=", 1)
                out[key.strip()] = value.strip()
        return out


def strip_eos(tokens: Sequence[int]) -> list[int]:
    out = []
    for t in tokens:
        if t == EOS:
            break
        out.append(int(t))
    return out


def evaluate(model: Seq2SeqModel, corpus: MultilingualCorpus, split: str, checkpoint: str,
             label_smoothing: float = 0.0, languages: Sequence[int] | None = None,
             batch: int = 64) -> EvalReport:
    report = EvalReport(checkpoint, split)
    for lang in languages if languages is not None else range(len(corpus.languages)):
        pairs = corpus.pairs[split][lang]
        refs = [strip_eos(t) for _, t in pairs]
        max_len = max(len(t) for _, t in pairs) + 1
        hyps = []
        for start in range(0, len(pairs), batch):
            hyps += greedy_decode_batch(model, [s for s, _ in pairs[start: start + batch]], max_len)
        report.languages.append(LanguageEval(
            corpus.names[lang],
            token_accuracy(hyps, refs),
            corpus_bleu(hyps, refs),
            len(pairs),
            dev_loss(model, corpus, lang, label_smoothing, split),
        ))
    return report
