"""Multilingual training with language-specific self-distillation.

The epoch loop samples a language per step, adds the distillation term for
languages whose switch is on, and after each epoch validates every
language: a strict improvement replaces that language's teacher with the
current model and turns the switch off, anything else turns it on.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .autodiff import Tape, backward
from .data import MultilingualCorpus, make_batch, sample_language, temperature_probs
from .losses import MODES, LossBreakdown, LossConfig, nmt_loss, objective
from .model import (
    ModelConfig,
    Seq2SeqModel,
    Snapshot,
    init_model,
    save_snapshot,
    snapshot,
)

log = logging.getLogger(__name__)

DEV_BATCH = 64


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 40
    steps_per_epoch: int = 100
    batch_size: int = 32
    alpha: float = 2.0
    sigma: float = 2.0
    tau: float = 1.0
    mode: str = "baseline"
    label_smoothing: float = 0.1
    smoothed_dev_loss: bool = True
    sentence_prob: str = "arith"
    lr_scale: float = 1.0
    warmup_steps: int = 200
    adam_beta1: float = 0.9
    adam_beta2: float = 0.98
    adam_eps: float = 1e-9
    seed: int = 1

    def validate(self) -> None:
        if min(self.epochs, self.steps_per_epoch, self.batch_size, self.warmup_steps) < 1:
            raise ValueError("epochs, steps_per_epoch, batch_size and warmup_steps must be >= 1")
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        self.loss_config().validate()

    def loss_config(self) -> LossConfig:
        return LossConfig(self.alpha, self.sigma, self.label_smoothing, self.mode, self.sentence_prob)


@dataclass
class LanguageState:
    switch: bool = False
    best_dev_loss: float = math.inf
    teacher: Snapshot | None = None

    def check(self) -> None:
        assert (self.teacher is None) == math.isinf(self.best_dev_loss), "teacher/best loss out of sync"
        assert self.teacher is not None or not self.switch, "switch on without a teacher"


def update_state(state: LanguageState, dev_loss: float, take_snapshot: Callable[[], Snapshot]) -> bool:
    """Apply one validation outcome; returns True when the teacher was replaced."""
    if dev_loss < state.best_dev_loss:
        state.switch = False
        state.teacher = take_snapshot()
        state.best_dev_loss = dev_loss
        return True
    state.switch = True
    return False


# ---- optimizer -------------------------------------------------------------

@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9


def adam_step(model: Seq2SeqModel, state: OptimizerState, lr: float) -> None:
    """Bias-corrected Adam update in place; clears gradients afterwards."""
    for name, p in model.params.items():
        if p.grad is None:
            raise ValueError(f"parameter {name} has no gradient")
        if not np.isfinite(p.grad).all():
            raise FloatingPointError(f"parameter {name} has a non-finite gradient")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in model.params.items():
        g = p.grad.astype(np.float64)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros(p.shape)
            state.v[name] = np.zeros(p.shape)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        update = lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data = (p.data - update).astype(p.data.dtype)
        p.grad = None


def lr_at(step: int, config: TrainConfig, embed_dim: int) -> float:
    """Inverse-square-root schedule with linear warmup."""
    if step < 1:
        raise ValueError("step must be >= 1")
    w = config.warmup_steps
    return config.lr_scale * embed_dim ** -0.5 * min(step ** -0.5, step * w ** -1.5)


# ---- teachers --------------------------------------------------------------

class TeacherBank:
    """Read-only model copies built from teacher snapshots, refreshed when
    the snapshot object changes."""

    def __init__(self, config: ModelConfig):
        self.config = config
        self._models: dict[object, tuple[Snapshot, Seq2SeqModel]] = {}
        self.forward_calls = 0

    def distributions(self, key, snap: Snapshot, src, tgt) -> np.ndarray:
        cached = self._models.get(key)
        if cached is None or cached[0] is not snap:
            cached = (snap, Seq2SeqModel.from_snapshot(self.config, snap))
            self._models[key] = cached
        self.forward_calls += 1
        return cached[1].forward(src, tgt, train_mode=False).data


# ---- run log ---------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    dev_losses: list[float]
    avg_dev_loss: float
    switches: list[bool]
    replaced: list[bool]


@dataclass
class StepRecord:
    epoch: int
    step: int
    language: int
    combined: float
    mean_g: float
    switch_on: bool


@dataclass
class RunLog:
    languages: list[str]
    epochs: list[EpochRecord] = field(default_factory=list)
    steps: list[StepRecord] = field(default_factory=list)

    def dev_matrix(self) -> np.ndarray:
        """Epochs x languages array of dev losses."""
        return np.array([rec.dev_losses for rec in self.epochs], dtype=np.float64)

    def overall_best_epoch(self) -> int:
        avgs = [rec.avg_dev_loss for rec in self.epochs]
        return self.epochs[int(np.argmin(avgs))].epoch

    def best_epoch(self, lang: int) -> int:
        losses = [rec.dev_losses[lang] for rec in self.epochs]
        return self.epochs[int(np.argmin(losses))].epoch

    def k_prime(self, lang: int) -> int | None:
        """Length of the initial training stage (epochs before the first
        switch-on), or None when the switch never turned on."""
        for rec in self.epochs:
            if rec.switches[lang]:
                return rec.epoch - 1
        return None

    def loss_curves_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "language", "dev_loss", "switch_after", "teacher_replaced"])
        for rec in self.epochs:
            for li, name in enumerate(self.languages):
                w.writerow([rec.epoch, name, repr(rec.dev_losses[li]),
                            "on" if rec.switches[li] else "off", int(rec.replaced[li])])
        return buf.getvalue()

    def avg_dev_loss_csv(self) -> str:
        lines = ["epoch,avg_dev_loss"]
        lines += [f"{rec.epoch},{rec.avg_dev_loss!r}" for rec in self.epochs]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_run_dir(cls, run_dir: str | Path) -> "RunLog":
        run_dir = Path(run_dir)
        rows: dict[int, dict[str, tuple[float, bool, bool]]] = {}
        names: list[str] = []
        with open(run_dir / "loss_curves.csv", newline="") as fh:
            for row in csv.DictReader(fh):
                epoch = int(row["epoch"])
                if row["language"] not in names:
                    names.append(row["language"])
                rows.setdefault(epoch, {})[row["language"]] = (
                    float(row["dev_loss"]), row["switch_after"] == "on", row["teacher_replaced"] == "1")
        runlog = cls(names)
        for epoch in sorted(rows):
            entry = rows[epoch]
            losses = [entry[n][0] for n in names]
            runlog.epochs.append(EpochRecord(epoch, losses, sum(losses) / len(losses),
                                             [entry[n][1] for n in names], [entry[n][2] for n in names]))
        return runlog


# ---- training --------------------------------------------------------------

def dev_loss(model: Seq2SeqModel, corpus: MultilingualCorpus, lang: int, label_smoothing: float,
             split: str = "dev") -> float:
    """Token-mean translation loss over a whole split, eval mode."""
    n = len(corpus.pairs[split][lang])
    if n == 0:
        raise ValueError(f"{split} set of {corpus.names[lang]} is empty")
    total = 0.0
    tokens = 0.0
    for start in range(0, n, DEV_BATCH):
        src, tgt, mask = make_batch(corpus, lang, split, range(start, min(n, start + DEV_BATCH)))
        dists = model.forward(src, tgt, train_mode=False)
        count = float(mask.sum())
        total += nmt_loss(dists, tgt, mask, label_smoothing).item() * count
        tokens += count
    value = total / tokens
    if not math.isfinite(value):
        raise FloatingPointError(f"non-finite dev loss for {corpus.names[lang]}")
    return value


def validate_and_update(model: Seq2SeqModel, states: Sequence[LanguageState], corpus: MultilingualCorpus,
                        epoch: int, label_smoothing: float = 0.1,
                        loss_fn: Callable[[Seq2SeqModel, int], float] | None = None):
    """Per-language validation stage. Returns (dev losses, replaced flags)."""
    if loss_fn is None:
        def loss_fn(m, lang):
            return dev_loss(m, corpus, lang, label_smoothing)
    losses, replaced = [], []
    for lang, state in enumerate(states):
        value = float(loss_fn(model, lang))
        if not math.isfinite(value):
            raise FloatingPointError(f"non-finite dev loss for language {lang}")
        replaced.append(update_state(state, value, lambda: snapshot(model, epoch, value)))
        losses.append(value)
    return losses, replaced


@dataclass
class TrainingResult:
    run_log: RunLog
    model: Seq2SeqModel
    language_bests: list[Snapshot]
    overall_best: Snapshot
    teacher_forward_calls: int = 0


class Trainer:
    def __init__(self, corpus: MultilingualCorpus, model_config: ModelConfig, config: TrainConfig,
                 verbose_steps: bool = False):
        config.validate()
        model_config.validate()
        if corpus.max_source_len() > model_config.max_seq_len:
            raise ValueError("max_seq_len is shorter than the longest corpus sequence")
        if len(corpus.vocab) != model_config.vocab_size:
            raise ValueError(f"vocab_size {model_config.vocab_size} != corpus vocabulary {len(corpus.vocab)}")
        self.corpus = corpus
        self.config = config
        self.loss_config = config.loss_config()
        self.verbose_steps = verbose_steps
        init_seq, sample_seq, batch_seq = np.random.SeedSequence(config.seed).spawn(3)
        self.model = init_model(model_config, int(init_seq.generate_state(1, np.uint64)[0]))
        self.sample_rng = np.random.default_rng(sample_seq)
        self.batch_rng = np.random.default_rng(batch_seq)
        self.opt = OptimizerState(beta1=config.adam_beta1, beta2=config.adam_beta2, eps=config.adam_eps)
        n = len(corpus.languages)
        self.states = [LanguageState() for _ in range(n)]
        self.global_state = LanguageState()
        self.overall_best: Snapshot | None = None
        self.teachers = TeacherBank(model_config)
        self.probs = temperature_probs(corpus.sizes("train"), config.tau)
        self.run_log = RunLog(corpus.names)
        self._order = [np.zeros(0, dtype=np.int64) for _ in range(n)]
        self._cursor = [0] * n

    def next_indices(self, lang: int) -> np.ndarray:
        """Sentence indices for the next batch, reshuffling per pass."""
        size = len(self.corpus.pairs["train"][lang])
        out = []
        need = min(self.config.batch_size, size)
        while len(out) < need:
            if self._cursor[lang] >= len(self._order[lang]):
                self._order[lang] = self.batch_rng.permutation(size)
                self._cursor[lang] = 0
            take = min(need - len(out), len(self._order[lang]) - self._cursor[lang])
            out.extend(self._order[lang][self._cursor[lang]: self._cursor[lang] + take])
            self._cursor[lang] += take
        return np.asarray(out)

    def teacher_for(self, lang: int) -> tuple[object, LanguageState]:
        if self.config.mode == "stsd":
            return "overall", self.global_state
        return lang, self.states[lang]

    def train_step(self, lang: int, batch) -> LossBreakdown:
        src, tgt, mask = batch
        key, state = self.teacher_for(lang)
        switch_on = self.config.mode != "baseline" and state.switch
        teacher = None
        if switch_on:
            if state.teacher is None:
                raise RuntimeError(f"switch on for {key!r} without a teacher snapshot")
            teacher = self.teachers.distributions(key, state.teacher, src, tgt)
        with Tape() as tape:
            student = self.model.forward(src, tgt, train_mode=True)
            loss, breakdown = objective(student, teacher, tgt, mask, self.loss_config, switch_on)
        backward(tape, loss)
        adam_step(self.model, self.opt, lr_at(self.opt.step + 1, self.config, self.model.config.embed_dim))
        return breakdown

    def validate(self, epoch: int) -> EpochRecord:
        smoothing = self.config.label_smoothing if self.config.smoothed_dev_loss else 0.0
        losses, replaced = validate_and_update(self.model, self.states, self.corpus, epoch, smoothing)
        avg = sum(losses) / len(losses)
        if self.overall_best is None or avg < self.overall_best.dev_loss:
            self.overall_best = snapshot(self.model, epoch, avg)
        if self.config.mode == "stsd":
            update_state(self.global_state, avg, lambda: self.overall_best)
        for state in self.states:
            state.check()
        return EpochRecord(epoch, losses, avg, [s.switch for s in self.states], replaced)

    def run(self) -> TrainingResult:
        cfg = self.config
        for epoch in range(1, cfg.epochs + 1):
            for t in range(1, cfg.steps_per_epoch + 1):
                lang = sample_language(self.probs, self.sample_rng)
                batch = make_batch(self.corpus, lang, "train", self.next_indices(lang))
                br = self.train_step(lang, batch)
                if self.verbose_steps:
                    self.run_log.steps.append(StepRecord(epoch, t, lang, br.combined,
                                                         float(np.mean(br.g_values)), br.switch_on))
            record = self.validate(epoch)
            self.run_log.epochs.append(record)
            log.info("epoch %d avg dev %.4f dev %s switches %s", epoch, record.avg_dev_loss,
                     " ".join(f"{x:.4f}" for x in record.dev_losses),
                     "".join("1" if s else "0" for s in record.switches))
        return TrainingResult(self.run_log, self.model, [s.teacher for s in self.states], self.overall_best,
                              self.teachers.forward_calls)


def run_training(corpus: MultilingualCorpus, model_config: ModelConfig, train_config: TrainConfig,
                 verbose_steps: bool = False) -> TrainingResult:
    return Trainer(corpus, model_config, train_config, verbose_steps).run()


def write_run_dir(result: TrainingResult, out_dir: str | Path, config_text: str) -> Path:
    out = Path(out_dir)
    (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(config_text)
    (out / "loss_curves.csv").write_text(result.run_log.loss_curves_csv())
    (out / "avg_dev_loss.csv").write_text(result.run_log.avg_dev_loss_csv())
    save_snapshot(result.overall_best, out / "checkpoints" / "overall_best.lssd")
    for name, snap in zip(result.run_log.languages, result.language_bests):
        save_snapshot(snap, out / "checkpoints" / f"best_{name}.lssd")
    last = result.run_log.epochs[-1]
    save_snapshot(snapshot(result.model, last.epoch, last.avg_dev_loss), out / "final.lssd")
    return out
