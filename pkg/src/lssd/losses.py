"""Translation and self-distillation objectives.

Both losses are token means over the target mask. The distillation term is
the cross-entropy from a frozen teacher distribution to the student, scaled
per sentence by a weight that depends on the weighting mode.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, gather

MODES = ("baseline", "lssd_whole", "lssd_selective", "lssd_adaptive", "stsd")
LOG_FLOOR = 1e-9

# weighting rule used by each training mode
_WEIGHT_RULE = {
    "lssd_whole": "whole",
    "lssd_selective": "selective",
    "lssd_adaptive": "adaptive",
    "stsd": "whole",
    "whole": "whole",
    "selective": "selective",
    "adaptive": "adaptive",
}


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 2.0
    sigma: float = 2.0
    label_smoothing: float = 0.1
    mode: str = "baseline"
    sentence_prob: str = "arith"

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")
        if not self.sigma > 1:
            raise ValueError("sigma must exceed 1")
        if not 0 <= self.label_smoothing < 1:
            raise ValueError("label_smoothing must lie in [0, 1)")
        if self.sentence_prob not in ("arith", "geom"):
            raise ValueError("sentence_prob must be 'arith' or 'geom'")


@dataclass
class LossBreakdown:
    nmt_loss: float
    distill_loss: float
    g_values: np.ndarray
    combined: float
    switch_on: bool = False


def _mask_count(mask: np.ndarray) -> float:
    count = float(mask.sum())
    if count == 0:
        raise ValueError("mask selects no tokens")
    return count


def nmt_loss(distributions: Tensor, targets, mask, label_smoothing: float = 0.0) -> Tensor:
    """Label-smoothed negative log-likelihood, averaged over masked tokens."""
    targets = np.asarray(targets, dtype=np.int64)
    mask = np.asarray(mask)
    count = _mask_count(mask)
    logp = distributions.log(floor=LOG_FLOOR)
    per_token = -gather(logp, targets)
    if label_smoothing:
        vocab = distributions.shape[-1]
        per_token = per_token * (1.0 - label_smoothing) - logp.sum(axis=-1) * (label_smoothing / vocab)
    return (per_token * mask.astype(distributions.data.dtype)).sum() * (1.0 / count)


def distill_loss(teacher_dists, student_dists: Tensor, mask, g) -> Tensor:
    """Per-sentence weighted cross-entropy H(teacher, student), token mean.

    The teacher enters as a constant; no gradient reaches it.
    """
    teacher = teacher_dists.data if isinstance(teacher_dists, Tensor) else np.asarray(teacher_dists)
    if teacher.shape != student_dists.shape:
        raise ValueError(f"teacher shape {teacher.shape} does not match student shape {student_dists.shape}")
    g = np.asarray(g, dtype=np.float64)
    if g.shape != (student_dists.shape[0],):
        raise ValueError(f"expected {student_dists.shape[0]} sample weights, got shape {g.shape}")
    if (g < 0).any():
        raise ValueError("sample weights must be non-negative")
    mask = np.asarray(mask)
    count = _mask_count(mask)
    dtype = student_dists.data.dtype
    ce = -(student_dists.log(floor=LOG_FLOOR) * teacher.astype(dtype)).sum(axis=-1)
    weights = (g[:, None] * mask).astype(dtype)
    return (ce * weights).sum() * (1.0 / count)


def sentence_probabilities(distributions, targets, mask, mean: str = "arith") -> np.ndarray:
    """P(y|x) per sentence as the mean of the per-token target probabilities."""
    probs = distributions.data if isinstance(distributions, Tensor) else np.asarray(distributions)
    targets = np.asarray(targets, dtype=np.int64)
    mask = np.asarray(mask, dtype=np.float64)
    counts = mask.sum(axis=-1)
    if (counts == 0).any():
        raise ValueError("every sentence needs at least one unmasked token")
    tok = np.take_along_axis(probs, targets[..., None], axis=-1)[..., 0].astype(np.float64)
    if mean == "arith":
        return (tok * mask).sum(axis=-1) / counts
    if mean == "geom":
        return np.exp((np.log(np.maximum(tok, LOG_FLOOR)) * mask).sum(axis=-1) / counts)
    raise ValueError(f"unknown mean {mean!r}")


def sentence_probability(distributions, targets, mask, mean: str = "arith") -> float:
    probs = distributions.data if isinstance(distributions, Tensor) else np.asarray(distributions)
    return float(sentence_probabilities(probs[None], np.asarray(targets)[None], np.asarray(mask)[None], mean)[0])


def sample_weights(mode: str, p_teacher, p_student, sigma: float = 2.0) -> np.ndarray:
    rule = _WEIGHT_RULE.get(mode)
    if rule is None:
        raise ValueError(f"mode {mode!r} has no sample weighting rule")
    p_t = np.asarray(p_teacher, dtype=np.float64)
    p_s = np.asarray(p_student, dtype=np.float64)
    if (p_t <= 0).any() or (p_s <= 0).any():
        raise ValueError("sentence probabilities must be positive")
    if rule == "whole":
        return np.ones(np.broadcast(p_t, p_s).shape)
    if rule == "selective":
        return (p_t >= p_s).astype(np.float64)
    return np.minimum(p_t / p_s, sigma)


def sample_weight(mode: str, p_teacher: float, p_student: float, sigma: float = 2.0) -> float:
    return float(sample_weights(mode, p_teacher, p_student, sigma))


def combined_loss(nmt: Tensor, distill: Tensor | None, alpha: float, switch_on: bool) -> Tensor:
    if not switch_on or distill is None:
        return nmt
    return nmt + distill * alpha


def objective(student: Tensor, teacher, targets, mask, config: LossConfig, switch_on: bool):
    """Training loss for one batch and its breakdown.

    ``teacher`` is only consulted when the switch is on. Sample weights are
    computed from detached probabilities and act as constants.
    """
    nmt = nmt_loss(student, targets, mask, config.label_smoothing)
    batch = student.shape[0]
    if not switch_on or config.mode == "baseline":
        return nmt, LossBreakdown(nmt.item(), 0.0, np.zeros(batch), nmt.item(), False)
    if teacher is None:
        raise RuntimeError("distillation switch is on but no teacher distributions were given")
    rule = _WEIGHT_RULE[config.mode]
    if rule == "whole":
        g = np.ones(batch)
    else:
        p_t = sentence_probabilities(teacher, targets, mask, config.sentence_prob)
        p_s = sentence_probabilities(student, targets, mask, config.sentence_prob)
        g = sample_weights(rule, np.maximum(p_t, LOG_FLOOR), np.maximum(p_s, LOG_FLOOR), config.sigma)
    distill = distill_loss(teacher, student, mask, g)
    total = combined_loss(nmt, distill, config.alpha, True)
    return total, LossBreakdown(nmt.item(), distill.item(), g, total.item(), True)
