"""Loss terms for embedded knowledge distillation.

The total training objective for a net with K weight-sharing sub-nets is

    total = ce_full + (1/K) sum_k ce_sub[k]
                    + (1/K) sum_k w[k]     * kl_sub[k]
                    + (1/K) sum_k alpha[k] * att_sub[k]

where ``kl_sub`` is the KL divergence from the sub-net's softmax posterior to
the full net's (the full net acting as a frozen teacher) and ``att_sub`` is
the mean-squared error between same-resolution attention maps. Teacher-side
inputs are detached by default so no distillation gradient reaches the
full-net activations; ``teacher_grad=True`` keeps them in the graph for
ablations.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .tensor import ShapeError, Tensor, cast, checked

logger = logging.getLogger(__name__)

PROB_FLOOR = 1e-12


def softmax_posterior(logits: Tensor) -> Tensor:
    """Row-wise softmax of N×M logits, max-shifted for stability.

    Rows sum to 1; adding a constant to a logits row leaves its output
    unchanged up to rounding.
    """
    if logits.ndim != 2 or logits.shape[1] < 2:
        raise ShapeError(f"softmax_posterior: need N×M logits with M >= 2, got {logits.shape}")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_norm = shifted.exp().sum(axes=1, keepdims=True).log()
    return (shifted - log_norm).exp()


def log_softmax(logits: Tensor) -> Tensor:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - shifted.exp().sum(axes=1, keepdims=True).log()


def kl_distillation(p_t: Tensor, p_s: Tensor, teacher_grad: bool = False) -> Tensor:
    """Mean over the batch of KL(p_t || p_s) between posterior rows.

    ``p_t`` is the target: it is detached unless ``teacher_grad``. Zero
    probabilities are floored to 1e-12 inside the logs only, which keeps
    0*log(0/q) = 0 and KL(p, p) = 0 exact.
    """
    if p_t.shape != p_s.shape or p_t.ndim != 2:
        raise ShapeError(f"kl_distillation: posterior shapes {p_t.shape} vs {p_s.shape}")
    if checked():
        clamped = int(np.count_nonzero((p_s.data == 0) & (p_t.data > 0)))
        if clamped:
            logger.warning("kl_distillation: floored %d zero student probabilities", clamped)
    if not teacher_grad:
        p_t = p_t.detach()
    log_ratio = (p_t + PROB_FLOOR).log() - (p_s + PROB_FLOOR).log()
    return (p_t * log_ratio).sum(axes=1).mean()


def attention_map(features: Tensor) -> Tensor:
    """Spatial attention of N×C×H×W features: sum of |channel| values, N×1×H×W."""
    if features.ndim != 4:
        raise ShapeError(f"attention_map: need N×C×H×W features, got {features.shape}")
    return features.abs().sum(axes=1, keepdims=True)


def attention_mse(a_s: Tensor, a_t: Tensor, teacher_grad: bool = False) -> Tensor:
    """Attention transfer loss: per-sample sum of squared differences over
    positions, averaged over the batch. ``a_t`` is the (detached) target."""
    if a_s.shape != a_t.shape or a_s.ndim != 4:
        raise ShapeError(f"attention_mse: map shapes {a_s.shape} vs {a_t.shape}")
    if not teacher_grad:
        a_t = a_t.detach()
    diff = a_s - a_t
    return (diff * diff).sum(axes=(1, 2, 3)).mean()


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Hard-label softmax cross-entropy, mean over the batch."""
    labels = np.asarray(labels)
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy: need N×M logits, got {logits.shape}")
    n, m = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"cross_entropy: labels shape {labels.shape} does not match batch {n}")
    if labels.min() < 0 or labels.max() >= m:
        bad = labels[(labels < 0) | (labels >= m)][0]
        raise ValueError(f"cross_entropy: label {bad} out of range [0, {m})")
    onehot = np.zeros((n, m), dtype=logits.dtype)
    onehot[np.arange(n), labels] = 1.0
    picked = (log_softmax(logits) * Tensor(onehot)).sum(axes=1)
    return -picked.mean()


def aggregate_attention(stage_losses: Sequence[Tensor], mode: str = "mean") -> Tensor:
    """Fold per-stage attention losses into one term per sub-net."""
    if not stage_losses:
        raise ValueError("aggregate_attention: no stage losses")
    if mode not in ("mean", "sum"):
        raise ValueError(f"aggregate_attention: unknown mode {mode!r}")
    total = stage_losses[0]
    for term in stage_losses[1:]:
        total = total + term
    if mode == "mean" and len(stage_losses) > 1:
        total = total * (1.0 / len(stage_losses))
    return total


@dataclass
class EkdWeights:
    """Per-sub-net proportions of the KL and attention terms."""

    w: tuple = ()
    alpha: tuple = ()

    def __post_init__(self):
        self.w = tuple(float(v) for v in self.w)
        self.alpha = tuple(float(v) for v in self.alpha)
        if len(self.w) != len(self.alpha):
            raise ValueError(f"EkdWeights: {len(self.w)} KL weights vs {len(self.alpha)} attention weights")
        if any(v < 0 for v in self.w + self.alpha):
            raise ValueError("EkdWeights: weights must be >= 0")

    # alpha default validated on the desk-scale task: the attention loss sums
    # squared map differences over positions, so its raw scale is ~1e3-1e4 and
    # weights >= 1e-4 destabilize early training
    @classmethod
    def uniform(cls, k: int, w: float = 1.0, alpha: float = 1e-5) -> "EkdWeights":
        return cls((w,) * k, (alpha,) * k)

    def __len__(self) -> int:
        return len(self.w)


@dataclass
class EkdLossReport:
    """Decomposed loss values of one objective evaluation."""

    ce_full: float
    ce_sub: list = field(default_factory=list)
    kl_sub: list = field(default_factory=list)
    att_sub: list = field(default_factory=list)
    total: float = 0.0


def expected_total(report: EkdLossReport, weights: EkdWeights,
                   unnormalized_subnet_ce: bool = False) -> float:
    """Recombine a report's parts; the trainer asserts total matches this."""
    k = len(report.ce_sub)
    total = report.ce_full
    if k:
        ce_scale = 1.0 if unnormalized_subnet_ce else 1.0 / k
        total += ce_scale * sum(report.ce_sub)
        total += sum(w * v for w, v in zip(weights.w, report.kl_sub)) / k
        total += sum(a * v for a, v in zip(weights.alpha, report.att_sub)) / k
    return total


def total_loss(ce_full: Tensor,
               ce_sub: Sequence[Tensor],
               kl_sub: Sequence[Optional[Tensor]],
               att_sub: Sequence[Optional[Tensor]],
               weights: EkdWeights,
               unnormalized_subnet_ce: bool = False) -> tuple:
    """Combine the loss terms into the training objective.

    ``kl_sub``/``att_sub`` entries may be None (term not computed, e.g. the
    hard-label regime); zero-weighted terms are skipped rather than scaled by
    0 so the zero-weight objective is bit-identical to the hard-label one.
    Returns ``(total_tensor, EkdLossReport)``.
    """
    k = len(ce_sub)
    if len(kl_sub) != k or len(att_sub) != k:
        raise ValueError(f"total_loss: expected {k} KL/attention terms, got {len(kl_sub)}/{len(att_sub)}")
    if len(weights) != k:
        raise ValueError(f"total_loss: weight vectors have length {len(weights)}, expected K={k}")

    # combine in f64 so the report's recombination identity holds at 1e-6
    # even when the term tensors are f32
    total = cast(ce_full, np.float64)
    ce_scale = 1.0 if unnormalized_subnet_ce else (1.0 / k if k else 0.0)
    for ce_k in ce_sub:
        total = total + cast(ce_k, np.float64) * ce_scale
    for w_k, kl_k in zip(weights.w, kl_sub):
        if kl_k is not None and w_k != 0.0:
            total = total + cast(kl_k, np.float64) * (w_k / k)
    for a_k, att_k in zip(weights.alpha, att_sub):
        if att_k is not None and a_k != 0.0:
            total = total + cast(att_k, np.float64) * (a_k / k)

    report = EkdLossReport(
        ce_full=float(ce_full.data),
        ce_sub=[float(t.data) for t in ce_sub],
        kl_sub=[0.0 if t is None else float(t.data) for t in kl_sub],
        att_sub=[0.0 if t is None else float(t.data) for t in att_sub],
        total=float(total.data),
    )
    return total, report
