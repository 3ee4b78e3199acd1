"""Joint training of a DDNN: forward all nets, assemble the objective, one
backward, SGD with momentum and weight decay, evaluation, experiment loop.

Three regimes mirror the usual comparison: ``individual`` trains just the
full net (a plain baseline), ``ddnn_hard`` trains all nets with hard labels
only, ``ddnn_ekd`` adds the KL and attention distillation terms. The
zero-weight EKD objective is constructed identically to the hard-label one,
so those two regimes match bit for bit.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import checkpoint as ckpt
from .data import LabeledImage, Normalization, compute_normalization, iterate_batches
from .ekd import (
    EkdLossReport,
    EkdWeights,
    aggregate_attention,
    attention_map,
    attention_mse,
    cross_entropy,
    expected_total,
    kl_distillation,
    softmax_posterior,
    total_loss,
)
from .network import Ddnn
from .tensor import NonFiniteError, Tensor, no_grad, zero_grad

REGIMES = ("individual", "ddnn_hard", "ddnn_ekd")

METRICS_COLUMNS = ("epoch", "net_name", "split", "top1_err", "ce", "kl",
                   "att_mse", "total", "lr", "wall_secs")


@dataclass(frozen=True)
class LrSchedule:
    """Piecewise-constant learning rate: divide by drop_factor at each drop epoch."""

    base: float
    drop_epochs: tuple = ()
    drop_factor: float = 10.0

    def __post_init__(self):
        object.__setattr__(self, "drop_epochs", tuple(int(e) for e in self.drop_epochs))
        if self.base <= 0:
            raise ValueError(f"learning rate must be > 0, got {self.base}")
        if self.drop_factor <= 1:
            raise ValueError(f"drop factor must be > 1, got {self.drop_factor}")
        if list(self.drop_epochs) != sorted(self.drop_epochs) or any(e < 0 for e in self.drop_epochs):
            raise ValueError(f"drop epochs must be sorted and >= 0, got {self.drop_epochs}")


def lr_at(schedule: LrSchedule, epoch: int) -> float:
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    drops = sum(1 for e in schedule.drop_epochs if epoch >= e)
    return schedule.base / schedule.drop_factor ** drops


@dataclass
class TrainConfig:
    regime: str = "ddnn_ekd"
    lr: LrSchedule = field(default_factory=lambda: LrSchedule(0.1, (150, 250)))
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 128
    epochs: int = 300
    seed: int = 0
    weights: Optional[EkdWeights] = None   # None -> EkdWeights.uniform(K) for EKD
    teacher_grad: bool = False
    reforward_each_net: bool = False
    unnormalized_subnet_ce: bool = False
    att_aggregate: str = "mean"
    augment: bool = False

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise ValueError(f"unknown regime {self.regime!r}; expected one of {REGIMES}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 2:
            raise ValueError(f"batch_size must be >= 2 (train-mode BN), got {self.batch_size}")

    def effective_weights(self, num_subnets: int) -> EkdWeights:
        if self.regime == "individual":
            return EkdWeights((), ())
        if self.regime == "ddnn_hard":
            return EkdWeights.uniform(num_subnets, 0.0, 0.0)
        if self.weights is not None:
            if len(self.weights) != num_subnets:
                raise ValueError(f"EkdWeights has length {len(self.weights)}, "
                                 f"DDNN has {num_subnets} sub-nets")
            return self.weights
        return EkdWeights.uniform(num_subnets)


class Sgd:
    """SGD with momentum and decoupled-from-nothing L2 weight decay:
    v <- momentum*v + (grad + wd*w); w <- w - lr*v."""

    def __init__(self, params: Sequence[Tensor], momentum: float = 0.9,
                 weight_decay: float = 0.0):
        self.params = list(params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float) -> None:
        for p, v in zip(self.params, self.velocity):
            if p.grad is None:
                continue
            g = p.grad if self.weight_decay == 0.0 else p.grad + self.weight_decay * p.data
            if self.momentum == 0.0:
                p.data -= lr * g
                continue
            v *= self.momentum
            v += g
            p.data -= lr * v


def _check_report_finite(report: EkdLossReport) -> None:
    terms = [("cross-entropy (full net)", report.ce_full)]
    terms += [(f"cross-entropy (sub{k + 1})", v) for k, v in enumerate(report.ce_sub)]
    terms += [(f"KL distillation (sub{k + 1})", v) for k, v in enumerate(report.kl_sub)]
    terms += [(f"attention MSE (sub{k + 1})", v) for k, v in enumerate(report.att_sub)]
    for name, value in terms:
        if not np.isfinite(value):
            raise NonFiniteError(f"training aborted: loss term '{name}' is {value}")


def train_step(ddnn: Ddnn, batch: Tensor, labels: np.ndarray, cfg: TrainConfig,
               opt: Sgd, lr: float) -> tuple:
    """One optimization step; returns (EkdLossReport, {net_name: top1 error %}).

    The full net runs first so its posteriors/attention maps exist as
    distillation targets; sub-nets reuse its prefix activations and BN batch
    statistics unless ``reforward_each_net``. A single backward over the
    combined objective accumulates shared-weight gradients from all terms.
    """
    zero_grad(opt.params)
    weights = cfg.effective_weights(ddnn.num_subnets)
    top1 = {}

    if cfg.regime == "individual":
        logits0, _ = ddnn.forward_net(0, batch, "train", stats_cache={})
        ce0 = cross_entropy(logits0, labels)
        total, report = total_loss(ce0, [], [], [], weights, cfg.unnormalized_subnet_ce)
        top1["full"] = _top1_error(logits0, labels)
    else:
        stats_cache: Optional[dict] = {}
        reuse = not cfg.reforward_each_net
        if cfg.reforward_each_net:
            stats_cache = None
        results = ddnn.forward_all(batch, "train", stats_cache=stats_cache, reuse=reuse)
        logits0, feats0 = results[0]
        ce0 = cross_entropy(logits0, labels)
        top1["full"] = _top1_error(logits0, labels)

        distill = cfg.regime == "ddnn_ekd"
        need_kl = distill and any(w != 0.0 for w in weights.w)
        need_att = distill and any(a != 0.0 for a in weights.alpha)
        p_t = softmax_posterior(logits0) if need_kl else None
        maps_t = [attention_map(f) for f in feats0] if need_att else []

        ce_sub, kl_sub, att_sub = [], [], []
        for k in range(1, ddnn.num_subnets + 1):
            logits_k, feats_k = results[k]
            ce_sub.append(cross_entropy(logits_k, labels))
            top1[ddnn.net_names[k]] = _top1_error(logits_k, labels)
            if distill and weights.w[k - 1] != 0.0:
                kl_sub.append(kl_distillation(p_t, softmax_posterior(logits_k), cfg.teacher_grad))
            else:
                kl_sub.append(None)
            if distill and weights.alpha[k - 1] != 0.0 and maps_t:
                stage_losses = [attention_mse(attention_map(fs), mt, cfg.teacher_grad)
                                for fs, mt in zip(feats_k, maps_t)]
                att_sub.append(aggregate_attention(stage_losses, cfg.att_aggregate))
            else:
                att_sub.append(None)
        total, report = total_loss(ce0, ce_sub, kl_sub, att_sub, weights,
                                   cfg.unnormalized_subnet_ce)

    _check_report_finite(report)
    recombined = expected_total(report, weights, cfg.unnormalized_subnet_ce)
    if abs(report.total - recombined) > 1e-6:
        raise RuntimeError(f"loss decomposition broke: total {report.total!r} vs "
                           f"recombined {recombined!r}")
    total.backward()
    opt.step(lr)
    return report, top1


def _top1_error(logits: Tensor, labels: np.ndarray) -> float:
    pred = logits.data.argmax(axis=1)
    return 100.0 * float(np.count_nonzero(pred != labels)) / len(labels)


@dataclass
class EvalResult:
    """Per-net metrics over a full split, computed in eval mode."""

    net: str
    top1_err: float
    ce: float
    kl: float
    att: float
    total: float
    epoch: int = -1


def evaluate(ddnn: Ddnn, images: Sequence[LabeledImage], batch_size: int = 256,
             normalization: Optional[Normalization] = None,
             weights: Optional[EkdWeights] = None) -> list:
    """Top-1 error and loss components per net; mutates nothing."""
    if not images:
        raise ValueError("evaluate: empty test set")
    if weights is None:
        weights = EkdWeights.uniform(ddnn.num_subnets, 0.0, 0.0)
    names = ddnn.net_names
    wrong = {n: 0 for n in names}
    sums = {n: np.zeros(3) for n in names}  # ce, kl, att sums weighted by batch size

    with no_grad():
        for batch, labels in iterate_batches(images, batch_size,
                                             normalization=normalization,
                                             dtype=ddnn.dtype):
            results = ddnn.forward_all(batch, "eval")
            logits0, feats0 = results[0]
            p_t = softmax_posterior(logits0)
            maps_t = [attention_map(f) for f in feats0]
            n = len(labels)
            for idx, name in enumerate(names):
                logits, feats = results[idx]
                wrong[name] += int(np.count_nonzero(logits.data.argmax(axis=1) != labels))
                ce = float(cross_entropy(logits, labels).data)
                if idx == 0:
                    kl = att = 0.0
                else:
                    kl = float(kl_distillation(p_t, softmax_posterior(logits)).data)
                    if maps_t:
                        stage = [float(attention_mse(attention_map(fs), mt).data)
                                 for fs, mt in zip(feats, maps_t)]
                        att = float(np.mean(stage))
                    else:
                        att = 0.0
                sums[name] += n * np.array([ce, kl, att])

    total_n = len(images)
    out = []
    for idx, name in enumerate(names):
        ce, kl, att = (sums[name] / total_n).tolist()
        if idx == 0:
            combined = ce
        else:
            combined = ce + weights.w[idx - 1] * kl + weights.alpha[idx - 1] * att
        out.append(EvalResult(net=name, top1_err=100.0 * wrong[name] / total_n,
                              ce=ce, kl=kl, att=att, total=combined))
    return out


def run_experiment(ddnn: Ddnn, train_images: Sequence[LabeledImage],
                   test_images: Sequence[LabeledImage], cfg: TrainConfig,
                   out_dir, normalization: Optional[Normalization] = None,
                   deterministic: bool = False, eval_batch_size: int = 256,
                   checkpoint_meta: Optional[dict] = None,
                   log=None) -> dict:
    """Train for cfg.epochs, logging per-epoch metrics rows and keeping the
    best checkpoint per net. Returns a summary dict.

    In deterministic mode the wall_secs column is written as 0 so reruns with
    the same seed/config produce byte-identical metrics files.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if normalization is None:
        normalization = compute_normalization(train_images)
    weights = cfg.effective_weights(ddnn.num_subnets)
    eval_weights = weights if len(weights) == ddnn.num_subnets \
        else EkdWeights.uniform(ddnn.num_subnets, 0.0, 0.0)
    opt = Sgd(ddnn.parameters(), cfg.momentum, cfg.weight_decay)
    data_rng = np.random.default_rng([cfg.seed, 1])
    names = ddnn.net_names
    active = ["full"] if cfg.regime == "individual" else names
    best = {n: (float("inf"), -1) for n in names}
    metrics_path = out_dir / "metrics.csv"

    with open(metrics_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRICS_COLUMNS)
        for epoch in range(cfg.epochs):
            lr = lr_at(cfg.lr, epoch)
            t0 = time.perf_counter()
            seen = 0
            err_sum = {n: 0.0 for n in active}
            loss_sum = {n: np.zeros(4) for n in active}  # ce, kl, att, total
            for batch, labels in iterate_batches(train_images, cfg.batch_size,
                                                 rng=data_rng, augment=cfg.augment,
                                                 normalization=normalization,
                                                 dtype=ddnn.dtype):
                report, top1 = train_step(ddnn, batch, labels, cfg, opt, lr)
                n = len(labels)
                seen += n
                for i, name in enumerate(active):
                    ce = report.ce_full if i == 0 else report.ce_sub[i - 1]
                    kl = 0.0 if i == 0 else report.kl_sub[i - 1]
                    att = 0.0 if i == 0 else report.att_sub[i - 1]
                    err_sum[name] += n * top1[name]
                    loss_sum[name] += n * np.array([ce, kl, att, report.total])
            wall = 0.0 if deterministic else time.perf_counter() - t0

            for name in active:
                ce, kl, att, tot = (loss_sum[name] / seen).tolist()
                writer.writerow(_format_row(epoch, name, "train", err_sum[name] / seen,
                                            ce, kl, att, tot, lr, wall))
            evals = evaluate(ddnn, test_images, eval_batch_size, normalization, eval_weights)
            for res in evals:
                res.epoch = epoch
                writer.writerow(_format_row(epoch, res.net, "test", res.top1_err,
                                            res.ce, res.kl, res.att, res.total, lr, wall))
                if res.top1_err < best[res.net][0]:
                    best[res.net] = (res.top1_err, epoch)
                    meta = dict(checkpoint_meta or {})
                    meta.update({"epoch": epoch, "seed": cfg.seed, "net": res.net,
                                 "top1_err": res.top1_err})
                    ckpt.save_checkpoint(out_dir / f"best_{res.net}.ckpt",
                                         ddnn.named_state(), meta)
            if log is not None:
                parts = " ".join(f"{r.net}={r.top1_err:.2f}%" for r in evals)
                log(f"epoch {epoch + 1}/{cfg.epochs} lr={lr:g} test err: {parts}")
            fh.flush()

    summary = {
        "metrics": str(metrics_path),
        "nets": {n: {"best_err": best[n][0], "best_epoch": best[n][1]} for n in names},
    }
    return summary


def _format_row(epoch, name, split, err, ce, kl, att, total, lr, wall):
    return [epoch, name, split, f"{err:.6f}", f"{ce:.6f}", f"{kl:.6f}",
            f"{att:.6f}", f"{total:.6f}", f"{lr:.6g}", f"{wall:.3f}"]
