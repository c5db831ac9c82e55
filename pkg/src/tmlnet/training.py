"""Constrained training: energy with an L1 kernel penalty, momentum SGD, and
the alternating clip/rescale projection applied after every update.

Each step computes gradients of

    E = mean batch loss + lambda * sum(|kernel weights|)

over the CNN parameters and the multiplication-layer kernels, updates both
with momentum SGD, then projects every trainable kernel bank back onto its
constraint set (weights in [0, C2], per-kernel sum C1). Only kernel weights
carry the L1 term and the projection; ordinary CNN parameters are untouched
by either. The subgradient of |w| at w = 0 is taken as 0 so clipped-away
weights stay put until the data gradient revives them.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import tml as T
from .datasets import Dataset, batches
from .layers import softmax_xent
from .network import Gradients, NetworkSpec, network_backward, network_forward


@dataclass(frozen=True)
class TrainConfig:
    lam: float = 0.01  # L1 weight, the "lambda" config key
    learning_rate: float = 0.05
    momentum: float = 0.9
    batch_size: int = 32
    epochs: int = 30
    rng_seed: int = 0
    c1: float = 1.0
    c2: float = 0.5
    eps: float = 1e-6

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be nonnegative")
        # zero is allowed so a no-op update still exercises the projection
        if self.learning_rate < 0:
            raise ValueError("learning rate must be nonnegative")
        if self.momentum < 0:
            raise ValueError("momentum must be nonnegative")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be at least 1")


@dataclass
class EnergyReport:
    mean_loss: float
    l1_term: float

    @property
    def total(self) -> float:
        return self.mean_loss + self.l1_term


@dataclass
class EpochMetrics:
    epoch: int
    mean_loss: float
    l1_term: float
    total: float
    train_acc: float
    test_acc: float | None


@dataclass
class OptimizerState:
    velocities: Gradients

    @classmethod
    def zeros_like(cls, spec: NetworkSpec) -> "OptimizerState":
        def z(plist):
            return [{k: np.zeros_like(v) for k, v in p.items()} for p in plist]

        return cls(Gradients(z(spec.params), z(spec.side_params)))


@dataclass
class InvariantLog:
    """Per-run extrema of the constraint invariants, refreshed every step."""

    min_weight: float = np.inf
    max_sum_abs_err: float = 0.0
    max_post_clip_weight: float = -np.inf
    steps: int = 0


def teacher_onehot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() >= num_classes:
        raise ValueError("label outside class range")
    return np.eye(num_classes)[labels]


def _trainable_l1(spec: NetworkSpec) -> float:
    total = 0.0
    for chain, i, _layer in spec.tml_entries(trainable_only=True):
        total += np.abs(spec.param_dict(chain, i)["w"]).sum()
    return float(total)


def energy(spec: NetworkSpec, batch, cfg: TrainConfig) -> EnergyReport:
    """Mean loss over the batch plus lambda times the trainable kernels' L1 norm."""
    xb, labels = batch
    if len(xb) == 0:
        raise ValueError("energy of an empty batch")
    logits, _ = network_forward(spec, xb, train_mode=False)
    losses, _ = softmax_xent(logits, teacher_onehot(labels, spec.num_classes))
    mean_loss = float(losses.mean())
    if not np.isfinite(mean_loss):
        raise ValueError("non-finite loss")
    return EnergyReport(mean_loss, cfg.lam * _trainable_l1(spec))


def train_step(
    spec: NetworkSpec,
    batch,
    cfg: TrainConfig,
    state: OptimizerState,
    rng: np.random.Generator,
    project: bool = True,
    post_clip_hook=None,
    invariants: InvariantLog | None = None,
) -> EnergyReport:
    """One gradient/update/project cycle; mutates spec parameters in place.

    `project=False` skips the constraint projection (test hook: the step then
    reduces to plain momentum SGD). `post_clip_hook(chain, index, weights)`
    observes each kernel bank right after the clip sub-step.
    """
    xb, labels = batch
    onehot = teacher_onehot(labels, spec.num_classes)
    logits, trace = network_forward(spec, xb, train_mode=True, rng=rng)
    losses, d_logits = softmax_xent(logits, onehot)
    mean_loss = float(losses.mean())
    if not np.isfinite(mean_loss):
        raise ValueError("non-finite loss")
    report = EnergyReport(mean_loss, cfg.lam * _trainable_l1(spec))
    grads = network_backward(spec, trace, d_logits / len(losses))

    # L1 subgradient on trainable kernels only (sign(0) = 0)
    if cfg.lam:
        for chain, i, _layer in spec.tml_entries(trainable_only=True):
            glist = grads.main if chain == "main" else grads.side
            glist[i]["w"] += cfg.lam * np.sign(spec.param_dict(chain, i)["w"])

    frozen = {
        ("side" if chain == "side" else "main", i)
        for chain, i, layer in spec.tml_entries()
        if not layer.trainable
    }
    for chain, plist, glist, vlist in (
        ("main", spec.params, grads.main, state.velocities.main),
        ("side", spec.side_params, grads.side, state.velocities.side),
    ):
        for i, params in enumerate(plist):
            if (chain, i) in frozen:
                continue
            for key in params:
                v = vlist[i][key]
                v *= cfg.momentum
                v -= cfg.learning_rate * glist[i][key]
                params[key] += v

    if project:
        for chain, i, layer in spec.tml_entries(trainable_only=True):
            params = spec.param_dict(chain, i)
            bank = T.TmlKernels(layer.tml, params["w"])
            clipped = T.clip_step(bank)
            if post_clip_hook is not None:
                post_clip_hook(chain, i, clipped.weights)
            if invariants is not None:
                invariants.max_post_clip_weight = max(
                    invariants.max_post_clip_weight, float(clipped.weights.max())
                )
            try:
                projected = T.rescale_step(clipped)
            except T.DegenerateKernelError as err:
                # dead kernels restart uniform with cleared momentum
                projected = T.rescale_step(T.reinit_kernels(clipped, err.kernel_indices))
                vel = (state.velocities.main if chain == "main" else state.velocities.side)[i]
                vel["w"][..., list(err.kernel_indices)] = 0.0
            params["w"][...] = projected.weights
            if invariants is not None:
                w = params["w"]
                invariants.min_weight = min(invariants.min_weight, float(w.min()))
                sums = w.sum(axis=(0, 1, 2))
                invariants.max_sum_abs_err = max(
                    invariants.max_sum_abs_err, float(np.abs(sums - layer.tml.c1).max())
                )
    if invariants is not None:
        invariants.steps += 1
    return report


def evaluate(spec: NetworkSpec, ds: Dataset, batch_size: int = 256) -> float:
    """Fraction of samples whose arg-max logit matches the label (eval mode)."""
    hits = 0
    for start in range(0, len(ds), batch_size):
        xb = ds.images[start : start + batch_size]
        yb = ds.labels[start : start + batch_size]
        logits, _ = network_forward(spec, xb, train_mode=False)
        hits += int((logits.argmax(axis=1) == yb).sum())
    return hits / len(ds)


METRIC_FIELDS = ("epoch", "mean_loss", "l1_term", "total", "train_acc", "test_acc")


def write_metrics_csv(metrics: list[EpochMetrics], path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(METRIC_FIELDS)
        for m in metrics:
            writer.writerow(
                [
                    m.epoch,
                    repr(m.mean_loss),
                    repr(m.l1_term),
                    repr(m.total),
                    repr(m.train_acc),
                    "" if m.test_acc is None else repr(m.test_acc),
                ]
            )


def train_loop(
    spec: NetworkSpec,
    train_ds: Dataset,
    cfg: TrainConfig,
    test_ds: Dataset | None = None,
    metrics_path=None,
    log=None,
    invariants: InvariantLog | None = None,
    post_clip_hook=None,
) -> list[EpochMetrics]:
    """Fixed-epoch training with a seeded shuffle; returns per-epoch metrics.

    The epoch's mean_loss averages the pre-update batch losses seen during the
    epoch; l1_term is measured on the post-projection kernels at epoch end, so
    the logged decomposition reflects the feasible (projected) state.
    """
    if len(train_ds) == 0:
        raise ValueError("empty training dataset")
    rng = np.random.default_rng(cfg.rng_seed)
    state = OptimizerState.zeros_like(spec)
    metrics: list[EpochMetrics] = []
    for epoch in range(1, cfg.epochs + 1):
        step_losses = []
        for batch in batches(train_ds, cfg.batch_size, rng):
            report = train_step(
                spec,
                batch,
                cfg,
                state,
                rng,
                post_clip_hook=post_clip_hook,
                invariants=invariants,
            )
            step_losses.append(report.mean_loss)
        l1_term = cfg.lam * _trainable_l1(spec)
        mean_loss = float(np.mean(step_losses))
        m = EpochMetrics(
            epoch=epoch,
            mean_loss=mean_loss,
            l1_term=l1_term,
            total=mean_loss + l1_term,
            train_acc=evaluate(spec, train_ds),
            test_acc=evaluate(spec, test_ds) if test_ds is not None else None,
        )
        metrics.append(m)
        if log is not None:
            acc = "" if m.test_acc is None else f" test_acc={m.test_acc:.4f}"
            log(f"epoch {epoch}: loss={m.mean_loss:.4f} l1={m.l1_term:.6f} "
                f"train_acc={m.train_acc:.4f}{acc}")
    if metrics_path is not None:
        write_metrics_csv(metrics, metrics_path)
    return metrics
