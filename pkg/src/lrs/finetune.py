"""Lipschitz-regularized fine-tuning of a pretrained surrogate (LRS-1/LRS-2/LRS-F).

Both regularizers use finite differences along d = sign(grad_x loss):

* first order:  ((l(x + h1 d) - l(x)) / h1) ** 2
* second order: || (grad_x l(x + h2 d) - grad_x l(x)) / h2 ||_2 ** 2

The division by h sits inside the square, so the 1/h^2 factor is part of the
regularizer and lambda keeps the same meaning for every h.  Probe points are
not clipped to the pixel box.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .data import BatchIterator, Dataset
from .models import Model, save_checkpoint
from .reports import write_csv
from .training import SGD

log = logging.getLogger(__name__)

VARIANTS = ("LRS1", "LRS2", "LRSF")

# A well-fit surrogate can start fine-tuning at a plain loss near 1e-3, where a
# tenfold rise is still harmless; the divergence test never fires below 10x this.
DIVERGENCE_FLOOR = 0.1

LossFn = Callable[[Model, Tensor, np.ndarray], Tensor]


class DivergenceError(ArithmeticError):
    pass


@dataclass
class LRSConfig:
    variant: str = "LRSF"
    lambda1: float = 5.0
    lambda2: float = 5.0
    h1: float = 0.01
    h2: float = 1.5
    epochs: int = 10
    batch_size: int = 64
    lr: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 5e-4
    seed: int = 0

    def __post_init__(self):
        self.variant = self.variant.upper().replace("-", "")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("lambda values must be >= 0")
        if self.uses_first and self.h1 <= 0:
            raise ValueError(f"{self.variant} needs h1 > 0")
        if self.uses_second and self.h2 <= 0:
            raise ValueError(f"{self.variant} needs h2 > 0")
        if self.epochs < 0 or self.batch_size < 1 or self.lr <= 0:
            raise ValueError("need epochs >= 0, batch_size >= 1, lr > 0")

    @property
    def uses_first(self) -> bool:
        return self.variant in ("LRS1", "LRSF")

    @property
    def uses_second(self) -> bool:
        return self.variant in ("LRS2", "LRSF")

    @property
    def weight1(self) -> float:
        return self.lambda1 if self.uses_first else 0.0

    @property
    def weight2(self) -> float:
        return self.lambda2 if self.uses_second else 0.0

    def describe(self) -> str:
        return f"{self.variant} lambda1={self.lambda1} h1={self.h1} lambda2={self.lambda2} h2={self.h2}"


@dataclass
class FinetuneReport:
    plain_loss: list[float] = field(default_factory=list)
    regularizer: list[float] = field(default_factory=list)
    test_accuracy: list[float] = field(default_factory=list)
    checkpoint_path: Path | None = None

    def write_csv(self, path, *, config=None, seed=None) -> Path:
        acc = self.test_accuracy or [float("nan")] * len(self.plain_loss)
        rows = zip(range(len(self.plain_loss)), self.plain_loss, self.regularizer, acc)
        return write_csv(path, ["epoch", "mean_plain_loss", "mean_regularizer", "test_accuracy"], rows,
                         config=config, seed=seed)


def cross_entropy(model: Model, x: Tensor, y) -> Tensor:
    """Per-sample cross-entropy loss of ``model`` at ``x``."""
    return ad.softmax_cross_entropy(model(x), y)


def _as_input(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype), requires_grad=True)


def input_grad(model: Model, x, y, create_graph: bool = False, loss_fn: LossFn = cross_entropy) -> Tensor:
    """Gradient of the summed per-sample loss with respect to the input batch.

    Samples are independent, so row i is the gradient of loss_i at x_i.  The
    tape stays alive so callers can keep differentiating.
    """
    with ad.ensure_tape():
        x = _as_input(x, model.dtype)
        losses = loss_fn(model, x, y)
        (g,) = ad.grad(ad.sum(losses), [x], create_graph=create_graph, retain_graph=True)
    return g


def fdm_grad_norm_sq(model: Model, x, y, h1: float, loss_fn: LossFn = cross_entropy,
                     losses: Tensor | None = None, direction: np.ndarray | None = None) -> Tensor:
    """Per-sample ((l(x + h1 d) - l(x)) / h1)^2, differentiable in the weights."""
    if h1 <= 0:
        raise ValueError("h1 must be > 0")
    with ad.ensure_tape():
        x = _as_input(x, model.dtype)
        if losses is None:
            losses = loss_fn(model, x, y)
        if direction is None:
            (g,) = ad.grad(ad.sum(losses), [x], retain_graph=True)
            direction = ad.sign(g)
        probe = Tensor(x.data + x.dtype.type(h1) * direction.astype(x.dtype))
        shifted = loss_fn(model, probe, y)
        if not np.all(np.isfinite(shifted.data)):
            raise ad.NonFiniteError("fdm_grad_norm_sq: non-finite loss at probe point")
        return ad.square(ad.scale(ad.sub(shifted, losses), 1.0 / h1))


def fdm_hessian_norm_sq(model: Model, x, y, h2: float, loss_fn: LossFn = cross_entropy,
                        gx: Tensor | None = None, direction: np.ndarray | None = None) -> Tensor:
    """Per-sample ||(grad l(x + h2 d) - grad l(x)) / h2||_2^2, differentiable in the weights.

    ``gx`` must have been produced with ``create_graph=True`` when supplied.
    """
    if h2 <= 0:
        raise ValueError("h2 must be > 0")
    with ad.ensure_tape():
        x = _as_input(x, model.dtype)
        if gx is None:
            (gx,) = ad.grad(ad.sum(loss_fn(model, x, y)), [x], create_graph=True)
        if direction is None:
            direction = ad.sign(gx)
        z = Tensor(x.data + x.dtype.type(h2) * direction.astype(x.dtype), requires_grad=True)
        (gz,) = ad.grad(ad.sum(loss_fn(model, z, y)), [z], create_graph=True)
        diff = ad.scale(ad.sub(gz, gx), 1.0 / h2)
        return ad.sum(ad.square(ad.reshape(diff, (len(diff), -1))), axis=1)


def regularized_loss(model: Model, xb, yb, cfg: LRSConfig, loss_fn: LossFn = cross_entropy):
    """Return (total, plain, penalty) with total = plain + penalty.

    penalty is lambda1 * mean(first-order term) + lambda2 * mean(second-order
    term), restricted to the terms the variant uses.  Must run on an active tape.
    """
    w1, w2 = cfg.weight1, cfg.weight2
    regularize = bool(w1 or w2)
    x = Tensor(np.asarray(xb, dtype=model.dtype), requires_grad=regularize)
    losses = loss_fn(model, x, yb)
    plain = ad.mean(losses)
    if not regularize:
        return plain, plain, Tensor(np.zeros((), dtype=plain.dtype))
    (gx,) = ad.grad(ad.sum(losses), [x], create_graph=bool(w2), retain_graph=True)
    d = ad.sign(gx)
    penalty = None
    if w1:
        r1 = ad.mean(fdm_grad_norm_sq(model, x, yb, cfg.h1, loss_fn, losses=losses, direction=d))
        penalty = ad.scale(r1, w1)
    if w2:
        r2 = ad.scale(ad.mean(fdm_hessian_norm_sq(model, x, yb, cfg.h2, loss_fn, gx=gx, direction=d)), w2)
        penalty = r2 if penalty is None else ad.add(penalty, r2)
    return ad.add(plain, penalty), plain, penalty


def finetune(model: Model, dataset: Dataset, cfg: LRSConfig, test: Dataset | None = None,
             checkpoint_path=None, loss_fn: LossFn = cross_entropy) -> tuple[Model, FinetuneReport]:
    """Fine-tune a copy of a pretrained model on the regularized objective.

    Raises DivergenceError when the epoch-mean plain loss exceeds ten times
    its first-epoch value (floored at DIVERGENCE_FLOOR) or a non-finite value
    appears.
    """
    if model.provenance != "pretrained":
        raise ValueError(f"finetune expects a pretrained model, got provenance {model.provenance!r}")
    out = model.copy()
    report = FinetuneReport(checkpoint_path=Path(checkpoint_path) if checkpoint_path else None)
    if cfg.epochs > 0:
        _run(out, dataset, cfg, test, report, loss_fn)
        out.provenance = cfg.variant.lower()
        out.meta = dict(model.meta, finetune=asdict(cfg))
    if checkpoint_path:
        save_checkpoint(out, checkpoint_path)
    return out, report


def _run(model, dataset, cfg, test, report, loss_fn):
    opt = SGD(model.params, cfg.lr, cfg.momentum, cfg.weight_decay)
    batches = BatchIterator(dataset, cfg.batch_size, cfg.seed)
    for epoch in range(cfg.epochs):
        plain_sum = reg_sum = 0.0
        for xb, yb in batches.epoch():
            try:
                # overflow surfaces as NonFiniteError or the loss check below
                with Tape(), np.errstate(over="ignore", invalid="ignore"):
                    total, plain, penalty = regularized_loss(model, xb, yb, cfg, loss_fn)
                    grads = ad.grad(total, model.params)
            except ad.NonFiniteError as exc:
                raise DivergenceError(f"non-finite value during fine-tuning ({cfg.describe()}): {exc}") from None
            opt.step(grads)
            plain_sum += plain.item() * len(yb)
            reg_sum += penalty.item() * len(yb)
        report.plain_loss.append(plain_sum / len(dataset))
        report.regularizer.append(reg_sum / len(dataset))
        if test is not None:
            report.test_accuracy.append(model.accuracy(test.images, test.labels))
        log.info("finetune epoch %d plain %.4f reg %.4f", epoch, report.plain_loss[-1], report.regularizer[-1])
        current = report.plain_loss[-1]
        if not np.isfinite(current) or current > 10 * max(report.plain_loss[0], DIVERGENCE_FLOOR):
            raise DivergenceError(
                f"fine-tuning diverged at epoch {epoch}: mean plain loss {current:.4g} vs "
                f"{report.plain_loss[0]:.4g} in epoch 0 ({cfg.describe()})")
