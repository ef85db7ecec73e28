"""Plain minibatch SGD used for pretraining and as the fine-tuning optimizer."""
from __future__ import annotations

import logging

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .data import BatchIterator, Dataset
from .models import Model

log = logging.getLogger(__name__)


class SGD:
    """SGD with heavy-ball momentum and decoupled-from-bias weight decay.

    Update order matches the common framework convention:
    ``d = g + wd * w``; ``buf = momentum * buf + d``; ``w -= lr * buf``.
    """

    def __init__(self, params, lr: float, momentum: float = 0.0, weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self._buf: list[np.ndarray | None] = [None] * len(self.params)

    def step(self, grads) -> None:
        for i, (p, g) in enumerate(zip(self.params, grads)):
            d = g.data
            if self.weight_decay and not p.name.endswith("bias"):
                d = d + p.data.dtype.type(self.weight_decay) * p.data
            if self.momentum:
                buf = self._buf[i]
                d = d.copy() if buf is None else p.data.dtype.type(self.momentum) * buf + d
                self._buf[i] = d
            p.data -= p.data.dtype.type(self.lr) * d


def batch_loss(model: Model, xb: np.ndarray, yb: np.ndarray) -> Tensor:
    return ad.mean(ad.softmax_cross_entropy(model(Tensor(xb)), yb))


def train(model: Model, dataset: Dataset, epochs: int = 10, lr: float = 0.05, momentum: float = 0.9,
          batch_size: int = 64, seed: int = 0, weight_decay: float = 0.0) -> list[float]:
    """Train in place with plain cross-entropy; returns per-epoch mean loss."""
    opt = SGD(model.params, lr, momentum, weight_decay)
    batches = BatchIterator(dataset, batch_size, seed)
    history = []
    for epoch in range(epochs):
        total, count = 0.0, 0
        for xb, yb in batches.epoch():
            with Tape():
                loss = batch_loss(model, xb, yb)
                grads = ad.grad(loss, model.params)
            opt.step(grads)
            total += loss.item() * len(yb)
            count += len(yb)
        history.append(total / count)
        log.debug("train %s epoch %d loss %.4f", model.spec.arch, epoch, history[-1])
    model.provenance = "pretrained"
    model.meta.update({"epochs": epochs, "lr": lr, "seed": seed})
    return history
