"""Untargeted l-infinity attacks on a frozen surrogate: PGD, MIM and SIM.

All three share one iteration loop; they differ only in how the ascent
direction is formed from input gradients.  None of them knows how the
surrogate was trained, so swapping an LRS checkpoint in leaves this code
untouched.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .models import forward, read_records, write_records
from .reports import write_csv

METHODS = ("pgd", "mim", "sim")


class AttackError(ArithmeticError):
    pass


@dataclass
class AttackConfig:
    method: str = "pgd"
    eps: float = 8 / 255
    steps: int = 50
    step_size: float | None = None  # None -> eps / 4 (2/255 at eps = 8/255)
    mim_decay: float = 1.0
    sim_copies: int = 5
    seed: int = 0

    def __post_init__(self):
        self.method = self.method.lower()
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        if not 0 < self.eps <= 1:
            raise ValueError("eps must lie in (0, 1]")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.step_size is not None and self.step_size <= 0:
            raise ValueError("step_size must be > 0")
        if self.sim_copies < 1:
            raise ValueError("sim_copies must be >= 1")

    @property
    def alpha(self) -> float:
        return self.eps / 4 if self.step_size is None else self.step_size

    @classmethod
    def eps_over_steps(cls, **kwargs) -> "AttackConfig":
        """Preset with step size eps / steps."""
        cfg = cls(**kwargs)
        cfg.step_size = cfg.eps / cfg.steps
        return cfg


@dataclass
class AdvBatch:
    originals: np.ndarray
    adversarials: np.ndarray
    labels: np.ndarray
    loss_trajectory: np.ndarray  # (steps + 1, N) per-sample surrogate loss
    config: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.labels)

    def linf(self) -> np.ndarray:
        diff = (self.adversarials - self.originals).reshape(len(self), -1)
        return np.abs(diff).max(axis=1)

    def save(self, path, manifest_path=None, *, config=None, seed=None) -> None:
        header = {"kind": "advbatch", "attack": self.config}
        write_records(path, header, [
            ("originals", self.originals), ("adversarials", self.adversarials),
            ("labels", self.labels.astype(np.float32)), ("loss_trajectory", self.loss_trajectory),
        ])
        if manifest_path is not None:
            rows = zip(range(len(self)), self.labels, self.loss_trajectory[0],
                       self.loss_trajectory[-1], self.linf())
            write_csv(manifest_path, ["sample_id", "label", "loss_t0", "loss_tT", "linf"], rows,
                      config=config, seed=seed)

    @classmethod
    def load(cls, path) -> "AdvBatch":
        header, records = read_records(path)
        if header.get("kind") != "advbatch":
            raise ValueError(f"{path} does not hold an adversarial batch")
        r = dict(records)
        return cls(r["originals"], r["adversarials"], r["labels"].astype(np.int64),
                   r["loss_trajectory"], header.get("attack", {}))


def project(x_cand, x_orig, eps: float) -> np.ndarray:
    """Clamp into the eps-ball around x_orig, then into [0, 1]."""
    x_cand, x_orig = np.asarray(x_cand), np.asarray(x_orig)
    if x_cand.shape != x_orig.shape:
        raise ValueError(f"project: shapes {x_cand.shape} and {x_orig.shape} differ")
    eps = x_orig.dtype.type(eps)
    return np.clip(np.clip(x_cand, x_orig - eps, x_orig + eps), 0, 1)


def losses_at(model, x, y) -> np.ndarray:
    return ad.softmax_cross_entropy(forward(model, x), y).data


def _input_grad(model, x: np.ndarray, y, factor: float = 1.0) -> np.ndarray:
    with Tape():
        xt = Tensor(x, requires_grad=True)
        inp = xt if factor == 1.0 else ad.scale(xt, factor)
        (g,) = ad.grad(ad.sum(ad.softmax_cross_entropy(model(inp), y)), [xt])
    return g.data


def pgd_direction(model, x, y, cfg, state):
    return np.sign(_input_grad(model, x, y))


def mim_direction(model, x, y, cfg, state):
    g = _input_grad(model, x, y)
    l1 = np.abs(g).reshape(len(g), -1).sum(axis=1).reshape(-1, *([1] * (g.ndim - 1)))
    v = state.get("velocity", np.zeros_like(g))
    v = g.dtype.type(cfg.mim_decay) * v + g / np.maximum(l1, np.finfo(g.dtype).tiny)
    state["velocity"] = v
    return np.sign(v)


def sim_gradient(model, x, y, copies: int) -> np.ndarray:
    """Mean over i < copies of the input gradient of loss(x / 2**i)."""
    total = _input_grad(model, x, y)
    for i in range(1, copies):
        total = total + _input_grad(model, x, y, 1.0 / 2 ** i)
    return total / x.dtype.type(copies)


def sim_direction(model, x, y, cfg, state):
    return np.sign(sim_gradient(model, x, y, cfg.sim_copies))


DIRECTIONS: dict[str, Callable] = {"pgd": pgd_direction, "mim": mim_direction, "sim": sim_direction}


def run_attack(model, x, y, cfg: AttackConfig, callback=None) -> AdvBatch:
    """Sign-gradient ascent from x (no random start), projecting every step.

    ``callback(t, x_t)`` sees every iterate including x_0 = x.
    """
    x = np.asarray(x, dtype=model.dtype)
    y = np.asarray(y)
    if x.size and (x.min() < 0 or x.max() > 1):
        raise ValueError("attack inputs must lie in [0, 1]")
    direction = DIRECTIONS[cfg.method]
    alpha = x.dtype.type(cfg.alpha)
    state: dict = {}
    xt = x.copy()
    traj = [losses_at(model, xt, y)]
    if callback:
        callback(0, xt)
    for t in range(cfg.steps):
        try:
            step = direction(model, xt, y, cfg, state)
        except ad.NonFiniteError:
            raise AttackError(f"{cfg.method}: non-finite gradient at iterate {t}") from None
        xt = project(xt + alpha * step, x, cfg.eps)
        assert np.abs(xt - x).max(initial=0) <= cfg.eps + 1e-6 and xt.min(initial=0) >= 0 and xt.max(initial=1) <= 1
        traj.append(losses_at(model, xt, y))
        if callback:
            callback(t + 1, xt)
    return AdvBatch(x, xt, y, np.stack(traj).astype(np.float32), asdict(cfg))


def pgd(model, x, y, cfg: AttackConfig, callback=None) -> AdvBatch:
    return run_attack(model, x, y, _with_method(cfg, "pgd"), callback)


def mim(model, x, y, cfg: AttackConfig, callback=None) -> AdvBatch:
    return run_attack(model, x, y, _with_method(cfg, "mim"), callback)


def sim(model, x, y, cfg: AttackConfig, callback=None) -> AdvBatch:
    return run_attack(model, x, y, _with_method(cfg, "sim"), callback)


def _with_method(cfg: AttackConfig, method: str) -> AttackConfig:
    if cfg.method == method:
        return cfg
    return AttackConfig(**{**asdict(cfg), "method": method})


def attack(model, x, y, cfg: AttackConfig, callback=None) -> AdvBatch:
    """Dispatch on ``cfg.method``."""
    return run_attack(model, x, y, cfg, callback)
