"""Transferability and surrogate-smoothness measurements.

* attack success rate on filtered samples,
* empirical local Lipschitz constant of the logits (PGD-like inner search),
* 2-D loss-landscape slices and their total variation,
* per-iteration loss curves on surrogate and target.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .attacks import AdvBatch, AttackConfig, losses_at, run_attack
from .autodiff import Tape, Tensor
from .finetune import cross_entropy
from .models import forward
from .reports import write_csv


class NoEligibleSamples(ValueError):
    pass


def correct_mask(models, x, y, batch_size: int = 1000) -> np.ndarray:
    """True where every model in ``models`` classifies the sample correctly."""
    mask = np.ones(len(y), dtype=bool)
    for model in models:
        for i in range(0, len(y), batch_size):
            pred = forward(model, x[i:i + batch_size]).data.argmax(axis=1)
            mask[i:i + batch_size] &= pred == y[i:i + batch_size]
    return mask


def asr(target, adv: AdvBatch) -> float:
    """Fraction of adversarial inputs the target misclassifies."""
    if len(adv) == 0:
        raise NoEligibleSamples("no eligible samples: every sample was filtered out")
    pred = forward(target, adv.adversarials).data.argmax(axis=1)
    return float(np.mean(pred != adv.labels))


@dataclass
class EvalReport:
    surrogate: str
    method: str
    eps: float
    n: int
    white_box: float
    per_target: dict[str, float] = field(default_factory=dict)
    attack: dict = field(default_factory=dict)

    @property
    def average(self) -> float:
        """Mean over the black-box targets; the white-box surrogate is excluded."""
        return float(np.mean(list(self.per_target.values())))

    def rows(self):
        yield (self.surrogate, f"{self.surrogate}*", self.method, self.eps, self.white_box, self.n)
        for name, value in self.per_target.items():
            yield (self.surrogate, name, self.method, self.eps, value, self.n)
        yield (self.surrogate, "average", self.method, self.eps, self.average, self.n)


EVAL_HEADER = ["surrogate", "target", "method", "eps", "asr", "n"]


def write_eval_reports(path, reports, *, config=None, seed=None):
    rows = [row for report in reports for row in report.rows()]
    return write_csv(path, EVAL_HEADER, rows, config=config, seed=seed)


# ---------------------------------------------------------------------------
# empirical Lipschitz constant


@dataclass
class LipschitzEstimate:
    per_sample: np.ndarray
    eps: float
    steps: int

    @property
    def mean(self) -> float:
        return float(np.mean(self.per_sample))

    @property
    def std(self) -> float:
        return float(np.std(self.per_sample))


def _ratio(fx, fxp, x, xp):
    num = np.sqrt(((fxp - fx) ** 2).sum(axis=1))
    den = np.sqrt(((xp - x).reshape(len(x), -1) ** 2).sum(axis=1))
    return num, den


def empirical_lipschitz(model, x, eps: float, steps: int = 50, step_size: float | None = None,
                        seed: int = 0, batch_size: int = 500) -> LipschitzEstimate:
    """Mean over samples of max ||f(x) - f(x')||_2 / ||x - x'||_2 over the l-inf eps-ball.

    f is the logits vector.  The inner maximization is sign-gradient ascent
    from a uniform random start with step ``eps / 10`` by default, keeping a
    running maximum over every iterate.  Iterates at zero distance are skipped.
    """
    if eps <= 0:
        raise ValueError("eps must be > 0")
    x = np.asarray(x)
    alpha = eps / 10 if step_size is None else step_size
    rng = np.random.default_rng(seed)
    start = rng.uniform(-eps, eps, size=x.shape).astype(x.dtype)
    best = np.concatenate([
        _lipschitz_batch(model, x[i:i + batch_size], start[i:i + batch_size], eps, steps, alpha)
        for i in range(0, len(x), batch_size)
    ]) if len(x) else np.zeros(0)
    return LipschitzEstimate(best, eps, steps)


def _lipschitz_batch(model, x, start, eps, steps, alpha):
    fx = forward(model, x).data
    xp = x + start
    best = np.zeros(len(x))
    tiny = x.dtype.type(1e-12)  # keeps sqrt differentiable at zero distance
    for t in range(steps + 1):
        num, den = _ratio(fx, forward(model, xp).data, x, xp)
        ok = den > 0
        best[ok] = np.maximum(best[ok], num[ok] / den[ok])
        if t == steps:
            break
        with Tape():
            xpt = Tensor(xp, requires_grad=True)
            diff = ad.sub(model(xpt), Tensor(fx))
            n = ad.sqrt(ad.add(ad.sum(ad.square(diff), axis=1), tiny))
            delta = ad.reshape(ad.sub(xpt, Tensor(x)), (len(x), -1))
            d = ad.sqrt(ad.add(ad.sum(ad.square(delta), axis=1), tiny))
            (g,) = ad.grad(ad.sum(ad.div(n, d)), [xpt])
        step = x.dtype.type(alpha) * np.sign(g.data)
        xp = np.clip(xp + step, x - x.dtype.type(eps), x + x.dtype.type(eps))
    return best


# ---------------------------------------------------------------------------
# loss landscape


@dataclass
class LandscapeGrid:
    center: np.ndarray
    u: np.ndarray
    v: np.ndarray
    coords: np.ndarray
    values: np.ndarray  # values[i, j] = loss(center + coords[i] * u + coords[j] * v)
    degenerate: bool = False

    @property
    def extent(self) -> float:
        return float(self.coords[-1])

    @property
    def resolution(self) -> int:
        return len(self.coords)

    def total_variation(self) -> float:
        return total_variation(self.values)

    def write_csv(self, path, *, config=None, seed=None):
        rows = ((a, b, self.values[i, j]) for i, a in enumerate(self.coords) for j, b in enumerate(self.coords))
        return write_csv(path, ["a", "b", "loss"], rows, config=config, seed=seed)


def total_variation(values: np.ndarray) -> float:
    """Mean absolute difference between grid neighbours along both axes."""
    values = np.asarray(values, dtype=np.float64)
    return float(np.abs(np.diff(values, axis=0)).mean() + np.abs(np.diff(values, axis=1)).mean())


def _unit(vec):
    return vec / np.linalg.norm(vec)


def landscape_slice(model, x, y, extent: float = 1.0, resolution: int = 11, seed: int = 0,
                    loss_fn=cross_entropy) -> LandscapeGrid:
    """Loss on the plane spanned by the normalized input gradient u and a random v orthogonal to it.

    Falls back to two random orthonormal directions (flagged) when the input
    gradient vanishes.
    """
    if resolution < 3 or resolution % 2 == 0:
        raise ValueError("resolution must be odd and >= 3")
    x = np.asarray(x)
    y = int(y)
    with Tape():
        xt = Tensor(x[None], requires_grad=True)
        (g,) = ad.grad(ad.sum(loss_fn(model, xt, [y])), [xt])
    g = g.data.reshape(-1).astype(np.float64)
    rng = np.random.default_rng(seed)
    degenerate = not np.any(g)
    u = _unit(rng.standard_normal(g.size)) if degenerate else _unit(g)
    v = rng.standard_normal(g.size)
    v = _unit(v - (v @ u) * u)
    half = resolution // 2
    coords = extent * (np.arange(resolution) - half) / half
    shape = x.shape
    a, b = np.meshgrid(coords, coords, indexing="ij")
    points = x[None] + (a.reshape(-1, 1) * u + b.reshape(-1, 1) * v).reshape(-1, *shape).astype(x.dtype)
    with ad.no_record():
        losses = loss_fn(model, Tensor(points), np.full(len(points), y)).data
    return LandscapeGrid(x, u.reshape(shape), v.reshape(shape), coords,
                         losses.reshape(resolution, resolution).astype(np.float64), degenerate)


# ---------------------------------------------------------------------------
# loss curves


@dataclass
class LossCurves:
    surrogate: np.ndarray  # (steps + 1,) mean loss on the surrogate at each iterate
    target: np.ndarray

    def write_csv(self, path, *, config=None, seed=None):
        rows = zip(range(len(self.surrogate)), self.surrogate, self.target)
        return write_csv(path, ["iter", "loss_surrogate", "loss_target"], rows, config=config, seed=seed)

    def nondecreasing_fraction(self) -> float:
        return float(np.mean(np.diff(self.surrogate) >= 0))


def loss_curves(surrogate, target, x, y, cfg: AttackConfig) -> LossCurves:
    """Attack the surrogate; record mean surrogate and target loss at every iterate."""
    sur, tgt = [], []

    def record(t, xt):
        sur.append(float(np.mean(losses_at(surrogate, xt, y))))
        tgt.append(float(np.mean(losses_at(target, xt, y))))

    run_attack(surrogate, x, y, cfg, callback=record)
    return LossCurves(np.array(sur), np.array(tgt))
