"""Independent numerical oracles shared by the test modules."""
import numpy as np

from lrs import autodiff as ad
from lrs.models import FLAT, POOL, RELU, Conv3x3, Linear, Model, ModelSpec


def central_fd(fn, arr: np.ndarray, step: float = 1e-4) -> np.ndarray:
    """Central differences of scalar ``fn()`` w.r.t. every entry of ``arr`` (perturbed in place)."""
    out = np.zeros_like(arr)
    flat, gflat = arr.reshape(-1), out.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + step
        hi = fn()
        flat[i] = old - step
        lo = fn()
        flat[i] = old
        gflat[i] = (hi - lo) / (2 * step)
    return out


def assert_grad_close(analytic, numeric, rtol, atol=1e-6):
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    err = np.abs(analytic - numeric)
    bound = rtol * np.maximum(np.abs(numeric), np.abs(analytic)) + atol
    assert np.all(err <= bound), f"max abs err {err.max():.3g}, worst ratio {(err / bound).max():.3g}"


def scalar(fn) -> float:
    with ad.no_record():
        return float(fn().item())


def tiny_mlp(seed, d_in=6, hidden=5, classes=3, depth=2) -> Model:
    """A small float64 MLP (registered-arch spec, custom widths)."""
    rng = np.random.default_rng(seed)
    dims = [d_in] + [hidden] * (depth - 1)
    layers = [FLAT]
    for i in range(depth - 1):
        layers += [Linear(f"fc{i + 1}", dims[i], dims[i + 1], rng), RELU]
    layers.append(Linear(f"fc{depth}", dims[-1], classes, rng))
    for layer in layers:
        for p in layer.params():
            p.data = p.data.astype(np.float64) + 0.1 * rng.standard_normal(p.shape)
    return Model(ModelSpec("mlp-2x256", (1, 1, d_in), classes, seed), layers, provenance="pretrained")


def tiny_cnn(seed, side=4, channels=2, classes=3) -> Model:
    rng = np.random.default_rng(seed)
    layers = [Conv3x3("conv1", 1, channels, rng), RELU, POOL, FLAT,
              Linear("fc1", channels * (side // 2) ** 2, classes, rng)]
    for layer in layers:
        for p in layer.params():
            p.data = p.data.astype(np.float64) + 0.1 * rng.standard_normal(p.shape)
    return Model(ModelSpec("cnn-small", (1, side, side), classes, seed), layers, provenance="pretrained")
