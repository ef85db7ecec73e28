import numpy as np
import pytest

from lrs import autodiff as ad
from lrs.autodiff import Tape, Tensor
from lrs.data import BatchIterator, load_idx, synth_blobs
from lrs.finetune import (DivergenceError, LRSConfig, fdm_grad_norm_sq, fdm_hessian_norm_sq, finetune, input_grad,
                          regularized_loss)
from lrs.models import ModelSpec, build, parameters_equal
from lrs.reports import read_csv
from lrs.training import SGD, batch_loss, train

from oracles import assert_grad_close, central_fd, tiny_mlp

DIM = 6


def flat(x):
    return ad.reshape(x, (x.shape[0], -1))


def linear_loss(a):
    def loss(model, x, y):
        return ad.sum(ad.mul(flat(x), Tensor(a)), axis=1)
    return loss


def quadratic_loss(c):
    def loss(model, x, y):
        return ad.scale(ad.sum(ad.square(flat(x)), axis=1), c / 2)
    return loss


def constant_loss(model, x, y):
    return ad.scale(ad.sum(flat(x), axis=1), 0.0)


def inputs(rng, n=4):
    return rng.standard_normal((n, 1, 1, DIM)), np.zeros(n, dtype=int)


# --- input_grad ----------------------------------------------------------------

def test_input_grad_of_sum_is_ones(rng):
    x, y = inputs(rng)
    g = input_grad(tiny_mlp(0), x, y, loss_fn=linear_loss(np.ones(DIM)))
    np.testing.assert_array_equal(g.data, np.ones_like(x))


def test_input_grad_matches_central_differences(rng):
    model = tiny_mlp(1)
    x = rng.random((3, 1, 1, DIM))
    y = np.array([0, 1, 2])
    g = input_grad(model, x, y)

    def total():
        with ad.no_record():
            return float(ad.sum(ad.softmax_cross_entropy(model(Tensor(x)), y)).item())

    assert_grad_close(g.data, central_fd(total, x), rtol=1e-4)


def test_zero_weight_model_has_zero_input_grad(rng):
    model = tiny_mlp(2)
    for p in model.params:
        p.data[...] = 0
    x, y = inputs(rng)
    assert not input_grad(model, x, y).data.any()


# --- finite-difference regularizers ----------------------------------------------

def test_first_order_constant_loss_is_zero(rng):
    x, y = inputs(rng)
    with Tape():
        r = fdm_grad_norm_sq(tiny_mlp(0), x, y, 0.01, loss_fn=constant_loss)
    assert not r.data.any()


@pytest.mark.parametrize("h1", [1e-3, 0.01, 0.5, 3.0])
def test_first_order_exact_on_affine_loss(rng, h1):
    a = rng.standard_normal(DIM)
    x, y = inputs(rng)
    with Tape():
        r = fdm_grad_norm_sq(tiny_mlp(0), x, y, h1, loss_fn=linear_loss(a))
    np.testing.assert_allclose(r.data, np.full(len(y), np.abs(a).sum() ** 2), rtol=1e-6)


def test_first_order_on_quadratic_converges_linearly_in_h(rng):
    # l = |x|^2 / 2: grad = x, d = sign(x), so (grad . d)^2 = |x|_1^2 and the
    # forward difference adds h * dim / 2 inside the square.
    x, y = inputs(rng)
    exact = np.abs(x.reshape(len(y), -1)).sum(axis=1) ** 2
    errs = []
    for h in (1e-2, 1e-3, 1e-4):
        with Tape():
            r = fdm_grad_norm_sq(tiny_mlp(0), x, y, h, loss_fn=quadratic_loss(1.0))
        errs.append(np.abs(r.data - exact).max())
    slopes = np.array(errs) / np.array([1e-2, 1e-3, 1e-4])
    assert slopes.max() <= 1.05 * slopes.min()  # error / h is constant: O(h)
    assert errs[-1] < 1e-2


@pytest.mark.parametrize("h2", [0.1, 1.5, 4.0])
def test_second_order_zero_on_linear_loss(rng, h2):
    x, y = inputs(rng)
    with Tape():
        r = fdm_hessian_norm_sq(tiny_mlp(0), x, y, h2, loss_fn=linear_loss(rng.standard_normal(DIM)))
    np.testing.assert_allclose(r.data, 0.0, atol=1e-20)


@pytest.mark.parametrize("c,h2", [(1.0, 1.5), (0.3, 0.01), (2.5, 7.0)])
def test_second_order_exact_on_quadratic_loss(rng, c, h2):
    x, y = inputs(rng)
    with Tape():
        r = fdm_hessian_norm_sq(tiny_mlp(0), x, y, h2, loss_fn=quadratic_loss(c))
    np.testing.assert_allclose(r.data, np.full(len(y), c * c * DIM), rtol=1e-6)


def test_regularizers_reject_nonpositive_h(rng):
    x, y = inputs(rng)
    with pytest.raises(ValueError):
        fdm_grad_norm_sq(tiny_mlp(0), x, y, 0.0)
    with pytest.raises(ValueError):
        fdm_hessian_norm_sq(tiny_mlp(0), x, y, -1.0)


def test_probe_points_are_not_clipped():
    """A sample at the pixel box corner still gets a nonzero first-order term."""
    a = np.ones(DIM)
    x = np.ones((1, 1, 1, DIM))
    with Tape():
        r = fdm_grad_norm_sq(tiny_mlp(0), x, [0], 0.5, loss_fn=linear_loss(a))
    assert r.item() == pytest.approx(DIM ** 2)


# --- regularized loss ------------------------------------------------------------

def test_zero_lambda_total_equals_plain(rng):
    model = tiny_mlp(3)
    x = rng.random((5, 1, 1, DIM))
    y = rng.integers(0, 3, 5)
    with Tape():
        total, plain, penalty = regularized_loss(model, x, y, LRSConfig(lambda1=0, lambda2=0))
    assert total.item() == plain.item() and penalty.item() == 0.0


@pytest.mark.parametrize("variant", ["LRS1", "LRS2", "LRSF"])
def test_penalty_composition(rng, variant):
    model = tiny_mlp(4)
    x = rng.random((5, 1, 1, DIM))
    y = rng.integers(0, 3, 5)
    cfg = LRSConfig(variant=variant, lambda1=2.0, lambda2=3.0, h1=0.05, h2=0.5)
    with Tape():
        total, plain, penalty = regularized_loss(model, x, y, cfg)
        r1 = fdm_grad_norm_sq(model, x, y, 0.05).data.mean()
        r2 = fdm_hessian_norm_sq(model, x, y, 0.5).data.mean()
    expected = {"LRS1": 2 * r1, "LRS2": 3 * r2, "LRSF": 2 * r1 + 3 * r2}[variant]
    assert penalty.item() >= 0
    assert penalty.item() == pytest.approx(expected, rel=1e-10)
    assert total.item() == pytest.approx(plain.item() + expected, rel=1e-12)


def test_config_validation():
    with pytest.raises(ValueError):
        LRSConfig(variant="LRS3")
    with pytest.raises(ValueError):
        LRSConfig(lambda1=-1)
    with pytest.raises(ValueError):
        LRSConfig(variant="LRS1", h1=0)
    LRSConfig(variant="LRS1", h2=0)  # h2 is unused by LRS-1
    assert LRSConfig(variant="lrs-f").variant == "LRSF"
    defaults = LRSConfig()
    assert (defaults.lambda1, defaults.h1, defaults.lambda2, defaults.h2) == (5.0, 0.01, 5.0, 1.5)
    assert (defaults.epochs, defaults.momentum, defaults.weight_decay, defaults.lr) == (10, 0.9, 5e-4, 1e-3)


# --- finetune ------------------------------------------------------------------

@pytest.fixture(scope="module")
def blobs_model():
    data = synth_blobs(classes=4, n_per_class=40, dim=16, seed=0)
    model = build(ModelSpec("mlp-2x256", data.input_shape, 4, seed=0))
    train(model, data, epochs=3, seed=0)
    return model, data


def test_zero_epochs_is_a_no_op(blobs_model, tmp_path):
    model, data = blobs_model
    out, report = finetune(model, data, LRSConfig(epochs=0), checkpoint_path=tmp_path / "c.ckpt")
    assert parameters_equal(out, model) and out.provenance == "pretrained"
    assert report.plain_loss == [] and (tmp_path / "c.ckpt").is_file()


def test_zero_lambda_is_plain_sgd_bitwise(blobs_model):
    model, data = blobs_model
    cfg = LRSConfig(lambda1=0, lambda2=0, epochs=2, lr=0.01, seed=5)
    out, _ = finetune(model, data, cfg)

    ref = model.copy()
    opt = SGD(ref.params, cfg.lr, cfg.momentum, cfg.weight_decay)
    batches = BatchIterator(data, cfg.batch_size, cfg.seed)
    for _ in range(cfg.epochs):
        for xb, yb in batches.epoch():
            with Tape():
                opt.step(ad.grad(batch_loss(ref, xb, yb), ref.params))
    assert parameters_equal(out, ref)


def test_finetune_records_provenance_and_report(blobs_model, tmp_path):
    model, data = blobs_model
    cfg = LRSConfig(epochs=2, lr=1e-4)
    out, report = finetune(model, data, cfg, test=data)
    assert out.provenance == "lrsf" and out.meta["finetune"]["lambda1"] == 5.0
    assert len(report.plain_loss) == len(report.regularizer) == len(report.test_accuracy) == 2
    assert min(report.regularizer) >= 0
    rows = read_csv(report.write_csv(tmp_path / "f.csv"))
    assert list(rows[0]) == ["epoch", "mean_plain_loss", "mean_regularizer", "test_accuracy"]
    assert model.provenance == "pretrained"  # the input is untouched


def test_finetune_requires_pretrained(blobs_model):
    model, data = blobs_model
    fresh = build(model.spec)
    with pytest.raises(ValueError, match="pretrained"):
        finetune(fresh, data, LRSConfig(epochs=1))


def test_divergence_names_lambda_and_h(blobs_model):
    model, data = blobs_model
    with pytest.raises(DivergenceError, match=r"lambda1=50.0 h1=0.01"):
        finetune(model, data, LRSConfig(variant="LRS1", lambda1=50.0, epochs=5, lr=5.0))


def test_lrs1_smooths_held_out_first_order_term(mnist_dir):
    """Mean first-order term on held-out data drops after LRS-1 fine-tuning (paired, 5 seeds)."""
    tr = load_idx(mnist_dir / "train-images-idx3-ubyte", mnist_dir / "train-labels-idx1-ubyte").subset(slice(0, 2000))
    te = load_idx(mnist_dir / "test-images-idx3-ubyte", mnist_dir / "test-labels-idx1-ubyte", "test")
    x, y = te.images[:300], te.labels[:300]

    def term(m):
        with Tape():
            return float(fdm_grad_norm_sq(m, x, y, 0.01).data.mean())

    for seed in range(5):
        model = build(ModelSpec("mlp-2x256", tr.input_shape, 10, seed=seed))
        train(model, tr, epochs=5, seed=seed)
        out, _ = finetune(model, tr, LRSConfig(variant="LRS1", epochs=2, lr=1e-6, seed=seed))
        assert term(out) < term(model)
