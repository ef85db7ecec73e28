import numpy as np
import pytest

from lrs import autodiff as ad
from lrs.autodiff import Tape, Tensor
from lrs.finetune import fdm_hessian_norm_sq

from oracles import assert_grad_close, central_fd, scalar, tiny_cnn, tiny_mlp


def t64(a, requires_grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=requires_grad)


# --- forward primitives -------------------------------------------------------

def test_relu_definition():
    assert ad.relu(Tensor([-1.0, 0.0, 2.0])).data.tolist() == [0, 0, 2]


def test_uniform_softmax_cross_entropy_is_ln2():
    loss = ad.softmax_cross_entropy(t64([0.0, 0.0]), 0)
    assert loss.shape == ()
    assert loss.item() == pytest.approx(np.log(2), abs=1e-12)


def test_identity_center_kernel_conv(rng):
    x = t64(rng.random((2, 3, 5, 4)))
    k = np.zeros((3, 3, 3, 3))
    for c in range(3):
        k[c, c, 1, 1] = 1.0
    out = ad.conv2d(x, t64(k), pad=1)
    np.testing.assert_array_equal(out.data, x.data)


def test_conv_matches_direct_loop(rng):
    x = rng.standard_normal((2, 2, 5, 5))
    k = rng.standard_normal((3, 2, 3, 3))
    out = ad.conv2d(t64(x), t64(k), pad=1).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros((2, 3, 5, 5))
    for n in range(2):
        for f in range(3):
            for i in range(5):
                for j in range(5):
                    ref[n, f, i, j] = np.sum(xp[n, :, i:i + 3, j:j + 3] * k[f])
    np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)


def test_maxpool_picks_window_max(rng):
    x = rng.standard_normal((1, 2, 4, 6))
    out = ad.maxpool2(t64(x)).data
    ref = x.reshape(1, 2, 2, 2, 3, 2).max(axis=(3, 5))
    np.testing.assert_array_equal(out, ref)


@pytest.mark.parametrize("op,a,b", [
    (ad.add, (2, 3), (4, 3)),
    (ad.mul, (2, 3), (3, 2)),
    (ad.matmul, (2, 3), (2, 3)),
])
def test_shape_mismatch_names_op_and_shapes(op, a, b):
    with pytest.raises(ad.ShapeError) as err:
        op(Tensor(np.zeros(a)), Tensor(np.zeros(b)))
    msg = str(err.value)
    assert op.__name__ in msg and str(a) in msg and str(b) in msg


def test_conv_rejects_channel_mismatch():
    with pytest.raises(ad.ShapeError, match="conv2d"):
        ad.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((3, 1, 3, 3))))


# --- grad ---------------------------------------------------------------------

def test_grad_of_square():
    with Tape():
        x = t64(3.0, requires_grad=True)
        (g,) = ad.grad(ad.mul(x, x), [x])
    assert g.item() == 6.0


def test_grad_of_grad_cubic():
    with Tape():
        x = t64(2.0, requires_grad=True)
        y = ad.mul(ad.mul(x, x), x)
        (g,) = ad.grad(y, [x], create_graph=True)
        (gg,) = ad.grad(g, [x])
    assert g.item() == 12.0
    assert gg.item() == 12.0


def test_grad_requires_scalar_output():
    with Tape():
        x = t64([1.0, 2.0], requires_grad=True)
        with pytest.raises(ad.ShapeError, match="scalar"):
            ad.grad(ad.mul(x, x), [x])


def test_grad_input_not_on_tape():
    with Tape():
        x = t64([1.0, 2.0], requires_grad=True)
        other = t64([1.0], requires_grad=True)
        y = ad.sum(ad.mul(x, x))
        with pytest.raises(ad.AutodiffError, match="not on the tape"):
            ad.grad(y, [x, other])
    with Tape():
        y = ad.sum(ad.mul(x, x))
        gx, go = ad.grad(y, [x, other], allow_unused=True)
        assert go.data.tolist() == [0.0]


def test_grad_after_free_is_an_error():
    with Tape() as tape:
        x = t64([1.0, 2.0], requires_grad=True)
        y = ad.sum(ad.mul(x, x))
        ad.grad(y, [x])
        assert tape.freed
        with pytest.raises(ad.AutodiffError, match="freed"):
            ad.grad(y, [x], create_graph=True)


def test_retained_tape_allows_second_call():
    with Tape() as tape:
        x = t64([1.0, 2.0], requires_grad=True)
        y = ad.sum(ad.mul(x, x))
        (g1,) = ad.grad(y, [x], retain_graph=True)
        (g2,) = ad.grad(y, [x])
    np.testing.assert_array_equal(g1.data, g2.data)
    assert tape.freed


def test_tape_is_topologically_ordered(rng):
    model = tiny_cnn(3)
    with Tape() as tape:
        x = t64(rng.random((2, 1, 4, 4)), requires_grad=True)
        loss = ad.mean(ad.softmax_cross_entropy(model(x), [0, 2]))
        ad.grad(loss, [x], create_graph=True)
        for i, entry in enumerate(tape.entries):
            assert entry.output.tape_id == i
            for inp in entry.inputs:
                assert inp.tape_id is None or inp.tape_id < i


def test_non_finite_gradient_is_an_error():
    with Tape():
        x = t64([0.0, 1.0], requires_grad=True)
        y = ad.sum(ad.sqrt(x))
        with pytest.raises(ad.NonFiniteError):
            ad.grad(y, [x])


# --- finite-difference oracles (64-bit) ---------------------------------------

@pytest.mark.parametrize("seed", range(5))
def test_mlp_weight_grads_match_central_differences(seed):
    model = tiny_mlp(seed)
    rng = np.random.default_rng(seed + 100)
    x = rng.random((4, 1, 1, 6))
    y = rng.integers(0, 3, 4)

    def loss():
        return ad.mean(ad.softmax_cross_entropy(model(Tensor(x)), y))

    with Tape():
        grads = ad.grad(loss(), model.params)
    for p, g in zip(model.params, grads):
        assert_grad_close(g.data, central_fd(lambda: scalar(loss), p.data), rtol=1e-4)


@pytest.mark.parametrize("seed", range(3))
def test_cnn_input_and_weight_grads_match_central_differences(seed):
    model = tiny_cnn(seed)
    rng = np.random.default_rng(seed + 200)
    x = rng.random((2, 1, 4, 4))
    y = np.array([0, 2])
    xt = Tensor(x, requires_grad=True)

    def loss():
        return ad.mean(ad.softmax_cross_entropy(model(xt), y))

    with Tape():
        grads = ad.grad(loss(), [xt, *model.params])
    assert_grad_close(grads[0].data, central_fd(lambda: scalar(loss), xt.data), rtol=1e-4)
    for p, g in zip(model.params, grads[1:]):
        assert_grad_close(g.data, central_fd(lambda: scalar(loss), p.data), rtol=1e-4)


def test_elementwise_ops_match_central_differences(rng):
    a = Tensor(rng.random((3, 4)) + 0.5, requires_grad=True)
    b = Tensor(rng.random((1, 4)) + 0.5, requires_grad=True)

    def f():
        q = ad.div(ad.sqrt(ad.mul(a, a)), ad.add(b, 1.0))
        return ad.sum(ad.square(ad.softmax(ad.sub(q, ad.neg(b)))))

    with Tape():
        ga, gb = ad.grad(f(), [a, b])
    assert_grad_close(ga.data, central_fd(lambda: scalar(f), a.data), rtol=1e-4)
    assert_grad_close(gb.data, central_fd(lambda: scalar(f), b.data), rtol=1e-4)


@pytest.mark.parametrize("seed", range(3))
def test_second_order_regularizer_weight_grad_matches_fd(seed):
    model = tiny_mlp(seed, d_in=5, hidden=4)
    rng = np.random.default_rng(seed + 300)
    x = rng.random((3, 1, 1, 5))
    y = rng.integers(0, 3, 3)
    with Tape():
        probe = Tensor(x, requires_grad=True)
        (g0,) = ad.grad(ad.sum(ad.softmax_cross_entropy(model(probe), y)), [probe])
    d = np.sign(g0.data)  # direction frozen so FD differentiates the same function

    def reg():
        with Tape():
            return ad.mean(fdm_hessian_norm_sq(model, x, y, 0.5, direction=d))

    with Tape():
        value = reg()
        grads = ad.grad(value, model.params)

    def reg_value():
        return float(reg().item())

    for p, g in zip(model.params, grads):
        assert_grad_close(g.data, central_fd(reg_value, p.data), rtol=1e-3)


def test_linearity(rng):
    model = tiny_mlp(7)
    x = rng.random((4, 1, 1, 6))
    y = np.array([0, 1, 2, 1])
    a, b = 0.7, -1.3

    def f():
        return ad.mean(ad.softmax_cross_entropy(model(Tensor(x)), y))

    def g():
        return ad.sum(ad.square(model(Tensor(x))))

    with Tape():
        combo = ad.grad(ad.add(ad.scale(f(), a), ad.scale(g(), b)), model.params)
    with Tape():
        gf = ad.grad(f(), model.params)
    with Tape():
        gg = ad.grad(g(), model.params)
    for c, u, v in zip(combo, gf, gg):
        np.testing.assert_allclose(c.data, a * u.data + b * v.data, rtol=1e-9, atol=1e-12)


def test_determinism():
    def run():
        model = tiny_cnn(11)
        x = np.random.default_rng(5).random((3, 1, 4, 4))
        with Tape():
            xt = Tensor(x, requires_grad=True)
            loss = ad.mean(ad.softmax_cross_entropy(model(xt), [0, 1, 2]))
            (gx,) = ad.grad(loss, [xt], create_graph=True)
            grads = ad.grad(ad.sum(ad.square(gx)), model.params)
        return [gx.data.tobytes()] + [q.data.tobytes() for q in grads]

    assert run() == run()
