import numpy as np
import pytest

from flame import autodiff as ad
from _oracles import analytic_grads, gradcheck

SEEDS = range(10)


UNARY = {
    "exp": ad.exp,
    "tanh": ad.tanh,
    "sigmoid": ad.sigmoid,
    "silu": ad.silu,
    "softplus": ad.softplus,
    "gelu": ad.gelu,
    "gaussian_logpdf": ad.gaussian_logpdf,
    "softmax": ad.softmax,
    "sum_axis0": lambda a: ad.sum(a, axis=0),
    "mean_axis1": lambda a: ad.mean(a, axis=1),
    "mean": ad.mean,
    "reshape": lambda a: ad.reshape(a, (a.shape[0] * a.shape[1],)),
    "transpose": lambda a: ad.transpose(a, (1, 0)),
    "slice": lambda a: a[1:, ::2],
    "fancy_slice": lambda a: ad.getitem(a, ([0, 0, 2], [1, 1, 0])),
    "neg_div": lambda a: -a / 3.0,
}


@pytest.mark.parametrize("name", sorted(UNARY))
@pytest.mark.parametrize("seed", SEEDS)
def test_unary_primitives(name, seed):
    rng = np.random.default_rng(seed)
    x = ad.parameter(rng.standard_normal((3, 4)))
    R = rng.standard_normal(UNARY[name](x).shape)
    assert gradcheck(lambda: ad.sum(ad.mul(UNARY[name](x), R)), [x]) < 1e-4


@pytest.mark.parametrize("seed", SEEDS)
def test_log_primitive(seed):
    rng = np.random.default_rng(seed)
    x = ad.parameter(rng.uniform(0.5, 2.0, (3, 4)))
    R = rng.standard_normal((3, 4))
    assert gradcheck(lambda: ad.sum(ad.mul(ad.log(x), R)), [x]) < 1e-4


BINARY = {
    "add": ad.add,
    "sub": ad.sub,
    "mul": ad.mul,
    "matmul": ad.matmul,
    "concat0": lambda a, b: ad.concat([a, b], axis=0),
}


@pytest.mark.parametrize("name", sorted(BINARY))
@pytest.mark.parametrize("seed", SEEDS)
def test_binary_primitives(name, seed):
    rng = np.random.default_rng(seed)
    a = ad.parameter(rng.standard_normal((4, 4)))
    b = ad.parameter(rng.standard_normal((4, 4)))
    R = rng.standard_normal(BINARY[name](a, b).shape)
    assert gradcheck(lambda: ad.sum(ad.mul(BINARY[name](a, b), R)), [a, b]) < 1e-4


@pytest.mark.parametrize("seed", SEEDS)
def test_bias_broadcast(seed):
    rng = np.random.default_rng(seed)
    x = ad.parameter(rng.standard_normal((2, 3, 5)))
    b = ad.parameter(rng.standard_normal(5))
    R = rng.standard_normal((2, 3, 5))
    assert gradcheck(lambda: ad.sum(ad.mul(ad.mul(x + b, b), R)), [x, b]) < 1e-4


@pytest.mark.parametrize("seed", SEEDS)
def test_batched_matmul(seed):
    rng = np.random.default_rng(seed)
    a = ad.parameter(rng.standard_normal((2, 3, 4)))
    b = ad.parameter(rng.standard_normal((2, 4, 5)))
    w = ad.parameter(rng.standard_normal((5, 2)))
    R = rng.standard_normal((2, 3, 2))
    assert gradcheck(lambda: ad.sum(ad.mul(ad.matmul(ad.matmul(a, b), w), R)), [a, b, w]) < 1e-4


@pytest.mark.parametrize("seed", SEEDS)
def test_layer_norm(seed):
    rng = np.random.default_rng(seed)
    x = ad.parameter(rng.standard_normal((3, 6)))
    g = ad.parameter(rng.standard_normal(6))
    b = ad.parameter(rng.standard_normal(6))
    R = rng.standard_normal((3, 6))
    assert gradcheck(lambda: ad.sum(ad.mul(ad.layer_norm(x, g, b), R)), [x, g, b]) < 1e-4


@pytest.mark.parametrize("seed", SEEDS)
def test_masked_linear(seed):
    rng = np.random.default_rng(seed)
    x = ad.parameter(rng.standard_normal((3, 5)))
    W = ad.parameter(rng.standard_normal((5, 4)))
    b = ad.parameter(rng.standard_normal(4))
    M = (rng.random((5, 4)) < 0.5).astype(float)
    R = rng.standard_normal((3, 4))
    assert gradcheck(lambda: ad.sum(ad.mul(ad.masked_linear(x, W, M, b), R)), [x, W, b]) < 1e-4


def test_masked_linear_exact_zero_jacobian():
    rng = np.random.default_rng(0)
    W = rng.standard_normal((6, 5))
    M = (rng.random((6, 5)) < 0.5).astype(float)
    x0 = rng.standard_normal(6)
    h = 1e-3
    for n in range(6):
        e = np.zeros(6)
        e[n] = h
        d = (ad.masked_linear(x0 + e, W, M).data - ad.masked_linear(x0 - e, W, M).data) / (2 * h)
        for k in range(5):
            if M[n, k] == 0:
                assert d[k] == 0.0
            else:
                assert d[k] == pytest.approx(W[n, k], rel=1e-8)


def test_masked_mlp_20_params():
    # 3-layer masked MLP 2 -> 3 -> 2 -> 1 without biases on the last layer: 6 + 3 + 6 + 2 + 2 + 1 = 20
    rng = np.random.default_rng(7)
    W1, b1 = ad.parameter(rng.standard_normal((2, 3))), ad.parameter(rng.standard_normal(3))
    W2, b2 = ad.parameter(rng.standard_normal((3, 2))), ad.parameter(rng.standard_normal(2))
    W3, b3 = ad.parameter(rng.standard_normal((2, 1))), ad.parameter(rng.standard_normal(1))
    params = [W1, b1, W2, b2, W3, b3]
    assert sum(p.data.size for p in params) == 20
    M1 = np.array([[1, 0, 1], [1, 1, 0]], float)
    M2 = np.array([[1, 0], [0, 1], [1, 1]], float)
    M3 = np.ones((2, 1))
    x = rng.standard_normal((5, 2))

    def loss():
        h = ad.tanh(ad.masked_linear(x, W1, M1, b1))
        h = ad.tanh(ad.masked_linear(h, W2, M2, b2))
        return ad.mean(ad.masked_linear(h, W3, M3, b3) * ad.masked_linear(h, W3, M3, b3))

    assert gradcheck(loss, params) < 1e-4


# -- small closed-form cases ------------------------------------------------------


def test_matmul_identity():
    X = np.random.default_rng(1).standard_normal((3, 4))
    np.testing.assert_array_equal(ad.matmul(np.eye(3), X).data, X)


def test_softmax_uniform_row():
    np.testing.assert_allclose(ad.softmax(ad.Tensor(np.full((2, 5), 3.3))).data, 0.2, rtol=1e-15)


def test_softmax_rows_sum_to_one_large_inputs():
    x = np.random.default_rng(2).uniform(-1e3, 1e3, (4, 7))
    y = ad.softmax(ad.Tensor(x)).data
    assert np.all(np.isfinite(y))
    np.testing.assert_allclose(y.sum(-1), 1.0, atol=1e-12)


def test_tanh_sum_grad_at_zero():
    x = ad.parameter(np.zeros(5))
    (g,) = analytic_grads(lambda: ad.sum(ad.tanh(x)), [x])
    np.testing.assert_array_equal(g, 1.0)


def test_square_grad():
    x = ad.parameter(3.0)
    (g,) = analytic_grads(lambda: x * x, [x])
    assert g == 6.0


def test_unreachable_parameter_zero():
    x, y = ad.parameter([1.0, 2.0]), ad.parameter([5.0])
    with ad.Tape() as tape:
        ad.mul(y, 0.0)  # y is on the tape but does not reach the loss
        loss = ad.sum(x * x)
    grads = dict(zip(map(id, tape.parameters), ad.backward(tape, loss)))
    assert grads[id(x)].tolist() == [2.0, 4.0]
    assert grads[id(y)].tolist() == [0.0]


def test_constant_loss_grad_zero():
    x = ad.parameter(np.ones(3))
    (g,) = analytic_grads(lambda: ad.sum(ad.mul(x, 0.0)) + 4.0, [x])
    np.testing.assert_array_equal(g, 0.0)


def test_non_scalar_loss_rejected():
    x = ad.parameter(np.ones(3))
    with ad.Tape() as tape:
        y = x * 2.0
    with pytest.raises(ValueError):
        ad.backward(tape, y)


def test_gradients_accumulate():
    x = ad.parameter(2.0)
    for _ in range(2):
        with ad.Tape() as tape:
            loss = x * x
        ad.backward(tape, loss)
    assert x.grad == 8.0


def test_backward_deterministic():
    rng = np.random.default_rng(3)
    W = ad.parameter(rng.standard_normal((8, 8)))
    x = rng.standard_normal((16, 8))

    def run():
        W.grad = None
        with ad.Tape() as tape:
            h = ad.gelu(ad.matmul(x, W))
            loss = ad.mean(ad.softmax(ad.matmul(h, W)) * h)
        ad.backward(tape, loss)
        return W.grad.copy()

    assert np.array_equal(run(), run())


@pytest.mark.parametrize(
    "op,a,b",
    [
        (ad.add, (2, 3), (2,)),
        (ad.mul, (3, 4), (3,)),
        (ad.matmul, (2, 3), (4, 2)),
        (ad.matmul, (2, 2, 3), (3, 3, 1)),
    ],
)
def test_shape_mismatch_names_both_shapes(op, a, b):
    with pytest.raises(ValueError) as err:
        op(ad.Tensor(np.zeros(a)), ad.Tensor(np.zeros(b)))
    assert str(a) in str(err.value) and str(b) in str(err.value)


def test_masked_linear_shape_errors():
    with pytest.raises(ValueError):
        ad.masked_linear(np.zeros((2, 3)), np.zeros((3, 4)), np.ones((4, 3)))
    with pytest.raises(ValueError):
        ad.masked_linear(np.zeros((2, 3)), np.zeros((3, 4)), np.ones((3, 4)), np.zeros(3))


def test_concat_shape_error():
    with pytest.raises(ValueError):
        ad.concat([ad.Tensor(np.zeros((2, 3))), ad.Tensor(np.zeros((2, 4)))], axis=0)


def test_division_by_tensor_rejected():
    with pytest.raises(TypeError):
        ad.Tensor(1.0) / ad.Tensor(2.0)


def test_no_tape_no_recording():
    x = ad.parameter(np.ones(2))
    y = ad.exp(x)
    assert y.is_leaf and not y.requires_grad
