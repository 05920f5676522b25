import numpy as np
import pytest

from brixel import autodiff as ad
from oracles import finite_difference_grad, max_rel_err

F64 = np.float64


def grad_of(build, x0, h=1e-5):
    """Analytic gradient of a scalar-valued builder, plus its FD oracle."""
    x0 = np.asarray(x0, dtype=F64)
    with ad.Tape() as tape:
        p = ad.parameter(x0.copy())
        out = build(p)
        tape.backward(out)
    analytic = p.grad if p.grad is not None else np.zeros_like(x0)
    numeric = finite_difference_grad(lambda v: float(build(ad.constant(v)).value), x0, h)
    return analytic, numeric


def check_grad(build, x0, tol=1e-4):
    analytic, numeric = grad_of(build, x0)
    assert max_rel_err(analytic, numeric) <= tol


# ---------------------------------------------------------------------------
# forward examples
# ---------------------------------------------------------------------------

def test_matmul_of_ones():
    a = ad.constant(np.ones((2, 3)))
    b = ad.constant(np.ones((3, 2)))
    assert np.array_equal(ad.matmul(a, b).value, np.full((2, 2), 3.0))


def test_conv2d_constant_center():
    x = ad.constant(np.ones((1, 1, 3, 3)))
    w = ad.constant(np.ones((1, 1, 3, 3)))
    y = ad.conv2d(x, w, padding=1)
    assert y.value.shape == (1, 1, 3, 3)
    assert y.value[0, 0, 1, 1] == 9.0
    assert y.value[0, 0, 0, 0] == 4.0  # zero padding trims the corner sum


def test_softmax_uniform():
    s = ad.softmax(ad.constant(np.zeros(3)))
    assert np.allclose(s.value, 1.0 / 3.0)


def test_backward_of_square_sum():
    with ad.Tape() as tape:
        x = ad.parameter(np.array([1.0, 2.0, 3.0]))
        tape.backward(ad.reduce_sum(ad.mul(x, x)))
    assert np.allclose(x.grad, [2.0, 4.0, 6.0])


def test_shape_mismatch_raises():
    with pytest.raises(ValueError):
        ad.matmul(ad.constant(np.ones((2, 3))), ad.constant(np.ones((2, 3))))
    with pytest.raises(FloatingPointError):
        ad.log(ad.constant(np.array([1.0, -1.0])))


def test_backward_requires_scalar_root_and_single_use():
    with ad.Tape() as tape:
        x = ad.parameter(np.ones(3))
        y = ad.mul(x, x)
        with pytest.raises(ValueError):
            tape.backward(y)
        root = ad.reduce_sum(y)
        tape.backward(root)
        with pytest.raises(RuntimeError):
            tape.backward(root)


# ---------------------------------------------------------------------------
# detach
# ---------------------------------------------------------------------------

def test_detach_preserves_value_and_blocks_grad():
    rng = np.random.default_rng(0)
    v = rng.standard_normal((4, 4))
    with ad.Tape() as tape:
        x = ad.parameter(v.copy())
        d = ad.detach(x)
        assert d.value.tobytes() == x.value.tobytes()
        assert d.detached
        tape.backward(ad.reduce_sum(ad.mul(d, d)))
    assert x.grad is None


def test_detach_acts_as_constant_factor():
    rng = np.random.default_rng(1)
    v = rng.standard_normal(5)

    with ad.Tape() as tape:
        x = ad.parameter(v.copy())
        tape.backward(ad.reduce_sum(ad.mul(ad.detach(x), x)))
    grad_detach = x.grad

    with ad.Tape() as tape:
        x = ad.parameter(v.copy())
        tape.backward(ad.reduce_sum(ad.mul(ad.constant(v.copy()), x)))
    grad_const = x.grad

    assert np.max(np.abs(grad_detach - grad_const)) <= 1e-10


# ---------------------------------------------------------------------------
# gradient oracle, op by op
# ---------------------------------------------------------------------------

RNG = np.random.default_rng(42)


def _scalarize(y):
    return ad.reduce_mean(ad.square(y))


@pytest.mark.parametrize("op", [ad.add, ad.sub, ad.mul, ad.div])
def test_grad_binary_elementwise(op):
    other = RNG.standard_normal((3, 4)) + 3.0  # keep away from zero for div
    check_grad(lambda x: _scalarize(op(x, ad.constant(other.copy()))),
               RNG.standard_normal((3, 4)))
    check_grad(lambda x: _scalarize(op(ad.constant(other.copy()), x)),
               RNG.standard_normal((3, 4)))


def test_grad_broadcasting():
    other = RNG.standard_normal((3, 1))
    check_grad(lambda x: _scalarize(ad.add(x, ad.constant(other.copy()))),
               RNG.standard_normal((3, 4)))
    wide = RNG.standard_normal((3, 4))
    check_grad(lambda x: _scalarize(ad.mul(ad.constant(wide.copy()), x)),
               RNG.standard_normal((1, 4)))


def test_grad_matmul_2d_and_batched():
    b = RNG.standard_normal((4, 2))
    check_grad(lambda x: _scalarize(ad.matmul(x, ad.constant(b.copy()))),
               RNG.standard_normal((3, 4)))
    batched = RNG.standard_normal((2, 4, 3))
    check_grad(lambda x: _scalarize(ad.matmul(ad.constant(batched.copy()), x)),
               RNG.standard_normal((2, 3, 2)))
    # broadcast batch dims: (H_out, H) @ (N, C, H, W)
    wy = RNG.standard_normal((5, 3))
    check_grad(lambda x: _scalarize(ad.matmul(ad.constant(wy.copy()), x)),
               RNG.standard_normal((2, 2, 3, 4)))


@pytest.mark.parametrize("fn", [ad.absolute, ad.exp, ad.tanh, ad.square, ad.gelu])
def test_grad_unary(fn):
    x0 = RNG.standard_normal((4, 5)) + 0.3  # offset keeps |x| kinks away from FD step
    check_grad(lambda x: _scalarize(fn(x)), x0)


def test_grad_log_sqrt_positive_domain():
    x0 = RNG.random((3, 3)) + 0.5
    check_grad(lambda x: _scalarize(ad.log(x)), x0)
    check_grad(lambda x: _scalarize(ad.sqrt(x)), x0)


def test_grad_reductions_and_shapes():
    x0 = RNG.standard_normal((3, 4, 5))
    check_grad(lambda x: ad.reduce_sum(ad.square(x)), x0)
    check_grad(lambda x: ad.reduce_mean(ad.square(x)), x0)
    check_grad(lambda x: _scalarize(ad.reduce_mean(x, axis=1, keepdims=True)), x0)
    check_grad(lambda x: _scalarize(ad.reduce_sum(x, axis=(0, 2))), x0)
    check_grad(lambda x: _scalarize(ad.reshape(x, (4, 15))), x0)
    check_grad(lambda x: _scalarize(ad.transpose(x, (2, 0, 1))), x0)
    check_grad(lambda x: _scalarize(ad.narrow(x, 1, 1, 2)), x0)


def test_grad_concat():
    other = RNG.standard_normal((2, 4))
    check_grad(lambda x: _scalarize(ad.concat([x, ad.constant(other.copy())], axis=0)),
               RNG.standard_normal((3, 4)))


@pytest.mark.parametrize("mode", ["zero", "replicate"])
def test_grad_pad2d(mode):
    check_grad(lambda x: _scalarize(ad.pad2d(x, 2, mode)),
               RNG.standard_normal((1, 2, 4, 5)))


@pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1), (3, 0)])
def test_grad_conv2d(stride, padding):
    w0 = RNG.standard_normal((3, 2, 3, 3))
    b0 = RNG.standard_normal(3)
    x0 = RNG.standard_normal((2, 2, 6, 6))
    check_grad(lambda x: _scalarize(
        ad.conv2d(x, ad.constant(w0.copy()), ad.constant(b0.copy()), stride, padding)), x0)
    check_grad(lambda w: _scalarize(
        ad.conv2d(ad.constant(x0.copy()), w, ad.constant(b0.copy()), stride, padding)), w0)
    check_grad(lambda b: _scalarize(
        ad.conv2d(ad.constant(x0.copy()), ad.constant(w0.copy()), b, stride, padding)), b0)


def test_grad_pool_upsample_shuffle():
    check_grad(lambda x: _scalarize(ad.avg_pool2d(x, 2)), RNG.standard_normal((1, 2, 4, 6)))
    check_grad(lambda x: _scalarize(ad.upsample_nearest(x, 3)), RNG.standard_normal((1, 2, 3, 2)))
    check_grad(lambda x: _scalarize(ad.pixel_shuffle(x, 2)), RNG.standard_normal((1, 8, 3, 3)))


def test_grad_softmax_layernorm_resize():
    x0 = RNG.standard_normal((4, 6))
    check_grad(lambda x: _scalarize(ad.softmax(x, axis=-1)), x0)
    gamma = RNG.standard_normal(6)
    beta = RNG.standard_normal(6)
    check_grad(lambda x: _scalarize(
        ad.layer_norm(x, ad.constant(gamma.copy()), ad.constant(beta.copy()))), x0)
    check_grad(lambda g: _scalarize(
        ad.layer_norm(ad.constant(x0.copy()), g, ad.constant(beta.copy()))), gamma)
    check_grad(lambda x: _scalarize(ad.resize_linear(x, 5, 7)),
               RNG.standard_normal((1, 2, 3, 4)))
    check_grad(lambda x: _scalarize(ad.resize_linear(x, 2, 2, antialias=True)),
               RNG.standard_normal((1, 2, 4, 4)))


def _op_factories():
    # each factory draws its constants once, so FD re-evaluations are stable
    def with_const(op, shape):
        def make(rng):
            c = ad.constant(rng.standard_normal(shape))
            return lambda x: op(x, c)
        return make

    return {
        "add": (with_const(ad.add, (3, 4)), (3, 4)),
        "mul": (with_const(ad.mul, (3, 4)), (3, 4)),
        "div": (lambda rng: (lambda x, c=ad.constant(rng.standard_normal((3, 4)) + 3.0):
                             ad.div(x, c)), (3, 4)),
        "matmul": (with_const(ad.matmul, (4, 3)), (3, 4)),
        "abs": (lambda rng: ad.absolute, (3, 4)),
        "exp": (lambda rng: ad.exp, (3, 4)),
        "tanh": (lambda rng: ad.tanh, (3, 4)),
        "gelu": (lambda rng: ad.gelu, (3, 4)),
        "softmax": (lambda rng: ad.softmax, (3, 4)),
        "layer_norm": (lambda rng: (lambda x, g=ad.constant(rng.standard_normal(4)),
                                    b=ad.constant(rng.standard_normal(4)):
                                    ad.layer_norm(x, g, b)), (3, 4)),
        "conv2d": (lambda rng: (lambda x, w=ad.constant(rng.standard_normal((2, 2, 3, 3))):
                                ad.conv2d(x, w, padding=1)), (1, 2, 4, 4)),
        "pad_replicate": (lambda rng: (lambda x: ad.pad2d(x, 1, "replicate")), (1, 1, 3, 4)),
        "avg_pool": (lambda rng: (lambda x: ad.avg_pool2d(x, 2)), (1, 2, 4, 4)),
        "upsample": (lambda rng: (lambda x: ad.upsample_nearest(x, 2)), (1, 2, 3, 3)),
        "pixel_shuffle": (lambda rng: (lambda x: ad.pixel_shuffle(x, 2)), (1, 4, 3, 3)),
        "resize": (lambda rng: (lambda x: ad.resize_linear(x, 5, 3)), (1, 2, 4, 4)),
        "sum_axis": (lambda rng: (lambda x: ad.reduce_sum(x, axis=1, keepdims=True)), (3, 4)),
        "mean_axis": (lambda rng: (lambda x: ad.reduce_mean(x, axis=0)), (3, 4)),
    }


@pytest.mark.parametrize("name", sorted(_op_factories()))
def test_grad_matches_fd_twenty_instances_per_op(name):
    factory, shape = _op_factories()[name]
    for seed in range(20):
        rng = np.random.default_rng(abs(hash(name)) % 10_000 + seed)
        build = factory(rng)
        x0 = rng.standard_normal(shape) + 0.25  # offset keeps |.| kinks off FD path
        check_grad(lambda x: _scalarize(build(x)), x0)


def test_grad_matches_fd_on_random_composites():
    # twenty random instances through a composite touching most of the op set
    for seed in range(20):
        rng = np.random.default_rng(seed)
        w = rng.standard_normal((4, 2, 3, 3))
        m = rng.standard_normal((9, 4))

        def build(x):
            y = ad.conv2d(x, ad.constant(w.copy()), stride=1, padding=1)
            y = ad.gelu(y)
            y = ad.avg_pool2d(y, 2)
            y = ad.reshape(y, (4, 9))
            y = ad.matmul(y, ad.constant(m.copy()))
            y = ad.softmax(y, axis=-1)
            return ad.reduce_mean(ad.absolute(ad.sub(y, 0.1)))

        check_grad(build, rng.standard_normal((1, 2, 6, 6)) * 0.7)


# ---------------------------------------------------------------------------
# engine invariants
# ---------------------------------------------------------------------------

def test_backward_linearity():
    rng = np.random.default_rng(5)
    x0 = rng.standard_normal((4, 4))
    alpha, beta = 0.3, -1.7

    def f(x):
        return ad.reduce_sum(ad.square(x))

    def g(x):
        return ad.reduce_mean(ad.exp(ad.mul(x, 0.1)))

    def run(build):
        with ad.Tape() as tape:
            x = ad.parameter(x0.copy())
            tape.backward(build(x))
        return x.grad

    combined = run(lambda x: ad.add(ad.mul(f(x), alpha), ad.mul(g(x), beta)))
    separate = alpha * run(f) + beta * run(g)
    assert np.max(np.abs(combined - separate)) <= 1e-10


def test_backward_determinism_bit_identical():
    rng = np.random.default_rng(9)
    x0 = rng.standard_normal((3, 2, 8, 8))
    w0 = rng.standard_normal((4, 2, 3, 3))

    def run():
        with ad.Tape() as tape:
            x = ad.parameter(x0.copy())
            w = ad.parameter(w0.copy())
            y = ad.gelu(ad.conv2d(x, w, padding=1))
            tape.backward(ad.reduce_mean(ad.square(y)))
        return x.grad.tobytes(), w.grad.tobytes()

    assert run() == run()


def test_constant_graph_records_nothing():
    with ad.Tape() as tape:
        a = ad.constant(np.ones((8, 8)))
        b = ad.matmul(a, a)
        ad.reduce_sum(b)
    assert tape.nodes == []


def test_dtype_mismatch_rejected():
    with pytest.raises(TypeError):
        ad.add(ad.constant(np.ones(3, dtype=np.float32)),
               ad.constant(np.ones(3, dtype=np.float64)))
