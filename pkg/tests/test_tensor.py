import io

import numpy as np
import pytest

from dgssm import tensor as T
from dgssm.tensor import NonFiniteError, ShapeError, Tape, TapeError, Tensor

from oracles import central_diff, conv2d_loops, rel_err, sample_indices

RNG = np.random.default_rng(1234)


def leaf(shape, lo=-1.0, hi=1.0, rng=RNG):
    return Tensor(rng.uniform(lo, hi, size=shape), requires_grad=True)


def check_grads(fn, inputs, tol=1e-5, n=20, seed=0):
    """Compare tape gradients of sum(w * fn(*inputs)) with central differences."""
    rng = np.random.default_rng(seed)
    with T.no_tape():
        probe = fn(*inputs)
    weights = rng.standard_normal(probe.shape)

    def scalar():
        with T.no_tape():
            return float(np.sum(weights * fn(*inputs).data))

    with Tape() as tape:
        loss = T.sum_(fn(*inputs) * Tensor(weights))
        tape.backward(loss)
    worst = 0.0
    for x in inputs:
        if not x.requires_grad:
            continue
        assert x.grad is not None and x.grad.shape == x.shape
        for idx in sample_indices(x.shape, n, rng):
            fd = central_diff(scalar, x.data, idx)
            worst = max(worst, rel_err(x.grad[idx], fd))
        x.grad = None
    assert worst < tol, worst


# -- forward semantics -------------------------------------------------------

def test_add_values():
    assert np.array_equal((T.tensor([1, 2]) + T.tensor([3, 4])).data, [4.0, 6.0])


def test_mul_by_one_is_identity():
    x = T.tensor(RNG.standard_normal((3, 4)))
    assert np.array_equal((x * 1).data, x.data)


def test_broadcast_violation_raises():
    with pytest.raises(ShapeError):
        T.tensor(np.ones((2, 3))) + T.tensor(np.ones(4))


def test_matmul_identity_and_hand_case():
    v = T.tensor([[2.0], [5.0]])
    assert np.array_equal((T.tensor(np.eye(2)) @ v).data, v.data)
    out = T.tensor([[1, 2], [3, 4]]) @ T.tensor([[1], [1]])
    assert np.array_equal(out.data, [[3.0], [7.0]])


def test_matmul_dimension_mismatch():
    with pytest.raises(ShapeError):
        T.tensor(np.ones((2, 3))) @ T.tensor(np.ones((2, 3)))


def test_conv_identity_kernel():
    x = T.tensor(RNG.standard_normal((1, 6, 5)))
    k = T.tensor(np.ones((1, 1, 1, 1)))
    assert np.array_equal(T.conv2d(x, k).data, x.data)


def test_conv_constant_image_interior():
    c = 0.7
    x = T.tensor(np.full((1, 6, 6), c))
    y = T.conv2d(x, T.tensor(np.ones((1, 1, 3, 3))), padding=1)
    assert np.allclose(y.data[0, 1:-1, 1:-1], 9 * c, rtol=0, atol=1e-12)


@pytest.mark.parametrize("stride,padding,k", [(1, 0, 3), (1, 1, 3), (2, 1, 3), (1, 2, 5), (2, 0, 1), (1, 0, 1)])
def test_conv_matches_loop_oracle(stride, padding, k):
    x = RNG.standard_normal((3, 9, 8))
    w = RNG.standard_normal((4, 3, k, k))
    got = T.conv2d(T.tensor(x), T.tensor(w), stride, padding).data
    assert np.allclose(got, conv2d_loops(x, w, stride, padding), atol=1e-12)


def test_conv_rejects_even_and_oversized_kernels():
    x = T.tensor(np.ones((1, 4, 4)))
    with pytest.raises(ShapeError):
        T.conv2d(x, T.tensor(np.ones((1, 1, 2, 2))))
    with pytest.raises(ShapeError):
        T.conv2d(x, T.tensor(np.ones((1, 1, 7, 7))), padding=1)


def test_reductions():
    assert T.mean(T.tensor([1, 2, 3])).item() == 2.0
    c = T.tensor(np.full((3, 4, 5), 2.5))
    assert np.array_equal(T.mean(c, axis=(-2, -1)).data, [2.5, 2.5, 2.5])
    with pytest.raises(ShapeError):
        T.sum_(T.tensor(np.ones((0, 3))))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_result_is_an_error():
    with pytest.raises(NonFiniteError):
        T.log(T.tensor([0.0, 1.0]))
    with pytest.raises(NonFiniteError):
        T.tensor([1.0]) / T.tensor([0.0])


def test_broadcast_addition_associative_on_integers():
    a = T.tensor(RNG.integers(-50, 50, size=(3, 1, 4)))
    b = T.tensor(RNG.integers(-50, 50, size=(5, 1)))
    c = T.tensor(RNG.integers(-50, 50, size=(4,)))
    assert np.array_equal(((a + b) + c).data, (a + (b + c)).data)


# -- backward --------------------------------------------------------------------

def test_sum_backward_gives_ones():
    x = leaf((3, 4))
    with Tape() as tape:
        T.sum_(x).backward()
    assert np.array_equal(x.grad, np.ones((3, 4)))
    assert len(tape) == 0


def test_sum_of_squares_gradient():
    x = leaf((5,))
    with Tape() as tape:
        tape.backward(T.sum_(x * x))
    assert np.allclose(x.grad, 2 * x.data)


def test_backward_twice_and_non_scalar_raise():
    x = leaf((3,))
    with Tape() as tape:
        loss = T.sum_(x * 2.0)
        with pytest.raises(ShapeError):
            tape.backward(x * 2.0)
        tape.backward(loss)
        with pytest.raises(TapeError):
            tape.backward(loss)


def test_backward_on_foreign_tape_raises():
    x = leaf((3,))
    with Tape():
        loss = T.sum_(x)
    with Tape() as other:
        with pytest.raises(TapeError):
            other.backward(loss)


def test_backward_runs_each_recorded_rule_once():
    x = leaf((4, 3))
    w = leaf((3, 2))
    with Tape() as tape:
        y = T.tanh(x @ w)
        z = T.exp(y * 0.5) + T.sigmoid(y)
        loss = T.mean(z * z)
        n_ops = len(tape)
        executed = tape.backward(loss)
    assert executed == n_ops


def test_no_tape_records_nothing():
    x = leaf((3,))
    with Tape() as tape:
        with T.no_tape():
            y = x * 3.0
        assert len(tape) == 0 and not y.requires_grad


def test_backward_sink_leaves_grad_untouched():
    x = leaf((3,))
    sink = {}
    with Tape() as tape:
        tape.backward(T.sum_(x * x), sink=sink)
    assert x.grad is None
    assert np.allclose(sink[id(x)], 2 * x.data)


UNARY = {
    "neg": lambda a: -a,
    "exp": T.exp,
    "tanh": T.tanh,
    "sigmoid": T.sigmoid,
    "abs": T.absolute,
    "relu": T.relu,
    "clamp": lambda a: T.clamp(a, -0.5, 0.5),
    "pow3": lambda a: a ** 3,
    "l2norm": lambda a: T.l2_normalize(a, axis=-1),
    "transpose": lambda a: T.transpose(a, (1, 0, 2)),
    "reshape": lambda a: T.reshape(a, (4, 6)),
    "flip": lambda a: T.flip(a, -1),
    "getitem": lambda a: a[1:, ::2],
    "getitem_adv": lambda a: a[[0, 1, 1]],
    "sum_axis": lambda a: T.sum_(a, axis=1),
    "mean_axes": lambda a: T.mean(a, axis=(0, 2), keepdims=True),
    "max": lambda a: T.amax(a, axis=-1),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_gradients(name):
    x = leaf((2, 3, 4))
    if name in ("abs", "relu", "clamp"):
        # keep away from kinks so the central difference is valid
        x.data += np.sign(x.data) * 0.05
        x.data[np.abs(np.abs(x.data) - 0.5) < 0.05] += 0.1
    check_grads(UNARY[name], [x])


def test_positive_domain_gradients():
    x = leaf((3, 4), 0.5, 2.0)
    check_grads(T.log, [x])
    check_grads(T.sqrt, [x])


@pytest.mark.parametrize("op", ["add", "sub", "mul", "div"])
def test_binary_broadcast_gradients(op):
    a = leaf((2, 3, 4))
    b = leaf((3, 1), 0.5, 1.5)
    fn = {"add": T.add, "sub": T.sub, "mul": T.mul, "div": T.div}[op]
    check_grads(fn, [a, b])


def test_matmul_gradient_tight():
    a = leaf((5, 7))
    b = leaf((7, 3))
    check_grads(T.matmul, [a, b], tol=1e-6)


def test_batched_matmul_gradient():
    a = leaf((2, 4, 5))
    b = leaf((5, 3))
    check_grads(T.matmul, [a, b])


@pytest.mark.parametrize("stride,padding,k", [(1, 1, 3), (2, 1, 3), (1, 0, 1), (1, 2, 5)])
def test_conv2d_gradients(stride, padding, k):
    x = leaf((2, 8, 8))
    w = leaf((4, 2, k, k))
    b = leaf((4,))
    check_grads(lambda x, w, b: T.conv2d(x, w, stride, padding, bias=b), [x, w, b])


def test_conv2d_batched_gradients():
    x = leaf((3, 2, 6, 6))
    w = leaf((1, 2, 3, 3))
    check_grads(lambda x, w: T.conv2d(x, w, 1, 1), [x, w])


@pytest.mark.parametrize("mode", ["constant", "replicate"])
def test_pad_gradients(mode):
    check_grads(lambda x: T.pad(x, 1, mode), [leaf((2, 4, 5))])


def test_pool_resize_concat_gradients():
    check_grads(lambda x: T.avg_pool2d(x, 2), [leaf((2, 4, 6))])
    check_grads(lambda x: T.upsample_nearest(x, 3), [leaf((2, 2, 3))])
    check_grads(lambda x: T.resize_nearest(x, (5, 7)), [leaf((2, 3, 4))])
    check_grads(lambda a, b: T.concat([a, b], axis=1), [leaf((2, 3, 4)), leaf((2, 1, 4))])


def test_detach_blocks_gradient():
    x = leaf((3,))
    with Tape() as tape:
        tape.backward(T.sum_(T.detach(x) * x))
    assert np.allclose(x.grad, x.data)


# -- serialization ---------------------------------------------------------------

def test_tensor_roundtrip_and_header():
    x = T.tensor(RNG.standard_normal((2, 3, 4)).astype(np.float32))
    buf = io.BytesIO()
    T.write_tensor(buf, x)
    raw = buf.getvalue()
    assert raw.startswith(b"TNSR v1 3 2 3 4\n")
    assert len(raw) == len(b"TNSR v1 3 2 3 4\n") + 4 * 24
    back = T.read_tensor(io.BytesIO(raw), np.float32)
    assert np.array_equal(back.data, x.data)


def test_tensor_truncated_payload():
    buf = io.BytesIO()
    T.write_tensor(buf, np.ones((4,)))
    with pytest.raises(ValueError):
        T.read_tensor(io.BytesIO(buf.getvalue()[:-2]))
