import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from pacia.autodiff import (
    NondeterministicFunctionError,
    ShapeError,
    Tape,
    TapeError,
    apply,
    backward,
    finite_diff_check,
    ops,
    parameter,
    tensor,
)


def numeric_grad(f, x, h=1e-5):
    """Central differences of a scalar numpy function, entry by entry."""
    x = x.astype(np.float64).copy()
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        orig = x[i]
        x[i] = orig + h
        fp = f(x)
        x[i] = orig - h
        fm = f(x)
        x[i] = orig
        g[i] = (fp - fm) / (2 * h)
    return g


def tape_grad(build, x):
    p = parameter(x, "x")
    with Tape() as tape:
        loss = build(p)
    return tape.backward(loss, {"x": p})["x"]


def rel_err(a, b, floor=1e-6):
    return np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor))


# forward examples


def test_matmul_forward():
    out = apply("matmul", [tensor([[1, 2], [3, 4]]), tensor([[1], [1]])])
    np.testing.assert_array_equal(out.data, [[3], [7]])


def test_softmax_uniform():
    np.testing.assert_allclose(ops.softmax(tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3, atol=1e-15)


def test_leaky_relu_slope():
    assert ops.leaky_relu(tensor([-1.0])).data[0] == -0.01


def test_unknown_op():
    with pytest.raises(ValueError, match="unknown op kind"):
        apply("conv2d", [tensor([1.0])])


def test_shape_error_names_op_and_dims():
    with pytest.raises(ShapeError, match=r"matmul.*\(2, 3\).*\(2, 3\)"):
        ops.matmul(tensor(np.ones((2, 3))), tensor(np.ones((2, 3))))
    with pytest.raises(ShapeError, match="add"):
        ops.add(tensor(np.ones(3)), tensor(np.ones(4)))


@pytest.mark.parametrize("bad", [[np.nan], [1.0, np.inf]])
def test_external_non_finite_rejected(bad):
    with pytest.raises(ValueError):
        tensor(bad)


def test_zero_dim_rejected():
    with pytest.raises(ShapeError):
        tensor(np.zeros((0, 3)))


# backward examples


def test_square_derivative():
    assert tape_grad(lambda x: ops.sum(x * x), np.array([3.0]))[0] == 6.0


def test_softmax_first_entry_gradient():
    # frozen from central differences at h=1e-5
    g = tape_grad(lambda z: ops.softmax(z)[0:1], np.array([0.0, 0.0]))
    np.testing.assert_allclose(g, [0.25, -0.25], atol=1e-12)
    fd = numeric_grad(lambda z: np.exp(z[0]) / np.exp(z).sum(), np.zeros(2))
    np.testing.assert_allclose(g, fd, atol=1e-9)


def test_unreachable_parameter_zero():
    a, b = parameter([1.0, 2.0], "a"), parameter([[5.0]], "b")
    with Tape() as tape:
        loss = ops.sum(a * a)
    grads = tape.backward(loss, {"a": a, "b": b})
    assert np.array_equal(grads["b"], np.zeros((1, 1)))


def test_non_scalar_loss():
    a = parameter([1.0, 2.0], "a")
    with Tape() as tape:
        out = a * 2.0
    with pytest.raises(TapeError, match="scalar"):
        tape.backward(out)


def test_backward_before_forward():
    with Tape() as tape:
        pass
    with pytest.raises(TapeError):
        tape.backward(tensor([1.0]))
    with pytest.raises(TapeError):
        backward(tensor([1.0]))


def test_module_backward_uses_active_tape():
    w = parameter([[2.0]], "w")
    with Tape():
        loss = ops.sum(w * w)
        assert backward(loss)["w"][0, 0] == 4.0


def test_tape_reverse_order_and_reuse():
    # a value used twice accumulates both contributions
    x = parameter([1.5], "x")
    with Tape() as tape:
        y = ops.exp(x)
        loss = ops.sum(y * y + y)
    g = tape.backward(loss)["x"][0]
    e = np.exp(1.5)
    assert abs(g - (2 * e * e + e)) < 1e-12


def test_matmul_vector_left_operand():
    w = np.arange(6.0).reshape(2, 3)
    g = tape_grad(lambda v: ops.sum(ops.matmul(v, tensor(w))), np.array([1.0, -1.0]))
    np.testing.assert_allclose(g, w.sum(axis=1))


def test_batched_times_matrix_gradient():
    rng = np.random.default_rng(1)
    a, w = rng.normal(size=(2, 3, 4)), rng.normal(size=(4, 5))
    probe = rng.normal(size=(2, 3, 5))
    ga = tape_grad(lambda t: ops.sum(ops.mul(ops.matmul(t, tensor(w)), probe)), a)
    gw = tape_grad(lambda t: ops.sum(ops.mul(ops.matmul(tensor(a), t), probe)), w)
    np.testing.assert_allclose(ga, numeric_grad(lambda x: np.sum((x @ w) * probe), a), rtol=1e-8)
    np.testing.assert_allclose(gw, numeric_grad(lambda x: np.sum((a @ x) * probe), w), rtol=1e-8)


# finite_diff_check examples


def test_fd_check_linear():
    rng = np.random.default_rng(0)
    W = parameter(rng.normal(size=(3, 3)), "W")
    x = rng.normal(size=(3, 1))
    rep = finite_diff_check(lambda: ops.sum(ops.matmul(W, x)), {"W": W}, tol=1e-6)
    assert rep.passed and rep.worst <= 1e-6
    assert rep.entries_checked == 9


def test_fd_check_quadratic_exactness():
    x = parameter([3.0], "x")
    rep = finite_diff_check(lambda: ops.sum(x * x), {"x": x}, tol=1e-6)
    assert rep.passed
    h = 1e-5
    assert abs(6.0 - ((3 + h) ** 2 - (3 - h) ** 2) / (2 * h)) <= 1e-6


def test_fd_check_softmax_log_chain():
    z = parameter(np.random.default_rng(3).normal(size=5), "z")
    rep = finite_diff_check(lambda: ops.log(ops.softmax(z))[2:3], {"z": z}, tol=1e-4)
    assert rep.passed, rep.lines()


def test_fd_check_detects_nondeterminism():
    x = parameter([1.0], "x")
    rng = np.random.default_rng(0)
    with pytest.raises(NondeterministicFunctionError):
        finite_diff_check(lambda: ops.sum(ops.dropout(x * 2.0, 0.5, rng) + 1.0), {"x": x})


def test_fd_check_rejects_bad_step():
    x = parameter([1.0], "x")
    with pytest.raises(ValueError):
        finite_diff_check(lambda: ops.sum(x), {"x": x}, h=0.0)


def test_fd_check_reports_failure():
    x = parameter([1.0, 2.0], "x")

    # a wrong gradient: detach one factor by rebuilding it as a constant
    def f():
        return ops.sum(ops.mul(x, tensor(x.data.copy())))

    rep = finite_diff_check(f, {"x": x})
    assert not rep.passed
    assert any(line.startswith("FAIL x") for line in rep.lines())


# per-op gradient properties

inputs = arrays(np.float64, (3, 4), elements=st.floats(-2, 2, allow_nan=False))
UNARY = {
    "exp": (ops.exp, np.exp),
    "sigmoid": (ops.sigmoid, lambda x: 1 / (1 + np.exp(-x))),
    "softmax": (ops.softmax, lambda x: np.exp(x - x.max(-1, keepdims=True)) / np.exp(x - x.max(-1, keepdims=True)).sum(-1, keepdims=True)),
    "layer_norm": (ops.layer_norm, lambda x: (x - x.mean(-1, keepdims=True)) / np.sqrt(x.var(-1, keepdims=True) + 1e-5)),
    "mean0": (lambda t: ops.mean(t, axis=0), lambda x: x.mean(axis=0)),
}
KINKED = {
    "abs": (ops.abs, np.abs),
    "relu": (ops.relu, lambda x: np.maximum(x, 0)),
    "leaky_relu": (ops.leaky_relu, lambda x: np.where(x > 0, x, 0.01 * x)),
}


@pytest.mark.parametrize("name", sorted(UNARY))
@settings(max_examples=25, deadline=None)
@given(x=inputs, seed=st.integers(0, 2**16))
def test_smooth_unary_gradients(name, x, seed):
    op, ref = UNARY[name]
    probe = np.random.default_rng(seed).normal(size=ref(x).shape)
    g = tape_grad(lambda t: ops.sum(ops.mul(op(t), probe)), x)
    fd = numeric_grad(lambda v: np.sum(ref(v) * probe), x)
    assert rel_err(g, fd, floor=1e-4) <= 1e-4


@pytest.mark.parametrize("name", sorted(KINKED))
@settings(max_examples=25, deadline=None)
@given(x=inputs)
def test_kinked_unary_gradients(name, x):
    op, ref = KINKED[name]
    x = np.where(np.abs(x) < 1e-3, 0.5, x)  # stay clear of the kink
    g = tape_grad(lambda t: ops.sum(op(t)), x)
    fd = numeric_grad(lambda v: np.sum(ref(v)), x)
    assert rel_err(g, fd) <= 1e-6


@settings(max_examples=25, deadline=None)
@given(x=inputs, y=inputs)
def test_binary_linear_ops(x, y):
    for op, ref in ((ops.add, np.add), (ops.sub, np.subtract), (ops.mul, np.multiply)):
        g = tape_grad(lambda t: ops.sum(op(t, y[:1])), x)
        fd = numeric_grad(lambda v: np.sum(ref(v, y[:1])), x)
        # absolute rounding in the differences is ~1e-10, hence the floor
        assert rel_err(g, fd, floor=1e-4) <= 1e-6


@settings(max_examples=25, deadline=None)
@given(x=inputs, y=arrays(np.float64, (3, 4), elements=st.floats(0.5, 2)))
def test_div_gradient(x, y):
    g = tape_grad(lambda t: ops.sum(ops.div(tensor(x), t)), y)
    fd = numeric_grad(lambda v: np.sum(x / v), y)
    assert rel_err(g, fd, floor=1e-4) <= 1e-4


@settings(max_examples=25, deadline=None)
@given(x=arrays(np.float64, (3, 4), elements=st.floats(0.2, 2)))
def test_log_gradient(x):
    g = tape_grad(lambda t: ops.sum(ops.log(t)), x)
    np.testing.assert_allclose(g, 1 / x, rtol=1e-12)


@settings(max_examples=25, deadline=None)
@given(x=inputs)
def test_structural_ops_gradients(x):
    cases = [
        (lambda t: ops.concat([t, t[:, :1]], axis=1), lambda v: np.concatenate([v, v[:, :1]], axis=1)),
        (lambda t: ops.reshape(t, (4, 3)), lambda v: v.reshape(4, 3)),
        (lambda t: ops.broadcast_to(t[:1], (3, 4)), lambda v: np.broadcast_to(v[:1], (3, 4))),
        (lambda t: t[np.array([2, 0, 2])], lambda v: v[np.array([2, 0, 2])]),
        (lambda t: ops.sum(t, axis=1, keepdims=True), lambda v: v.sum(axis=1, keepdims=True)),
    ]
    for op, ref in cases:
        shape = ref(x).shape
        pr = np.arange(float(np.prod(shape))).reshape(shape)
        g = tape_grad(lambda t: ops.sum(ops.mul(op(t), pr)), x)
        fd = numeric_grad(lambda v: np.sum(ref(v) * pr), x)
        assert rel_err(g, fd, floor=1e-4) <= 1e-6


@settings(max_examples=50, deadline=None)
@given(z=arrays(np.float64, 6, elements=st.floats(-30, 30)), c=st.floats(-50, 50))
def test_softmax_normalised_and_shift_invariant(z, c):
    p = ops.softmax(tensor(z)).data
    assert abs(p.sum() - 1) <= 1e-12
    np.testing.assert_allclose(ops.softmax(tensor(z + c)).data, p, atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(x=inputs)
def test_backward_is_linear(x):
    f1 = lambda t: ops.sum(ops.exp(t))
    f2 = lambda t: ops.sum(ops.sigmoid(t))
    both = tape_grad(lambda t: ops.add(f1(t), f2(t)), x)
    np.testing.assert_allclose(both, tape_grad(f1, x) + tape_grad(f2, x), atol=1e-12)


def test_forward_bitwise_deterministic():
    x = np.random.default_rng(0).normal(size=(4, 4))
    runs = [ops.softmax(ops.layer_norm(ops.matmul(tensor(x), tensor(x)))).data.tobytes() for _ in range(2)]
    assert runs[0] == runs[1]


def test_dropout_scaling_and_eval_identity():
    x = tensor(np.ones((200, 50)))
    assert ops.dropout(x, 0.5, None) is x
    out = ops.dropout(x, 0.5, np.random.default_rng(0)).data
    assert set(np.unique(out)) <= {0.0, 2.0}
    assert abs(out.mean() - 1.0) < 0.05
    p = parameter(np.ones(5), "p")
    with Tape() as tape:
        d = ops.dropout(p, 0.4, np.random.default_rng(1))
        g = tape.backward(ops.sum(d))["p"]
    np.testing.assert_array_equal(g, d.data)  # mask is the gradient
