import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from naraim import tensor as T
from naraim.tensor import (ContractError, ParamTree, ShapeError, Tensor, finite_difference_gradient,
                           gradient, max_relative_error, primitive)


def test_matmul_identity():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    out = primitive("matmul", a, Tensor(np.eye(2)))
    assert np.array_equal(out.data, [[1, 2], [3, 4]])


def test_softmax_symmetric_pair():
    assert np.allclose(primitive("softmax-last-dim", Tensor([0.0, 0.0])).data, [0.5, 0.5])


def test_layer_norm_two_values():
    out = primitive("layer-norm-last-dim", Tensor([1.0, 3.0])).data
    expect = np.array([-1.0, 1.0]) / np.sqrt(1.0 + 1e-6)
    assert np.allclose(out, expect, atol=1e-12)


def test_shape_error_names_op_and_dims():
    with pytest.raises(ShapeError, match=r"matmul.*\[2, 3\].*\[2, 3\]"):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(ShapeError, match="add"):
        T.add(Tensor(np.ones((2, 3))), Tensor(np.ones((4,))))


def test_unknown_primitive():
    with pytest.raises(ContractError):
        primitive("conv2d", Tensor([1.0]))


def test_all_primitives_registered():
    names = {"matmul", "add", "mul", "sub", "div", "transpose-last-two", "reshape", "concat-last-dim",
             "softmax-last-dim", "layer-norm-last-dim", "gelu", "sin", "cos", "exp", "log", "sqrt",
             "mean-last-dim", "sum", "slice", "masked-fill"}
    assert names == set(T.PRIMITIVES)


def test_gradient_square():
    p = Tensor([3.0])
    g = gradient(T.sum_(p * p), {"p": p})
    assert np.array_equal(g["p"].data, [6.0])


def test_gradient_matmul_matches_fd():
    rng = np.random.default_rng(0)
    params = ParamTree(A=Tensor(rng.normal(size=(3, 4))), B=Tensor(rng.normal(size=(4, 2))))

    def f(p):
        return T.sum_(T.matmul(p["A"], p["B"]))

    auto = gradient(f(params), params)
    fd = finite_difference_gradient(f, params)
    for k in params:
        assert max_relative_error(auto[k].data, fd[k].data) <= 1e-6


def test_disconnected_params_get_zero_grads():
    a, b = Tensor([1.0, 2.0]), Tensor(np.ones((2, 2)))
    g = gradient(T.sum_(a * a), {"a": a, "b": b})
    assert np.array_equal(g["b"].data, np.zeros((2, 2)))


def test_gradient_requires_scalar():
    a = Tensor([1.0, 2.0])
    with pytest.raises(ContractError):
        gradient(a * a, {"a": a})


def test_fd_square_and_constant():
    p = ParamTree(x=Tensor([3.0]))
    fd = finite_difference_gradient(lambda q: q["x"] * q["x"], p, h=1e-5)
    assert abs(fd["x"].item() - 6.0) <= 1e-8
    fd0 = finite_difference_gradient(lambda q: Tensor([4.0]), p)
    assert np.array_equal(fd0["x"].data, [0.0])


def test_param_tree_sorted_iteration():
    t = ParamTree({"b": Tensor([1.0]), "a": Tensor([2.0]), "c.x": Tensor([3.0])})
    assert list(t) == ["a", "b", "c.x"]
    assert list(t.subtree("c.")) == ["c.x"]


def test_softmax_rows_and_shift_invariance():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(20, 7)) * 5
    s = T.softmax_last_dim(Tensor(x)).data
    assert np.all(np.abs(s.sum(-1) - 1) <= 1e-12)
    s2 = T.softmax_last_dim(Tensor(x + 123.0)).data
    assert np.max(np.abs(s - s2)) <= 1e-12


def test_softmax_fully_masked_row_is_zero():
    x = T.masked_fill(Tensor(np.zeros((2, 3))), np.array([[True] * 3, [False, True, True]]), -np.inf)
    s = T.softmax_last_dim(x).data
    assert np.array_equal(s[0], np.zeros(3))
    assert np.allclose(s[1], [1, 0, 0])


def test_layer_norm_moments():
    rng = np.random.default_rng(2)
    out = T.layer_norm_last_dim(Tensor(rng.normal(3, 4, size=(50, 16)))).data
    assert np.all(np.abs(out.mean(-1)) <= 1e-9)
    assert np.all(np.abs(out.var(-1) - 1) <= 1e-6)


# random graph property: <=10 primitives, dims <= 8
UNARY = ["sin", "cos", "exp", "gelu", "softmax-last-dim", "layer-norm-last-dim", "mean-last-dim",
         "transpose-last-two", "sqrt", "log", "slice", "masked-fill"]
BINARY = ["add", "sub", "mul", "div", "matmul", "concat-last-dim"]


def _apply(op, x, y, rng):
    # smooth wrappers keep every op inside its domain and away from overflow
    if op in ("sqrt", "log"):
        return primitive(op, x * x + 0.5)
    if op == "exp":
        return T.exp(T.sin(x))
    if op == "slice":
        return x if x.shape[-1] < 2 else T.slice_(x, 0, x.shape[-1] - 1)
    if op == "masked-fill":
        return T.masked_fill(x, rng.random(x.shape) < 0.3, 0.25)
    if op == "div":
        return T.div(x, y * y + 1.0)
    if op == "matmul":
        return T.matmul(x, T.transpose_last_two(y))
    if op == "concat-last-dim":
        return T.concat_last_dim([x, y])
    return primitive(op, x, y) if op in BINARY else primitive(op, x)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2 ** 32 - 1), n_ops=st.integers(1, 10),
       rows=st.integers(1, 4), cols=st.integers(2, 8))
def test_random_graph_gradients(seed, n_ops, rows, cols):
    rng = np.random.default_rng(seed)
    ops = [rng.choice(UNARY + BINARY) for _ in range(n_ops)]
    params = ParamTree(a=Tensor(rng.normal(size=(rows, cols))), b=Tensor(rng.normal(size=(rows, cols))))

    def f(p):
        x = p["a"]
        for i, op in enumerate(ops):
            y = p["b"] if x.shape == p["b"].shape else x
            x = _apply(op, x, y, np.random.default_rng([seed, i]))
        return T.sum_(x * x)

    auto = gradient(f(params), params)
    # Richardson combination of two central differences: O(h^4) truncation at a roundoff-safe step
    coarse = finite_difference_gradient(f, params, h=2e-4)
    fine = finite_difference_gradient(f, params, h=1e-4)
    fd = {k: Tensor((4 * fine[k].data - coarse[k].data) / 3) for k in params}
    for k in params:
        # entries far below the tensor's gradient scale are dominated by difference noise
        floor = max(1e-5, 1e-3 * np.abs(fd[k].data).max())
        assert max_relative_error(auto[k].data, fd[k].data, floor=floor) <= 1e-4, ops
