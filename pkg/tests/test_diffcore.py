import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from masklab.diffcore import (Graph, ParamStore, RngStream, Tensor, backward, no_record,
                              op_kernel, rel_err, rng_draw, second_order_grad)
from masklab.diffcore import tensor as T
from masklab.errors import ContractViolation, DomainError
from oracles import grad_check

R = np.random.default_rng(0)


def rnd(*shape):
    return R.normal(size=shape)


# one scalar-valued probe per kernel, each reduced with a fixed random weighting
UNARY = {
    "tanh": T.tanh, "sigmoid": T.sigmoid, "exp": T.exp, "neg": T.neg,
    "softmax": T.softmax, "log_softmax": T.log_softmax,
    "transpose": T.transpose, "relu": T.relu,
    "reshape": lambda a: T.reshape(a, (-1,)),
    "sum-axis": lambda a: T.sum(a, axis=0), "mean-axis": lambda a: T.mean(a, axis=1, keepdims=True),
    "scalar-mul": lambda a: T.scale(a, 2.5),
    "slice": lambda a: T.getitem(a, (slice(1, 3), 0)),
    "fancy-index": lambda a: T.getitem(a, np.array([0, 2, 2])),
    "broadcast_to": lambda a: T.broadcast_to(T.getitem(a, 0), (2, 4)),
    "sum_to": lambda a: T.sum_to(a, (1, 4)),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_kernel_gradients(name):
    fn = UNARY[name]
    x = rnd(3, 4) + (0.3 if name == "relu" else 0.0)
    if name == "relu":
        x[np.abs(x) < 0.1] = 0.5  # keep clear of the kink
    with no_record():
        w = rnd(*fn(Tensor(x)).shape)
    assert grad_check(lambda p: T.sum(fn(p["x"]) * Tensor(w)), {"x": x}) <= 1e-4


def test_log_gradient():
    x = np.abs(rnd(3, 4)) + 0.5
    assert grad_check(lambda p: T.sum(T.log(p["x"])), {"x": x}) <= 1e-4


@pytest.mark.parametrize("kind", ["add", "sub", "mul", "div", "matmul", "concat", "stack"])
def test_binary_kernel_gradients(kind):
    shapes = {"matmul": ((2, 3, 4), (4, 5)), "add": ((3, 4), (4,)), "sub": ((3, 1), (3, 4)),
              "mul": ((2, 3, 4), (3, 1)), "div": ((3, 4), (3, 4)), "concat": ((3, 2), (3, 4)),
              "stack": ((3, 4), (3, 4))}
    sa, sb = shapes[kind]
    a, b = rnd(*sa), rnd(*sb)
    if kind == "div":
        b = np.abs(b) + 0.5

    def build(p):
        if kind == "concat":
            out = T.concat([p["a"], p["b"]], axis=1)
        elif kind == "stack":
            out = T.stack([p["a"], p["b"]], axis=0)
        else:
            out = op_kernel(kind, p["a"], p["b"])
        return T.sum(out * out)

    assert grad_check(build, {"a": a, "b": b}) <= 1e-4


def test_scatter_add_gradient():
    g = rnd(3, 2)
    key = np.array([0, 2, 0])
    w = rnd(4, 2)
    assert grad_check(lambda p: T.sum(T.scatter_add(p["g"], key, (4, 2)) * Tensor(w)), {"g": g}) <= 1e-4


def test_square_derivative():
    g = Graph()
    with g:
        x = g.param("x", 3.0)
        y = x * x
    assert backward(g, y, ["x"])["x"].data == 6.0


def test_second_order_through_gradient():
    # d/dx (d(x^2)/dx)^2 = d/dx (2x)^2 = 8x
    g = Graph()
    with g:
        x = g.param("x", 1.0)
        y = x * x
    out = second_order_grad(g, y, ["x"], ["x"], lambda gr: gr["x"] * gr["x"])
    assert out["x"].data == 8.0


def test_unreachable_leaf_gets_zero():
    g = Graph()
    with g:
        x = g.param("x", np.ones(3))
        g.param("unused", np.ones((2, 2)))
        y = T.sum(x)
    grads = backward(g, y, ["x", "unused"])
    assert np.array_equal(grads["unused"].data, np.zeros((2, 2)))


def test_backward_contracts():
    g = Graph()
    with g:
        x = g.param("x", np.ones(3))
        y = x * 2.0
    with pytest.raises(ContractViolation):
        backward(g, y, ["x"])
    with pytest.raises(ContractViolation):
        backward(g, T.sum(y), ["nope"])
    with pytest.raises(ContractViolation):
        g.param("x", 1.0)


def test_domain_errors_carry_index():
    with pytest.raises(DomainError) as e:
        T.log(Tensor(np.array([1.0, 0.0, 2.0])))
    assert e.value.index == (1,)
    with pytest.raises(DomainError):
        T.div(Tensor(np.ones(2)), Tensor(np.array([1.0, 0.0])))


def test_shape_mismatch_is_contract_violation():
    with pytest.raises(ContractViolation):
        T.add(Tensor(np.ones((2, 3))), Tensor(np.ones((4,))))
    with pytest.raises(ContractViolation):
        op_kernel("nope", Tensor(1.0))


def test_no_record_leaves_tape_untouched():
    g = Graph()
    with g:
        x = g.param("x", 2.0)
        before = len(g)
        with no_record():
            y = x * x
        assert len(g) == before and y.graph is None


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (3, 2), elements=st.floats(-3, 3)),
       arrays(np.float64, (3, 2), elements=st.floats(-3, 3)))
def test_product_rule_property(a, b):
    g = Graph()
    with g:
        pa, pb = g.param("a", a), g.param("b", b)
        y = T.sum(pa * pb)
    grads = backward(g, y, ["a", "b"])
    assert np.array_equal(grads["a"].data, b) and np.array_equal(grads["b"].data, a)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (5,), elements=st.floats(-20, 20)))
def test_softmax_is_a_distribution(x):
    p = T.softmax(Tensor(x)).data
    assert np.all(p >= 0) and abs(p.sum() - 1.0) <= 1e-12


def test_rel_err_floor():
    assert rel_err(0.0, 0.0) == 0.0
    assert rel_err(1.0, 1.0 + 1e-12) < 1e-11


# -- RNG ---------------------------------------------------------------------

def test_stream_is_reproducible_and_label_separated():
    a, b, c = RngStream(7, "x"), RngStream(7, "x"), RngStream(7, "y")
    ua, ub, uc = a.uniform(100), b.uniform(100), c.uniform(100)
    assert np.array_equal(ua, ub) and not np.array_equal(ua, uc)
    assert np.all((ua > 0) & (ua < 1))


def test_stream_counter_resumes():
    a = RngStream(3, "s")
    first = a.raw(4)
    rest = a.raw(3)
    b = RngStream(3, "s", counter=1)  # raw(4) used exactly one 4-word block
    assert np.array_equal(b.raw(3), rest) and len(first) == 4


def test_draw_kinds():
    s = RngStream(1, "k")
    assert isinstance(rng_draw(s, "u64"), int)
    assert 0 < rng_draw(s, "uniform01") < 1
    assert math.isfinite(rng_draw(s, "standard-normal"))
    assert math.isfinite(rng_draw(s, "gumbel01"))
    with pytest.raises(ContractViolation):
        rng_draw(s, "cauchy")


def test_normal_and_gumbel_moments():
    s = RngStream(11, "moments")
    z = s.normal(200_000)
    g = s.gumbel(200_000)
    assert abs(z.mean()) < 0.01 and abs(z.std() - 1) < 0.01
    assert abs(g.mean() - 0.5772156649) < 0.01


def test_permutation_and_choice():
    s = RngStream(2, "p")
    perm = s.permutation(50)
    assert sorted(perm) == list(range(50))
    ch = s.choice(50, 10)
    assert len(set(ch.tolist())) == 10


# -- ParamStore --------------------------------------------------------------

def test_param_store_roundtrip(tmp_path):
    st_ = ParamStore("lm", seed=5)
    st_.add("w", RngStream(0, "w").normal((3, 2)))
    st_.add("b", np.array([1e-300, -2.5, 1 / 3]))
    path = tmp_path / "ck.json"
    st_.save(path)
    back = ParamStore.load(path)
    assert back.equals(st_) and back.kind == "lm" and back.seed == 5
    assert path.read_text() == back.to_json() + "\n"


def test_param_store_contracts():
    st_ = ParamStore("lm")
    st_.add("w", np.zeros(3))
    with pytest.raises(ContractViolation):
        st_.add("w", np.zeros(3))
    with pytest.raises(ContractViolation):
        st_["w"] = np.zeros(4)
    with pytest.raises(ContractViolation):
        st_["nope"] = np.zeros(1)
    st_["w"] = np.array([np.nan, 0, 0])
    with pytest.raises(ContractViolation):
        st_.to_json()
