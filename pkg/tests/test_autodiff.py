"""Unit and property tests for the tape/tensor engine."""

import math

import numpy as np
import pytest

from mivhead import autodiff as ad


def test_softmax_of_zeros_is_uniform():
    t = ad.Tape()
    y = ad.softmax(t.constant([0.0, 0.0]), axis=0)
    np.testing.assert_array_equal(y.value, [0.5, 0.5])


def test_logsumexp_identity_cases():
    t = ad.Tape()
    assert float(ad.logsumexp(t.constant([0.0, 0.0]), axis=0).value) == pytest.approx(
        math.log(2.0), abs=1e-15)
    a = 3.7
    assert float(ad.logsumexp(t.constant([a, a]), axis=0).value) == pytest.approx(
        a + math.log(2.0), abs=1e-12)


def test_cross_entropy_scalar_hand_value():
    # -log softmax([10, -10])[0] = log(1 + e^-20)
    t = ad.Tape()
    ce = ad.cross_entropy(t.constant([10.0, -10.0]), 0)
    assert float(ce.value) == pytest.approx(math.log(1.0 + math.exp(-20.0)), rel=1e-12)


def test_softmax_sums_to_one_and_permutation_equivariant():
    rng = np.random.default_rng(0)
    for _ in range(50):
        x = rng.normal(size=7) * rng.uniform(0.1, 50)
        t = ad.Tape()
        y = ad.softmax(t.constant(x), axis=0).value
        assert abs(y.sum() - 1.0) < 1e-12
        perm = rng.permutation(7)
        t2 = ad.Tape()
        y_perm = ad.softmax(t2.constant(x[perm]), axis=0).value
        np.testing.assert_array_equal(y_perm, y[perm])


def test_logsumexp_bounds():
    rng = np.random.default_rng(1)
    for _ in range(200):
        v = rng.normal(size=rng.integers(1, 9)) * rng.uniform(0.1, 100)
        t = ad.Tape()
        out = float(ad.logsumexp(t.constant(v), axis=0).value)
        assert v.max() <= out + 1e-12
        assert out <= v.max() + math.log(len(v)) + 1e-12


def test_l2_normalize_unit_norm():
    # the x/(|x| + eps) formula implies |1 - |y|| = eps/(|x| + eps)
    rng = np.random.default_rng(2)
    for _ in range(100):
        x = rng.normal(size=6)
        nx = rng.uniform(1e-3, 10.0)
        x *= nx / np.linalg.norm(x)
        t = ad.Tape()
        y = ad.l2_normalize(t.constant(x), axis=0).value
        bound = 1e-6 / (nx + 1e-6)
        assert abs(np.linalg.norm(y) - 1.0) <= bound + 1e-9


def test_adaptive_max_pool_regions():
    x = np.arange(1.0, 17.0).reshape(4, 4, 1)
    pooled, _ = ad.adaptive_max_pool_2d_value(x, 2, 2)
    np.testing.assert_array_equal(pooled[:, :, 0], [[6.0, 8.0], [14.0, 16.0]])
    # identity target returns the input, (1, 1) returns the global max
    same, _ = ad.adaptive_max_pool_2d_value(x, 4, 4)
    np.testing.assert_array_equal(same, x)
    top, _ = ad.adaptive_max_pool_2d_value(x, 1, 1)
    assert top[0, 0, 0] == 16.0


def test_adaptive_max_pool_target_out_of_range():
    x = np.zeros((3, 3, 2))
    with pytest.raises(ad.ShapeError):
        ad.adaptive_max_pool_2d_value(x, 4, 1)
    with pytest.raises(ad.ShapeError):
        ad.adaptive_max_pool_2d_value(x, 0, 1)


def test_adaptive_max_pool_tie_routes_to_first_element():
    x = np.ones((2, 2, 1))
    t = ad.Tape()
    a = t.parameter("a", x)
    out = ad.adaptive_max_pool_2d(a, 1, 1)
    t.backward(ad.reshape(out, ()))
    grad = np.zeros((2, 2, 1))
    grad[0, 0, 0] = 1.0  # first row-major element of the tied region
    np.testing.assert_array_equal(a.grad, grad)


def test_nonfinite_output_raises():
    t = ad.Tape()
    x = t.constant([0.0])
    with pytest.raises(ad.NonFiniteError):
        ad.log(x)


def test_grad_of_unreached_parameter_is_exact_zero():
    t = ad.Tape()
    used = t.parameter("used", np.array([2.0]))
    unused = t.parameter("unused", np.array([5.0, 6.0]))
    t.backward(ad.sum_(ad.mul(used, used), axis=0))
    np.testing.assert_array_equal(used.grad, [4.0])
    np.testing.assert_array_equal(unused.grad, [0.0, 0.0])


def test_grad_check_linear_is_exact():
    x = np.array([1.3, -1.2, 1.7])

    def build(tape, p):
        return ad.sum_(ad.mul(p["w"], tape.constant(x)), axis=0)

    rep = ad.grad_check(build, {"w": np.array([0.5, 1.5, -2.0])})
    assert rep.passed
    assert rep.max_rel_err < 1e-10


def test_grad_check_constant_function():
    def build(tape, p):
        return tape.constant(1.0)

    rep = ad.grad_check(build, {"w": np.zeros(3)})
    assert rep.passed
    assert rep.max_rel_err == 0.0


OPS = {}


def _op_case(name):
    def deco(fn):
        OPS[name] = fn
        return fn
    return deco


@_op_case("add")
def _build_add(tape, p, aux):
    return ad.sum_(ad.reshape(ad.add(p["a"], p["b"]), (-1,)), axis=0)


@_op_case("sub")
def _build_sub(tape, p, aux):
    return ad.sum_(ad.reshape(ad.sub(p["a"], p["b"]), (-1,)), axis=0)


@_op_case("mul")
def _build_mul(tape, p, aux):
    return ad.sum_(ad.reshape(ad.mul(p["a"], p["b"]), (-1,)), axis=0)


@_op_case("matmul")
def _build_matmul(tape, p, aux):
    out = ad.matmul(p["a2"], p["b2"])
    return ad.sum_(ad.reshape(ad.mul(out, tape.constant(aux["w_mat"])), (-1,)), axis=0)


@_op_case("abs")
def _build_abs(tape, p, aux):
    return ad.sum_(ad.reshape(ad.abs_(p["a"]), (-1,)), axis=0)


@_op_case("exp")
def _build_exp(tape, p, aux):
    return ad.sum_(ad.reshape(ad.exp(p["a"]), (-1,)), axis=0)


@_op_case("sigmoid")
def _build_sigmoid(tape, p, aux):
    return ad.sum_(ad.reshape(ad.sigmoid(p["a"]), (-1,)), axis=0)


@_op_case("softmax")
def _build_softmax(tape, p, aux):
    out = ad.softmax(p["a"], axis=-1)
    return ad.sum_(ad.reshape(ad.mul(out, tape.constant(aux["w"])), (-1,)), axis=0)


@_op_case("l2_normalize")
def _build_l2n(tape, p, aux):
    out = ad.l2_normalize(p["a"], axis=-1)
    return ad.sum_(ad.reshape(ad.mul(out, tape.constant(aux["w"])), (-1,)), axis=0)


@_op_case("layer_norm")
def _build_ln(tape, p, aux):
    out = ad.layer_norm(p["a"], p["g"], p["bias"], axis=-1)
    return ad.sum_(ad.reshape(ad.mul(out, tape.constant(aux["w"])), (-1,)), axis=0)


@_op_case("mean")
def _build_mean(tape, p, aux):
    return ad.sum_(ad.mean(p["a"], axis=0), axis=0)


@_op_case("logsumexp")
def _build_lse(tape, p, aux):
    return ad.sum_(ad.logsumexp(p["a"], axis=-1), axis=0)


@_op_case("adaptive_max_pool_2d")
def _build_pool(tape, p, aux):
    out = ad.adaptive_max_pool_2d(p["grid"], *aux["target"])
    return ad.sum_(ad.reshape(ad.mul(out, tape.constant(aux["w_pool"])), (-1,)), axis=0)


@_op_case("cross_entropy")
def _build_ce(tape, p, aux):
    return ad.cross_entropy(p["a"], aux["labels"])


@_op_case("concat_take_slice")
def _build_shapeops(tape, p, aux):
    cat = ad.concat([p["a"], p["b"]], axis=0)
    picked = ad.take(cat, aux["idx"], axis=0)
    sl = ad.slice_(picked, (slice(None), slice(0, 2)))
    return ad.sum_(ad.reshape(sl, (-1,)), axis=0)


@pytest.mark.parametrize("op", sorted(OPS))
def test_per_op_grad_check_randomized(op):
    # 100 random draws per op, small tensors, central differences as oracle
    for seed in range(100):
        rng = np.random.default_rng(1000 + seed)
        h, w = rng.integers(2, 5), rng.integers(2, 5)
        params = {
            "a": rng.normal(size=(3, 4)),
            "b": rng.normal(size=(3, 4)),
            "a2": rng.normal(size=(2, 3)),
            "b2": rng.normal(size=(3, 2)),
            "g": rng.normal(size=4) + 1.5,
            "bias": rng.normal(size=4),
            "grid": rng.normal(size=(h, w, 2)),
        }
        aux = {
            "w": rng.normal(size=(3, 4)),
            "w_mat": rng.normal(size=(2, 2)),
            "labels": rng.integers(0, 4, size=3),
            "target": (int(rng.integers(1, h + 1)), int(rng.integers(1, w + 1))),
            "w_pool": None,
            "idx": rng.integers(0, 6, size=4),
        }
        aux["w_pool"] = rng.normal(size=(aux["target"][0], aux["target"][1], 2))
        needed = {
            "add": ["a", "b"], "sub": ["a", "b"], "mul": ["a", "b"],
            "matmul": ["a2", "b2"], "abs": ["a"], "exp": ["a"],
            "sigmoid": ["a"], "softmax": ["a"], "l2_normalize": ["a"],
            "layer_norm": ["a", "g", "bias"], "mean": ["a"], "logsumexp": ["a"],
            "adaptive_max_pool_2d": ["grid"], "cross_entropy": ["a"],
            "concat_take_slice": ["a", "b"],
        }[op]
        sub = {k: params[k] for k in needed}

        def build(tape, nodes):
            return OPS[op](tape, nodes, aux)

        rep = ad.grad_check(build, sub)
        assert rep.passed, f"{op} seed {seed}: failures {rep.failures[:3]}"


def test_reduction_order_is_permutation_invariant():
    rng = np.random.default_rng(7)
    x = rng.normal(size=64) * 1e6 + rng.normal(size=64)
    total = ad.ordered_sum(x, axis=0)
    for _ in range(20):
        perm = rng.permutation(64)
        assert ad.ordered_sum(x[perm], axis=0) == total  # bitwise


def test_evaluation_deterministic():
    rng = np.random.default_rng(11)
    x = rng.normal(size=(5, 6))

    def run():
        t = ad.Tape()
        a = t.constant(x)
        y = ad.softmax(ad.l2_normalize(a, axis=-1), axis=-1)
        return ad.logsumexp(ad.mean(y, axis=0), axis=0).value.copy()

    first = run()
    for _ in range(5):
        np.testing.assert_array_equal(run(), first)
