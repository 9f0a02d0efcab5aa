import numpy as np
import pytest

from jointnerf import autodiff as ad
from jointnerf.autodiff import AutodiffError, Tape, finite_diff_check, primitive


def test_mul_and_power_rule():
    t = Tape()
    x = t.var(3.0)
    y = primitive("mul", [x, x])
    assert float(y.value) == 9.0
    t.backward(y)
    assert float(x.grad) == 6.0


def test_softplus_at_zero():
    t = Tape()
    x = t.var(0.0)
    y = ad.softplus(x)
    assert float(y.value) == pytest.approx(np.log(2), abs=1e-15)
    t.backward(y)
    assert float(x.grad) == pytest.approx(0.5, abs=1e-15)


def test_softplus_does_not_overflow():
    t = Tape()
    x = t.var(np.array([-800.0, 0.0, 800.0]))
    y = ad.sum(ad.softplus(x))
    t.backward(y)
    assert np.all(np.isfinite(y.value))
    np.testing.assert_allclose(x.grad, [0.0, 0.5, 1.0], atol=1e-300)


@pytest.mark.parametrize("v", [-2.0, 0.0, 5.0])
def test_log_exp_inverse(v):
    t = Tape()
    assert float(ad.log(ad.exp(t.var(v))).value) == pytest.approx(v, abs=1e-12)


def test_matvec_sum_gradients_match_fd(rng):
    W = rng.normal(size=(3, 3))
    v = rng.normal(size=3)
    assert finite_diff_check(lambda t, w: ad.sum(ad.matvec(w, v)), W) < 1e-6
    assert finite_diff_check(lambda t, x: ad.sum(ad.matvec(W, x)), v) < 1e-6


UNARY = {
    "exp": (ad.exp, lambda r: r.normal(size=5)),
    "log": (ad.log, lambda r: r.uniform(0.1, 3, 5)),
    "sqrt": (ad.sqrt, lambda r: r.uniform(0.05, 3, 5)),
    "sin": (ad.sin, lambda r: r.normal(size=5)),
    "cos": (ad.cos, lambda r: r.normal(size=5)),
    "neg": (ad.neg, lambda r: r.normal(size=5)),
    "softplus": (ad.softplus, lambda r: r.normal(0, 3, 5)),
    "sigmoid": (ad.sigmoid, lambda r: r.normal(0, 3, 5)),
    "abs": (ad.abs, lambda r: r.choice([-1, 1], 5) * r.uniform(0.02, 2, 5)),
    "clamp_min": (lambda x: ad.clamp_min(x, 0.0),
                  lambda r: r.choice([-1, 1], 5) * r.uniform(0.02, 2, 5)),
    "power": (lambda x: ad.power(x, 2.5), lambda r: r.uniform(0.1, 2, 5)),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_gradients(name, rng):
    fn, draw = UNARY[name]
    for _ in range(5):
        x0 = draw(rng)
        w = rng.normal(size=x0.shape)
        assert finite_diff_check(lambda t, x: ad.sum(fn(x) * w), x0) < 1e-6


@pytest.mark.parametrize("op", ["add", "sub", "mul", "div"])
def test_binary_gradients_with_broadcast(op, rng):
    b = rng.uniform(0.5, 2.0, (1, 4))
    a = rng.uniform(0.5, 2.0, (3, 4))
    fn = getattr(ad, op)
    assert finite_diff_check(lambda t, x: ad.sum(fn(x, b) ** 2), a) < 1e-6
    assert finite_diff_check(lambda t, y: ad.sum(fn(a, y) ** 2), b) < 1e-6


def test_matmul_concat_take_reshape(rng):
    A = rng.normal(size=(4, 3))
    B = rng.normal(size=(3, 2))

    def f(t, x):
        m = ad.matmul(x, B)
        c = ad.concat([m, ad.sin(m)], axis=-1)
        picked = ad.take(c, np.array([0, 2, 2, 3]))
        return ad.sum(ad.reshape(picked, (16,)) ** 2)

    assert finite_diff_check(f, A) < 1e-6


def test_shape_mismatch_names_op():
    t = Tape()
    with pytest.raises(AutodiffError, match="matmul"):
        ad.matmul(t.var(np.ones((2, 3))), t.var(np.ones((2, 3))))
    with pytest.raises(AutodiffError, match="add"):
        ad.add(t.var(np.ones(3)), t.var(np.ones(4)))


def test_unknown_primitive():
    with pytest.raises(AutodiffError):
        primitive("tanh", [Tape().var(1.0)])


def test_non_scalar_root_rejected():
    t = Tape()
    with pytest.raises(AutodiffError):
        t.backward(t.var(np.ones(3)) * 2.0)


def test_node_ids_are_topological():
    t = Tape()
    x = t.var(np.ones(3))
    y = ad.sum(ad.exp(x) * x + 1.0)
    for nid, node in enumerate(t.nodes):
        assert all(i < nid for i in node.inputs)
    assert y.id == len(t.nodes) - 1


def test_backward_is_idempotent_and_linear(rng):
    x0 = rng.normal(size=4)
    t = Tape()
    x = t.var(x0)
    f1 = ad.sum(ad.sin(x))
    f2 = ad.sum(x * x)
    total = f1 + f2
    g_a = t.backward(total)[x.id].copy()
    g_b = t.backward(total)[x.id].copy()
    np.testing.assert_array_equal(g_a, g_b)
    g1 = t.backward(f1)[x.id].copy()
    g2 = t.backward(f2)[x.id].copy()
    np.testing.assert_allclose(g_a, g1 + g2, rtol=1e-14)


def test_grad_zero_for_unused_leaf():
    t = Tape()
    x, y = t.var(2.0), t.var(np.ones(3))
    t.backward(x * x)
    np.testing.assert_array_equal(y.grad, np.zeros(3))


def test_finite_diff_check_examples():
    assert finite_diff_check(lambda t, x: x ** 3, 2.0) < 1e-8
    assert finite_diff_check(lambda t, x: x * 0.0 + 4.0, 1.0) == 0.0
    assert float(ad.gradient(lambda t, x: ad.sin(x), 0.0)) == 1.0
    with np.errstate(divide="ignore", invalid="ignore"), pytest.raises(AutodiffError):
        finite_diff_check(lambda t, x: ad.log(x), 0.0)
    with pytest.raises(AutodiffError):
        finite_diff_check(lambda t, x: x, 1.0, step=0.0)


def test_vars_from_different_tapes_rejected():
    a, b = Tape().var(1.0), Tape().var(2.0)
    with pytest.raises(AutodiffError):
        a + b
