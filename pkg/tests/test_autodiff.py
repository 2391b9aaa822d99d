import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from maskscalar import autodiff as ad


def leaf(x):
    return ad.Tensor(np.array(x, dtype=np.float64), requires_grad=True)


def numeric_grad(f, x, h=1e-5):
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2 * h)
    return g


def rel_err(a, b):
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-12)))


def test_quadratic_gradient():
    w = leaf([1.0, 2.0])
    ad.backward(ad.sum_(w * w))
    np.testing.assert_array_equal(w.grad, [2.0, 4.0])


def test_stop_gradient_blocks_everything():
    w = leaf([1.0, 2.0])
    loss = ad.sum_(ad.stop_gradient(w))
    ad.backward(loss)
    assert w.grad is None or not np.any(w.grad)


def test_stop_gradient_is_forward_exact():
    x = np.random.default_rng(0).standard_normal((3, 4))
    out = ad.stop_gradient(leaf(x))
    assert out.data.tobytes() == x.tobytes()


def test_pow_closed_form():
    b, e = leaf(0.25), leaf(0.5)
    out = ad.elementwise_pow(b, e)
    assert out.item() == pytest.approx(0.5, abs=1e-15)
    ad.backward(out)
    assert e.grad == pytest.approx(0.5 * np.log(0.25), abs=1e-15)
    assert float(e.grad) == pytest.approx(-0.6931, abs=1e-4)


def test_pow_zero_exponent_is_one():
    m = np.linspace(0.01, 1.0, 50)
    np.testing.assert_array_equal(ad.elementwise_pow(m, 0.0).data, np.ones_like(m))


def test_pow_rejects_nonpositive_base():
    with pytest.raises(ad.DomainError):
        ad.elementwise_pow(np.array([0.0, 0.5]), 0.5)


@pytest.mark.parametrize("x, value, grad", [(0.005, 0.01, 0.0), (0.5, 0.5, 1.0), (0.01, 0.01, 0.0)])
def test_floor_max_cases(x, value, grad):
    t = leaf(x)
    out = ad.floor_max(t, 0.01)
    assert out.item() == value
    ad.backward(out)
    assert float(t.grad) == grad


def test_floor_max_away_from_kink():
    rng = np.random.default_rng(1)
    x = rng.uniform(0.0, 0.05, 200)
    x = x[np.abs(x - 0.01) > 1e-3]
    t = leaf(x)
    ad.backward(ad.sum_(ad.floor_max(t, 0.01) * ad.floor_max(t, 0.01)))
    num = numeric_grad(lambda v: np.sum(np.maximum(v, 0.01) ** 2), x)
    np.testing.assert_allclose(t.grad, num, rtol=1e-6, atol=1e-12)


def test_stop_gradient_treats_subtree_as_constant():
    rng = np.random.default_rng(2)
    w0 = rng.standard_normal(5)
    w = leaf(w0)
    ad.backward(ad.sum_(ad.stop_gradient(ad.tanh(w) * w) * w))
    const = np.tanh(w0) * w0
    w2 = leaf(w0)
    ad.backward(ad.sum_(ad.Tensor(const) * w2))
    np.testing.assert_array_equal(w.grad, w2.grad)
    np.testing.assert_array_equal(w.grad, const)


def test_backward_needs_scalar():
    with pytest.raises(ValueError):
        ad.backward(leaf([1.0, 2.0]) * 2.0)


def test_backward_is_bit_deterministic():
    rng = np.random.default_rng(3)
    x0, w0 = rng.standard_normal((4, 6)), rng.standard_normal((6, 3))

    def run():
        w = leaf(w0)
        loss = ad.sum_(ad.sigmoid(ad.Tensor(x0) @ w) * ad.tanh(ad.Tensor(x0) @ w))
        ad.backward(loss)
        return w.grad.tobytes()

    assert run() == run()


# per-op finite differences on random inputs, away from non-smooth points
def _unary_cases():
    rng = np.random.default_rng(4)
    x = rng.uniform(0.2, 0.9, (3, 4))
    return [
        ("exp", lambda t: ad.exp(t), np.exp, x),
        ("log", lambda t: ad.log(t), np.log, x),
        ("sigmoid", lambda t: ad.sigmoid(t), lambda v: 1 / (1 + np.exp(-v)), x - 0.5),
        ("tanh", lambda t: ad.tanh(t), np.tanh, x - 0.5),
        ("pow_base", lambda t: ad.elementwise_pow(t, 0.7), lambda v: v**0.7, x),
        ("l1", lambda t: ad.l1_norm(t - 0.55), lambda v: np.abs(v - 0.55).sum(), x),
        ("sq_l2", lambda t: ad.squared_l2(t - 0.3), lambda v: ((v - 0.3) ** 2).sum(), x),
        ("mean_axis", lambda t: ad.mean(t, axis=0) * ad.mean(t, axis=0), lambda v: v.mean(0) ** 2, x),
        ("swapaxes", lambda t: ad.swapaxes(t, 0, 1) * np.arange(12.0).reshape(4, 3), lambda v: v.T * np.arange(12.0).reshape(4, 3), x),
        ("reshape", lambda t: ad.reshape(t, (12,)) * np.arange(12.0), lambda v: v.reshape(12) * np.arange(12.0), x),
        ("slice", lambda t: ad.slice_(t, (slice(1, 3), 2)) * 3.0, lambda v: v[1:3, 2] * 3.0, x),
        ("div", lambda t: 1.0 / (t + 1.0), lambda v: 1.0 / (v + 1.0), x),
    ]


@pytest.mark.parametrize("name, op, ref, x", _unary_cases(), ids=lambda c: c if isinstance(c, str) else "")
def test_op_matches_finite_differences(name, op, ref, x):
    weights = np.random.default_rng(5).standard_normal(np.shape(ref(x)))
    t = leaf(x)
    out = op(t)
    np.testing.assert_allclose(out.data, ref(x), rtol=1e-14, atol=1e-14)
    ad.backward(ad.sum_(out * weights))
    num = numeric_grad(lambda v: float(np.sum(ref(v) * weights)), x)
    assert rel_err(t.grad, num) < 1e-6


def test_pow_exponent_grid():
    bases = np.linspace(0.05, 1.0, 7)[:, None] * np.ones((1, 5))
    exps = np.ones((7, 1)) * np.linspace(0.1, 1.0, 5)[None, :]
    b, e = leaf(bases), leaf(exps)
    ad.backward(ad.sum_(ad.elementwise_pow(b, e)))
    assert rel_err(e.grad, numeric_grad(lambda v: np.sum(bases**v), exps)) < 1e-6
    assert rel_err(b.grad, numeric_grad(lambda v: np.sum(v**exps), bases)) < 1e-6


def test_matmul_concat_layernorm():
    rng = np.random.default_rng(6)
    x0, g0, b0 = rng.standard_normal((2, 3, 5)), rng.uniform(0.5, 1.5, 5), rng.standard_normal(5)
    w0 = rng.standard_normal((10, 4))

    def f(x, g, w):
        h = ad.layer_norm(x, g, b0)
        return ad.sum_(ad.tanh(ad.concat([h, h * 2.0], axis=-1) @ w))

    for which in range(3):
        args = [x0, g0, w0]
        t = [leaf(a) if i == which else ad.Tensor(a) for i, a in enumerate(args)]
        ad.backward(f(*t))

        def fv(v, which=which):
            a = list(args)
            a[which] = v
            with ad.no_grad():
                return f(*[ad.Tensor(z) for z in a]).item()

        assert rel_err(t[which].grad, numeric_grad(fv, args[which])) < 1e-6


def test_causal_conv_and_attention():
    rng = np.random.default_rng(7)
    x0, k0, b0 = rng.standard_normal((6, 3)), rng.standard_normal((3, 3)), rng.standard_normal(3)
    mask = ad.causal_band_mask(6, 2)

    def f(x, k):
        h = ad.causal_depthwise_conv(x, k, b0)
        att = ad.masked_softmax(h @ ad.swapaxes(h, 0, 1), mask)
        return ad.sum_(ad.tanh(att @ h))

    for which, arr in enumerate((x0, k0)):
        t = [leaf(x0) if which == 0 else ad.Tensor(x0), leaf(k0) if which == 1 else ad.Tensor(k0)]
        ad.backward(f(*t))

        def fv(v, which=which):
            a = [x0, k0]
            a[which] = v
            with ad.no_grad():
                return f(ad.Tensor(a[0]), ad.Tensor(a[1])).item()

        assert rel_err(t[which].grad, numeric_grad(fv, arr)) < 1e-6


def test_causal_conv_ignores_future():
    rng = np.random.default_rng(8)
    x = rng.standard_normal((8, 2))
    k, b = rng.standard_normal((3, 2)), np.zeros(2)
    y1 = ad.causal_depthwise_conv(x, k, b).data
    x[5:] += 10.0
    y2 = ad.causal_depthwise_conv(x, k, b).data
    assert y1[:5].tobytes() == y2[:5].tobytes()
    assert not np.allclose(y1[5:], y2[5:])


def test_band_mask_rows():
    m = ad.causal_band_mask(5, 1)
    assert np.all(np.isfinite(np.diag(m)))
    assert np.isinf(m[0, 1]) and np.isinf(m[3, 1]) and m[3, 2] == 0.0


def test_random_graph_five_nodes():
    rng = np.random.default_rng(9)
    a0, b0 = rng.uniform(0.2, 1.0, 4), rng.standard_normal(4)

    def f(a, b):
        c = a * b
        d = ad.sigmoid(c) + ad.log(a)
        return ad.sum_(ad.tanh(d) * b)

    a, b = leaf(a0), leaf(b0)
    ad.backward(f(a, b))
    with ad.no_grad():
        na = numeric_grad(lambda v: f(ad.Tensor(v), ad.Tensor(b0)).item(), a0)
        nb = numeric_grad(lambda v: f(ad.Tensor(a0), ad.Tensor(v)).item(), b0)
    assert rel_err(a.grad, na) < 1e-6 and rel_err(b.grad, nb) < 1e-6


# the checker itself
def _fc_problem():
    rng = np.random.default_rng(10)
    x = rng.standard_normal((5, 4))
    w = leaf(rng.standard_normal((4, 3)))
    b = leaf(rng.standard_normal(3))
    return (lambda: ad.sum_(ad.sigmoid(ad.Tensor(x) @ w + b))), {"w": w, "b": b}


def test_grad_check_sigmoid_fc():
    fn, params = _fc_problem()
    report = ad.grad_check(fn, params)
    assert report.max_rel_error < 1e-6
    assert report.n_checked == 15 and report.n_skipped == 0


def test_grad_check_catches_planted_fault():
    fn, params = _fc_problem()
    ad.backward(fn())
    wrong = {k: p.grad.copy() for k, p in params.items()}
    wrong["w"][1, 2] *= 1.5
    report = ad.grad_check(fn, params, analytic=wrong)
    assert report.max_rel_error > 1e-2
    assert report.worst_param == "w" and report.worst_index == (1, 2)


def test_grad_check_fourth_order_and_probes_agree():
    rng = np.random.default_rng(11)
    x = rng.standard_normal((5, 4))
    w = leaf(rng.standard_normal((4, 3)))

    def fn(copies=None):
        return ad.sum_(ad.sigmoid(ad.Tensor(x) @ w), axis=(-2, -1))

    plain = ad.grad_check(fn, {"w": w}, eps=1e-4, order=4)
    probed = ad.grad_check(fn, {"w": w}, eps=1e-4, order=4, probes=8)
    assert plain.max_rel_error < 1e-8
    assert probed.max_rel_error == pytest.approx(plain.max_rel_error, rel=1e-3, abs=1e-12)


def test_grad_check_validates_arguments():
    fn, params = _fc_problem()
    with pytest.raises(ValueError):
        ad.grad_check(fn, params, eps=0.0)
    with pytest.raises(ValueError):
        ad.grad_check(fn, params, order=3)
    with pytest.raises(ValueError):
        ad.grad_check(fn, params, order=4, probes=6)


def test_grad_check_skips_kink_crossings():
    # |x| at exactly 0 cannot be differenced on either side
    x = leaf([0.0, 0.3])
    report = ad.grad_check(lambda: ad.l1_norm(x), {"x": x}, eps=1e-3, order=2)
    assert report.n_skipped == 1 and report.n_checked == 1
    assert report.max_rel_error < 1e-10


def test_grad_check_holds_stopped_values():
    rng = np.random.default_rng(12)
    w = leaf(rng.standard_normal(4))
    fn = lambda: ad.sum_(ad.stop_gradient(ad.exp(w)) * w)  # noqa: E731
    report = ad.grad_check(fn, {"w": w})
    assert report.max_rel_error < 1e-8


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(0.05, 1.0), min_size=1, max_size=6), st.floats(0.05, 1.0))
def test_pow_gradients_property(bases, alpha):
    b = np.array(bases)
    tb, ta = leaf(b), leaf(alpha)
    ad.backward(ad.sum_(ad.elementwise_pow(tb, ta)))
    assert float(ta.grad) == pytest.approx(float(np.sum(b**alpha * np.log(b))), rel=1e-12, abs=1e-15)
    np.testing.assert_allclose(tb.grad, alpha * b ** (alpha - 1), rtol=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=1, max_size=8), st.lists(st.floats(-3, 3), min_size=1, max_size=8))
def test_broadcast_add_unbroadcasts(xs, ys):
    x = leaf(np.array(xs)[:, None])
    y = leaf(np.array(ys)[None, :])
    ad.backward(ad.sum_(x + y))
    np.testing.assert_array_equal(x.grad, np.full((len(xs), 1), float(len(ys))))
    np.testing.assert_array_equal(y.grad, np.full((1, len(ys)), float(len(xs))))
