import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from kgbridge import autodiff as ad
from kgbridge.autodiff import (
    AdamState,
    AttentionWeights,
    BlockWeights,
    NumericalError,
    Tape,
    Tensor,
    adam_step,
    backward,
    finite_difference_check,
    multi_head_attention,
    transformer_encoder_forward,
)

RNG = np.random.default_rng(1234)


def p64(shape, low=-1.0, high=1.0, name=None, rng=RNG):
    return Tensor(rng.uniform(low, high, shape), requires_grad=True, name=name)


def weighted(out: Tensor, seed=0) -> Tensor:
    # random linear functional so every output coordinate matters
    w = np.random.default_rng(seed).standard_normal(out.shape)
    return ad.sum_(out * w)


UNARY = {
    "neg": (ad.neg, (-1, 1)),
    "exp": (ad.exp, (-2, 2)),
    "log": (ad.log, (0.5, 3)),
    "sqrt": (ad.sqrt, (0.5, 3)),
    "square": (ad.square, (-2, 2)),
    "tanh": (ad.tanh, (-2, 2)),
    "cos": (ad.cos, (-3, 3)),
    "sin": (ad.sin, (-3, 3)),
    "relu": (ad.relu, (0.1, 2)),
    "relu_neg": (ad.relu, (-2, -0.1)),
    "sigmoid": (ad.sigmoid, (-4, 4)),
    "softplus": (ad.softplus, (-4, 4)),
    "gelu": (ad.gelu, (-3, 3)),
    "softmax": (lambda x: ad.softmax(x, axis=-1), (-2, 2)),
    "softmax_axis0": (lambda x: ad.softmax(x, axis=0), (-2, 2)),
    "softmax_row": (ad.softmax_row, (-2, 2)),
    "logsumexp": (lambda x: ad.logsumexp(x, axis=-1), (-2, 2)),
    "logsumexp_keep": (lambda x: ad.logsumexp(x, axis=0, keepdims=True), (-2, 2)),
    "l2_normalize": (ad.l2_normalize, (-1, 1)),
    "norm": (ad.norm, (-1, 1)),
    "sum_axis": (lambda x: ad.sum_(x, axis=1), (-1, 1)),
    "mean_keep": (lambda x: ad.mean(x, axis=0, keepdims=True), (-1, 1)),
    "reshape": (lambda x: ad.reshape(x, (4, 3)), (-1, 1)),
    "transpose": (lambda x: ad.transpose(x, (1, 0)), (-1, 1)),
    "getitem_repeat": (lambda x: ad.getitem(x, np.array([0, 2, 0, 1])), (-1, 1)),
    "getitem_slice": (lambda x: x[1:, ::2], (-1, 1)),
    "method_sum": (lambda x: x.sum(), (-1, 1)),
    "rdiv": (lambda x: 2.0 / x, (0.5, 2)),
    "rsub": (lambda x: 3.0 - x, (-1, 1)),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_op_gradient(name):
    fn, (lo, hi) = UNARY[name]
    x = p64((3, 4), lo, hi, name="x")
    res = finite_difference_check(lambda: weighted(fn(x)), [x], n_coords=12)
    assert res.max_rel_error <= 1e-6, res.worst


BINARY = {
    "add_bcast": (ad.add, (3, 4), (4,)),
    "sub_bcast": (ad.sub, (3, 4), (3, 1)),
    "mul_bcast": (ad.mul, (2, 3, 4), (3, 4)),
    "div": (ad.div, (3, 4), (3, 4)),
    "matmul": (ad.matmul, (3, 4), (4, 5)),
    "matmul_batched": (ad.matmul, (2, 3, 4), (4, 2)),
    "matmul_both_batched": (ad.matmul, (2, 3, 4), (2, 4, 2)),
}


@pytest.mark.parametrize("name", sorted(BINARY))
def test_binary_op_gradient(name):
    fn, sa, sb = BINARY[name]
    a = p64(sa, name="a")
    b = p64(sb, 0.5, 1.5, name="b")
    res = finite_difference_check(lambda: weighted(fn(a, b)), [a, b], n_coords=40)
    assert res.max_rel_error <= 1e-6, res.worst


def test_concat_stack_take_rows_gradients():
    a, b = p64((2, 3), name="a"), p64((4, 3), name="b")
    table = p64((5, 3), name="table")
    idx = np.array([[0, 4], [4, 4]])

    def f():
        c = ad.concat([a, b], axis=0)
        s = ad.stack([a, b[:2]], axis=1)
        return weighted(c) + weighted(s, 1) + weighted(ad.take_rows(table, idx), 2)

    res = finite_difference_check(f, [a, b, table], n_coords=50)
    assert res.max_rel_error <= 1e-6, res.worst


def test_layer_norm_gradient():
    x, g, b = p64((2, 3, 6), name="x"), p64((6,), 0.5, 1.5, name="g"), p64((6,), name="b")
    res = finite_difference_check(lambda: weighted(ad.layer_norm(x, g, b)), [x, g, b], n_coords=48)
    assert res.max_rel_error <= 1e-6, res.worst


def test_layer_norm_matches_formula():
    x = RNG.standard_normal((4, 7))
    g, b = RNG.standard_normal(7), RNG.standard_normal(7)
    out = ad.layer_norm(Tensor(x), Tensor(g), Tensor(b)).data
    ref = (x - x.mean(-1, keepdims=True)) / np.sqrt(x.var(-1, keepdims=True) + 1e-5) * g + b
    np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)


def test_gelu_is_tanh_approximation():
    x = np.linspace(-4, 4, 33)
    ref = 0.5 * x * (1 + np.tanh(np.sqrt(2 / np.pi) * (x + 0.044715 * x**3)))
    np.testing.assert_allclose(ad.gelu(Tensor(x)).data, ref, rtol=0, atol=1e-15)


def test_norm_subgradient_at_zero_is_zero():
    x = Tensor(np.zeros((1, 3)), requires_grad=True)
    with Tape() as tape:
        loss = ad.sum_(ad.norm(x))
    g = backward(tape, loss, [x])[id(x)]
    assert np.all(g == 0)


def test_l2_normalize_rejects_zero_vector():
    with pytest.raises(ad.DegenerateVectorError):
        ad.l2_normalize(Tensor(np.zeros((2, 3))))


# -- softmax edge cases ------------------------------------------------------


def test_softmax_row_uniform_on_zeros():
    out = ad.softmax_row(Tensor(np.zeros((1, 5)))).data
    np.testing.assert_allclose(out, 0.2, rtol=0, atol=1e-15)


def test_softmax_row_extreme_logits():
    out = ad.softmax_row(Tensor(np.array([[1000.0, 0.0]]))).data
    assert np.isfinite(out).all()
    np.testing.assert_allclose(out, [[1.0, 0.0]], atol=1e-300)


def test_softmax_row_requires_2d():
    with pytest.raises(ValueError):
        ad.softmax_row(Tensor(np.zeros(3)))


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 9)),
              elements=st.floats(-1e4, 1e4, allow_nan=False)))
def test_softmax_row_is_distribution(x):
    out = ad.softmax_row(Tensor(x)).data
    assert (out >= 0).all()
    np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-6)


def test_softmax_gradient_against_extended_precision():
    # Jacobian-vector product recomputed in long double
    x = RNG.standard_normal((2, 6))
    g = RNG.standard_normal((2, 6))
    xt = Tensor(x, requires_grad=True)
    with Tape() as tape:
        loss = ad.sum_(ad.softmax(xt) * g)
    got = backward(tape, loss, [xt])[id(xt)]
    xl = x.astype(np.longdouble)
    e = np.exp(xl - xl.max(1, keepdims=True))
    s = e / e.sum(1, keepdims=True)
    ref = s * (g - (g * s).sum(1, keepdims=True))
    np.testing.assert_allclose(got, ref.astype(np.float64), rtol=1e-12, atol=1e-15)


# -- tape mechanics -----------------------------------------------------------


def test_unreachable_param_gets_zero_gradient():
    a, b = p64((2,)), p64((3,))
    with Tape() as tape:
        loss = ad.sum_(a * a)
    grads = backward(tape, loss, [a, b])
    np.testing.assert_array_equal(grads[id(b)], np.zeros(3))
    np.testing.assert_allclose(grads[id(a)], 2 * a.data)


def test_reused_tensor_accumulates():
    x = Tensor(np.array([3.0]), requires_grad=True)
    with Tape() as tape:
        loss = ad.sum_(x * x + x)
    assert backward(tape, loss, [x])[id(x)][0] == pytest.approx(7.0)


def test_backward_needs_scalar():
    x = p64((2,))
    with Tape() as tape:
        y = x * 2.0
    with pytest.raises(ValueError):
        backward(tape, y, [x])


def test_no_record_suspends_tape():
    x = p64((2,))
    with Tape() as tape:
        with ad.no_record():
            _ = x * 2.0
    assert len(tape) == 0


def test_nan_aborts_with_op_name():
    with pytest.raises(NumericalError, match="log"):
        ad.log(Tensor(np.array([-1.0])))


def test_constants_keep_float32():
    x = Tensor(np.ones(3, dtype=np.float32))
    assert (x * 0.5 + 1.0).dtype == np.float32


# -- attention and the encoder stack -------------------------------------------


def _reference_mha(x, heads, w):
    """Straight-line per-example, per-head attention."""
    n, L, d = x.shape
    dh = d // heads
    out = np.zeros_like(x)
    for b in range(n):
        q = x[b] @ w.wq.data + w.bq.data
        k = x[b] @ w.wk.data + w.bk.data
        v = x[b] @ w.wv.data + w.bv.data
        ctx = np.zeros((L, d))
        for h in range(heads):
            sl = slice(h * dh, (h + 1) * dh)
            for i in range(L):
                s = np.array([q[i, sl] @ k[j, sl] / np.sqrt(dh) for j in range(L)])
                p = np.exp(s - s.max())
                p /= p.sum()
                ctx[i, sl] = sum(p[j] * v[j, sl] for j in range(L))
        out[b] = ctx @ w.wo.data + w.bo.data
    return out


def test_mha_matches_straight_line_reference():
    rng = np.random.default_rng(0)
    w = AttentionWeights.init(8, rng, zero_output=False, dtype=np.float64)
    for _, p in w.named_parameters():
        p.data = p.data + 0.1 * rng.standard_normal(p.shape)
    x = rng.standard_normal((3, 4, 8))
    got = multi_head_attention(Tensor(x), 2, w).data
    np.testing.assert_allclose(got, _reference_mha(x, 2, w), rtol=1e-10, atol=1e-12)


def test_mha_rejects_indivisible_heads():
    w = AttentionWeights.init(6, np.random.default_rng(0))
    with pytest.raises(ValueError):
        multi_head_attention(Tensor(np.zeros((1, 4, 6), dtype=np.float32)), 4, w)


def test_zero_output_encoder_is_identity():
    rng = np.random.default_rng(3)
    layers = [BlockWeights.init(16, rng) for _ in range(6)]
    z = rng.standard_normal((5, 4, 16)).astype(np.float32)
    out = transformer_encoder_forward(Tensor(z), layers, 4).data
    assert np.max(np.abs(out - z)) <= 1e-6


def test_encoder_gradient_f64():
    rng = np.random.default_rng(5)
    layers = [BlockWeights.init(8, rng, zero_output=False, dtype=np.float64) for _ in range(2)]
    named = [(n, p) for i, blk in enumerate(layers) for n, p in blk.named_parameters(f"l{i}.")]
    for _, p in named:
        p.data = p.data + 0.2 * rng.standard_normal(p.shape)
    # the key bias shifts every score of a query equally, so softmax makes its
    # gradient exactly zero; finite differences there only measure roundoff
    params = [p for n, p in named if not n.endswith("bk")]
    x = p64((2, 4, 8), name="x")
    res = finite_difference_check(lambda: weighted(transformer_encoder_forward(x, layers, 2)), params + [x],
                                  n_coords=200)
    assert res.max_rel_error <= 1e-6, res.worst


def test_key_bias_gradient_is_exactly_zero():
    rng = np.random.default_rng(6)
    w = AttentionWeights.init(8, rng, zero_output=False, dtype=np.float64)
    x = Tensor(rng.standard_normal((2, 4, 8)))
    with Tape() as tape:
        loss = weighted(multi_head_attention(x, 2, w))
    g = backward(tape, loss, [w.bk])[id(w.bk)]
    assert np.max(np.abs(g)) < 1e-12


def test_forward_backward_bit_reproducible():
    def run():
        rng = np.random.default_rng(11)
        layers = [BlockWeights.init(8, rng, zero_output=False) for _ in range(2)]
        params = [p for blk in layers for _, p in blk.named_parameters()]
        x = Tensor(rng.standard_normal((3, 4, 8)).astype(np.float32))
        with Tape() as tape:
            loss = weighted(transformer_encoder_forward(x, layers, 2))
        g = backward(tape, loss, params)
        return loss.data.tobytes(), b"".join(g[id(p)].tobytes() for p in params)

    assert run() == run()


# -- gradient checker itself -------------------------------------------------------


def test_gradcheck_flags_a_wrong_gradient():
    x = p64((4,), 0.5, 1.5)

    def bad_square(a):
        # forward a^2, backward claims 3a
        return ad.tensor._make("bad", a.data**2, (a,), lambda g: (g * 3 * a.data,))

    res = finite_difference_check(lambda: ad.sum_(bad_square(x)), [x], n_coords=4)
    assert res.max_rel_error > 0.1


def test_gradcheck_stable_when_eps_halved():
    x = p64((3, 4), -2, 2)
    f = lambda: weighted(ad.tanh(x) * ad.exp(x))  # noqa: E731
    e1 = finite_difference_check(f, [x], eps=1e-5, n_coords=12).max_rel_error
    e2 = finite_difference_check(f, [x], eps=5e-6, n_coords=12).max_rel_error
    assert e2 <= 10 * max(e1, 1e-10)


def test_gradcheck_restores_parameters():
    x = p64((5,))
    before = x.data.copy()
    finite_difference_check(lambda: ad.sum_(ad.exp(x)), [x], n_coords=5)
    np.testing.assert_array_equal(x.data, before)


# -- Adam --------------------------------------------------------------------------


def test_adam_zero_gradient_leaves_params():
    x = p64((3,))
    before = x.data.copy()
    st_ = AdamState(lr=0.1)
    adam_step(st_, [x], [np.zeros(3)])
    np.testing.assert_array_equal(x.data, before)
    assert st_.t == 1


def test_adam_constant_gradient_moves_by_lr_times_sign():
    x = Tensor(np.zeros(2), requires_grad=True)
    st_ = AdamState(lr=0.01)
    for _ in range(50):
        prev = x.data.copy()
        adam_step(st_, [x], [np.array([2.0, -0.5])])
    np.testing.assert_allclose(x.data - prev, [-0.01, 0.01], rtol=1e-6)


def test_adam_matches_direct_simulation_on_quadratic():
    x = Tensor(np.array([1.0]), requires_grad=True)
    st_ = AdamState(lr=0.1)
    m = v = 0.0
    ref = 1.0
    traj = []
    for t in range(1, 101):
        g = 2 * x.data.copy()
        adam_step(st_, [x], [g])
        gr = 2 * ref
        m = 0.9 * m + 0.1 * gr
        v = 0.999 * v + 0.001 * gr * gr
        ref -= 0.1 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
        assert x.data[0] == pytest.approx(ref, rel=1e-12, abs=1e-15)
        traj.append(abs(ref))
    # the first steps go straight down from x=1 towards 0
    assert all(b < a for a, b in zip(traj[:5], traj[1:6]))
    assert abs(x.data[0]) < 1.0


def test_adam_shape_mismatch():
    x = p64((3,))
    with pytest.raises(ValueError):
        adam_step(AdamState(), [x], [np.zeros(4)])
