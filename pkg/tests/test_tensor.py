import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from compdefense import tensor as T


def leaf(a, dtype=np.float64):
    return T.Tensor(np.asarray(a, dtype=dtype), requires_grad=True)


def naive_conv(x, w, b, stride, pad):
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho, wo = (h + 2 * pad - kh) // stride + 1, (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for i in range(ho):
        for j in range(wo):
            patch = xp[:, :, i * stride:i * stride + kh, j * stride:j * stride + kw]
            out[:, :, i, j] = np.einsum("nckl,ockl->no", patch, w)
    return out + b[None, :, None, None]


# --- forward primitives ------------------------------------------------------

def test_clamp_saturated_value_and_zero_gradient():
    x = leaf([1.3])
    y = T.clamp(x, 0.0, 1.0)
    (g,) = T.grad(T.sum(y), [x])
    assert y.data[0] == 1.0
    assert g[0] == 0.0


def test_smooth_round_formula_value():
    assert float(T.smooth_round(T.Tensor(np.array([0.6]))).data[0]) == pytest.approx(0.936, abs=1e-12)


def test_smooth_round_is_exact_at_integers_and_halves_round_away():
    x = np.array([-3.0, -1.0, 0.0, 2.0, 7.0])
    assert np.array_equal(T.smooth_round(T.Tensor(x)).data, x)
    assert np.array_equal(T.round_half_away(np.array([0.5, 1.5, -0.5, -2.5])), [1.0, 2.0, -1.0, -3.0])


def test_dct_of_constant_block_is_pure_dc():
    c = 0.37
    out = T.block_dct(T.Tensor(np.full((8, 8), c))).data
    assert out[0, 0] == pytest.approx(8 * c, abs=1e-12)
    rest = out.copy()
    rest[0, 0] = 0
    assert np.abs(rest).max() < 1e-12


def test_dct_matrix_matches_cosine_definition():
    # Element formula written out independently of the implementation.
    k, n = np.meshgrid(np.arange(8), np.arange(8), indexing="ij")
    ref = np.sqrt(2 / 8) * np.cos((2 * n + 1) * k * np.pi / 16)
    ref[0] /= np.sqrt(2)
    assert np.allclose(T.dct_matrix(8), ref, atol=1e-14)


def test_conv2d_matches_loop_reference():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((2, 3, 9, 7))
    w = rng.standard_normal((4, 3, 3, 3))
    b = rng.standard_normal(4)
    for stride, pad in ((1, 1), (2, 1), (1, 0), (2, 0)):
        got = T.conv2d(T.Tensor(x), T.Tensor(w), T.Tensor(b), stride=stride, padding=pad).data
        assert np.allclose(got, naive_conv(x, w, b, stride, pad), atol=1e-10)


def test_max_pool_picks_block_maximum():
    x = np.arange(16, dtype=np.float64).reshape(1, 1, 4, 4)
    assert np.array_equal(T.max_pool2d(T.Tensor(x)).data[0, 0], [[5, 7], [13, 15]])


def test_max_pool_gradient_goes_to_one_entry_on_ties():
    x = leaf(np.ones((1, 1, 2, 2)))
    (g,) = T.grad(T.sum(T.max_pool2d(x)), [x])
    assert g.sum() == 1.0 and g[0, 0, 0, 0] == 1.0


def test_cross_entropy_matches_direct_formula():
    rng = np.random.default_rng(1)
    z = rng.standard_normal((5, 4))
    y = np.array([0, 3, 1, 2, 3])
    ref = -np.log(np.exp(z) / np.exp(z).sum(1, keepdims=True))[np.arange(5), y]
    assert float(T.cross_entropy(T.Tensor(z), y, reduction="sum").data) == pytest.approx(ref.sum(), rel=1e-12)
    assert float(T.cross_entropy(T.Tensor(z), y).data) == pytest.approx(ref.mean(), rel=1e-12)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_output_raises():
    with pytest.raises(T.NonFiniteError):
        T.log(T.Tensor(np.array([0.0])))


def test_broadcast_mismatch_raises_shape_error():
    with pytest.raises(T.ShapeError):
        T.add(T.Tensor(np.zeros((2, 3))), T.Tensor(np.zeros((4,))))


# --- backward ----------------------------------------------------------------

def test_sum_of_squares_gradient():
    x = leaf([1.0, -2.0])
    (g,) = T.grad(T.sum(x * x), [x])
    assert np.array_equal(g, [2.0, -4.0])


def test_sign_has_zero_gradient():
    x = leaf([0.3, -1.2, 2.0])
    (g,) = T.grad(T.sum(T.sign(x) * 3.0 + x * 0.0), [x])
    assert np.array_equal(g, np.zeros(3))


def test_unreachable_input_gets_zero_gradient():
    x, z = leaf([1.0]), leaf([2.0])
    gx, gz = T.grad(T.sum(x * 2.0), [x, z])
    assert gx[0] == 2.0 and gz[0] == 0.0


def test_no_grad_records_nothing():
    x = leaf([1.0])
    with T.no_grad():
        y = x * 2.0
    assert not y.requires_grad and y.is_leaf


def test_three_layer_net_matches_finite_differences():
    rng = np.random.default_rng(3)
    w1, w2, w3 = (rng.standard_normal(s) * 0.5 for s in ((6, 8), (8, 8), (8, 3)))

    def f(x):
        h = T.tanh(T.matmul(x, T.Tensor(w1)))
        h = T.tanh(T.matmul(h, T.Tensor(w2)))
        return T.cross_entropy(T.matmul(h, T.Tensor(w3)), np.array([0, 2, 1, 1]))

    x = rng.standard_normal((4, 6))
    recs = T.finite_difference_probe(f, x, rng.choice(x.size, 20, replace=False), h=1e-4)
    assert max(r.rel_err for r in recs) < 1e-3


# --- finite difference probe -------------------------------------------------

def test_probe_on_square():
    (r,) = T.finite_difference_probe(lambda x: T.sum(x * x), np.array([3.0]), [0], h=1e-4)
    assert abs(r.numeric - 6.0) < 1e-6
    assert not r.kink


def test_probe_flags_abs_kink_at_zero():
    (r,) = T.finite_difference_probe(lambda x: T.sum(T.absolute(x)), np.array([0.0]), [0], h=1e-4)
    # Central difference and sign(0) both give 0 here, so only the
    # one-sided slope test can reveal the kink.
    assert r.kink
    assert r.index == 0


# --- properties --------------------------------------------------------------

finite = st.floats(-4, 4, allow_nan=False, width=64)


@given(hnp.arrays(np.float64, (8, 8), elements=finite))
def test_dct_round_trip_and_parseval(block):
    coef = T.block_dct(T.Tensor(block)).data
    assert np.allclose(T.block_idct(T.Tensor(coef)).data, block, atol=1e-6)
    assert abs((coef ** 2).sum() - (block ** 2).sum()) <= 1e-5 * max(1.0, (block ** 2).sum())


UNARY = {
    "tanh": T.tanh,
    "exp": T.exp,
    "square": lambda x: x * x,
    "smooth_round": T.smooth_round,
    "dct": lambda x: T.block_dct(T.reshape(x, (1, 8, 8))),
    "idct": lambda x: T.block_idct(T.reshape(x, (1, 8, 8))),
    "softmax": lambda x: T.softmax(T.reshape(x, (8, 8))),
    "log_softmax": lambda x: T.log_softmax(T.reshape(x, (8, 8))),
    "layer_norm": lambda x: T.layer_norm(T.reshape(x, (8, 8)), T.Tensor(np.linspace(0.5, 1.5, 8)), T.Tensor(np.zeros(8))),
    "sqrt_shifted": lambda x: T.sqrt(x * x + 1.0),
    "div": lambda x: x / (x * x + 2.0),
}


@settings(max_examples=25, deadline=None)
@given(
    st.lists(st.sampled_from(sorted(UNARY)), min_size=1, max_size=3),
    hnp.arrays(np.float64, (64,), elements=st.floats(-1.5, 1.5, allow_nan=False, width=64)),
    st.integers(0, 2**31 - 1),
)
def test_random_compositions_match_finite_differences(names, x, seed):
    w = np.random.default_rng(seed).standard_normal(64)

    def f(t):
        for n in names:
            t = T.reshape(UNARY[n](t), (64,))
        return T.sum(t * T.Tensor(w))

    recs = T.finite_difference_probe(f, x, list(range(0, 64, 7)), h=1e-4)
    for r in recs:
        if not r.kink:
            assert r.rel_err < 1e-3 or abs(r.analytic - r.numeric) < 1e-7


@settings(max_examples=20, deadline=None)
@given(hnp.arrays(np.float32, (3, 5), elements=st.floats(-2, 2, allow_nan=False, width=32)))
def test_backward_is_deterministic(x):
    def run():
        t = T.Tensor(x, requires_grad=True)
        loss = T.sum(T.tanh(T.matmul(t, T.Tensor(np.ones((5, 2), np.float32)))) ** 2.0)
        return T.grad(loss, [t])[0]

    assert np.array_equal(run(), run())


@given(hnp.arrays(np.float64, (10,), elements=st.floats(-3, 3, allow_nan=False, width=64)))
def test_clamp_saturated_region_gets_zero_gradient(x):
    t = leaf(x)
    (g,) = T.grad(T.sum(T.clamp(t, -1.0, 1.0)), [t])
    assert np.all(g[np.abs(x) > 1.0] == 0.0)
    assert np.all(g[np.abs(x) < 1.0] == 1.0)
