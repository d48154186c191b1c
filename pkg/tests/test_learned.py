import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from compdefense import tensor as T
from compdefense.learned import (
    CodecTrainConfig,
    RateModelError,
    build_codec,
    codec_forward,
    codec_rate,
    latents,
    pmf,
    reconstruction_mse,
    train_codec,
)
from compdefense.learned.codec import BIN_MAX, BIN_MIN, N_BINS, _bits, encode


@pytest.fixture(scope="module")
def trained_pair(desk_small):
    """A low-lambda and a very-high-lambda codec trained on the same small corpus."""
    x = desk_small[0].images[:256]
    out = {}
    for lam in (0.001, 1000.0):
        c = build_codec(lam, (1, 28, 28), 0)
        _, hist = train_codec(c, x, CodecTrainConfig(epochs=10, batch_size=16, seed=1))
        out[lam] = (c, hist)
    return out


def test_same_seed_same_parameters():
    a, b = build_codec(0.01, seed=3), build_codec(0.01, seed=3)
    for k in a.params:
        assert np.array_equal(a.params[k].data, b.params[k].data)


def test_latent_shape_for_28px():
    c = build_codec(0.01)
    assert c.latent_shape() == (32, 7, 7)
    assert latents(c, np.zeros((2, 1, 28, 28))).shape == (2, 32, 7, 7)


def test_lambda_in_metadata():
    assert build_codec(0.1).metadata["lambda"] == 0.1


def test_build_rejects_bad_inputs():
    with pytest.raises(ValueError):
        build_codec(0.0)
    with pytest.raises(ValueError):
        build_codec(0.01, (1, 30, 30))


def test_initial_rate_model_is_broad_gaussian():
    p = pmf(build_codec(0.01))
    assert p.shape == (32, N_BINS)
    assert np.allclose(p.sum(1), 1) and p[:, 32].max() == p.max()


def test_unnormalisable_rate_model_is_reported():
    c = build_codec(0.01)
    c.params["rate.logits"].data[0, 0] = np.inf
    with pytest.raises(RateModelError):
        codec_rate(c, np.zeros((1, 1, 28, 28)))


def test_zero_epochs_leave_codec_unchanged(desk_small):
    c = build_codec(0.01)
    before = {k: v.data.copy() for k, v in c.params.items()}
    _, hist = train_codec(c, desk_small[0].images[:10], CodecTrainConfig(epochs=0))
    assert hist == []
    assert all(np.array_equal(before[k], c.params[k].data) for k in before)


def test_training_reduces_loss(trained_pair):
    _, hist = trained_pair[0.001]
    assert hist[-1]["loss"] < hist[0]["loss"]


def test_huge_lambda_collapses_rate_and_blurs(trained_pair, desk_small):
    x = desk_small[1].images
    lo, hi = trained_pair[0.001][0], trained_pair[1000.0][0]
    assert codec_rate(hi, x) < 0.1 * codec_rate(lo, x)
    assert codec_rate(hi, x) < 0.2
    assert reconstruction_mse(hi, x) > reconstruction_mse(lo, x)


def test_eval_latents_are_integers_inside_the_bin_range(trained_pair, desk_small):
    q = latents(trained_pair[0.001][0], desk_small[1].images)
    assert np.array_equal(q, np.round(q))
    assert q.min() >= BIN_MIN and q.max() <= BIN_MAX


def test_reconstruction_range_shape_and_determinism(trained_pair, desk_small):
    c = trained_pair[0.001][0]
    x = np.concatenate([desk_small[1].images[:3], desk_small[1].images[:1]])
    with T.no_grad():
        a = codec_forward(c, x, differentiable=False).data
        b = codec_forward(c, x, differentiable=False).data
    assert a.shape == x.shape and a.min() >= 0 and a.max() <= 1
    assert np.array_equal(a, b)
    assert np.array_equal(a[0], a[3])


def test_rate_of_repeated_image_equals_single(trained_pair, desk_small):
    c = trained_pair[0.001][0]
    one = desk_small[1].images[:1]
    assert codec_rate(c, np.repeat(one, 4, axis=0)) == pytest.approx(codec_rate(c, one), rel=1e-12)


def test_rate_matches_bin_mass_sum(trained_pair, desk_small):
    # Independent recount from the pmf table.
    c = trained_pair[0.001][0]
    x = desk_small[1].images[:5]
    q = latents(c, x).astype(int) - BIN_MIN
    p = pmf(c)
    bits = sum(-np.log2(p[ch, q[i, ch]]).sum() for i in range(5) for ch in range(32))
    assert codec_rate(c, x) == pytest.approx(bits / (5 * 28 * 28), rel=1e-9)


def test_relaxed_bits_interpolate_between_bins():
    c = build_codec(0.01)
    p = pmf(c)
    y = np.zeros((1, 32, 1, 1), np.float32)
    y[0, 0] = 2.25
    b = _bits(c, T.Tensor(y)).data[0, 0, 0, 0]
    k = 2 - BIN_MIN
    assert b == pytest.approx(-np.log2(0.75 * p[0, k] + 0.25 * p[0, k + 1]), rel=1e-5)


def test_gradient_matches_finite_differences():
    c = build_codec(0.01, seed=4)
    rng = np.random.default_rng(0)
    x = rng.uniform(0.2, 0.8, (1, 1, 28, 28))
    w = rng.standard_normal(x.shape)

    def f(t):
        return T.sum(codec_forward(c, t) * T.Tensor(w))

    recs = [r for r in T.finite_difference_probe(f, x, rng.choice(x.size, 30, replace=False)) if not r.kink]
    assert len(recs) >= 20
    assert max(r.rel_err for r in recs[:20]) < 1e-2


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_rate_is_nonnegative_per_image(seed):
    c = build_codec(0.01)
    x = np.random.default_rng(seed).random((3, 1, 28, 28)).astype(np.float32)
    for i in range(3):
        assert codec_rate(c, x[i:i + 1]) >= 0
    with T.no_grad():
        assert np.all(_bits(c, encode(c, T.Tensor(x))).data >= 0)
