import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from compdefense import tensor as T
from compdefense.attacks import (
    AttackConfig,
    AttackResult,
    cw,
    deepfool,
    fgsm,
    ifgsm,
    pgd,
    pgd_start,
    run_attack,
    thresholded_accuracy,
)
from compdefense.classifier import build_model, predict


def linear(W, b):
    """Pipeline for logits = flatten(x) @ W + b."""
    W = np.asarray(W, np.float32)
    b = np.asarray(b, np.float32)

    def f(x):
        return T.matmul(T.reshape(x, (x.shape[0], -1)), T.Tensor(W)) + T.Tensor(b)

    return f


def ce(pipe, x, y):
    with T.no_grad():
        return -T.log_softmax(pipe(T.Tensor(x))).data[np.arange(len(y)), y]


@pytest.fixture(scope="module")
def cnn():
    return build_model("small_cnn", 10, (1, 28, 28), 5)


@pytest.fixture(scope="module")
def batch():
    rng = np.random.default_rng(8)
    return rng.random((6, 1, 28, 28)).astype(np.float32), rng.integers(0, 10, 6)


# --- L-infinity --------------------------------------------------------------

def test_zero_budget_returns_input(cnn, batch):
    x, y = batch
    for kind in ("fgsm", "ifgsm", "pgd"):
        r = run_attack(cnn, x, y, AttackConfig(kind, 0.0))
        assert np.array_equal(r.adversarial, x)


def test_fgsm_sign_arithmetic():
    # Decreasing the single pixel raises the loss: gradient sign is -1.
    pipe = linear([[-1.0, 1.0]], [0.0, 0.0])
    r = fgsm(pipe, np.full((1, 1, 1, 1), 0.5, np.float32), np.array([1]), AttackConfig("fgsm", 0.1))
    assert r.adversarial[0, 0, 0, 0] == np.float32(0.5) - np.float32(0.1)


def test_fgsm_is_best_sign_pattern_on_linear_model():
    # Two-class linear model: the loss is monotone in the margin, so the best
    # L-inf step is the sign pattern that lowers the margin most.
    rng = np.random.default_rng(3)
    W = rng.standard_normal((4, 2))
    pipe = linear(W, [0.0, 0.0])
    x = rng.uniform(0.3, 0.7, (1, 1, 2, 2)).astype(np.float32)
    y = np.array([1])
    eps = 0.05
    r = fgsm(pipe, x, y, AttackConfig("fgsm", eps))
    margin = {}
    for signs in itertools.product([-1.0, 1.0], repeat=4):
        v = x.reshape(-1) + eps * np.array(signs)
        margin[signs] = (v @ W)[1] - (v @ W)[0]
    best = min(margin, key=margin.get)
    assert np.allclose(r.adversarial.reshape(-1), x.reshape(-1) + eps * np.array(best), atol=1e-7)


def test_fgsm_equals_one_step_ifgsm_bit_exact(cnn, batch):
    x, y = batch
    eps = 8 / 255
    a = fgsm(cnn, x, y, AttackConfig("fgsm", eps)).adversarial
    b = ifgsm(cnn, x, y, AttackConfig("ifgsm", eps, alpha=eps, steps=1)).adversarial
    assert np.array_equal(a, b)


def test_pgd_without_random_start_equals_ifgsm(cnn, batch):
    x, y = batch
    a = ifgsm(cnn, x, y, AttackConfig("ifgsm", 6 / 255)).adversarial
    b = pgd(cnn, x, y, AttackConfig("pgd", 6 / 255, random_start=False)).adversarial
    assert np.array_equal(a, b)


def test_pgd_start_inside_ball_and_box():
    x = np.random.default_rng(0).random((50, 1, 8, 8)).astype(np.float32)
    eps = 0.1
    s = pgd_start(x, eps, 3)
    assert np.all(np.abs(s - x) <= np.float32(eps)) and s.min() >= 0 and s.max() <= 1
    assert np.array_equal(s, pgd_start(x, eps, 3))
    assert not np.array_equal(s, pgd_start(x, eps, 4))


def test_pgd_is_seed_reproducible(cnn, batch):
    x, y = batch
    a = pgd(cnn, x, y, AttackConfig("pgd", 4 / 255, seed=2)).adversarial
    b = pgd(cnn, x, y, AttackConfig("pgd", 4 / 255, seed=2)).adversarial
    assert np.array_equal(a, b)


def test_ifgsm_raises_loss(cnn, batch):
    x, y = batch
    r = ifgsm(cnn, x, y, AttackConfig("ifgsm", 8 / 255))
    assert ce(cnn, r.adversarial, y).sum() > ce(cnn, x, y).sum()


def test_attacks_do_not_mutate_inputs_or_model(cnn, batch):
    x, y = batch
    x0, y0 = x.copy(), y.copy()
    params = {k: v.data.copy() for k, v in cnn.params.items()}
    for kind in ("fgsm", "ifgsm", "pgd", "cw", "deepfool"):
        run_attack(cnn, x[:2], y[:2], AttackConfig(kind, 4 / 255, steps=2))
    assert np.array_equal(x, x0) and np.array_equal(y, y0)
    assert all(np.array_equal(params[k], cnn.params[k].data) for k in params)


def test_config_validation():
    with pytest.raises(ValueError):
        AttackConfig("spatial")
    with pytest.raises(ValueError):
        AttackConfig("fgsm", -0.1)
    with pytest.raises(ValueError):
        AttackConfig("ifgsm", steps=0)
    assert AttackConfig("ifgsm", 0.08).step_size == pytest.approx(0.02)
    assert AttackConfig("pgd").n_steps == 10 and AttackConfig("cw").n_steps == 50


@settings(max_examples=30, deadline=None)
@given(
    st.sampled_from(["fgsm", "ifgsm", "pgd"]),
    st.floats(0.0, 0.3),
    st.integers(0, 2**31 - 1),
    st.integers(1, 6),
)
def test_linf_outputs_inside_ball_and_box(kind, eps, seed, steps):
    rng = np.random.default_rng(seed)
    x = rng.random((4, 1, 4, 4)).astype(np.float32)
    x[0] = 0.0
    x[1] = 1.0
    pipe = linear(rng.standard_normal((16, 5)) * 3, rng.standard_normal(5))
    r = run_attack(pipe, x, rng.integers(0, 5, 4), AttackConfig(kind, eps, steps=steps, seed=seed))
    bound = np.float32(eps) + np.spacing(np.float32(max(eps, 1.0)))
    assert np.all(np.abs(r.adversarial - x) <= bound)
    assert r.adversarial.min() >= 0.0 and r.adversarial.max() <= 1.0
    assert r.adversarial.dtype == np.float32


# --- DeepFool ----------------------------------------------------------------

def test_deepfool_binary_linear_closed_form():
    rng = np.random.default_rng(11)
    d = 16
    w0, w1 = rng.standard_normal(d), rng.standard_normal(d)
    x = rng.uniform(0.4, 0.6, (1, 1, 4, 4)).astype(np.float32)
    # bias puts the boundary close enough that the step is never clipped
    b = -(x.reshape(-1).astype(np.float64) @ np.stack([w0, w1], 1)) + np.array([0.4, 0.0])
    pipe = linear(np.stack([w0, w1], axis=1), b)
    z = x.reshape(-1).astype(np.float64) @ np.stack([w0, w1], 1) + b
    y = np.array([int(np.argmax(z))])
    w = (w1 - w0) if y[0] == 0 else (w0 - w1)
    f = (z[1] - z[0]) if y[0] == 0 else (z[0] - z[1])
    expected = x.reshape(-1) + 1.02 * abs(f) / (w @ w) * w
    r = deepfool(pipe, x, y, AttackConfig("deepfool"))
    assert r.iterations[0] == 1 and r.success[0]
    rel = np.abs(r.adversarial.reshape(-1) - expected) / np.maximum(np.abs(expected), 1e-12)
    assert rel.max() < 1e-5


def test_deepfool_misclassified_input_is_untouched():
    pipe = linear(np.eye(4)[:, :2] * 0 + np.array([[1.0, 0.0]] * 4), [0.0, 0.0])
    x = np.full((1, 1, 2, 2), 0.5, np.float32)
    r = deepfool(pipe, x, np.array([1]), AttackConfig("deepfool"))
    assert r.iterations[0] == 0 and np.array_equal(r.adversarial, x)


def test_deepfool_degenerate_gradient_flagged():
    pipe = linear(np.zeros((4, 3)), [1.0, 0.0, 0.0])
    r = deepfool(pipe, np.full((1, 1, 2, 2), 0.5, np.float32), np.array([0]))
    assert r.extra["degenerate"][0] and not r.success[0]


def test_deepfool_l2_not_above_smallest_successful_fgsm():
    rng = np.random.default_rng(2)
    W = rng.standard_normal((16, 2))
    x = rng.uniform(0.4, 0.6, (1, 1, 4, 4)).astype(np.float32)
    pipe = linear(W, -(x.reshape(-1) @ W) + np.array([0.3, 0.0]))
    y = np.array([int(np.argmax(x.reshape(-1) @ W))])
    df = deepfool(pipe, x, y)
    lo, hi = 0.0, 0.5
    for _ in range(40):  # bisection for the smallest successful fgsm budget
        mid = (lo + hi) / 2
        lo, hi = (lo, mid) if fgsm(pipe, x, y, AttackConfig("fgsm", mid)).success[0] else (mid, hi)
    fg = fgsm(pipe, x, y, AttackConfig("fgsm", hi))
    assert df.success[0] and fg.success[0]
    assert df.l2[0] <= fg.l2[0]


def test_deepfool_multiclass_crosses_boundary(cnn, batch):
    x, y = batch
    y = predict(cnn, x).argmax(1)
    r = deepfool(cnn, x[:3], y[:3])
    assert r.success.all()


# --- Carlini-Wagner ----------------------------------------------------------

def test_cw_with_zero_c_stays_at_input():
    pipe = linear(np.random.default_rng(0).standard_normal((4, 2)), [0, 0])
    x = np.random.default_rng(1).uniform(0.2, 0.8, (2, 1, 2, 2)).astype(np.float32)
    r = cw(pipe, x, np.array([0, 1]), AttackConfig("cw", c=0.0))
    assert np.allclose(r.adversarial, x, atol=1e-6)


def test_cw_outputs_inside_open_box(cnn, batch):
    x, y = batch
    x = x.copy()
    x[0] = 0.0
    x[1] = 1.0
    r = cw(cnn, x, y, AttackConfig("cw", steps=10, c=10.0))
    assert r.adversarial.min() >= 0.0 and r.adversarial.max() <= 1.0


def test_cw_direction_follows_weight_vector_on_2d_linear():
    W = np.array([[1.0, -1.0], [0.5, -0.5]])  # class 0 iff 1.5*(x1 + 0.5*x2) ... > 0
    b = np.array([-0.7, 0.7])
    pipe = linear(W, b)
    x = np.array([0.5, 0.5], np.float32).reshape(1, 1, 1, 2)
    z = x.reshape(-1) @ W + b
    y = np.array([int(np.argmax(z))])
    r = cw(pipe, x, y, AttackConfig("cw", c=5.0, steps=1000, lr=0.01))
    assert r.success[0]
    d = (r.adversarial - x).reshape(-1).astype(np.float64)
    w = W[:, 1 - y[0]] - W[:, y[0]]
    cos = d @ w / (np.linalg.norm(d) * np.linalg.norm(w))
    assert np.degrees(np.arccos(min(cos, 1.0))) < 5.0


# --- thresholded accuracy ----------------------------------------------------

def fake_result(l2, success):
    n = len(l2)
    return AttackResult(np.zeros((n, 1, 1, 1)), np.zeros(n), np.asarray(l2, float), np.asarray(success), np.zeros(n))


def test_thresholded_endpoints_and_values():
    r = fake_result([0.3, 1.2, 2.5, 0.0], [True, True, False, True])
    cc = np.array([True, True, True, False])
    acc = thresholded_accuracy(r, cc, [0.0, 0.5, 2.0, np.inf])
    assert acc[0] == cc.mean()
    assert acc[-1] == np.mean(cc & ~r.success)
    assert acc == [0.75, 0.5, 0.25, 0.25]


def test_thresholded_rejects_unsorted():
    with pytest.raises(ValueError):
        thresholded_accuracy(fake_result([1.0], [True]), [True], [1.0, 0.5])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 10), st.booleans(), st.booleans()), min_size=1, max_size=40),
       st.lists(st.floats(0, 12), min_size=1, max_size=10))
def test_thresholded_curve_monotone(samples, ts):
    l2, succ, cc = (np.array(v) for v in zip(*samples))
    ts = sorted(ts)
    acc = thresholded_accuracy(fake_result(l2, succ), cc, [0.0] + ts + [np.inf])
    assert all(a >= b for a, b in zip(acc, acc[1:]))
    assert acc[0] == np.mean(cc) or np.any(succ & cc & (l2 == 0))
