import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from compdefense import tensor as T
from compdefense.classifier import TrainConfig, accuracy, build_model, num_tokens, predict, train
from compdefense.data import LabeledDataset
from compdefense.defense import DefenseConfig


def constant_model(cls=0, num_classes=10):
    m = build_model("small_cnn", num_classes, (1, 28, 28), 0)
    for p in m.parameters():
        p.data[...] = 0
    m.params["fc2.b"].data[cls] = 1.0
    return m


def test_build_is_deterministic_per_seed():
    a, b = build_model("small_cnn", 10, (1, 28, 28), 7), build_model("small_cnn", 10, (1, 28, 28), 7)
    for (ka, pa), (kb, pb) in zip(a.params.items(), b.params.items()):
        assert ka == kb and np.array_equal(pa.data, pb.data)
    c = build_model("small_cnn", 10, (1, 28, 28), 8)
    assert not np.array_equal(a.params["conv1.w"].data, c.params["conv1.w"].data)


def test_tiny_vit_on_28px_has_49_tokens():
    m = build_model("tiny_vit", 10, (1, 28, 28), 7)
    assert num_tokens(m) == 49
    assert predict(m, np.zeros((2, 1, 28, 28), np.float32)).shape == (2, 10)


@pytest.mark.parametrize("batch", [1, 3, 17])
def test_small_cnn_on_rgb_32px_gives_logits_per_image(batch):
    m = build_model("small_cnn", 10, (3, 32, 32), 1)
    assert predict(m, np.random.default_rng(0).random((batch, 3, 32, 32))).shape == (batch, 10)


def test_build_rejects_bad_arguments():
    with pytest.raises(ValueError):
        build_model("resnet50")
    with pytest.raises(ValueError):
        build_model("tiny_vit", 10, (1, 30, 30))
    with pytest.raises(ValueError):
        build_model("small_cnn", 10, (1, 8, 8))


def test_forward_rejects_wrong_shape():
    with pytest.raises(T.ShapeError):
        predict(build_model("small_cnn"), np.zeros((1, 1, 32, 32), np.float32))


def test_predict_empty_batch():
    for arch in ("small_cnn", "tiny_vit"):
        assert predict(build_model(arch), np.zeros((0, 1, 28, 28), np.float32)).shape == (0, 10)


def test_duplicated_image_gives_identical_rows():
    x = np.random.default_rng(2).random((1, 1, 28, 28)).astype(np.float32)
    out = predict(build_model("tiny_vit"), np.concatenate([x, x]))
    assert np.array_equal(out[0], out[1])


def test_accuracy_constant_model():
    m = constant_model(0)
    x = np.zeros((20, 1, 28, 28), np.float32)
    assert accuracy(m, LabeledDataset(x, np.zeros(20, int))) == 1.0
    assert accuracy(m, LabeledDataset(x, np.arange(20) % 10)) == pytest.approx(0.1)


def test_accuracy_rejects_empty():
    with pytest.raises(ValueError):
        accuracy(constant_model(), LabeledDataset(np.zeros((0, 1, 28, 28)), np.zeros(0, int)))


def test_memorizes_ten_samples():
    rng = np.random.default_rng(5)
    ds = LabeledDataset(rng.random((10, 1, 28, 28)), np.arange(10), "train")
    m = build_model("small_cnn", 10, (1, 28, 28), 0)
    # One pass of ten updates on a batch that is the whole set.
    _, hist = train(m, ds, TrainConfig(epochs=1, batch_size=10, learning_rate=1e-3))
    for _ in range(29):
        train(m, ds, TrainConfig(epochs=1, batch_size=10, learning_rate=1e-3))
    assert accuracy(m, ds) == 1.0


def test_zero_epochs_leave_model_unchanged(desk_small):
    tr, _ = desk_small
    m = build_model("small_cnn")
    before = [p.data.copy() for p in m.parameters()]
    _, hist = train(m, tr, TrainConfig(epochs=0))
    assert hist == []
    assert all(np.array_equal(a, p.data) for a, p in zip(before, m.parameters()))


def test_training_is_bit_reproducible(desk_small):
    tr, _ = desk_small
    sub = tr.subset(128)
    runs = []
    for _ in range(2):
        m = build_model("small_cnn", 10, (1, 28, 28), 3)
        _, hist = train(m, sub, TrainConfig(epochs=1, batch_size=32, seed=9))
        runs.append((hist, [p.data.copy() for p in m.parameters()]))
    assert runs[0][0] == runs[1][0]
    assert all(np.array_equal(a, b) for a, b in zip(runs[0][1], runs[1][1]))


def test_train_rejects_test_split(desk_small):
    _, te = desk_small
    with pytest.raises(ValueError):
        train(build_model("small_cnn"), te, TrainConfig(epochs=1))


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(epochs=-1)
    with pytest.raises(ValueError):
        TrainConfig(optimizer="lbfgs")


def test_sgd_momentum_reduces_loss(desk_small):
    tr, _ = desk_small
    m = build_model("small_cnn", 10, (1, 28, 28), 0)
    _, hist = train(m, tr, TrainConfig(epochs=3, batch_size=32, learning_rate=0.05, optimizer="sgd_momentum"))
    assert hist[-1]["loss"] < hist[0]["loss"]


def test_trained_model_accuracy_matches_recount(desk_small):
    tr, te = desk_small
    m = build_model("small_cnn", 10, (1, 28, 28), 0)
    train(m, tr, TrainConfig(epochs=2, batch_size=32))
    tally = sum(int(predict(m, te.images[i:i + 1]).argmax() == te.labels[i]) for i in range(len(te)))
    assert accuracy(m, te) == tally / len(te)
    assert accuracy(m, te) == float(np.mean(predict(m, te.images).argmax(1) == te.labels))
    assert accuracy(m, te, DefenseConfig("none")) == accuracy(m, te)


@settings(max_examples=10, deadline=None)
@given(st.permutations(list(range(6))), st.sampled_from(["small_cnn", "tiny_vit"]))
def test_predict_is_permutation_equivariant(perm, arch):
    x = np.random.default_rng(4).random((6, 1, 28, 28)).astype(np.float32)
    m = build_model(arch, 10, (1, 28, 28), 2)
    out = predict(m, x)
    assert np.allclose(predict(m, x[list(perm)]), out[list(perm)], atol=1e-5)


def test_cosine_schedule_ends_near_zero_step(desk_small, monkeypatch):
    from compdefense.classifier import training

    seen = []
    real = training.Adam.step

    def spy(self, grads):
        seen.append(self.lr)
        real(self, grads)

    monkeypatch.setattr(training.Adam, "step", spy)
    data = desk_small[0].subset(64)
    train(build_model("small_cnn", 10, (1, 28, 28), 0), data, TrainConfig(epochs=2, batch_size=16, schedule="cosine"))
    assert len(seen) == 8
    assert seen[0] == pytest.approx(1e-3)
    assert all(a > b for a, b in zip(seen, seen[1:]))
    assert seen[-1] == pytest.approx(1e-3 * 0.5 * (1 + np.cos(np.pi * 7 / 8)))
    with pytest.raises(ValueError):
        TrainConfig(schedule="step")
