import numpy as np
import pytest

from compdefense.corpus import make_desk_dataset


@pytest.fixture(scope="session")
def desk_small():
    """Small train/test desk splits, fast enough for unit tests."""
    return make_desk_dataset(400, 11, "train"), make_desk_dataset(100, 12, "test")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def photos():
    from compdefense.corpus import photo_crops

    return [crop for _, crop in photo_crops()]


@pytest.fixture(scope="session")
def trained_cnn():
    """small_cnn fitted briefly on 1500 desk images (well above chance)."""
    from compdefense.classifier import build_model
    from compdefense.classifier.training import TrainConfig, train

    model = build_model("small_cnn", 10, (1, 28, 28), 0)
    train(model, make_desk_dataset(1500, 21, "train"), TrainConfig(epochs=3, batch_size=32, seed=0))
    return model


_CRITERIA: dict = {}


@pytest.fixture(scope="session")
def record_criterion():
    """Log one PASS/FAIL line per acceptance criterion (also shown in the terminal summary)."""

    def record(number: int, ok: bool, detail: str) -> bool:
        line = f"{'PASS' if ok else 'FAIL'} criterion {number:2d}: {detail}"
        _CRITERIA[number] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[n])
