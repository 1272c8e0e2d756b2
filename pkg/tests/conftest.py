import numpy as np
import pytest
import torch

from counterfax.classifier import build_lenet
from counterfax.data import make_patch_dataset


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def frozen_lenet():
    return build_lenet(28, seed=0).freeze()


@pytest.fixture(scope="session")
def tiny_patches():
    return make_patch_dataset(40, image_size=28, patch_size=6, noise_level=0.2, seed=3)


class ProbClassifier:
    """Duck-typed classifier that returns fixed probabilities per image (by mean intensity)."""

    def __init__(self, fn, name="toy"):
        self.fn = fn
        self.name = name

    def predict_prob(self, images):
        images = np.asarray(images)
        return np.array([self.fn(x) for x in images], dtype=np.float64)

    def decide(self, images, threshold=0.5):
        return (self.predict_prob(images) >= threshold).astype(np.int64)

    def param_hash(self):
        return self.name


@pytest.fixture
def mean_classifier():
    return ProbClassifier(lambda x: float(np.mean(x)))


def pytest_configure(config):
    torch.set_num_threads(1)


_CRITERIA = pytest.StashKey[dict]()


@pytest.fixture
def criterion(request):
    """Record one PASS/FAIL line per acceptance criterion; lines are printed in the terminal summary."""

    def record(number: int, passed: bool, detail: str) -> bool:
        line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
        request.config.stash.setdefault(_CRITERIA, {})[number] = line
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_CRITERIA, {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for number in sorted(lines):
            terminalreporter.write_line(lines[number])
