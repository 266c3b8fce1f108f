import os

import numpy as np
import pytest
import torch

from ifmlab import data

torch.set_num_threads(1)
torch.use_deterministic_algorithms(True)

FULL_MNIST_DIR = os.environ.get("IFMLAB_MNIST_DIR")

_acceptance_lines = []


def record_acceptance(criterion, passed, detail):
    line = f"[{'PASS' if passed else 'FAIL'}] {criterion}: {detail}"
    _acceptance_lines.append(line)
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if _acceptance_lines:
        terminalreporter.section("acceptance criteria")
        for line in _acceptance_lines:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def mnist_train():
    return data.load_mnist(data.bundled_mnist_dir(), "train")


@pytest.fixture(scope="session")
def mnist_test():
    return data.load_mnist(data.bundled_mnist_dir(), "t10k")


@pytest.fixture(scope="session")
def bank():
    return data.build_texture_bank("procedural", 7)


@pytest.fixture(scope="session")
def bundle(mnist_train, mnist_test, bank):
    return data.build_splits(mnist_train, mnist_test, bank, seed=3)


@pytest.fixture(scope="session")
def tiny_bundle(bundle):
    return data.DatasetBundle(bundle.train[:100], bundle.val[:60], bundle.test[:60], dict(bundle.manifest))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
