import os
import sys

# attack outputs are checked against their invariants on every call under test
os.environ.setdefault("FASTADV_CHECK_INVARIANTS", "1")
sys.path.insert(0, os.path.dirname(__file__))

import pytest  # noqa: E402
import torch  # noqa: E402

from fastadv.data import DataSplits, synthetic_dataset, split_validation  # noqa: E402
from fastadv.model import build_model  # noqa: E402


@pytest.fixture
def tiny_mlp():
    return build_model("tiny_mlp", (1, 4, 4), 3, seed=0)


@pytest.fixture
def toy_batch():
    g = torch.Generator().manual_seed(1)
    x = torch.rand(6, 1, 4, 4, generator=g) * 0.8 + 0.1
    y = torch.tensor([0, 1, 2, 0, 1, 2])
    return x, y


def small_splits(seed=0, n=480, shape=(3, 8, 8), num_classes=4, n_valid=96):
    pool = synthetic_dataset(seed, n + n_valid, shape, num_classes, separation=1.5, sigma=0.2)
    train, valid = split_validation(pool, n_valid, seed=seed)
    test = synthetic_dataset(seed, 64, shape, num_classes, separation=1.5, sigma=0.2, split="test",
                             sample_seed=seed + 99)
    return DataSplits(train, valid, test)


def small_cnn(splits, seed=0, width=4):
    return build_model("small_cnn", splits.train.shape, splits.train.num_classes, seed=seed, width=width)


@pytest.fixture
def splits():
    return small_splits()


def pytest_configure(config):
    config.acceptance_lines = []


@pytest.fixture
def verdict(request):
    """Record one acceptance line, print it, and fail the test if the criterion did not hold."""

    def record(number, title, ok, detail):
        line = f"CRITERION {number} [{'PASS' if ok else 'FAIL'}] {title}: {detail}"
        request.config.acceptance_lines.append(line)
        print(line)
        if not ok:
            pytest.fail(line, pytrace=False)

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if config.acceptance_lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(config.acceptance_lines, key=lambda l: int(l.split()[1])):
            terminalreporter.write_line(line)
