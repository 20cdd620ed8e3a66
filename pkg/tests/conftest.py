import pytest
import torch

from g2b.data import make_synthetic


@pytest.fixture(scope="session")
def synthetic():
    return make_synthetic(0)


@pytest.fixture(scope="session")
def tiny_synthetic():
    """4 classes x 40 train / 10 test images; fast enough for protocol plumbing tests."""
    return make_synthetic(3, num_classes=4, train_per_class=40, test_per_class=10)


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)


# ---- acceptance verdicts ------------------------------------------------------

_verdicts = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[_verdicts] = {}


@pytest.fixture
def verdict(request):
    """Record ``(label, ok, detail)`` for the one-line-per-criterion summary."""
    store = request.config.stash[_verdicts]

    def record(label: str, ok: bool, detail: str = "") -> bool:
        store[label] = (bool(ok), detail)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    store = config.stash.get(_verdicts, {})
    if not store:
        return
    terminalreporter.section("acceptance criteria")
    for label, (ok, detail) in store.items():
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {label}" + (f"  ({detail})" if detail else ""))
