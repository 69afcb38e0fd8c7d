import numpy as np
import pytest
import torch

from metafuse.netcore import HeteroSegNet, NetConfig
from metafuse.synthvol import generate_cohort, generate_patient, partition_dataset

SMALL_NET = NetConfig(channels=(2, 4, 4), bottleneck_channels=4)


@pytest.fixture(scope="session")
def patient7():
    return generate_patient(7, (24, 24, 24), 4)


@pytest.fixture(scope="session")
def cohort40():
    return generate_cohort(3, 40, (16, 16, 16))


@pytest.fixture(scope="session")
def split40(cohort40):
    return partition_dataset(cohort40, 0.5, seed=11)


@pytest.fixture
def small_model():
    torch.manual_seed(0)
    return HeteroSegNet(SMALL_NET)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_CRITERIA: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def record_criterion():
    def record(number: int, ok: bool, detail: str) -> None:
        _CRITERIA[number] = (bool(ok), detail)
        print(f"criterion {number}: {'PASS' if ok else 'FAIL'} - {detail}")

    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        ok, detail = _CRITERIA[n]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] criterion {n}: {detail}")
