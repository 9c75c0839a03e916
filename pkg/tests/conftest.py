import numpy as np
import pytest

from bars.search_space import SearchSpaceConfig


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def micro_space():
    """A very small search space that keeps supernet tests fast."""
    return SearchSpaceConfig(
        num_stages=2,
        cells_per_stage=1,
        nodes_per_cell=3,
        base_channels=(4, 8),
        width_choices=(0.5, 1.0),
        image_size=8,
        num_classes=3,
        flops_budget=1e5,
    ).validate()


@pytest.fixture
def tiny_space():
    return SearchSpaceConfig(num_stages=2, cells_per_stage=2, base_channels=(8, 16), flops_budget=400000.0).validate()


def pytest_terminal_summary(terminalreporter):
    from . import test_acceptance

    if test_acceptance.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in test_acceptance.RESULTS:
            terminalreporter.write_line(line)
