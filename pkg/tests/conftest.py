import numpy as np
import pytest

from oneshot_nas.space import SearchSpace, StageSpec


def tiny_space(layers=(1, 1), kernels=(3, 5), expansions=(2.0, 3.0), resolution=8,
               num_classes=3):
    """A space small enough for exhaustive enumeration and finite differences."""
    stages = tuple(StageSpec(n, 4 + 2 * i, 2 if i == 0 else 1, "relu" if i == 0 else "swish")
                   for i, n in enumerate(layers))
    return SearchSpace(stages=stages, input_resolution=resolution, stem_channels=4,
                       first_block_channels=4, head_channels=6, num_classes=num_classes,
                       kernel_choices=tuple(kernels), expansion_choices=tuple(expansions))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def space():
    return tiny_space()


# ---------------------------------------------------------------------------
# acceptance bookkeeping: one pass/fail line per criterion in the summary

ACCEPTANCE_LINES = []


def record_acceptance(number, title, ok, detail):
    ACCEPTANCE_LINES.append((number, f"[{'PASS' if ok else 'FAIL'}] criterion {number:>2}: "
                                     f"{title} -- {detail}"))
    return ok


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(line)
