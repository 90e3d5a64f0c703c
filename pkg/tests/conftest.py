import pytest
import torch

torch.set_num_threads(1)

# One line per acceptance check, filled in by tests/test_acceptance.py and
# echoed verbatim in the terminal summary so the verdicts survive -q runs.
CRITERION_LINES: list[str] = []


@pytest.fixture(scope="session")
def desk():
    from slimsearch import load_preset

    return load_preset("desk8")


def pytest_terminal_summary(terminalreporter):
    if not CRITERION_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(CRITERION_LINES):
        terminalreporter.write_line(line)
