import os

os.environ.setdefault("COMBI_BANDIT_DEBUG", "1")

import pytest  # noqa: E402

from combi_bandit import solvers  # noqa: E402

# every solver return is validated against its feasible set during tests
solvers.CHECK_SOLUTIONS = True

ACCEPTANCE_RESULTS = {}


@pytest.fixture
def acceptance():
    """Record ``(criterion, passed, detail)`` for the end-of-run summary."""
    def record(criterion, passed, detail):
        ACCEPTANCE_RESULTS[criterion] = (bool(passed), detail)
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for criterion in sorted(ACCEPTANCE_RESULTS):
        passed, detail = ACCEPTANCE_RESULTS[criterion]
        terminalreporter.write_line(f"{criterion}: {'PASS' if passed else 'FAIL'}  {detail}")
