import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from quizreg.synthetic import write_dataset  # noqa: E402

TINY_MODEL = dict(input_size=32, channels=16, tf_layers=1, tf_heads=2, tf_dim=32, mlp_hidden=32)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny")
    write_dataset(root, 4, seed=3, max_shift=4, side=32, crop_side=24, n_blobs=6)
    return root


ACCEPTANCE_LINES = []


def report_criterion(number, passed, detail):
    """Record one acceptance line; all lines are printed at the end of the session."""
    line = f"criterion {number}: {'PASS' if passed else 'FAIL'} - {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
