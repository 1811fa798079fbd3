import os
import sys

sys.path.insert(0, os.path.dirname(__file__))
os.environ.setdefault("RENGINE_CLOCK", "frozen")

import pytest  # noqa: E402

from rengine.data import BlobSource, ClassIncremental, ScenarioSpec, prepare_data, setup  # noqa: E402
from rengine.nn import ModelSpec  # noqa: E402

SMALL_SCENARIO = ScenarioSpec(BlobSource(train_per_class=40, test_per_class=20, seed=2), ClassIncremental(5), seed=2)


@pytest.fixture(scope="session")
def small_stream(tmp_path_factory):
    root = tmp_path_factory.mktemp("small_data")
    prepare_data(SMALL_SCENARIO, root)
    return setup(SMALL_SCENARIO, root)


@pytest.fixture
def small_spec():
    return ModelSpec([2, 16, 10], seed=4)


def pytest_terminal_summary(terminalreporter):
    lines = []
    for outcome in ("passed", "failed"):
        for rep in terminalreporter.stats.get(outcome, []):
            if rep.when != "call" or "test_criterion_" not in rep.nodeid:
                continue
            number = int(rep.nodeid.split("test_criterion_")[1][:2])
            detail = dict(rep.user_properties).get("verdict", "see failure above")
            lines.append((number, f"criterion {number:2d} {'PASS' if rep.passed else 'FAIL'}  {detail}"))
    if lines:
        terminalreporter.section("acceptance")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
