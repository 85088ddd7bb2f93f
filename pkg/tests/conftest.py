from __future__ import annotations

from pathlib import Path

import pytest
from click.testing import CliRunner

from curbsight.schema import load_schema

FIXTURES = Path(__file__).resolve().parent / "fixtures"
GOLDEN = Path(__file__).resolve().parent / "golden"
CONFIG = FIXTURES / "config.yaml"


@pytest.fixture(scope="session")
def schema():
    return load_schema()


@pytest.fixture
def cli():
    from curbsight.cli import main

    runner = CliRunner()

    def invoke(*args, env=None):
        return runner.invoke(main, [str(a) for a in args], env=env, catch_exceptions=False)
    return invoke


# --- acceptance summary ---------------------------------------------------

_ACCEPTANCE: dict = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("acceptance")
    if mark is None or rep.when == "teardown":
        return
    number, title = mark.args
    prev = _ACCEPTANCE.get(number, (title, True))
    passed = prev[1] and not rep.failed and not (rep.when == "call" and rep.skipped)
    _ACCEPTANCE[number] = (title, passed)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        title, passed = _ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {title}")
