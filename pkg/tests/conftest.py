import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from ragsearch import load_toy  # noqa: E402
from ragsearch.gateway import ProviderProfile, StubGateway  # noqa: E402
from ragsearch.pipeline import PipelineRunner  # noqa: E402
from ragsearch.searchspace import build_default_space  # noqa: E402

GOLDEN = Path(__file__).parent / "golden"


@pytest.fixture(scope="session")
def space():
    return build_default_space()


@pytest.fixture(scope="session")
def toy():
    return load_toy()


@pytest.fixture
def gateway():
    return StubGateway(ProviderProfile.stub(0))


@pytest.fixture
def runner(toy, gateway):
    return PipelineRunner(toy.corpus, gateway)


# Acceptance results are collected by test_acceptance and printed at the end.
ACCEPTANCE: dict[str, list[bool]] = {}


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.failed):
        return
    marker = "test_acceptance.py::"
    if marker not in report.nodeid:
        return
    key = report.nodeid.split(marker, 1)[1].split("[")[0]
    ACCEPTANCE.setdefault(key, []).append(report.passed)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE):
        results = ACCEPTANCE[key]
        status = "PASS" if all(results) else "FAIL"
        detail = f" ({sum(results)}/{len(results)} cases)" if len(results) > 1 else ""
        terminalreporter.write_line(f"{status}  {key}{detail}")
