from __future__ import annotations

import sys
from pathlib import Path

import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, str(Path(__file__).parent))

from contracts import (  # noqa: E402
    SEL_SET_B,
    SEL_SET_REF_VAR,
    addr,
    call,
    referenced_runtime,
    simple_deploy,
    wrap_constructor,
)
from evmport.chain import EmbeddedChain  # noqa: E402

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

FIXTURES = Path(__file__).parent / "fixtures"

ALICE = addr(1)
BOB = addr(2)
DEPLOYER = addr(0xD1)


class LinkedPair:
    """Source chain holding the referenced contract and the contract that points at it."""

    def __init__(self, path=None):
        self.chain = EmbeddedChain(path=path)
        r = self.chain.send_transaction(ALICE, None, wrap_constructor(referenced_runtime()), 200_000)
        self.referenced = r.contract_address
        r = self.chain.send_transaction(ALICE, None, simple_deploy(self.referenced), 500_000)
        self.simple = r.contract_address
        self.chain.send_transaction(BOB, self.simple, call(SEL_SET_REF_VAR, 5), 100_000)
        self.chain.send_transaction(BOB, self.simple, call(SEL_SET_B, 3, 9), 100_000)


@pytest.fixture
def linked():
    return LinkedPair()


@pytest.fixture
def linked_file(tmp_path):
    return LinkedPair(tmp_path / "source.json")


# -- acceptance reporting ------------------------------------------------------

_CRITERIA: dict = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    failed = report.failed
    if report.when == "call" or failed:
        detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
        if failed:
            detail = (detail + "; " if detail else "") + (report.longrepr.reprcrash.message if hasattr(report.longrepr, "reprcrash") else "error")
        previous = _CRITERIA.get(number)
        passed = not failed and (previous is None or previous[1])
        _CRITERIA[number] = (title, passed, detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, passed, detail = _CRITERIA[number]
        line = f"criterion {number} {'PASS' if passed else 'FAIL'}: {title}"
        terminalreporter.write_line(line + (f" ({detail})" if detail else ""))
