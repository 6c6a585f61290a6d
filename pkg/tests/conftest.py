import random

import pytest

from dmlsm.fabric import Fabric, LatencyModel, NodeKind, cn, dm


class Inbox:
    """Minimal fabric handler that records what it receives."""

    def __init__(self, fabric=None):
        self.fabric = fabric
        self.got = []
        self.undeliverable = []

    def on_message(self, ev):
        self.got.append((self.fabric.now if self.fabric else None, ev.src, ev.payload))

    def on_undeliverable(self, ev):
        self.undeliverable.append(ev.payload)


@pytest.fixture
def fabric():
    f = Fabric(LatencyModel())
    f.register_node(cn(0), Inbox(f))
    f.register_node(dm(0), Inbox(f))
    return f


@pytest.fixture
def rng():
    return random.Random(1234)


def nodes_of(f, kind: NodeKind):
    return f.nodes(kind)


# ------------------------------------------------------ acceptance report
_criteria: dict[int, tuple[str, str]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    number, title = mark.args
    failed = rep.failed
    if rep.when == "call" or failed:
        prev = _criteria.get(number, (title, "PASS"))[1]
        _criteria[number] = (title, "FAIL" if failed or prev == "FAIL" else "PASS")


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        title, verdict = _criteria[number]
        terminalreporter.write_line(f"{verdict}  {number:>2}. {title}")
