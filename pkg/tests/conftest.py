import pytest

_LINES = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[_LINES] = {}


@pytest.fixture
def criterion(request):
    """Record one pass/fail line for an acceptance criterion; a test that errors out is recorded as FAIL."""
    lines = request.config.stash[_LINES]
    recorded = []

    def record(number, ok, detail):
        line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        lines[number] = line
        recorded.append(number)
        print(line)
        return ok

    record.lines = lines
    yield record
    if not recorded and hasattr(request.node, "criterion_number"):
        n = request.node.criterion_number
        lines.setdefault(n, f"criterion {n:2d}: FAIL  (errored before reporting)")


def pytest_runtest_setup(item):
    marker = item.get_closest_marker("criterion")
    if marker:
        item.criterion_number = marker.args[0]


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash[_LINES]
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(lines):
        terminalreporter.write_line(lines[n])
