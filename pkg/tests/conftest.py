import pytest

ACCEPTANCE = []


@pytest.fixture
def criterion(request):
    """Record one acceptance line: ``criterion(ok, detail)``; prints it and keeps it for the summary."""
    label = request.node.get_closest_marker("criterion").args[0]
    capman = request.config.pluginmanager.getplugin("capturemanager")

    def record(ok, detail):
        line = f"[{'PASS' if ok else 'FAIL'}] {label}: {detail}"
        ACCEPTANCE.append(line)
        with capman.global_and_fixture_disabled():
            print("\n" + line)
        return ok

    return record


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(label): acceptance criterion reported in the summary")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split("]")[1].split(".")[0])):
            terminalreporter.write_line(line)
