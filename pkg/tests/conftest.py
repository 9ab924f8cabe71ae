import pytest

RESULTS: list[str] = []


@pytest.fixture
def criterion(request):
    """Record one PASS/FAIL line for an acceptance criterion.

    Call with (name, passed, detail); the line is echoed immediately and
    repeated in the terminal summary.
    """
    capman = request.config.pluginmanager.getplugin("capturemanager")

    def record(name: str, passed: bool, detail: str):
        line = f"[{'PASS' if passed else 'FAIL'}] {name}: {detail}"
        RESULTS.append(line)
        with capman.global_and_fixture_disabled():
            print("\n" + line, flush=True)
        assert passed, line

    return record


def pytest_terminal_summary(terminalreporter):
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
