import pytest

ACCEPTANCE_LINES: dict[int, str] = {}


@pytest.fixture
def report_criterion(request):
    """Record and immediately print the verdict line of an acceptance criterion."""
    capman = request.config.pluginmanager.getplugin("capturemanager")

    def record(number: int, outcome) -> None:
        line = f"criterion {number:2d} {outcome.line()}"
        ACCEPTANCE_LINES[number] = line
        with capman.global_and_fixture_disabled():
            print("\n" + line, flush=True)

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
