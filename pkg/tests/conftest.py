import pytest

from tubeox.meshgen import generate, preset_geometry

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def coarse_inline_mesh():
    return generate(preset_geometry("inline", "coarse"))


@pytest.fixture(scope="session")
def coarse_staggered_mesh():
    return generate(preset_geometry("staggered", "coarse"))


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
