import pytest

from mtcnet.data import SceneParams, generate_split


@pytest.fixture(scope="session")
def small_split():
    """Twelve 32px scenes on 8px tiles."""
    return generate_split(4, 12, SceneParams(cell=8, max_vehicles=6), size=32)


@pytest.fixture(scope="session")
def tiny_split():
    """Sixteen 16px scenes on 4px tiles, the bench geometry."""
    return generate_split(5, 16, SceneParams(cell=4, max_vehicles=6), size=16)


VERDICTS: list[str] = []


@pytest.fixture
def verdict(capsys):
    """Print and record one PASS/FAIL line for an acceptance criterion, then assert it."""

    def emit(name: str, ok: bool, detail: str = "") -> None:
        line = f"{name}: {'PASS' if ok else 'FAIL'}" + (f" ({detail})" if detail else "")
        VERDICTS.append(line)
        with capsys.disabled():
            print(f"\n{line}")
        assert ok, line

    return emit


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(VERDICTS, key=lambda s: int(s[1:s.index(":")].split()[0])):
            terminalreporter.write_line(line)
