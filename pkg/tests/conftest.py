import pytest

from bsarec.data import corpus_from_sequences

_ACCEPTANCE_LINES: list[str] = []


def memorization_sequences() -> dict:
    """10 users walking one global 20-item cycle from different offsets."""
    return {f"u{u}": [f"i{(2 * u + t) % 20 + 1}" for t in range(24)] for u in range(10)}


@pytest.fixture
def toy_corpus():
    return corpus_from_sequences(memorization_sequences())


@pytest.fixture
def record_criterion():
    def _record(number: int, passed: bool, detail: str) -> None:
        _ACCEPTANCE_LINES.append(f"criterion {number}: {'PASS' if passed else 'FAIL'} - {detail}")

    return _record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
