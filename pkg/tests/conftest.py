import time
from contextlib import contextmanager

import pytest

_VERDICTS: dict[str, str] = {}


class Verdict:
    """Collects the outcome line of one acceptance criterion."""

    def __init__(self, key: str, title: str):
        self.key, self.title = key, title
        self.details: list[str] = []

    def note(self, text: str) -> None:
        self.details.append(text)


@contextmanager
def _record(key: str, title: str):
    v = Verdict(key, title)
    t0 = time.perf_counter()
    status = "FAIL"
    try:
        yield v
        status = "PASS"
    finally:
        extra = "; ".join(v.details)
        _VERDICTS[key] = f"criterion {key} [{status}] {title}: {extra} ({time.perf_counter() - t0:.1f} s)"


@pytest.fixture
def criterion():
    return _record


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_VERDICTS, key=lambda k: (int(k.rstrip("ab")), k)):
        terminalreporter.write_line(_VERDICTS[key])
