import contextlib

import pytest

_LINES = pytest.StashKey[list]()


class _Criterion:
    def __init__(self, number, title):
        self.number, self.title = number, title
        self.details = []
        self.passed = True

    def check(self, ok, detail):
        self.details.append(("" if ok else "NOT MET: ") + detail)
        self.passed &= bool(ok)

    def line(self, error=None):
        status = "PASS" if self.passed and error is None else "FAIL"
        details = "; ".join(self.details + ([f"error: {error!r}"] if error is not None else []))
        return f"[{status}] criterion {self.number:>2} {self.title}: {details}"


@pytest.fixture
def criterion(request):
    """Context manager that records one pass/fail line per acceptance criterion.

    Checks are accumulated with ``c.check(ok, detail)``; the test fails at the
    end of the block if any check failed.
    """
    lines = request.config.stash.setdefault(_LINES, [])

    @contextlib.contextmanager
    def run(number, title):
        c = _Criterion(number, title)
        try:
            yield c
        except Exception as e:
            lines.append(c.line(error=e))
            print(lines[-1])
            raise
        lines.append(c.line())
        print(lines[-1])
        assert c.passed, lines[-1]

    return run


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for ln in sorted(lines, key=lambda s: int(s.split("criterion")[1].split()[0])):
            terminalreporter.write_line(ln)
