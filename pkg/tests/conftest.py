import contextlib
import time

import pytest

_RESULTS = pytest.StashKey[dict]()


@pytest.fixture
def criterion(request):
    """Context manager recording one acceptance criterion as PASS or FAIL."""
    results = request.config.stash.setdefault(_RESULTS, {})

    @contextlib.contextmanager
    def run(number: int, title: str):
        notes: list[str] = []
        t0 = time.perf_counter()
        try:
            yield notes.append
        except BaseException as exc:
            msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
            results[number] = ("FAIL", title, "; ".join(notes + [msg]), time.perf_counter() - t0)
            raise
        results[number] = ("PASS", title, "; ".join(notes), time.perf_counter() - t0)

    return run


def pytest_terminal_summary(terminalreporter, config):
    results = config.stash.get(_RESULTS, {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        status, title, detail, secs = results[n]
        terminalreporter.write_line(f"criterion {n} {status}: {title} ({secs:.1f} s) {detail}".rstrip())
