import contextlib
import time

import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("repo", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")

_ACCEPT = "_acceptance_lines"


class _Record:
    detail = ""


@pytest.fixture
def criterion(request):
    """Context manager that logs one PASS/FAIL line per acceptance criterion."""
    lines = request.config.__dict__.setdefault(_ACCEPT, [])

    @contextlib.contextmanager
    def run(number, title):
        rec = _Record()
        t0 = time.perf_counter()
        try:
            yield rec
        except BaseException as e:
            msg = str(e).splitlines()[0] if str(e) else type(e).__name__
            lines.append(f"criterion {number} FAIL  {title}: {rec.detail} [{msg}] "
                         f"({time.perf_counter() - t0:.1f}s)")
            raise
        lines.append(f"criterion {number} PASS  {title}: {rec.detail} ({time.perf_counter() - t0:.1f}s)")

    return run


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.__dict__.get(_ACCEPT)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
