import threading
from pathlib import Path

import pytest

from ergmark.power import now_ns


class CounterFixture:
    """Writes a microjoule energy counter file for a programmed wattage.

    The file is refreshed at ``update_hz``, so the energy seen by a poller is
    a staircase (sawtooth against the ideal ramp) around ``watts * t``.
    """

    def __init__(self, path: Path, watts: float, update_hz: float = 50.0,
                 start_uj: int = 0, max_range: int | None = None):
        self.path = path
        self.watts = watts
        self.period = 1.0 / update_hz
        self.start_uj = start_uj
        self.max_range = max_range
        self._stop = threading.Event()
        self._t0 = now_ns()
        self._write()
        self._thread = threading.Thread(target=self._loop, daemon=True)

    def energy_uj(self) -> int:
        e = self.start_uj + int(self.watts * (now_ns() - self._t0) / 1e3)
        return e % self.max_range if self.max_range else e

    def _write(self):
        tmp = self.path.with_suffix(".tmp")
        tmp.write_text(f"{self.energy_uj()}\n")
        tmp.replace(self.path)

    def _loop(self):
        while not self._stop.wait(self.period):
            self._write()

    def __enter__(self):
        self._thread.start()
        return self

    def __exit__(self, *exc):
        self._stop.set()
        self._thread.join()


@pytest.fixture
def counter_file(tmp_path):
    def make(watts, **kw):
        return CounterFixture(tmp_path / "energy_uj", watts, **kw)

    return make


_ACCEPTANCE_KEY = pytest.StashKey[dict]()


@pytest.fixture
def acceptance(request):
    """Record one pass/fail line per acceptance criterion."""
    results = request.config.stash.setdefault(_ACCEPTANCE_KEY, {})

    def record(number: int, title: str, ok: bool, detail: str) -> None:
        line = f"criterion {number} {'PASS' if ok else 'FAIL'}: {title} ({detail})"
        results[number] = line
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash.get(_ACCEPTANCE_KEY, {})
    if results:
        terminalreporter.section("acceptance criteria")
        for number in sorted(results):
            terminalreporter.write_line(results[number])
