"""Shared fixtures: a disk cache for expensive Monte Carlo results.

Cache entries are keyed by the scenario description plus a digest of the
library modules that produce the numbers, so any change to the engine
invalidates them.  Delete ``tests/.mc_cache`` to force recomputation.
"""

import hashlib
import json
import os
from pathlib import Path

import pytest
from hypothesis import settings

# numba compilation and a busy CPU make per-example timing meaningless
settings.register_profile("default", deadline=None)
settings.load_profile("default")

CACHE_DIR = Path(__file__).parent / ".mc_cache"
_ENGINE_MODULES = ("data.py", "forest.py", "inference.py", "seeding.py", "simulation.py",
                   "stattests.py")

ACCEPTANCE_LINES = []


def engine_digest() -> str:
    import rfadjust

    root = Path(rfadjust.__file__).parent
    h = hashlib.sha256()
    for name in _ENGINE_MODULES:
        h.update(name.encode())
        h.update((root / name).read_bytes())
    return h.hexdigest()


def cached(kind: str, params: dict, compute):
    """Return ``compute()`` (a JSON-serializable value), memoized on disk."""
    if os.environ.get("RFADJUST_NO_CACHE"):
        return compute()
    blob = json.dumps({"kind": kind, "params": params, "engine": engine_digest()},
                      sort_keys=True)
    key = hashlib.sha256(blob.encode()).hexdigest()[:24]
    path = CACHE_DIR / f"{kind}-{key}.json"
    if path.exists():
        return json.loads(path.read_text())["value"]
    value = compute()
    CACHE_DIR.mkdir(exist_ok=True)
    tmp = path.with_suffix(".tmp")
    tmp.write_text(json.dumps({"kind": kind, "params": params, "value": value}, indent=1))
    tmp.replace(path)
    return value


def cached_scenario(config):
    """Rejection rates and MC standard errors of a simulation scenario."""
    from rfadjust.simulation import run_scenario

    def compute():
        res = run_scenario(config)
        return {"rate": res.rejection_rate, "se": res.mc_std_error,
                "n": res.n_reps_completed, "wall": res.wall_time}

    return cached("scenario", config.to_dict(), compute)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture
def report():
    """Record one PASS/FAIL line for an acceptance criterion."""

    def _report(number, passed, detail):
        line = f"criterion {number}: {'PASS' if passed else 'FAIL'} - {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return passed

    return _report
