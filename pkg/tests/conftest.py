import json
from pathlib import Path

import pytest
from hypothesis import settings

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture
def fixture_dir():
    return FIXTURES


@pytest.fixture
def write_json(tmp_path):
    def _write(name, obj):
        path = tmp_path / name
        path.write_text(json.dumps(obj))
        return path

    return _write


# acceptance bookkeeping: one aggregated pass/fail line per criterion

_CRITERIA = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[_CRITERIA] = {}


@pytest.fixture
def criterion(request):
    """``check(number, title, ok, detail)`` records a sub-result and asserts it."""
    results = request.config.stash[_CRITERIA]

    def check(number, title, ok, detail=""):
        entry = results.setdefault(number, {"title": title, "ok": True, "details": []})
        entry["ok"] = entry["ok"] and bool(ok)
        entry["details"].append(f"{'pass' if ok else 'FAIL'}: {detail}")
        print(f"criterion {number} [{title}] {'PASS' if ok else 'FAIL'}: {detail}")
        assert ok, detail

    return check


def pytest_terminal_summary(terminalreporter, config):
    results = config.stash.get(_CRITERIA, {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        entry = results[number]
        verdict = "PASS" if entry["ok"] else "FAIL"
        terminalreporter.write_line(f"criterion {number:>2} {verdict}  {entry['title']}  ({'; '.join(entry['details'])})")
