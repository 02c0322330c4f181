import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("ci", max_examples=25, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "ci"))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_CRITERIA: dict[str, list[tuple[str, bool, str]]] = {}


@pytest.fixture
def criterion():
    """Record one part of an acceptance criterion; a summary line per criterion is printed at the end."""

    def record(label: str, part: str, ok: bool, detail: str = "") -> bool:
        _CRITERIA.setdefault(label, []).append((part, bool(ok), detail))
        print(f"{label} [{part}] {'PASS' if ok else 'FAIL'} {detail}")
        return bool(ok)

    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for label in sorted(_CRITERIA):
        parts = _CRITERIA[label]
        ok = all(p[1] for p in parts)
        desc = "; ".join(f"{p}: {'PASS' if o else 'FAIL'}{' (' + d + ')' if d else ''}" for p, o, d in parts)
        tr.write_line(f"{'PASS' if ok else 'FAIL'}  {label}  {desc}")
