from __future__ import annotations

import numpy as np
import pytest

from adsgd.topology import BaseTopology, ConnectivityGraph, build_base


@pytest.fixture
def ring9() -> ConnectivityGraph:
    return build_base(BaseTopology("ring", 9))


def circulant_ring_mh(m: int) -> np.ndarray:
    """Independent construction of the static m-ring Metropolis-Hastings matrix."""
    w = np.zeros((m, m))
    for i in range(m):
        w[i, (i + 1) % m] = w[i, (i - 1) % m] = 1.0 / 3.0
        w[i, i] = 1.0 / 3.0
    return w


def slem_gap(w: np.ndarray) -> float:
    ev = np.sort(np.abs(np.linalg.eigvals(w)))[::-1]
    return float(1.0 - ev[1])


_ACCEPTANCE_LINES: dict[str, str] = {}


class AcceptanceLog:
    """Collects one pass/fail line per criterion; printed at the end of the session."""

    def record(self, key: str, ok: bool, detail: str) -> bool:
        line = f"criterion {key}: {'PASS' if ok else 'FAIL'}  {detail}"
        _ACCEPTANCE_LINES[key] = line
        print(line)
        return ok


@pytest.fixture(scope="session")
def acceptance() -> AcceptanceLog:
    return AcceptanceLog()


def _criterion_order(key: str):
    num, _, rest = key.partition(" ")
    return (int(num.rstrip("abcdefgh")), key)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_ACCEPTANCE_LINES, key=_criterion_order):
        terminalreporter.write_line(_ACCEPTANCE_LINES[key])
