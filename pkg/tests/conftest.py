import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile(
    "default", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")

VERDICTS = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[VERDICTS] = []


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(VERDICTS, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture
def verdict(request):
    """Record one ``PASS/FAIL/SKIP criterion N: detail`` line; returns ``ok``."""

    def record(number: int, ok: bool | None, detail: str) -> bool | None:
        tag = "SKIP" if ok is None else ("PASS" if ok else "FAIL")
        line = f"{tag} criterion {number}: {detail}"
        print(line)
        request.config.stash[VERDICTS].append(line)
        return ok

    return record


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def fig1_graph():
    """Four users, five items, mixed signs; contains u1<-i1<-u3<-i4 and u1<-i3<-u2.

    Index k stands for node k+1 (u1 is user 0, i4 is item 3).
    """
    from signrec.graph import SignedBipartiteGraph

    edges = [
        (0, 0, 1),  # u1 + i1
        (0, 2, 1),  # u1 + i3
        (1, 2, -1),  # u2 - i3
        (1, 1, 1),  # u2 + i2
        (2, 0, 1),  # u3 + i1
        (2, 3, -1),  # u3 - i4
        (3, 4, 1),  # u4 + i5
        (3, 3, 1),  # u4 + i4
        (1, 4, -1),  # u2 - i5
    ]
    u, i, s = zip(*edges)
    return SignedBipartiteGraph.from_edges(4, 5, u, i, s)
