import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from so3stab.ingest import synth_signal
from so3stab.sphere import EquiangularGrid

settings.register_profile(
    "default",
    deadline=None,
    max_examples=30,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.data_too_large],
)
settings.load_profile("default")


@pytest.fixture
def grid32():
    return EquiangularGrid(32, 32)


@pytest.fixture
def grid16():
    return EquiangularGrid(16, 16)


def smooth(grid, seed=0, features=1):
    return synth_signal("gaussian_mixture", grid, seed=seed, features=features)


def unit_vectors(rng, n):
    v = rng.standard_normal((n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def live_network(features, x, q, seed=0, floor=1e-2, **kw):
    """First seeded ReLU net from ``seed`` on whose output on ``x`` is not (nearly) zero.

    Random-sign filters often leave every ReLU unit off; such a net passes any
    equivariance or stability check vacuously.
    """
    from so3stab.scnn import forward, random_network
    from so3stab.sphere import norm

    for s in range(seed, seed + 50):
        net = random_network(features, seed=s, **kw)
        if norm(forward(net, x, q)) >= floor * norm(x):
            return net
    raise RuntimeError("no live network found")


ACCEPTANCE_LINES: list[str] = []


class criterion:
    """Context manager recording one PASS/FAIL line per acceptance criterion."""

    def __init__(self, number: int, title: str):
        self.number, self.title, self.detail = number, title, ""

    def __enter__(self):
        return self

    def __exit__(self, kind, exc, tb):
        status = "PASS" if kind is None else "FAIL"
        why = self.detail if kind is None else f"{self.detail} {exc!s}".strip().splitlines()[0]
        line = f"criterion {self.number} ({self.title}): {status}" + (f" - {why}" if why else "")
        ACCEPTANCE_LINES.append(line)
        print(line)
        return False


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
