import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from rpimc.geometry import generate_regular_grid, tag_boundaries

settings.register_profile(
    "repo", derandomize=True, deadline=None, max_examples=40,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("repo")

BACKENDS = ["python"]
try:
    from rpimc import _kernels  # noqa: F401

    BACKENDS.append("compiled")
except ImportError:
    pass


@pytest.fixture(params=BACKENDS)
def backend(request):
    return request.param


@pytest.fixture
def square_cloud():
    return generate_regular_grid(((0.0, 0.0), (1.0, 1.0)), 0.1)


@pytest.fixture
def cube_cloud():
    return generate_regular_grid(((0.0, 0.0, 0.0), (np.pi,) * 3), np.pi / 10)


def mixed_tags(dim):
    if dim == 2:
        return {"x-": "dirichlet", "x+": "neumann", "y-": "neumann", "y+": "dirichlet"}
    return {"x-": "dirichlet", "x+": "neumann", "y-": "neumann", "y+": "neumann",
            "z-": "neumann", "z+": "dirichlet"}


def mixed_cloud(dim, n):
    box = ((0.0,) * dim, (1.0,) * dim)
    return tag_boundaries(generate_regular_grid(box, 1.0 / (n - 1)), mixed_tags(dim))


ACCEPTANCE_LINES = []


@pytest.fixture
def acceptance():
    def record(number, ok, detail):
        ACCEPTANCE_LINES.append(f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
