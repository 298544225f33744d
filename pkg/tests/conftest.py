import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from mcgdiff.phantoms import make_phantom
from mcgdiff.schedule import make_ve_schedule, make_vp_schedule
from mcgdiff.scores import MlpParams, MlpScore, train_dsm

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def fd_step(x):
    return 1e-5 * (1.0 + np.max(np.abs(x)))


def central_fd(f, x, v=None):
    """Central finite-difference gradient of a scalar ``f`` (or directional derivative along ``v``)."""
    h = fd_step(x)
    if v is not None:
        return (f(x + h * v) - f(x - h * v)) / (2 * h)
    g = np.empty_like(x)
    for k in range(x.size):
        e = np.zeros_like(x)
        e[k] = h
        g[k] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))


@pytest.fixture(scope="session")
def vp1000():
    return make_vp_schedule(1000)


@pytest.fixture(scope="session")
def ve_small():
    return make_ve_schedule(200, 0.01, 20.0)


@pytest.fixture(scope="session")
def random_mlp(vp1000):
    params = MlpParams(hidden=(32, 32), emb_dim=8, iterations=0)
    return MlpScore(12, params, vp1000, rng=3)


@pytest.fixture(scope="session")
def eight_gauss_embedded():
    train = make_phantom("eight-gaussians-2d", 4, 0, count=4000, embed_side=4)["points"]
    test = make_phantom("eight-gaussians-2d", 4, 99, count=30, embed_side=4)["points"]
    return train, test


@pytest.fixture(scope="session")
def trained_mlp(vp1000, eight_gauss_embedded):
    train, _ = eight_gauss_embedded
    return train_dsm(MlpParams(iterations=4000), train, vp1000, seed=1)


ACCEPTANCE_LINES: dict[int, str] = {}


def verdict(number: int, title: str, ok: bool, detail: str) -> None:
    """Record and print a one-line criterion verdict, then assert it."""
    line = f"{'PASS' if ok else 'FAIL'} criterion {number:>2}: {title} | {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)
    assert ok, line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[key])
