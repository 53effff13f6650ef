import hypothesis
import numpy as np
import pytest

np.seterr(all="warn", under="ignore")

hypothesis.settings.register_profile("default", max_examples=60, deadline=None)
hypothesis.settings.register_profile("fast", max_examples=10, deadline=None)
hypothesis.settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def smooth_image(width, height, seed=0, channels=1):
    """Band-limited random texture in [0, 1]."""
    r = np.random.default_rng(seed)
    v, u = np.mgrid[0:height, 0:width] / max(width, height)
    img = np.full((height, width), 0.5)
    for _ in range(4):
        fx, fy, ph = r.uniform(1, 5), r.uniform(1, 5), r.uniform(0, 2 * np.pi)
        img += 0.1 * np.sin(2 * np.pi * (fx * u + fy * v) + ph)
    img = np.clip(img, 0, 1)
    if channels == 3:
        img = np.stack([img, img[::-1], img[:, ::-1]], axis=-1)
    return img


ACCEPTANCE_LINES = []


@pytest.fixture
def criterion(request):
    """Record a one-line PASS/FAIL verdict; the lines are repeated in the terminal summary."""

    def record(number, name, ok, detail):
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {name} -- {detail}"
        print(line)
        ACCEPTANCE_LINES.append(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
