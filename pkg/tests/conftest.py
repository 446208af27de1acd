import numpy as np
import pytest

from replayseg.model import init_model
from replayseg.types import IGNORE, Rng, Sample


def make_sample(sid, labels, task_id=0, image=None, seed=None):
    labels = np.asarray(labels, dtype=np.uint8)
    if image is None:
        g = np.random.default_rng(sid if seed is None else seed)
        image = g.random((3,) + labels.shape).astype(np.float32)
    return Sample(id=sid, image=np.asarray(image, dtype=np.float32), labels=labels, task_id=task_id)


def one_class_sample(sid, cls, shape=(4, 4), task_id=0):
    return make_sample(sid, np.full(shape, cls), task_id=task_id)


def random_labels(g, shape, num_classes, ignore_frac=0.2):
    y = g.integers(0, num_classes, size=shape).astype(np.uint8)
    y[g.random(shape) < ignore_frac] = IGNORE
    return y


@pytest.fixture
def g():
    return np.random.default_rng(1234)


@pytest.fixture
def small_model():
    return init_model(5, Rng(3), patch_size=3, hidden=(8, 6), dtype=np.float64)


ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def criterion(request):
    """Record one acceptance line; returns the verdict so the test can assert on it."""
    lines = request.config.stash.setdefault(ACCEPTANCE, [])

    def record(cid, ok, detail):
        line = f"criterion {cid:<4} {'PASS' if ok else 'FAIL'}  {detail}"
        lines.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
