import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from aplmerge import toylab
from aplmerge.store import TensorMap

settings.register_profile("default", max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def random_map(rng, shapes, dtype=np.float64):
    return TensorMap({n: rng.standard_normal(s).astype(dtype) for n, s in shapes.items()})


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_lab():
    """A small pretrained-free toy setup: spec, base, two tasks and their fine-tunes."""
    spec = toylab.ToyNetSpec(8, 3, (6, 5), seed=3)
    tasks = toylab.make_tasks(2, toylab.TaskTemplate(8, 3, 3.0, 1.0, 120, 120, 4), seed=3)
    base = toylab.init_net(spec)
    fines = [toylab.train(base, spec, t.train, 40, 0.3) for t in tasks]
    return spec, base, tasks, fines


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    if mod and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(mod.RESULTS, key=lambda l: int(l.split()[0][2:])):
            terminalreporter.write_line(line)
