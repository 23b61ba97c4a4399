import numpy as np
import pytest

from safepatch.diffusion import DenoiserParams, make_schedule
from safepatch.numeric import Rng
from safepatch.patch import init_patch

# acceptance results, printed again at the end of the run
GATE = {}


def record(name, ok, detail=""):
    line = f"{name} {'PASS' if ok else 'FAIL'} {detail}".rstrip()
    GATE[name] = line
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if not GATE:
        return
    terminalreporter.section("acceptance gate")
    for name in sorted(GATE):
        terminalreporter.write_line(GATE[name])


@pytest.fixture(scope="session")
def base():
    """Untrained float64 base; frozen so tests cannot mutate it by accident."""
    return DenoiserParams.init(0).set_trainable(False)


@pytest.fixture(scope="session")
def schedule():
    return make_schedule()


@pytest.fixture(scope="session")
def short_schedule():
    return make_schedule(4, 1e-4, 0.02)


@pytest.fixture
def fresh_patch(base):
    return init_patch(base, seed=3, category="blob")


def perturbed(patch, seed, scale=0.05):
    """Copy of ``patch`` with every tensor nudged, so the zero convs are live."""
    out = patch.clone()
    rng = Rng(seed)
    for i, (_, t) in enumerate(out.named()):
        t.data = t.data + scale * rng.fold(i).normal(t.size).reshape(t.shape)
    return out


@pytest.fixture
def live_patch(fresh_patch):
    return perturbed(fresh_patch, 11)


def random_images(n, seed=0):
    return np.clip(Rng(seed).normal(n * 256).reshape(n, 1, 16, 16) * 0.5, -1, 1)
