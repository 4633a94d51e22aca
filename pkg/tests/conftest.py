import numpy as np
import pytest

from coupled_diffusion import denoisers as dn
from coupled_diffusion import world
from coupled_diffusion.ddpm import make_schedule


def fd_check(f, arrays, grads, step=1e-5, rtol=1e-4, floor=1e-8):
    """Central differences on every entry of every array; returns the worst violation.

    An entry passes when ``|a - n| <= rtol * max(|a|, |n|)`` or ``|a - n| <= floor``.
    """
    worst = 0.0
    for name, arr in arrays.items():
        g = grads[name]
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = arr[i]
            arr[i] = old + step
            up = f()
            arr[i] = old - step
            down = f()
            arr[i] = old
            num = (up - down) / (2 * step)
            err = abs(num - g[i])
            if err > floor:
                worst = max(worst, err / max(abs(num), abs(g[i])))
    return worst


@pytest.fixture(scope="session")
def tiny_world():
    split = world.gen_dataset(4, 12, seed=0)
    fc = world.train_frozen_classifier(split, epochs=8, seed=0, hidden=(16,))
    return split, fc


@pytest.fixture
def live_bundle(tiny_world):
    """Small bundle with random (non-zero) output layers so every slot matters."""
    split, fc = tiny_world
    b = dn.make_bundle(fc, split.x0, make_schedule("cosine", 12), hidden=(24,), temb_width=8, seed=3)
    rng = np.random.default_rng(11)
    for net in (b.signal_net, b.logit_net):
        net.arrays["Wout"][:] = rng.normal(0.0, 0.05, net.arrays["Wout"].shape)
    return b


@pytest.fixture
def corrupted(tiny_world):
    split, _ = tiny_world
    return world.corrupt_split(split, "pixel30", seed=5).x_cor[:5]


# -- acceptance report ---------------------------------------------------------

_REPORT = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[_REPORT] = {}


@pytest.fixture
def criterion(request):
    """``with criterion(n, text):`` records one PASS/FAIL line for the terminal summary."""
    from contextlib import contextmanager

    report = request.config.stash[_REPORT]

    @contextmanager
    def record(n, text):
        try:
            yield
        except BaseException as exc:
            report[n] = f"criterion {n} FAIL  {text}  ({type(exc).__name__}: {(str(exc).splitlines() or [''])[0][:160]})"
            print(report[n])
            raise
        report[n] = f"criterion {n} PASS  {text}"
        print(report[n])

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    report = config.stash.get(_REPORT, {})
    if report:
        terminalreporter.section("acceptance criteria")
        for n in sorted(report):
            terminalreporter.write_line(report[n])
