import numpy as np
import pytest


def central_difference(fn, x, h=1e-6, order=2):
    """Numerical gradient of scalar ``fn`` wrt array ``x`` (perturbed in place).

    ``order=4`` uses the five-point stencil; only use it on smooth functions.
    """
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    g = grad.reshape(-1)

    def at(i, v):
        flat[i] = v
        return fn()

    for i in range(flat.size):
        orig = flat[i]
        if order == 2:
            g[i] = (at(i, orig + h) - at(i, orig - h)) / (2 * h)
        else:
            g[i] = (
                -at(i, orig + 2 * h) + 8 * at(i, orig + h) - 8 * at(i, orig - h) + at(i, orig - 2 * h)
            ) / (12 * h)
        flat[i] = orig
    return grad


def max_rel_error(a, b):
    scale = max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-12)
    return float(np.max(np.abs(a - b)) / scale)


@pytest.fixture
def np_rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import acceptance_log

    if acceptance_log.RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(acceptance_log.RESULTS):
            terminalreporter.write_line(acceptance_log.RESULTS[n])
