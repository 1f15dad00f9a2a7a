import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def rel_err(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)))


def tiny_config(**kw):
    from macnet.network import NetworkConfig
    base = dict(patch_size=8, channels=(2, 3), n_categories=3, n_attributes=2, hidden=5)
    base.update(kw)
    return NetworkConfig(**base)


def full_loss_gradient_errors(net, X, y, A, indices=None):
    """Max relative error between backprop and central differences, per parameter.

    ``indices`` maps a parameter name to the flat coordinates to probe; all
    coordinates are probed when it is None or the name is absent.
    """
    from macnet import tensor as T
    from macnet.network import compute_loss, forward

    def loss_value():
        with T.no_grad():
            return float(compute_loss(forward(net, X), y, A, net.cfg).total.data)

    net.zero_grad()
    compute_loss(forward(net, X), y, A, net.cfg).total.backward()
    errors = {}
    for name, p in net.params.items():
        coords = None
        if indices is not None and name in indices:
            coords = [np.unravel_index(i, p.shape) for i in indices[name]]
        num = T.numerical_gradient(loss_value, p, eps=1e-5, indices=coords)
        mask = ~np.isnan(num)
        a, b = p.grad[mask], num[mask]
        scale = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-6)
        errors[name] = float(np.max(np.abs(a - b) / scale))
    net.zero_grad()
    return errors


# acceptance reporting -------------------------------------------------------------

ACCEPTANCE = pytest.StashKey[dict]()
N_CRITERIA = 11


def pytest_configure(config):
    config.stash[ACCEPTANCE] = {}


@pytest.fixture
def record_criterion(request):
    """Store one acceptance outcome; printed in the terminal summary."""
    def record(number, name, passed, detail):
        request.config.stash[ACCEPTANCE][number] = (name, bool(passed), detail)
    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash.get(ACCEPTANCE, {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, N_CRITERIA + 1):
        if n in results:
            name, passed, detail = results[n]
            terminalreporter.write_line(f"criterion {n:2d} {'PASS' if passed else 'FAIL'}  {name}: {detail}")
        else:
            terminalreporter.write_line(f"criterion {n:2d} FAIL  not evaluated (test errored or was deselected)")
