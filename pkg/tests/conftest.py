import numpy as np
import pytest
import torch

torch.set_num_threads(1)


def _coordinate_fd(loss_fn, param, flat_index, eps):
    flat = param.data.view(-1)
    old = flat[flat_index].item()
    flat[flat_index] = old + eps
    hi = loss_fn()
    flat[flat_index] = old - eps
    lo = loss_fn()
    flat[flat_index] = old
    return (hi - lo) / (2 * eps)


@pytest.fixture
def fd_check():
    """Compare autograd against central differences at sampled coordinates.

    Returns a list of relative errors, one per (parameter, coordinate).
    """

    def run(model, loss_fn, params, per_param=5, seed=0, eps=1e-6, floor=1e-7):
        rng = np.random.default_rng(seed)
        model.zero_grad()
        loss_fn().backward()
        errors = []
        with torch.no_grad():
            for p in params:
                for i in rng.choice(p.numel(), size=min(per_param, p.numel()), replace=False):
                    analytic = p.grad.view(-1)[int(i)].item()
                    numeric = _coordinate_fd(lambda: loss_fn().item(), p, int(i), eps)
                    denom = max(abs(analytic), abs(numeric), floor)
                    errors.append(abs(analytic - numeric) / denom)
        return errors

    return run


ACCEPTANCE_KEY = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[ACCEPTANCE_KEY] = []


@pytest.fixture(scope="session")
def acceptance_log(request):
    return request.config.stash[ACCEPTANCE_KEY]


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE_KEY, [])
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(lines, key=lambda s: int(s.split()[1])):
        terminalreporter.write_line(line)
