import numpy as np
import pytest
import torch

torch.set_default_dtype(torch.float64)

_criteria: dict[int, tuple[str, list[str]]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion checked by this test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    if rep.when == "call" or (rep.when == "setup" and rep.outcome != "passed"):
        number, title = mark.args
        _criteria.setdefault(number, (title, []))[1].append(rep.outcome)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        title, outcomes = _criteria[number]
        status = "PASS" if outcomes and all(o == "passed" for o in outcomes) else "FAIL"
        terminalreporter.write_line(f"[{status}] criterion {number}: {title}")


def chain_path(users, start_time=0.0, step=10.0):
    """Participants of a path cascade users[0] -> users[1] -> ..."""
    return [(users[i], users[i + 1], start_time + step * i) for i in range(len(users) - 1)]


def numeric_grad(fn, tensors, eps=1e-6):
    """Central finite differences of scalar ``fn()`` with respect to each tensor, in place."""
    grads = []
    for t in tensors:
        g = torch.zeros_like(t)
        flat, gflat = t.data.view(-1), g.view(-1)
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + eps
            hi = fn().item()
            flat[i] = orig - eps
            lo = fn().item()
            flat[i] = orig
            gflat[i] = (hi - lo) / (2 * eps)
        grads.append(g)
    return grads


def check_gradients(fn, tensors, tol=1e-4):
    """Norm-wise relative error between autograd and finite differences for every tensor."""
    for t in tensors:
        t.grad = None
    out = fn()
    analytic = torch.autograd.grad(out, tensors, allow_unused=True)
    numeric = numeric_grad(fn, tensors)
    worst = 0.0
    for a, n, t in zip(analytic, numeric, tensors):
        a = torch.zeros_like(t) if a is None else a
        denom = max(a.norm().item(), n.norm().item())
        if denom < 1e-8:
            continue
        err = (a - n).norm().item() / denom
        worst = max(worst, err)
        assert err < tol, f"gradient mismatch for tensor of shape {tuple(t.shape)}: rel err {err:.3e}"
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
