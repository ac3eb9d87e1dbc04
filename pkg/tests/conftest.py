import re

import numpy as np
import pytest
import torch

torch.set_num_threads(1)

_criteria: dict[int, tuple[str, str]] = {}


def fd_rel_error(fn, tensors, eps=1e-6):
    """Max relative error between autograd and central differences of scalar ``fn()``.

    ``tensors`` are float64 leaves with requires_grad; they are perturbed in place.
    """
    for t in tensors:
        t.grad = None
    fn().backward()
    worst = 0.0
    for t in tensors:
        analytic = t.grad.detach().clone().ravel()
        numeric = torch.zeros_like(analytic)
        flat = t.data.view(-1)
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + eps
            with torch.no_grad():
                hi = fn().item()
            flat[i] = orig - eps
            with torch.no_grad():
                lo = fn().item()
            flat[i] = orig
            numeric[i] = (hi - lo) / (2 * eps)
        denom = max(analytic.norm().item(), numeric.norm().item(), 1e-12)
        worst = max(worst, (analytic - numeric).norm().item() / denom)
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_runtest_logreport(report):
    m = re.search(r"test_acceptance\.py::test_criterion_(\d+)_(\w+)", report.nodeid)
    if not m:
        return
    n, label = int(m.group(1)), m.group(2).replace("_", " ")
    if report.when == "call" or (report.when == "setup" and not report.passed):
        state = "PASS" if report.passed else ("SKIP" if report.skipped else "FAIL")
        _criteria[n] = (label, state)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        label, state = _criteria[n]
        terminalreporter.write_line(f"criterion {n:2d} {state:4s}  {label}")
