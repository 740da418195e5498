import numpy as np
import pytest
import torch


def finite_difference_check(fn, params, step=1e-5, rel_tol=1e-4, n_coords=None, seed=0):
    """Compare autograd gradients of scalar ``fn()`` against central differences.

    Checks every coordinate, or ``n_coords`` random ones per parameter.
    Returns the worst relative error ``|a - n| / max(|a|, |n|, 1e-6)``; the floor
    keeps vanishing gradients from turning roundoff into large ratios.
    """
    rng = np.random.default_rng(seed)
    for p in params:
        p.grad = None
    loss = fn()
    loss.backward()
    worst = 0.0
    for p in params:
        g = p.grad.detach().clone().reshape(-1)
        flat = p.data.reshape(-1)
        coords = range(flat.numel()) if n_coords is None else rng.choice(flat.numel(), min(n_coords, flat.numel()), replace=False)
        for i in coords:
            orig = flat[i].item()
            with torch.no_grad():
                flat[i] = orig + step
                up = fn().item()
                flat[i] = orig - step
                down = fn().item()
                flat[i] = orig
            num = (up - down) / (2 * step)
            a = g[i].item()
            worst = max(worst, abs(a - num) / max(abs(a), abs(num), 1e-6))
    return worst


@pytest.fixture
def fd_check():
    return finite_difference_check


# -- acceptance summary --

ACCEPTANCE: dict[int, tuple[bool, str, str]] = {}


def record_acceptance(number: int, title: str, ok: bool, detail: str) -> None:
    ACCEPTANCE[number] = (ok, title, detail)
    print(f"{'PASS' if ok else 'FAIL'} [{number}] {title}: {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        ok, title, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} [{number}] {title}: {detail}")
