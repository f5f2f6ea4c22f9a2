from __future__ import annotations

from typing import Callable, Iterable, List, Tuple

import numpy as np
import pytest
import torch
from hypothesis import settings

from nircolor.data import PairedImages, scan_dataset
from nircolor.synthetic import write_toy_dataset

torch.set_num_threads(1)
settings.register_profile("repro", derandomize=True, deadline=None)
settings.load_profile("repro")

_ACCEPTANCE: List[Tuple[str, bool, str]] = []


def fd_relative_error(loss_fn: Callable[[], torch.Tensor], tensors: Iterable[torch.Tensor],
                      n_coords: int = 8, eps: float = 1e-6, seed: int = 0) -> float:
    """Worst relative gap between autograd and central differences.

    For each tensor, ``n_coords`` random entries are perturbed by +-eps and the
    numeric derivative compared with the analytic one; the error per tensor is
    ||analytic - numeric|| / max(||analytic||, ||numeric||).
    """
    tensors = list(tensors)
    rng = np.random.default_rng(seed)
    for t in tensors:
        t.grad = None
    loss = loss_fn()
    grads = torch.autograd.grad(loss, tensors, allow_unused=True)
    worst = 0.0
    for t, g in zip(tensors, grads):
        g = torch.zeros_like(t) if g is None else g
        flat = t.data.view(-1)
        idx = rng.choice(flat.numel(), size=min(n_coords, flat.numel()), replace=False)
        analytic, numeric = [], []
        for i in idx:
            orig = flat[i].item()
            with torch.no_grad():
                flat[i] = orig + eps
                up = loss_fn().item()
                flat[i] = orig - eps
                down = loss_fn().item()
                flat[i] = orig
            numeric.append((up - down) / (2 * eps))
            analytic.append(g.reshape(-1)[i].item())
        a, n = np.array(analytic), np.array(numeric)
        scale = max(np.linalg.norm(a), np.linalg.norm(n))
        if scale < 1e-10:
            continue
        worst = max(worst, float(np.linalg.norm(a - n) / scale))
    return worst


@pytest.fixture
def toy_root(tmp_path):
    return write_toy_dataset(tmp_path / "toy", n_train=4, n_test=3, size=64, seed=0)


@pytest.fixture
def toy_data(toy_root):
    return PairedImages.from_index(scan_dataset(toy_root))


@pytest.fixture
def record_criterion():
    def record(name: str, passed: bool, detail: str = "") -> None:
        _ACCEPTANCE.append((name, passed, detail))
    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, passed, detail in _ACCEPTANCE:
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  {name}  {detail}")
