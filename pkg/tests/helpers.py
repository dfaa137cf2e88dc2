"""Shared finite-difference gradient oracle for the test suite."""

import torch


def central_difference(fn, params, step=1e-5):
    """Finite-difference gradient of ``fn()`` w.r.t. every entry of ``params``."""
    grads = []
    with torch.no_grad():
        for p in params:
            g = torch.zeros_like(p)
            flat, gflat = p.view(-1), g.view(-1)
            for i in range(flat.numel()):
                old = flat[i].item()
                flat[i] = old + step
                up = fn().item()
                flat[i] = old - step
                down = fn().item()
                flat[i] = old
                gflat[i] = (up - down) / (2 * step)
            grads.append(g)
    return grads


def assert_gradients_match(fn, module, rtol=1e-4, floor=1e-6):
    params = list(module.parameters())
    module.zero_grad()
    fn().backward()
    # parameters the loss never touches have no .grad; their true gradient is zero
    analytic = [torch.zeros_like(p) if p.grad is None else p.grad.detach().clone() for p in params]
    numeric = central_difference(fn, params)
    worst = 0.0
    for a, n in zip(analytic, numeric):
        rel = (a - n).abs() / torch.maximum(torch.maximum(a.abs(), n.abs()), torch.tensor(floor, dtype=a.dtype))
        worst = max(worst, float(rel.max()))
    assert worst <= rtol, worst
    return worst
