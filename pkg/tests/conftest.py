import numpy as np
import pytest
import torch


def central_difference(fn, tensors, eps=1e-6):
    """Numerical gradient of scalar ``fn()`` w.r.t. each tensor, perturbing in place."""
    grads = []
    for x in tensors:
        g = torch.zeros_like(x)
        flat = x.data.view(-1)
        gflat = g.view(-1)
        for k in range(flat.numel()):
            orig = flat[k].item()
            flat[k] = orig + eps
            up = float(fn())
            flat[k] = orig - eps
            down = float(fn())
            flat[k] = orig
            gflat[k] = (up - down) / (2 * eps)
        grads.append(g)
    return grads


def autograd_grads(fn, tensors):
    for x in tensors:
        x.grad = None
        x.requires_grad_(True)
    out = fn()
    return list(torch.autograd.grad(out, tensors))


def relative_error(a, b):
    a = torch.cat([x.reshape(-1) for x in a])
    b = torch.cat([x.reshape(-1) for x in b])
    denom = max(a.norm().item(), b.norm().item(), 1e-12)
    return (a - b).norm().item() / denom


def gradient_relative_error(fn, tensors, eps=1e-6):
    analytic = autograd_grads(fn, tensors)
    with torch.no_grad():
        numeric = central_difference(fn, tensors, eps)
    return relative_error(analytic, numeric)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def gen():
    return torch.Generator().manual_seed(1234)
