"""Central finite differences over every parameter of a small float64 model."""

from __future__ import annotations

import numpy as np
import torch


def param_count(module: torch.nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def check_gradients(module: torch.nn.Module, loss_fn, h: float = 1e-6, rtol: float = 1e-3, atol: float = 1e-7):
    """Compare autograd gradients of ``loss_fn()`` with central differences.

    ``loss_fn`` must be deterministic and read parameters from ``module``.
    Returns the number of parameters checked.
    """
    params = [p for p in module.parameters() if p.requires_grad]
    module.zero_grad(set_to_none=True)
    loss_fn().backward()
    analytic = [p.grad.detach().clone().reshape(-1) for p in params]
    checked = 0
    with torch.no_grad():
        for p, grad in zip(params, analytic):
            flat = p.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                up = loss_fn().item()
                flat[i] = orig - h
                down = loss_fn().item()
                flat[i] = orig
                numeric = (up - down) / (2 * h)
                np.testing.assert_allclose(grad[i].item(), numeric, rtol=rtol, atol=atol,
                                           err_msg=f"parameter element {i} of shape {tuple(p.shape)}")
                checked += 1
    return checked
