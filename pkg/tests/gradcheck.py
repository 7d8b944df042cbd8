"""Shared central-finite-difference gradient harness for the test suite.

Probes a sample of parameter entries per tensor. Entries that miss at the
primary step are re-verified at a smaller step before counting as failures:
rectifier kinks within one step of the evaluation point invalidate the
Taylor expansion behind central differences, while a genuine gradient bug
stays wrong at every step.
"""

import numpy as np
import torch


def fd_gradient_check(loss_fn, named_params, n_per_tensor=2, eps=1e-4,
                      rtol=1e-3, retry_eps=1e-6, seed=0):
    """Returns (worst_rel_error, failures) over sampled parameter entries."""
    loss = loss_fn()
    for _, p in named_params:
        if p.grad is not None:
            p.grad = None
    loss.backward()
    rng = np.random.default_rng(seed)
    worst = 0.0
    failures = []
    for name, p in named_params:
        flat = p.data.view(-1)
        grad = p.grad.reshape(-1) if p.grad is not None else torch.zeros_like(flat)
        count = min(n_per_tensor, flat.numel())
        for i in rng.choice(flat.numel(), size=count, replace=False):
            analytic = grad[i].item()
            rel = _probe(loss_fn, flat, int(i), analytic, eps)
            if rel > rtol:
                rel = _probe(loss_fn, flat, int(i), analytic, retry_eps)
            worst = max(worst, rel)
            if rel > rtol:
                failures.append((name, int(i), analytic, rel))
    return worst, failures


def _probe(loss_fn, flat, i, analytic, eps):
    orig = flat[i].item()
    with torch.no_grad():
        flat[i] = orig + eps
        up = loss_fn().item()
        flat[i] = orig - eps
        down = loss_fn().item()
        flat[i] = orig
    fd = (up - down) / (2.0 * eps)
    return abs(analytic - fd) / max(abs(analytic), abs(fd), 1e-6)
