"""Shared test utilities: central-difference gradient checking."""

import numpy as np
import torch


def finite_difference_check(module, loss_fn, n_probe=60, h=1e-5, seed=0):
    """Probe `n_probe` random parameters of `module` (double precision) and
    compare analytic gradients of `loss_fn()` with central differences.

    Returns the list of relative errors, |num - ana| / max(|num|, |ana|, 1e-8).
    `loss_fn` must be deterministic and close over the module.
    """
    params = [p for p in module.parameters() if p.requires_grad]
    module.zero_grad()
    loss = loss_fn()
    loss.backward()

    rng = np.random.default_rng(seed)
    sizes = np.array([p.numel() for p in params])
    probs = sizes / sizes.sum()
    errors = []
    for _ in range(n_probe):
        pi = rng.choice(len(params), p=probs)
        param = params[pi]
        flat_idx = int(rng.integers(param.numel()))
        idx = np.unravel_index(flat_idx, param.shape)
        analytic = float(param.grad[idx])

        original = float(param.data[idx])
        with torch.no_grad():
            param.data[idx] = original + h
            loss_plus = float(loss_fn())
            param.data[idx] = original - h
            loss_minus = float(loss_fn())
            param.data[idx] = original
        numeric = (loss_plus - loss_minus) / (2.0 * h)
        errors.append(abs(numeric - analytic) / max(abs(numeric), abs(analytic), 1e-8))
    return errors


def fraction_within(errors, tol):
    return sum(e < tol for e in errors) / len(errors)
