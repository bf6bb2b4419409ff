"""Central finite-difference gradient oracle, independent of autograd."""

import numpy as np
import torch

EPS = 1e-5
# relative error floor: below this gradient magnitude, float64 round-off in
# (f(x+e) - f(x-e)) / 2e dominates and a pure ratio is meaningless
DENOM_FLOOR = 1e-6


def reinit(module, std=0.3, seed=0):
    """Spread parameters out so gradients are well above round-off."""
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            if p.requires_grad:
                p.copy_(torch.randn(p.shape, generator=g, dtype=p.dtype) * std)
    return module


def sample_coordinates(params, n, rng):
    """At least ``n`` (param_index, flat_index) pairs, covering every tensor."""
    sizes = [p.numel() for p in params]
    coords = [(i, int(rng.integers(s))) for i, s in enumerate(sizes)]
    total = sum(sizes)
    flat = rng.choice(total, size=min(total, max(0, n - len(coords))), replace=False)
    offsets = np.cumsum([0] + sizes)
    for f in flat:
        i = int(np.searchsorted(offsets, f, side="right") - 1)
        coords.append((i, int(f - offsets[i])))
    return coords


def max_relative_error(loss_fn, params, n_coords=500, seed=0, eps=EPS):
    """Compare autograd against central differences on sampled coordinates.

    Returns ``(max_rel_err, n_checked)``. ``loss_fn()`` must be deterministic
    and return a scalar tensor in float64.
    """
    params = [p for p in params if p.requires_grad]
    for p in params:
        p.grad = None
    loss = loss_fn()
    assert loss.dtype == torch.float64
    loss.backward()
    grads = [p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p) for p in params]
    rng = np.random.default_rng(seed)
    worst = 0.0
    coords = sample_coordinates(params, n_coords, rng)
    with torch.no_grad():
        for i, j in coords:
            flat = params[i].view(-1)
            orig = flat[j].item()
            flat[j] = orig + eps
            up = loss_fn().item()
            flat[j] = orig - eps
            down = loss_fn().item()
            flat[j] = orig
            numeric = (up - down) / (2 * eps)
            analytic = grads[i].view(-1)[j].item()
            denom = max(abs(numeric), abs(analytic), DENOM_FLOOR)
            worst = max(worst, abs(numeric - analytic) / denom)
    return worst, len(coords)
