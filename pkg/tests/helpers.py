"""Independent oracles and small fixtures shared by the test modules."""

import numpy as np
import torch

from gncaf.tiling import TileGrid


def random_grid(rows, cols, seed, density=0.6) -> TileGrid:
    """Random foreground pattern with at least one foreground tile."""
    rng = np.random.default_rng(seed)
    fg = rng.random((rows, cols)) < density
    if not fg.any():
        fg[rng.integers(rows), rng.integers(cols)] = True
    return TileGrid("rand", rows, cols, 4, fg)


def dense_norm_adj(grid: TileGrid) -> np.ndarray:
    """D^-1/2 (A + I) D^-1/2 built by scanning every pair of foreground cells."""
    coords = grid.coords
    n = len(coords)
    a = np.eye(n)
    for i in range(n):
        for j in range(n):
            if abs(coords[i][0] - coords[j][0]) + abs(coords[i][1] - coords[j][1]) == 1:
                a[i, j] = 1.0
    d = a.sum(axis=1)
    return a / np.sqrt(np.outer(d, d))


def central_fd_check(fn, params, step=1e-5, floor=1e-5):
    """Max relative error between autograd and central differences over ``params``.

    ``fn`` returns a scalar built from the float64 tensors in ``params``.
    Relative error is ``|a - n| / max(|a|, |n|, floor)``. Central
    differences at step 1e-5 carry ~1e-10 of round-off on O(1) outputs, so
    entries whose true gradient is exactly zero (attention key biases, for
    one) are compared on that absolute scale instead.
    """
    for p in params:
        p.requires_grad_(True)
        p.grad = None
    out = fn()
    grads = torch.autograd.grad(out, params, allow_unused=True)
    worst = 0.0
    with torch.no_grad():
        for p, g in zip(params, grads):
            g = torch.zeros_like(p) if g is None else g
            flat = p.view(-1)
            for k in range(flat.numel()):
                orig = flat[k].item()
                flat[k] = orig + step
                hi = fn().item()
                flat[k] = orig - step
                lo = fn().item()
                flat[k] = orig
                num = (hi - lo) / (2 * step)
                ana = g.reshape(-1)[k].item()
                scale = max(abs(ana), abs(num), floor)
                worst = max(worst, abs(ana - num) / scale)
    return worst
