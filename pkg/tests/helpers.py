"""Shared oracles for the test suite."""

import numpy as np

from satmpi.fit import SceneObjective


def fd_gradient_error(obj: SceneObjective, params, coords, step=1e-4):
    """Max relative error between the analytic gradient and central differences
    at the flat parameter indices ``coords``.

    The single-view reprojection sampler is pinned at ``params`` so both
    sides follow the same detached-coordinate contract.
    """
    pinned = None
    if not obj.targets and obj.weights.lambda3 > 0:
        pinned = obj.source_reprojection(obj.render(params).altitude)
    _, grad, _ = obj(params, reproject_sampler=pinned)
    g = grad.flat()[coords]
    x = params.flat()
    fd = np.empty(len(coords))
    for n, i in enumerate(coords):
        e = np.zeros_like(x)
        e[i] = step
        up = obj(params.with_flat(x + e), reproject_sampler=pinned, need_grad=False)[0].total
        dn = obj(params.with_flat(x - e), reproject_sampler=pinned, need_grad=False)[0].total
        fd[n] = (up - dn) / (2 * step)
    return float(np.linalg.norm(g - fd) / max(np.linalg.norm(fd), 1e-12)), g, fd


def coords_by_class(params, per_class, rng):
    """Random flat indices drawn from each parameter class (rgb, pan, sigma)."""
    sizes = [params.theta_rgb.size, params.theta_pan.size, params.theta_sigma.size]
    starts = np.cumsum([0] + sizes[:-1])
    return np.concatenate([s + rng.choice(n, min(per_class, n), replace=False)
                           for s, n in zip(starts, sizes)])
