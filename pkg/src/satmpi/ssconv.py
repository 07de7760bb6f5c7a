"""Spectral-to-spatial convolution: a 3x3 kernel bank followed by depth-to-space.

Feature maps are indexed ``[i, j, k]`` with ``i < w``, ``j < h`` and ``k`` the
channel.  A kernel bank has shape ``(r*r*c, 3, 3, c)``.
"""

import numpy as np

from .errors import ShapeMismatch


def conv_bank(f, kernels):
    """3x3 cross-correlation of ``f`` with each kernel; zero padding, stride 1.

    Output channel ``n`` is ``sum_{a,b,ch} f[i+a-1, j+b-1, ch] * kernels[n, a, b, ch]``.
    """
    f = np.asarray(f, dtype=float)
    kernels = np.asarray(kernels, dtype=float)
    if f.ndim != 3:
        raise ShapeMismatch(f"feature map must be (w, h, c), got {f.shape}")
    if kernels.ndim != 4 or kernels.shape[1:3] != (3, 3) or kernels.shape[3] != f.shape[2]:
        raise ShapeMismatch(
            f"kernel bank {kernels.shape} incompatible with {f.shape[2]} input channels")
    w, h, _ = f.shape
    padded = np.pad(f, ((1, 1), (1, 1), (0, 0)))
    out = np.zeros((w, h, kernels.shape[0]))
    for a in range(3):
        for b in range(3):
            out += padded[a:a + w, b:b + h, :] @ kernels[:, a, b, :].T
    return out


def depth_to_space(f, r):
    """Rearrange ``(w, h, r*r*c)`` into ``(r*w, r*h, c)``.

    ``out[r*i + c1, r*j + c2, k] = f[i, j, k*r*r + c1*r + c2]``.
    """
    f = np.asarray(f)
    w, h, cc = f.shape
    if r < 1 or cc % (r * r):
        raise ShapeMismatch(f"{cc} channels not divisible by r^2 = {r * r}")
    c = cc // (r * r)
    return f.reshape(w, h, c, r, r).transpose(0, 3, 1, 4, 2).reshape(w * r, h * r, c)


def space_to_depth(f, r):
    """Inverse of :func:`depth_to_space`."""
    f = np.asarray(f)
    W, H, c = f.shape
    if W % r or H % r:
        raise ShapeMismatch(f"spatial size {(W, H)} not divisible by {r}")
    return f.reshape(W // r, r, H // r, r, c).transpose(0, 2, 4, 1, 3).reshape(
        W // r, H // r, c * r * r)


def ssconv(f, kernels, r=2):
    if np.asarray(kernels).shape[0] != r * r * np.asarray(f).shape[-1]:
        raise ShapeMismatch("kernel count must be r^2 times the input channels")
    return depth_to_space(conv_bank(f, kernels), r)


def nearest_upsample_bank(c, r=2):
    """Kernel bank for which ``ssconv`` is nearest-neighbour upsampling by ``r``."""
    k = np.zeros((r * r * c, 3, 3, c))
    for ch in range(c):
        k[ch * r * r:(ch + 1) * r * r, 1, 1, ch] = 1.0
    return k
