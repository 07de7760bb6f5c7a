"""Loss terms and evaluation metrics."""

import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage

from .errors import EmptyMask, InvariantViolation, ShapeMismatch

PSNR_CAP = 99.0


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 1.0  # pan
    lambda2: float = 1.0  # color
    lambda3: float = 10.0  # reprojection
    lambda_depth: float = 0.0

    def __post_init__(self):
        for k, v in asdict(self).items():
            if not (np.isfinite(v) and v >= 0):
                raise InvariantViolation(f"{k} must be finite and >= 0, got {v}")


@dataclass(frozen=True)
class LossReport:
    pan: float
    color: float
    reproject: float
    depth: float
    total: float
    scales: list = field(default_factory=list)


def _mask_for(pred, mask):
    if mask is None:
        return np.ones(pred.shape[:2], dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != pred.shape[:mask.ndim]:
        raise ShapeMismatch(f"mask {mask.shape} does not match image {pred.shape}")
    return mask


def masked_l1(pred, truth, mask=None):
    """Mean absolute difference over masked pixels (all channels)."""
    pred = np.asarray(pred, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if pred.shape != truth.shape:
        raise ShapeMismatch(f"prediction {pred.shape} vs truth {truth.shape}")
    mask = _mask_for(pred, mask)
    if not mask.any():
        raise EmptyMask("no valid pixels")
    return float(np.abs(pred - truth)[mask].mean())


def masked_l1_grad(pred, truth, mask=None):
    """Subgradient of :func:`masked_l1` with respect to ``pred``."""
    pred = np.asarray(pred, dtype=float)
    mask = _mask_for(pred, mask)
    count = mask.sum() * int(np.prod(pred.shape[mask.ndim:], dtype=int))
    if count == 0:
        raise EmptyMask("no valid pixels")
    m = mask.reshape(mask.shape + (1,) * (pred.ndim - mask.ndim))
    return np.sign(pred - truth) * m / count


def l1_multiscale(pred_scales, truth_scales, mask_scales=None):
    if len(pred_scales) != len(truth_scales):
        raise ShapeMismatch("prediction and truth have different numbers of scales")
    if mask_scales is None:
        mask_scales = [None] * len(pred_scales)
    if len(mask_scales) != len(pred_scales):
        raise ShapeMismatch("mask list length does not match scales")
    return float(sum(masked_l1(p, t, m)
                     for p, t, m in zip(pred_scales, truth_scales, mask_scales)))


def loss_src_reproject(i_proj_src, i_src, mask):
    return l1_multiscale([i_proj_src], [i_src], [mask])


def loss_tgt_reproject(i_proj_tgt, i_tgt_truth, mask):
    """Reprojection L1 over one target view, or the mean over a list of views."""
    if isinstance(i_proj_tgt, (list, tuple)):
        if not i_proj_tgt:
            raise ShapeMismatch("no target views")
        terms = [l1_multiscale([p], [t], [m])
                 for p, t, m in zip(i_proj_tgt, i_tgt_truth, mask)]
        return float(np.mean(terms))
    return l1_multiscale([i_proj_tgt], [i_tgt_truth], [mask])


def depth_loss(altitude, dsm_truth, mask=None):
    return masked_l1(altitude, dsm_truth, mask)


def total_loss(terms, weights: LossWeights, scales=None) -> LossReport:
    """Weighted sum of the loss terms (a mapping with pan/color/reproject[/depth])."""
    pan = float(terms.get("pan", 0.0))
    color = float(terms.get("color", 0.0))
    reproject = float(terms.get("reproject", 0.0))
    depth = float(terms.get("depth") or 0.0)
    total = weights.lambda1 * pan + weights.lambda2 * color + weights.lambda3 * reproject
    if weights.lambda_depth > 0:
        total += weights.lambda_depth * depth
    return LossReport(pan, color, reproject, depth, total, list(scales or []))


# metrics ---------------------------------------------------------------------

def psnr(a, b, peak=1.0, mask=None):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ShapeMismatch(f"{a.shape} vs {b.shape}")
    if mask is not None:
        mask = _mask_for(a, mask)
        if not mask.any():
            raise EmptyMask("no valid pixels")
        a, b = a[mask], b[mask]
    mse = float(np.mean((a - b) ** 2))
    if mse < 1e-12:
        return PSNR_CAP
    return float(10.0 * np.log10(peak ** 2 / mse))


def gaussian_window(size=11, sigma=1.5):
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-x ** 2 / (2 * sigma ** 2))
    g /= g.sum()
    return np.outer(g, g)


def _ssim_channel(x, y, win, c1, c2):
    f = lambda z: ndimage.correlate(z, win, mode="reflect")
    mx, my = f(x), f(y)
    sxx = f(x * x) - mx * mx
    syy = f(y * y) - my * my
    sxy = f(x * y) - mx * my
    num = (2 * mx * my + c1) * (2 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    s = num / den
    r = win.shape[0] // 2
    if s.shape[0] > 2 * r and s.shape[1] > 2 * r:
        s = s[r:-r, r:-r]
    return float(s.mean())


def ssim(a, b, peak=1.0, k1=0.01, k2=0.03, window=11, sigma=1.5):
    """Mean SSIM with a Gaussian window, averaged over channels.

    Statistics are taken over the interior where the window fits; images
    smaller than the window use reflected borders.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ShapeMismatch(f"{a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    win = gaussian_window(window, sigma)
    c1, c2 = (k1 * peak) ** 2, (k2 * peak) ** 2
    return float(np.mean([_ssim_channel(a[..., c], b[..., c], win, c1, c2)
                          for c in range(a.shape[-1])]))


def _abs_err(dsm_a, dsm_b, mask):
    a = np.asarray(dsm_a, dtype=float)
    b = np.asarray(dsm_b, dtype=float)
    if a.shape != b.shape:
        raise ShapeMismatch(f"{a.shape} vs {b.shape}")
    mask = np.ones(a.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    mask = mask & np.isfinite(a) & np.isfinite(b)
    if not mask.any():
        raise EmptyMask("no valid DSM cells")
    return np.abs(a - b)[mask]


def mae(dsm_a, dsm_b, mask=None):
    return float(_abs_err(dsm_a, dsm_b, mask).mean())


def me(dsm_a, dsm_b, mask=None):
    """Median absolute height error; even counts average the middle pair."""
    return float(np.median(_abs_err(dsm_a, dsm_b, mask)))


def format_report(metrics: dict) -> str:
    return "".join(f"{k}={v}\n" for k, v in metrics.items())


def report_json(metrics: dict) -> str:
    return json.dumps(metrics, indent=2, sort_keys=True)
