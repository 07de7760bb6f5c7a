"""Per-scene MPI fitting by gradient descent with analytic gradients.

Parameters are unconstrained: colors are ``sigmoid(theta)`` and densities
``softplus(theta)``.  Warp and reprojection sampling positions are held
fixed within a step, so gradients reach the MPI only through sampled values.
"""

import csv
import logging
import time
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from scipy import ndimage

from .errors import Divergence, InvalidRange, ShapeMismatch
from .io import SceneData, load_scene
from .mpi import DEFAULT_PLANES, Mpi, sample_altitudes
from .objective import (LossReport, LossWeights, masked_l1, masked_l1_grad, psnr,
                        total_loss)
from .render import RenderOutput, composite_arrays, plane_spacing
from .synth import LUMA, box_downsample, box_upsample_adjoint
from .warp import (BilinearSampler, coverage_mask, reprojection_field, sampler_for,
                   target_warp_field)

log = logging.getLogger(__name__)


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def softplus(x):
    return np.logaddexp(0.0, x)


def softplus_inv(y):
    y = np.asarray(y, dtype=float)
    return y + np.log(-np.expm1(-y))


def logit(y):
    y = np.asarray(y, dtype=float)
    return np.log(y) - np.log1p(-y)


def coarse_upsampler(n, size, stride):
    """Bilinear map from an (n, ceil(H/stride), ceil(W/stride)) grid to (n, H, W).

    Coarse cell centers sit at the centers of their pixel blocks; positions
    beyond the outermost centers are clamped.
    """
    h, w = size
    ch, cw = -(-h // stride), -(-w // stride)
    line, samp = np.meshgrid((np.arange(h) + 0.5) / stride - 0.5,
                             (np.arange(w) + 0.5) / stride - 0.5, indexing="ij")
    samp = np.clip(samp, 0, cw - 1)
    line = np.clip(line, 0, ch - 1)
    rep = lambda a: np.broadcast_to(a, (n, h, w))
    return BilinearSampler(rep(samp), rep(line), np.ones((n, h, w), bool), (ch, cw))


@dataclass(eq=False)
class MpiParams:
    """Unconstrained MPI parameters.

    ``theta_rgb`` is (N, H, W, 3) and ``theta_pan`` (N, H, W) for per-plane
    colors, or (H, W, 3) and (H, W) when every plane of a pixel shares one
    color.  ``theta_sigma`` is (N, H, W), or a coarser (N, h, w) grid that
    ``upsample`` maps bilinearly onto the raster before the softplus.
    """

    theta_rgb: np.ndarray
    theta_pan: np.ndarray
    theta_sigma: np.ndarray
    heights: np.ndarray
    upsample: Optional[BilinearSampler] = None

    @property
    def shared_color(self):
        return self.theta_rgb.ndim == 3

    def _sigma_logits(self):
        if self.upsample is None:
            return self.theta_sigma
        return self.upsample.apply(self.theta_sigma)

    def values(self):
        rgb, pan = sigmoid(self.theta_rgb), sigmoid(self.theta_pan)
        z = self._sigma_logits()
        if self.shared_color:
            rgb = np.broadcast_to(rgb, (z.shape[0],) + rgb.shape)
            pan = np.broadcast_to(pan, (z.shape[0],) + pan.shape)
        return rgb, pan, softplus(z)

    def chain(self, g_rgb, g_pan, g_sigma):
        """Map gradients w.r.t. plane values to gradients w.r.t. the parameters."""
        rgb, pan = sigmoid(self.theta_rgb), sigmoid(self.theta_pan)
        if self.shared_color:
            g_rgb, g_pan = g_rgb.sum(axis=0), g_pan.sum(axis=0)
        g_z = g_sigma * sigmoid(self._sigma_logits())
        if self.upsample is not None:
            g_z = self.upsample.adjoint(g_z)
        return MpiParams(g_rgb * rgb * (1 - rgb), g_pan * pan * (1 - pan), g_z,
                         self.heights, self.upsample)

    def to_mpi(self) -> Mpi:
        return Mpi(*self.values(), self.heights)

    def flat(self):
        return np.concatenate([self.theta_rgb.ravel(), self.theta_pan.ravel(),
                               self.theta_sigma.ravel()])

    def with_flat(self, x):
        n1, n2 = self.theta_rgb.size, self.theta_pan.size
        return MpiParams(x[:n1].reshape(self.theta_rgb.shape),
                         x[n1:n1 + n2].reshape(self.theta_pan.shape),
                         x[n1 + n2:].reshape(self.theta_sigma.shape), self.heights,
                         self.upsample)

    @classmethod
    def from_mpi(cls, mpi: Mpi, eps=1e-6):
        clip = lambda a: np.clip(a, eps, 1 - eps)
        return cls(logit(clip(mpi.rgb)), logit(clip(mpi.pan)),
                   softplus_inv(np.maximum(mpi.sigma, eps)), mpi.heights)


def sharpened_rgb(rgb_lr, pan):
    """Bilinearly upsampled LR-RGB with the PAN detail added to every band."""
    f = pan.shape[0] // rgb_lr.shape[0]
    up = np.stack([ndimage.zoom(rgb_lr[..., c], f, order=1, mode="nearest", grid_mode=True)
                   for c in range(rgb_lr.shape[-1])], axis=-1)[:pan.shape[0], :pan.shape[1]]
    return np.clip(up + (pan - up @ LUMA)[..., None], 0.0, 1.0)


@dataclass(eq=False)
class RenderAdjoint:
    """dL/d(rendered rgb, pan, altitude); zeros where a product is unused."""

    rgb: np.ndarray
    pan: np.ndarray
    altitude: np.ndarray

    @classmethod
    def zeros(cls, h, w):
        return cls(np.zeros((h, w, 3)), np.zeros((h, w)), np.zeros((h, w)))


def composite_vjp(rgb, pan, sigma, heights, delta, adj: RenderAdjoint):
    """Gradients of the composited products w.r.t. plane rgb, pan and sigma.

    With w_i = T_i (1 - e_i), e_i = exp(-sigma_i delta_i) and per-plane
    upstream u_i = <adj, (c_i, p_i, h_i)>:
    dL/dsigma_k = delta_k (T_k e_k u_k - sum_{i>k} w_i u_i).
    """
    if adj.rgb.shape != rgb.shape[1:] or adj.pan.shape != pan.shape[1:]:
        raise ShapeMismatch("adjoint shape does not match the MPI raster")
    tau = sigma * delta
    depth = np.zeros_like(tau)
    np.cumsum(tau[:-1], axis=0, out=depth[1:])
    trans = np.exp(-depth)
    through = np.exp(-(depth + tau))  # T_k e_k
    w = trans - through
    u = (rgb * adj.rgb).sum(axis=-1) + pan * adj.pan + heights[:, None, None] * adj.altitude
    wu = w * u
    later = np.zeros_like(wu)
    later[:-1] = np.cumsum(wu[::-1], axis=0)[::-1][1:]
    g_sigma = delta * (through * u - later)
    return w[..., None] * adj.rgb, w * adj.pan, g_sigma


def grad_composite(params: MpiParams, delta, adj: RenderAdjoint) -> MpiParams:
    """dL/dtheta for every plane cell given upstream adjoints of the render."""
    rgb, pan, sigma = params.values()
    return params.chain(*composite_vjp(rgb, pan, sigma, params.heights, delta, adj))


@dataclass
class FitConfig:
    """Optimizer settings.  Defaults are plain fixed-step gradient descent on
    free per-plane cells; :func:`scene_config` holds the schedule used on the
    synthetic scenes."""

    iterations: int = 1000
    learning_rate: float = 0.05
    weights: LossWeights = field(default_factory=LossWeights)
    n_planes: int = DEFAULT_PLANES
    sigma_parameterization: str = "softplus"
    seed: int = 0
    log_every: int = 50
    optimizer: str = "gd"
    cosine_decay: bool = False
    init_sigma: float = 0.01  # initial density, 1/m
    init_noise: float = 0.01
    init_from_images: bool = True  # colors start from the PAN-sharpened LR-RGB
    color_sharing: str = "plane"  # "plane": free per-plane colors; "pixel": one per pixel
    sigma_stride: int = 1  # density grid is this many times coarser than the raster
    color_lr_scale: float = 1.0  # step multiplier for the color parameters
    color_warmup: int = 0  # iterations with colors frozen at their initial values

    def __post_init__(self):
        if self.iterations < 1:
            raise InvalidRange("iterations must be >= 1")
        if not self.learning_rate > 0:
            raise InvalidRange("learning_rate must be > 0")
        if self.sigma_parameterization != "softplus":
            raise InvalidRange("only the softplus density parameterization is supported")
        if self.optimizer not in ("gd", "adam"):
            raise InvalidRange(f"unknown optimizer {self.optimizer!r}")
        if self.color_sharing not in ("pixel", "plane"):
            raise InvalidRange(f"unknown color sharing {self.color_sharing!r}")
        if self.sigma_stride < 1:
            raise InvalidRange("sigma_stride must be >= 1")
        if not self.color_lr_scale >= 0:
            raise InvalidRange("color_lr_scale must be >= 0")
        if self.color_warmup < 0:
            raise InvalidRange("color_warmup must be >= 0")
        if not self.init_sigma > 0:
            raise InvalidRange("init_sigma must be > 0")


def scene_config(**overrides) -> FitConfig:
    """Settings that recover geometry on the synthetic stereo scenes.

    Colors are shared by the planes of a pixel and frozen while the density
    settles, and density lives on a 4x coarser grid.  Without these a
    per-cell MPI explains the target views by mixing colors along the
    epipolar line instead of placing the surface.
    """
    base = dict(iterations=400, learning_rate=0.1, optimizer="adam", color_sharing="pixel",
                sigma_stride=4, color_warmup=150, color_lr_scale=0.3)
    base.update(overrides)
    return FitConfig(**base)


@dataclass(eq=False)
class FitTrace:
    history: list            # LossReport per iteration
    psnr_src: list           # (iteration, PSNR) at logged iterations
    mpi: Mpi
    render: RenderOutput
    params: MpiParams
    wall_time: float

    @property
    def totals(self):
        return np.array([r.total for r in self.history])

    def write_csv(self, path, log_every=1):
        psnr_at = dict(self.psnr_src)
        with open(path, "w", newline="") as f:
            wr = csv.writer(f)
            wr.writerow(["iter", "pan", "color", "reproject", "depth", "total", "psnr_src"])
            last = len(self.history) - 1
            for i, r in enumerate(self.history):
                if i % log_every and i != last:
                    continue
                p = psnr_at.get(i)
                wr.writerow([i] + [f"{v:.17g}" for v in (r.pan, r.color, r.reproject, r.depth,
                                                         r.total)]
                            + ["" if p is None else f"{p:.17g}"])


class SceneObjective:
    """Total loss of an MPI against one scene, with its analytic gradient.

    Geometry that does not depend on the MPI (plane spacing, target warp
    fields) is computed once.
    """

    def __init__(self, scene: SceneData, n_planes=DEFAULT_PLANES, weights=None,
                 lr_factor=None):
        self.scene = scene
        self.weights = weights or LossWeights()
        h_far, h_near = scene.manifest.altitude_bounds
        self.sampling = sample_altitudes(h_near, h_far, n_planes)
        self.heights = self.sampling.heights
        self.size = tuple(scene.size)
        h, w = self.size
        self.delta = plane_spacing(scene.rpc, self.sampling, h, w, scene.geo_ref).delta
        self.lr_factor = lr_factor or (h // scene.rgb_lr.shape[0])
        self.targets = []
        for rgb, rpc in scene.targets:
            th, tw = rgb.shape[:2]
            warp = target_warp_field(self.heights, scene.rpc, self.size, rpc, (th, tw))
            sampler = sampler_for(warp, self.size)
            tdelta = plane_spacing(rpc, self.sampling, th, tw, scene.geo_ref).delta
            self.targets.append((rgb, sampler, tdelta, coverage_mask(warp)))

    # color term: box-downsampled render against the LR-RGB
    def _color(self, rgb_hat, mask=None):
        f = self.lr_factor
        m = None if mask is None else box_downsample(mask.astype(float), f) == 1.0
        down = box_downsample(rgb_hat, f)
        g = masked_l1_grad(down, self.scene.rgb_lr, m)
        return masked_l1(down, self.scene.rgb_lr, m), box_upsample_adjoint(g, f)

    def source_reprojection(self, altitude):
        """Fixed sampler for the single-view reprojection at the given altitude map."""
        field_ = reprojection_field(altitude, self.scene.rpc, self.scene.geo_ref)
        return sampler_for(field_, self.size), field_.valid[0]

    def render(self, params: MpiParams):
        rgb, pan, sigma = params.values()
        return RenderOutput(*composite_arrays(rgb, pan, sigma, self.heights, self.delta))

    def __call__(self, params: MpiParams, reproject_sampler=None, need_grad=True):
        """Return ``(LossReport, gradient MpiParams or None, render)``.

        ``reproject_sampler`` pins the single-view reprojection positions
        (computed from the current altitude when omitted).
        """
        lw = self.weights
        rgb, pan, sigma = params.values()
        out = composite_arrays(rgb, pan, sigma, self.heights, self.delta)
        render = RenderOutput(*out)
        h, w = self.size
        adj = RenderAdjoint.zeros(h, w)

        l_pan = masked_l1(render.pan, self.scene.pan)
        adj.pan += lw.lambda1 * masked_l1_grad(render.pan, self.scene.pan)
        l_color, g = self._color(render.rgb)
        adj.rgb += lw.lambda2 * g

        l_depth = 0.0
        if lw.lambda_depth > 0:
            truth = self.scene.truth_altitude
            if truth is None:
                raise InvalidRange("depth supervision needs a truth altitude map")
            l_depth = masked_l1(render.altitude, truth)
            adj.altitude += lw.lambda_depth * masked_l1_grad(render.altitude, truth)

        grad_rgb = np.zeros_like(rgb) if need_grad else None
        grad_sigma = np.zeros_like(sigma) if need_grad else None
        l_reproj = 0.0
        if self.targets:
            k = len(self.targets)
            for truth, sampler, tdelta, mask in self.targets:
                wr, ws = sampler.apply(rgb), sampler.apply(sigma)
                zero = np.zeros_like(ws)
                t_rgb = composite_arrays(wr, zero, ws, self.heights, tdelta)[0]
                l_reproj += masked_l1(t_rgb, truth, mask) / k
                if need_grad and lw.lambda3 > 0:
                    tadj = RenderAdjoint(lw.lambda3 / k * masked_l1_grad(t_rgb, truth, mask),
                                         np.zeros(t_rgb.shape[:2]), np.zeros(t_rgb.shape[:2]))
                    g_r, _, g_s = composite_vjp(wr, zero, ws, self.heights, tdelta, tadj)
                    grad_rgb += sampler.adjoint(g_r)
                    grad_sigma += sampler.adjoint(g_s)
        elif lw.lambda3 > 0:
            if reproject_sampler is None:
                reproject_sampler = self.source_reprojection(render.altitude)
            sampler, mask = reproject_sampler
            i_proj = sampler.apply(render.rgb[None])[0]
            l_reproj, g = self._color(i_proj, mask)
            adj.rgb += lw.lambda3 * sampler.adjoint(g[None])[0]

        report = total_loss({"pan": l_pan, "color": l_color, "reproject": l_reproj,
                             "depth": l_depth}, lw)
        if not need_grad:
            return report, None, render
        g_rgb, g_pan, g_sigma = composite_vjp(rgb, pan, sigma, self.heights, self.delta, adj)
        grad_rgb += g_rgb
        grad_sigma += g_sigma
        return report, params.chain(grad_rgb, g_pan, grad_sigma), render

    def initial_params(self, init_sigma=0.1, noise=0.01, seed=0,
                       shared_color=True, from_images=True, sigma_stride=1) -> MpiParams:
        """Uniform density everywhere; colors start at the observed source
        images (``from_images``) or at mid-gray, plus Gaussian noise."""
        rng = np.random.default_rng(seed)
        n = len(self.heights)
        h, w = self.size
        lead = (h, w) if shared_color else (n, h, w)
        rgb0, pan0 = np.zeros((h, w, 3)), np.zeros((h, w))
        if from_images:
            rgb0 = logit(np.clip(sharpened_rgb(self.scene.rgb_lr, self.scene.pan), 0.01, 0.99))
            pan0 = logit(np.clip(self.scene.pan, 0.01, 0.99))
        up = coarse_upsampler(n, self.size, sigma_stride) if sigma_stride > 1 else None
        grid = (n,) + (up.src_size if up else self.size)
        return MpiParams(np.broadcast_to(rgb0, lead + (3,)) + noise * rng.standard_normal(lead + (3,)),
                         np.broadcast_to(pan0, lead) + noise * rng.standard_normal(lead),
                         np.full(grid, float(softplus_inv(init_sigma)))
                         + noise * rng.standard_normal(grid),
                         self.heights, up)

    def source_psnr(self, render: RenderOutput):
        """PSNR against the held-out HR-RGB when the scene has it, else against LR-RGB."""
        if self.scene.rgb_hr is not None:
            return psnr(render.rgb, self.scene.rgb_hr)
        return psnr(box_downsample(render.rgb, self.lr_factor), self.scene.rgb_lr)


def step_size(config: FitConfig, it):
    """Learning rate at iteration ``it`` (fixed, or cosine-decayed to zero)."""
    if not config.cosine_decay:
        return config.learning_rate
    return config.learning_rate * 0.5 * (1 + np.cos(np.pi * it / config.iterations))


def fit(scene, config: FitConfig, objective=None, callback=None) -> FitTrace:
    """Optimize an MPI for ``scene`` (a SceneData or manifest path)."""
    if not isinstance(scene, SceneData):
        scene = load_scene(scene)
    obj = objective or SceneObjective(scene, config.n_planes, config.weights)
    params = obj.initial_params(config.init_sigma, config.init_noise, config.seed,
                                config.color_sharing == "pixel", config.init_from_images,
                                config.sigma_stride)
    x = params.flat()
    n_color = params.theta_rgb.size + params.theta_pan.size
    lr_scale = np.ones_like(x)
    lr_scale[:n_color] = config.color_lr_scale
    geo_only = np.ones_like(x)
    geo_only[:n_color] = 0.0
    m = np.zeros_like(x)
    v = np.zeros_like(x)
    b1, b2, eps = 0.9, 0.999, 1e-8
    history, psnrs = [], []
    t0 = time.perf_counter()
    for it in range(config.iterations):
        report, grad, render = obj(params)
        if not np.isfinite(report.total):
            raise Divergence(f"total loss became non-finite at iteration {it}")
        history.append(report)
        if it % config.log_every == 0:
            psnrs.append((it, obj.source_psnr(render)))
            log.info("iter %d total %.6f", it, report.total)
        if callback is not None:
            callback(it, report, params)
        g = grad.flat()
        lr = step_size(config, it) * (lr_scale if it >= config.color_warmup else geo_only)
        if config.optimizer == "gd":
            x = x - lr * g
        else:
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            mh = m / (1 - b1 ** (it + 1))
            vh = v / (1 - b2 ** (it + 1))
            x = x - lr * mh / (np.sqrt(vh) + eps)
        params = params.with_flat(x)
    report, _, render = obj(params, need_grad=False)
    history.append(report)
    psnrs.append((len(history) - 1, obj.source_psnr(render)))
    return FitTrace(history, psnrs, params.to_mpi(), render, params,
                    time.perf_counter() - t0)
