import csv

import numpy as np
import pytest

from helpers import coords_by_class, fd_gradient_error
from satmpi.errors import Divergence, InvalidRange, ShapeMismatch
from satmpi.fit import (FitConfig, MpiParams, RenderAdjoint, SceneObjective, composite_vjp,
                        fit, grad_composite, scene_config, sigmoid, softplus, softplus_inv,
                        step_size)
from satmpi.io import load_scene
from satmpi.mpi import Mpi, sample_altitudes
from satmpi.objective import LossReport, LossWeights
from satmpi.render import composite_arrays
from satmpi.synth import fixture_spec, make_scene


@pytest.fixture(scope="module")
def tiny(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny")
    # a shallow view keeps most target pixels inside the 8x8 source frustum
    make_scene(fixture_spec("ramp", size=(8, 8), n_targets=2, slope=0.05), root, lr_factor=2)
    return load_scene(root / "manifest.json")


def random_params(rng, n=4, h=4, w=4, shared=False):
    lead = (h, w) if shared else (n, h, w)
    return MpiParams(rng.standard_normal(lead + (3,)), rng.standard_normal(lead),
                     rng.standard_normal((n, h, w)) - 1.0, sample_altitudes(10, 0, n).heights)


def test_softplus_inverse():
    y = np.array([1e-4, 0.01, 1.0, 30.0])
    assert np.allclose(softplus(softplus_inv(y)), y, rtol=1e-12)


def test_zero_adjoint_gives_zero_gradient(rng):
    p = random_params(rng)
    g = grad_composite(p, np.ones((4, 4, 4)), RenderAdjoint.zeros(4, 4))
    assert not g.flat().any()


def test_single_plane_color_gradient():
    sigma, delta = 0.7, 1.3
    rgb = np.full((1, 1, 1, 3), 0.4)
    adj = RenderAdjoint(np.ones((1, 1, 3)), np.zeros((1, 1)), np.zeros((1, 1)))
    g_rgb, _, _ = composite_vjp(rgb, np.zeros((1, 1, 1)), np.full((1, 1, 1), sigma), np.zeros(1),
                                np.full((1, 1, 1), delta), adj)
    assert g_rgb[0, 0, 0] == pytest.approx([1 - np.exp(-sigma * delta)] * 3, rel=1e-14)


def test_adjoint_shape_check(rng):
    p = random_params(rng)
    with pytest.raises(ShapeMismatch):
        grad_composite(p, np.ones((4, 4, 4)), RenderAdjoint.zeros(3, 4))


@pytest.mark.parametrize("seed", range(5))
def test_composite_vjp_matches_finite_differences(seed):
    # L = <A, rgb> + <B, pan> + <C, altitude> is smooth, so this isolates the compositing adjoint
    rng = np.random.default_rng(seed)
    p = random_params(rng, shared=seed % 2 == 1)
    delta = rng.uniform(0.5, 2.0, (4, 4, 4))
    adj = RenderAdjoint(rng.standard_normal((4, 4, 3)), rng.standard_normal((4, 4)),
                        rng.standard_normal((4, 4)))

    def loss(q):
        out = composite_arrays(*q.values(), q.heights, delta)
        return (adj.rgb * out[0]).sum() + (adj.pan * out[1]).sum() + (adj.altitude * out[2]).sum()

    g = grad_composite(p, delta, adj).flat()
    x = p.flat()
    fd = np.empty_like(x)
    for i in range(len(x)):
        e = np.zeros_like(x)
        e[i] = 1e-4
        fd[i] = (loss(p.with_flat(x + e)) - loss(p.with_flat(x - e))) / 2e-4
    assert np.linalg.norm(g - fd) / np.linalg.norm(fd) < 1e-4


@pytest.mark.parametrize("variant", [
    dict(),
    dict(shared=True),
    dict(shared=True, stride=4),
    dict(weights=LossWeights(lambda_depth=1.0)),
    dict(no_targets=True),
    dict(no_targets=True, shared=True, stride=2),
])
def test_total_loss_gradient(tiny, variant):
    scene = tiny
    if variant.get("no_targets"):
        scene = type(tiny)(**{**tiny.__dict__, "targets": []})
    obj = SceneObjective(scene, 4, variant.get("weights"))
    p = obj.initial_params(0.3, 0.5, seed=3, shared_color=variant.get("shared", False),
                           sigma_stride=variant.get("stride", 1))
    rng = np.random.default_rng(0)
    err, g, _ = fd_gradient_error(obj, p, coords_by_class(p, 25, rng))
    assert np.abs(g).max() > 0
    assert err < 1e-4


def test_lambda3_zero_ignores_targets(tiny):
    w = LossWeights(lambda3=0.0)
    with_t = SceneObjective(tiny, 4, w)
    without = SceneObjective(type(tiny)(**{**tiny.__dict__, "targets": []}), 4, w)
    p = with_t.initial_params(0.3, 0.5, seed=1)
    a, ga, _ = with_t(p)
    b, gb, _ = without(p)
    assert a.total == b.total
    assert np.array_equal(ga.flat(), gb.flat())


def test_single_pixel_color_regression():
    # one opaque pixel, one plane, L1 color term only; a fixed step would
    # oscillate around the target, the cosine schedule settles it
    target = np.array([0.2, 0.55, 0.9])
    p = MpiParams(np.zeros((1, 1, 1, 3)), np.zeros((1, 1, 1)), np.full((1, 1, 1), 30.0),
                  np.array([0.0]))
    delta = np.ones((1, 1, 1))
    cfg = FitConfig(iterations=500, learning_rate=20.0, cosine_decay=True)
    for it in range(cfg.iterations):
        rgb = composite_arrays(*p.values(), p.heights, delta)[0]
        adj = RenderAdjoint(np.sign(rgb - target) / 3, np.zeros((1, 1)), np.zeros((1, 1)))
        g = grad_composite(p, delta, adj)
        p = MpiParams(p.theta_rgb - step_size(cfg, it) * g.theta_rgb, p.theta_pan,
                      p.theta_sigma, p.heights)
    rgb = composite_arrays(*p.values(), p.heights, delta)[0]
    assert np.abs(rgb[0, 0] - target).max() < 1e-3


def test_fit_keeps_invariants_and_logs(tiny, tmp_path):
    cfg = FitConfig(iterations=30, learning_rate=0.5, n_planes=4, log_every=10)
    seen = []
    trace = fit(tiny, cfg, callback=lambda it, rep, p: seen.append(p.to_mpi()))
    assert len(trace.history) == 31 and len(seen) == 30
    for m in seen + [trace.mpi]:
        assert (m.sigma >= 0).all() and (m.rgb >= 0).all() and (m.rgb <= 1).all()
    trace.write_csv(tmp_path / "t.csv", cfg.log_every)
    rows = list(csv.reader(open(tmp_path / "t.csv")))
    assert rows[0] == ["iter", "pan", "color", "reproject", "depth", "total", "psnr_src"]
    assert [r[0] for r in rows[1:]] == ["0", "10", "20", "30"]


def test_gd_decreases_loss(tiny):
    trace = fit(tiny, FitConfig(iterations=40, learning_rate=0.5, n_planes=4))
    assert trace.history[-1].total < trace.history[0].total


def test_fit_is_deterministic(tiny):
    cfg = scene_config(iterations=20, n_planes=4, sigma_stride=2, color_warmup=5)
    a, b = fit(tiny, cfg), fit(tiny, cfg)
    assert np.array_equal(a.totals, b.totals)
    assert np.array_equal(a.mpi.sigma, b.mpi.sigma)


def test_color_warmup_freezes_colors(tiny):
    cfg = scene_config(iterations=6, n_planes=4, sigma_stride=2, color_warmup=5)
    snaps = []
    fit(tiny, cfg, callback=lambda it, rep, p: snaps.append(p.theta_rgb.copy()))
    assert all(np.array_equal(s, snaps[0]) for s in snaps[:6])


def test_cosine_decay_runs(tiny):
    trace = fit(tiny, FitConfig(iterations=5, n_planes=4, cosine_decay=True))
    assert np.isfinite(trace.totals).all()


def test_divergence(tiny):
    class Broken(SceneObjective):
        def __call__(self, params, reproject_sampler=None, need_grad=True):
            report, grad, render = super().__call__(params, reproject_sampler, need_grad)
            return LossReport(0, 0, 0, 0, float("nan")), grad, render

    with pytest.raises(Divergence):
        fit(tiny, FitConfig(iterations=3, n_planes=4), objective=Broken(tiny, 4))


@pytest.mark.parametrize("kw", [dict(iterations=0), dict(learning_rate=0.0),
                                dict(optimizer="sgd"), dict(sigma_parameterization="exp"),
                                dict(color_sharing="none"), dict(sigma_stride=0)])
def test_config_validation(kw):
    with pytest.raises(InvalidRange):
        FitConfig(**kw)


def test_from_mpi_round_trip(rng):
    m = Mpi(rng.uniform(0.1, 0.9, (3, 2, 2, 3)), rng.uniform(0.1, 0.9, (3, 2, 2)),
            rng.uniform(0.1, 3, (3, 2, 2)), sample_altitudes(5, 0, 3).heights)
    back = MpiParams.from_mpi(m).to_mpi()
    assert np.allclose(back.rgb, m.rgb, atol=1e-12) and np.allclose(back.sigma, m.sigma, atol=1e-12)
    assert sigmoid(0.0) == 0.5
