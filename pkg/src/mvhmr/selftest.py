"""Fast property checks over every module, used by the ``selftest`` command."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import geometry as geo
from .body_model import forward, neutral_state
from .engine import (
    EngineConfig,
    ViewContext,
    apply_increment,
    layout_for,
    residual_jacobian,
    run,
    sample_offsets,
)
from .estimators import align_orientations, solve_translation_scale
from .features import FeatureMap, bilinear_grad, bilinear_sample
from .fusion import AggregationKind, aggregate, transformer_encode, zero_encoder
from .metrics import mpjpe, pa_mpjpe, pve
from .scenario import generate_scenario, make_rig, template_for, view_params, ScenarioConfig, TemplateConfig


@dataclass
class Check:
    name: str
    ok: bool
    detail: str
    seconds: float = 0.0


def _rotations(rng, n):
    return [geo.random_rotation(rng) for _ in range(n)]


def check_rot6d(rng):
    worst = max(geo.geodesic_deg(geo.rot6d_to_matrix(geo.matrix_to_rot6d(R)), R) for R in _rotations(rng, 1000))
    return worst < 1e-6, f"worst round-trip {worst:.2e} deg"


def check_ray_inverse(rng):
    cams = make_rig(ScenarioConfig())
    worst = 0.0
    for _ in range(200):
        cam = cams[rng.integers(len(cams))]
        X = rng.uniform(-800, 800, 3) + np.array([0.0, 900.0, 0.0])
        ray = geo.pixel_ray(cam, geo.project_perspective(X, cam))
        d = X - ray.origin
        worst = max(worst, float(np.linalg.norm(d - (d @ ray.direction) * ray.direction)))
    return worst < 1e-6, f"worst point-to-ray {worst:.2e} mm"


def check_triangulate(rng):
    cams = make_rig(ScenarioConfig())
    worst = 0.0
    for _ in range(100):
        X = rng.uniform(-500, 500, 3) + np.array([0.0, 900.0, 0.0])
        rays = [geo.pixel_ray(c, geo.project_perspective(X, c)) for c in cams]
        worst = max(worst, float(np.linalg.norm(geo.triangulate(rays) - X)))
    return worst < 1e-6, f"worst error {worst:.2e} mm"


def check_bilinear_grad(rng):
    worst = 0.0
    for _ in range(200):
        fmap = FeatureMap(rng.normal(size=(6, 7, 3)), 0, (70, 60))
        uv = rng.uniform([1.0, 1.0], [69.0, 59.0])
        G = bilinear_grad(fmap, uv)
        h = 1e-4 * 10.0  # 1e-4 grid cells of 10 px
        fd = np.stack([
            (bilinear_sample(fmap, uv + e)[0] - bilinear_sample(fmap, uv - e)[0]) / (2 * h)
            for e in (np.array([h, 0.0]), np.array([0.0, h]))
        ], axis=-1)
        worst = max(worst, float(np.linalg.norm(G - fd) / max(np.linalg.norm(fd), 1e-12)))
    return worst < 1e-4, f"worst relative error {worst:.2e}"


def check_fusion(rng):
    x = rng.normal(size=(4, 20, 5))
    m = rng.random((4, 20)) > 0.2
    perm = rng.permutation(4)
    worst = 0.0
    for kind in AggregationKind:
        a = aggregate(x, m, kind)
        worst = max(worst, float(np.abs(a - aggregate(x[perm], m[perm], kind)).max()))
        worst = max(worst, float(np.abs(aggregate(x[:1], np.ones((1, 20), bool), kind) - x[0]).max()))
    enc = zero_encoder(8, 2, n_layers=2)
    tok = rng.normal(size=(4, 8))
    worst = max(worst, float(np.abs(transformer_encode(tok, enc) - tok).max()))
    return worst < 1e-9, f"worst deviation {worst:.2e}"


def check_metrics(rng):
    worst = 0.0
    ok = True
    for _ in range(200):
        p, g = rng.normal(size=(16, 3)) * 100, rng.normal(size=(16, 3)) * 100
        ok &= pa_mpjpe(p, g) <= mpjpe(p, g) + 1e-9
        R, t = geo.random_rotation(rng), rng.normal(size=3) * 500
        for f in (mpjpe, pa_mpjpe, pve):
            worst = max(worst, abs(f(p @ R.T + t, g @ R.T + t) - f(p, g)))
    return bool(ok) and worst < 1e-9, f"PA <= MPJPE: {bool(ok)}, rigid invariance {worst:.2e} mm"


def check_body(rng):
    tpl = template_for(TemplateConfig())
    v, _ = forward(tpl, neutral_state(tpl))
    rest = float(np.abs(v - tpl.v_template).max())
    sc = generate_scenario(seed=int(rng.integers(1000)))
    R, t = geo.random_rotation(rng), rng.normal(size=3) * 300
    moved = sc.gt.replace(global_orient=R @ sc.gt.global_orient, transl=R @ sc.gt.transl + t)
    eq = float(np.abs(forward(tpl, moved)[0] - (sc.gt_mesh[0] @ R.T + t)).max())
    return rest < 1e-9 and eq < 1e-9, f"rest pose {rest:.2e}, equivariance {eq:.2e} mm"


def check_estimators(rng):
    sc = generate_scenario(ScenarioConfig(scale_range=(0.8, 1.2)), seed=int(rng.integers(1000)))
    res = align_orientations(sc.gt.view_orient, sc.cams)
    inv = max(float(np.abs(res.aligned[v] - c.R @ res.consensus).max()) for v, c in enumerate(sc.cams))
    gt = sc.gt
    o, wc = view_params(gt, sc.cams)
    tpl = sc.template
    p = forward(tpl, gt.replace(global_orient=np.eye(3), transl=np.zeros(3), scale=1.0))[1][0]
    px, depth = [], []
    for v, cam in enumerate(sc.cams):
        X = cam.R @ (gt.global_orient @ p * gt.scale + gt.transl) + cam.T
        px.append(cam.K[:2, :2] @ (X[:2] / X[2]) + cam.K[:2, 2])
        depth.append(X[2] / gt.scale)
    sol = solve_translation_scale(p, gt.global_orient, sc.cams, np.array(px), np.array(depth))
    err = max(abs(sol.scale - gt.scale), float(np.abs(sol.transl - gt.transl).max()))
    return inv < 1e-9 and err < 1e-6, f"aligner invariant {inv:.2e}, scale/translation error {err:.2e}"


def check_jacobian(rng):
    sc = generate_scenario(seed=int(rng.integers(1000)))
    ctx = ViewContext(sc.template, sc.cams, sc.pyramids(), EngineConfig())
    r, J, ok = residual_jacobian(ctx, sc.init, 1)
    lay = layout_for(ctx)
    worst = 0.0
    for c in rng.choice(lay.size, 12, replace=False):
        h = 1e-3 if c >= lay.cam.start else 1e-6
        d = np.zeros(lay.size)
        d[c] = h
        rp, okp = sample_offsets(ctx, apply_increment(ctx, sc.init, d)[0], 1)
        rm, okm = sample_offsets(ctx, apply_increment(ctx, sc.init, -d)[0], 1)
        m = ok & okp & okm
        fd = ((rp - rm) / (2 * h))[m]
        worst = max(worst, float(np.linalg.norm(J[..., c][m] - fd) / max(np.linalg.norm(fd), 1e-12)))
    return worst < 1e-3, f"worst relative error {worst:.2e} over 12 columns"


def check_engine(rng):
    sc = generate_scenario(seed=int(rng.integers(1000)))
    cfg = EngineConfig()
    s1, t1 = run(sc, cfg)
    s2, t2 = run(sc, cfg)
    same = t1.to_dict() == t2.to_dict()
    levels = [str(x) for x in t1.levels] == ["init", "grid0", "1", "1", "2"]
    ratio = t1.mpjpe[-1] / t1.mpjpe[0]
    ok = same and levels and len(t1) == 5 and ratio < 0.5
    return ok, f"deterministic {same}, schedule {levels}, MPJPE {t1.mpjpe[0]:.1f} -> {t1.mpjpe[-1]:.1f} mm"


CHECKS = (
    ("geometry: 6D round trip", check_rot6d),
    ("geometry: projection/ray inverse", check_ray_inverse),
    ("geometry: triangulation", check_triangulate),
    ("features: sampling gradient", check_bilinear_grad),
    ("fusion: invariances", check_fusion),
    ("metrics: ordering and invariance", check_metrics),
    ("body: rest pose and equivariance", check_body),
    ("estimators: aligner and scale solve", check_estimators),
    ("engine: analytic Jacobian", check_jacobian),
    ("engine: determinism and convergence", check_engine),
)


def run_selftest(seed=0, log=print):
    """Run every check; returns the list of `Check` results."""
    results = []
    for i, (name, fn) in enumerate(CHECKS):
        rng = np.random.default_rng([seed, i])
        t0 = time.perf_counter()
        try:
            ok, detail = fn(rng)
        except Exception as exc:  # a crash is a failed check
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        res = Check(name, bool(ok), detail, time.perf_counter() - t0)
        results.append(res)
        if log:
            log(f"{'PASS' if res.ok else 'FAIL'}  {name}: {detail}")
    return results
