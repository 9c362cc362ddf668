import numpy as np
import pytest

from mvhmr import geometry as geo
from mvhmr.body_model import forward
from mvhmr.estimators import (
    SolveError,
    align_orientations,
    solve_translation_scale,
    translation_residual,
    translation_to_weak_persp,
    update_orientation,
    weak_persp_to_translation,
)
from mvhmr.scenario import ScenarioConfig, generate_scenario, make_rig


@pytest.fixture(scope="module")
def cams():
    return make_rig(ScenarioConfig())


def views_of(W, cams):
    return np.stack([c.R @ W for c in cams])


def test_aligner_consensus_case(cams, rng):
    W = geo.random_rotation(rng)
    res = align_orientations(views_of(W, cams), cams)
    np.testing.assert_allclose(res.consensus, W, atol=1e-9)
    np.testing.assert_allclose(res.skew, res.skew[0], atol=1e-6)
    np.testing.assert_allclose(res.aligned, views_of(W, cams), atol=1e-9)
    assert res.outlier == 0  # ties go to the lowest index


def test_aligner_rejects_skewed_view(cams, rng):
    for _ in range(20):
        W = geo.random_rotation(rng)
        views = views_of(W, cams)
        bad = int(rng.integers(4))
        views[bad] = cams[bad].R @ geo.rotation_with_angle(rng, np.radians(30)) @ W
        res = align_orientations(views, cams)
        assert res.outlier == bad
        assert geo.geodesic_deg(res.consensus, W) < 1e-6


def test_aligner_consensus_matches_grid_oracle(cams, rng):
    # three noisy views and one skewed view: the consensus is the chordal mean
    # of the kept views, so a local grid search cannot lower their chordal cost
    W = geo.random_rotation(rng)
    views = np.stack([c.R @ geo.rotation_with_angle(rng, np.radians(3)) @ W for c in cams])
    views[2] = cams[2].R @ geo.rotation_with_angle(rng, np.radians(30)) @ W
    res = align_orientations(views, cams)
    assert res.outlier == 2
    kept = [cams[v].R.T @ views[v] for v in (0, 1, 3)]

    def cost(R):
        return sum(np.sum((R - Q) ** 2) for Q in kept)

    best = cost(res.consensus)
    steps = np.radians(np.linspace(-1, 1, 11))
    for a in steps:
        for b in steps:
            for c in steps:
                assert cost(geo.axis_angle_to_matrix([a, b, c]) @ res.consensus) >= best - 1e-12


def test_aligner_invariant_and_idempotent(cams, rng):
    views = np.stack([geo.random_rotation(rng, 0.3) @ c.R for c in cams])
    res = align_orientations(views, cams)
    for v, c in enumerate(cams):
        np.testing.assert_allclose(res.aligned[v], c.R @ res.consensus, atol=1e-12)
    again = align_orientations(res.aligned, cams)
    np.testing.assert_allclose(again.aligned, res.aligned, atol=1e-9)
    np.testing.assert_allclose(again.consensus, res.consensus, atol=1e-9)


def test_aligner_permutation(cams, rng):
    views = np.stack([geo.random_rotation(rng, 0.4) @ c.R for c in cams])
    res = align_orientations(views, cams)
    perm = np.array([2, 0, 3, 1])
    pres = align_orientations(views[perm], [cams[i] for i in perm])
    np.testing.assert_allclose(pres.consensus, res.consensus, atol=1e-12)
    assert perm[pres.outlier] == res.outlier


def test_aligner_needs_two_views(cams):
    with pytest.raises(geo.GeometryError):
        align_orientations(np.eye(3)[None], cams[:1])


def test_update_orientation_examples(rng):
    O = geo.random_rotation(rng)
    np.testing.assert_allclose(update_orientation(O, np.zeros(6)), O, atol=1e-12)
    target = geo.random_rotation(rng)
    np.testing.assert_allclose(update_orientation(O, geo.matrix_to_rot6d(target) - geo.matrix_to_rot6d(O)), target,
                               atol=1e-12)
    with pytest.raises(geo.DegenerateRotationError):
        update_orientation(np.eye(3), -geo.matrix_to_rot6d(np.eye(3)))


def test_update_orientation_continuous(rng):
    for _ in range(200):
        O = geo.random_rotation(rng)
        d = rng.normal(size=6)
        d /= np.linalg.norm(d)
        prev = 0.0
        for eps in (1e-4, 1e-3, 1e-2):
            change = geo.geodesic_deg(update_orientation(O, eps * d), O)
            # 6D increments of size eps turn the frame by at most ~2 eps
            assert change <= np.degrees(2.0 * eps) + 1e-9
            assert change >= prev - 1e-9
            prev = change


def test_weak_perspective_depth_conversion():
    f, r = 400.0, 224
    for z in (2000.0, 5000.0, 9000.0):
        s = 2 * f * geo.WEAK_UNIT_MM / (r * z)
        T = weak_persp_to_translation(s, [3.0, -4.0], f, r)
        np.testing.assert_allclose(T, [3.0, -4.0, z])
        assert weak_persp_to_translation(2 * s, [0, 0], f, r)[2] == pytest.approx(z / 2)
        np.testing.assert_allclose(translation_to_weak_persp(T, f, r), [s, 3.0, -4.0])
    with pytest.raises(geo.GeometryError):
        weak_persp_to_translation(0.0, [0, 0], f, r)


def test_weak_perspective_matches_perspective_at_body_depth():
    f, r, z = 400.0, 224, 5000.0
    s = 2 * f * geo.WEAK_UNIT_MM / (r * z)
    T = weak_persp_to_translation(s, [0.0, 0.0], f, r)
    cam = geo.CameraView(geo.intrinsics(f, r, r), np.eye(3), T)
    for x in ([0.0, 0.0, 0.0], [120.0, -80.0, 0.0]):
        np.testing.assert_allclose(geo.project_perspective(np.array(x), cam),
                                   geo.project_weak_perspective(np.array(x), s, [0.0, 0.0], r), atol=1e-9)


def pelvis_observations(cams, p, O_g, T_g, a):
    """Pixels and unit-scale depths of the pelvis of a scaled body."""
    X_w = T_g + a * O_g @ p
    px, depth = [], []
    for c in cams:
        Xc = c.R @ X_w + c.T
        px.append(c.K[:2, :2] @ (Xc[:2] / Xc[2]) + c.K[:2, 2])
        depth.append(Xc[2] / a)
    return np.array(px), np.array(depth)


def test_solve_recovers_translation_and_scale(cams, rng):
    for _ in range(20):
        p = rng.normal(size=3) * 100
        O_g, T_g = geo.random_rotation(rng), rng.normal(size=3) * 200 + [0, 900, 0]
        a = float(rng.uniform(0.8, 1.2))
        px, depth = pelvis_observations(cams, p, O_g, T_g, a)
        sol = solve_translation_scale(p, O_g, cams, px, depth)
        assert sol.ok
        np.testing.assert_allclose(sol.transl, T_g, atol=1e-6)
        assert sol.scale == pytest.approx(a, abs=1e-6)
        assert sol.residual < 1e-6


def test_solve_identity_scale(cams, rng):
    p, O_g, T_g = rng.normal(size=3) * 100, geo.random_rotation(rng), np.array([10.0, 900.0, -30.0])
    px, depth = pelvis_observations(cams, p, O_g, T_g, 1.0)
    assert solve_translation_scale(p, O_g, cams, px, depth).scale == pytest.approx(1.0, abs=1e-9)


def test_solve_fixed_scale_matches_triangulation(cams, rng):
    for _ in range(10):
        p, O_g = rng.normal(size=3) * 100, geo.random_rotation(rng)
        T_g = rng.normal(size=3) * 200 + [0, 900, 0]
        px, depth = pelvis_observations(cams, p, O_g, T_g, 1.0)
        sol = solve_translation_scale(p, O_g, cams, px, depth, fixed_scale=1.0)
        X = geo.triangulate([geo.pixel_ray(c, uv) for c, uv in zip(cams, px)])
        np.testing.assert_allclose(sol.transl, X - O_g @ p, atol=1e-6)
        assert sol.scale == 1.0


def test_solve_degenerate_rig(rng):
    cam = make_rig(ScenarioConfig())[0]
    p, O_g = rng.normal(size=3) * 100, np.eye(3)
    px, depth = pelvis_observations([cam, cam, cam], p, O_g, np.array([0.0, 900.0, 0.0]), 1.0)
    with pytest.raises(SolveError):
        solve_translation_scale(p, O_g, [cam, cam, cam], px, depth)
    with pytest.raises(SolveError):
        solve_translation_scale(p, O_g, [cam], px[:1], depth[:1])


def test_solve_flags_negative_scale(cams):
    p, O_g, T_g = np.array([0.0, 0.0, 0.0]), np.eye(3), np.array([0.0, 900.0, 0.0])
    px, depth = pelvis_observations(cams, p, O_g, T_g, 1.0)
    sol = solve_translation_scale(p, O_g, cams, px, -depth)
    assert sol.scale < 0 and not sol.ok


def _system(p, O_g, cams, px, depth):
    """Independent assembly of the per-view ray constraints: ``A x - b``."""
    rows, rhs = [], []
    for c, uv, z in zip(cams, px, depth):
        d = np.linalg.solve(c.K, [uv[0], uv[1], 1.0])
        d /= d[2]
        rows.append(np.concatenate([c.R, (c.R @ O_g @ p - z * d)[:, None]], axis=1))
        rhs.append(-c.T)
    return np.concatenate(rows), np.concatenate(rhs)


def _grid_min(A, b, center, half, n=41, chunk=200_000):
    axes = [np.linspace(c - h, c + h, n) for c, h in zip(center, half)]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 4)
    best, arg = np.inf, None
    for i in range(0, len(grid), chunk):
        g = grid[i : i + chunk]
        cost = np.linalg.norm(g @ A.T - b, axis=1)
        j = int(np.argmin(cost))
        if cost[j] < best:
            best, arg = float(cost[j]), g[j]
    return best, arg


def test_solve_residual_beats_41_grid(cams, rng):
    for _ in range(2):
        p, O_g = rng.normal(size=3) * 100, geo.random_rotation(rng)
        T_g, a = rng.normal(size=3) * 200 + [0, 900, 0], float(rng.uniform(0.8, 1.2))
        px, depth = pelvis_observations(cams, p, O_g, T_g, a)
        px = px + rng.normal(scale=2.0, size=px.shape)
        sol = solve_translation_scale(p, O_g, cams, px, depth)
        A, b = _system(p, O_g, cams, px, depth)
        assert translation_residual(sol.transl, sol.scale, p, O_g, cams, px, depth) == pytest.approx(
            np.linalg.norm(A @ np.append(sol.transl, sol.scale) - b), rel=1e-9)
        best, _ = _grid_min(A, b, np.append(T_g, a), [50.0, 50.0, 50.0, 0.05])
        assert sol.residual <= best + 1e-9


def test_pixel_perturbation_matches_grid_refine(cams, rng):
    p, O_g = rng.normal(size=3) * 100, geo.random_rotation(rng)
    T_g, a = np.array([40.0, 880.0, -20.0]), 1.05
    px, depth = pelvis_observations(cams, p, O_g, T_g, a)
    px[1] += [5.0, 0.0]
    sol = solve_translation_scale(p, O_g, cams, px, depth)
    A, b = _system(p, O_g, cams, px, depth)
    center, half = np.append(T_g, a), np.array([40.0, 40.0, 40.0, 0.04])
    for _ in range(8):
        _, center = _grid_min(A, b, center, half, n=21)
        half = half / 5
    np.testing.assert_allclose(sol.transl, center[:3], atol=1e-3)
    assert sol.scale == pytest.approx(center[3], abs=1e-3)
    assert np.linalg.norm(sol.transl - T_g) < 100.0


def test_scenario_pelvis_solve(rng):
    sc = generate_scenario(ScenarioConfig(scale_range=(0.8, 1.2)), seed=5)
    gt = sc.gt
    p = forward(sc.template, gt.replace(global_orient=np.eye(3), transl=np.zeros(3), scale=1.0))[1][0]
    px, depth = pelvis_observations(sc.cams, p, gt.global_orient, gt.transl, gt.scale)
    sol = solve_translation_scale(p, gt.global_orient, sc.cams, px, depth)
    assert sol.scale == pytest.approx(gt.scale, abs=1e-6)
    np.testing.assert_allclose(sol.transl, gt.transl, atol=1e-6)
