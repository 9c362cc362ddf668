import numpy as np
import pytest

from mvhmr import geometry as geo
from mvhmr.engine import (
    EngineConfig,
    EngineError,
    ViewContext,
    apply_increment,
    correspondence_residuals,
    descent_step,
    initialize,
    iterate,
    layout_for,
    neural_step,
    reprojection_residual,
    residual_jacobian,
    root_aligned_error,
    run,
    run_views,
    sample_offsets,
    _align,
)
from mvhmr.fusion import FusionConfig, init_weights, zero_weights
from mvhmr.scenario import ScenarioConfig, generate_scenario

SMALL_NEURAL = dict(width=4, token_width=10, n_heads=5, n_layers=1, ff_width=12, hidden=(8,))


@pytest.mark.parametrize("kw", [
    {"mode": "gradient"}, {"aggregation": "median"}, {"schedule": ("grid", 1, 1)},
    {"schedule": (1, 1, 1, 2)}, {"schedule": ("grid", 0, 1, 2)}, {"step": 0.0}, {"damping": -1.0},
    {"code_gate_mm": 0.0}, {"code_neighbors": 0}, {"robust_px": -1.0}, {"n_views": 0},
])
def test_config_validation(kw):
    with pytest.raises(EngineError):
        EngineConfig(**kw)


def test_config_roundtrip():
    cfg = EngineConfig.with_orientation_mode("ind_align", aggregation="avg")
    assert not cfg.shared_orientation and cfg.aligner
    assert EngineConfig.from_dict(cfg.to_dict()) == cfg


def test_view_count_mismatch(scenario, pyramids):
    with pytest.raises(EngineError):
        ViewContext(scenario.template, scenario.cams[:3], pyramids, EngineConfig())


def test_trace_schedule_and_determinism(scenario):
    s1, t1 = run(scenario)
    s2, t2 = run(scenario)
    assert len(t1) == 5
    assert [str(x) for x in t1.levels] == ["init", "grid0", "1", "1", "2"]
    assert t1.to_dict() == t2.to_dict()
    np.testing.assert_array_equal(s1.theta, s2.theta)
    assert s1.scale == s2.scale
    assert t1.mpjpe[-1] < 0.1 * t1.mpjpe[0]


def test_init_keeps_injected_values(ctx, scenario):
    state = initialize(ctx, scenario.init)
    assert state is scenario.init
    _, trace = run(scenario)
    np.testing.assert_array_equal(trace.states[1].view_orient, scenario.init.view_orient)
    np.testing.assert_array_equal(trace.states[1].view_cam, scenario.init.view_cam)


def test_neural_init_leaves_orientation_and_camera(scenario, pyramids):
    cfg = EngineConfig(mode="neural")
    ctx = ViewContext(scenario.template, scenario.cams, pyramids, cfg)
    w = init_weights(FusionConfig(**SMALL_NEURAL), seed=0)
    w.tensors["grid_dec.1.W"] = np.random.default_rng(0).normal(size=w.tensors["grid_dec.1.W"].shape) * 0.01
    state = initialize(ctx, scenario.init, w)
    np.testing.assert_array_equal(state.view_orient, scenario.init.view_orient)
    np.testing.assert_array_equal(state.view_cam, scenario.init.view_cam)
    assert not np.allclose(state.theta, scenario.init.theta)
    with pytest.raises(EngineError):
        initialize(ctx, scenario.init)


def test_zero_weight_neural_step_only_aligns(scenario, pyramids):
    cfg = EngineConfig(mode="neural")
    ctx = ViewContext(scenario.template, scenario.cams, pyramids, cfg)
    w = zero_weights(FusionConfig(**SMALL_NEURAL))
    state = scenario.init
    out, _, failures = iterate(ctx, state, 1, w)
    aligned, _ = _align(ctx, state)
    assert failures == []
    np.testing.assert_allclose(out.view_orient, aligned.view_orient, atol=1e-12)
    np.testing.assert_allclose(out.view_cam, aligned.view_cam, atol=1e-9)
    np.testing.assert_allclose(out.theta, state.theta, atol=1e-12)
    np.testing.assert_array_equal(out.beta, state.beta)


def test_neural_run(scenario):
    w = init_weights(FusionConfig(**SMALL_NEURAL), seed=1)
    state, trace = run(scenario, EngineConfig(mode="neural"), w)
    assert len(trace) == 5 and np.all(np.isfinite(trace.residual_px))
    assert geo.is_rotation(state.global_orient, 1e-9)
    with pytest.raises(EngineError):
        run(scenario, EngineConfig(mode="neural"))


def test_iterate_index_range(ctx, scenario):
    for t in (0, 4):
        with pytest.raises(EngineError):
            iterate(ctx, scenario.init, t)


def test_zero_increment_is_identity(ctx, scenario):
    lay = layout_for(ctx)
    out, failures = apply_increment(ctx, scenario.init, np.zeros(lay.size))
    assert failures == []
    np.testing.assert_allclose(out.theta, scenario.init.theta, atol=1e-15)
    np.testing.assert_allclose(out.view_orient, scenario.init.view_orient, atol=1e-12)
    np.testing.assert_allclose(out.view_cam, scenario.init.view_cam, atol=1e-12)


def test_layout_sizes(ctx, scenario, pyramids):
    lay = layout_for(ctx)
    assert (lay.n_pose, lay.n_beta, lay.n_orient, lay.size) == (45, 10, 3, 45 + 10 + 3 + 12)
    ind = ViewContext(scenario.template, scenario.cams, pyramids, EngineConfig(shared_orientation=False))
    assert layout_for(ind).n_orient == 12


@pytest.mark.parametrize("kw", [{}, {"shared_orientation": False}, {"calibrated": False}])
def test_jacobian_matches_finite_differences(scenario, pyramids, kw):
    ctx = ViewContext(scenario.template, scenario.cams, pyramids, EngineConfig(**kw))
    state = scenario.init
    r, J, ok = residual_jacobian(ctx, state, 1)
    lay = layout_for(ctx)
    calibrated = ctx.config.calibrated
    for c in range(lay.size):
        h = 1e-3 if (c >= lay.cam.start and calibrated) else 1e-6
        d = np.zeros(lay.size)
        d[c] = h
        rp, okp = sample_offsets(ctx, apply_increment(ctx, state, d)[0], 1)
        rm, okm = sample_offsets(ctx, apply_increment(ctx, state, -d)[0], 1)
        m = ok & okp & okm
        fd = ((rp - rm) / (2 * h))[m]
        err = np.linalg.norm(J[..., c][m] - fd) / max(np.linalg.norm(fd), 1e-12)
        assert err < 1e-3, f"column {c}"


def test_correspondence_residuals_vanish_where_codes_match(ctx, scenario):
    corr = correspondence_residuals(ctx, scenario.gt, 2)
    assert corr.ok.mean() > 0.5
    # at the truth each valid sample points back at (an affine mix of) its own vertices
    assert np.median(np.linalg.norm(corr.r[corr.ok], axis=1)) < 1.0
    np.testing.assert_array_equal(corr.r[~corr.ok], 0.0)
    assert np.all(corr.confidence[corr.ok] > 0)


def test_ground_truth_stays_near_its_own_pyramids():
    worst = 0.0
    for seed in range(10):
        sc = generate_scenario(seed=seed)
        ctx = ViewContext(sc.template, sc.cams, sc.pyramids(), EngineConfig())
        out, _, _ = iterate(ctx, sc.gt, 1)
        worst = max(worst, root_aligned_error(ctx, out, sc.gt_mesh[1]))
        assert reprojection_residual(ctx, out) < 1.0
    assert worst < 10.0


@pytest.mark.xfail(strict=True, reason="field discretization moves the truth by up to ~0.13 rad; see the notes")
def test_ground_truth_is_exact_fixed_point(ctx, scenario):
    lay = layout_for(ctx)
    d = descent_step(ctx, scenario.gt, 1)
    assert np.abs(d[lay.pose]).max() < 1e-3 and np.abs(d[lay.beta]).max() < 1e-3
    assert np.abs(d[lay.orient]).max() < 1e-3


def test_single_joint_error_decreases():
    n, dec = 100, 0
    for seed in range(n):
        sc = generate_scenario(seed=seed)
        ctx = ViewContext(sc.template, sc.cams, sc.pyramids(), EngineConfig())
        rng = np.random.default_rng(seed)
        j = int(rng.integers(0, 15))
        axis = rng.normal(size=3)
        theta = sc.gt.theta.copy()
        theta[j] = theta[j] @ geo.axis_angle_to_matrix(0.2 * axis / np.linalg.norm(axis))
        state = sc.gt.replace(theta=theta)
        out, _, _ = iterate(ctx, state, 1)
        dec += geo.geodesic_deg(out.theta[j], sc.gt.theta[j]) < geo.geodesic_deg(state.theta[j], sc.gt.theta[j])
    assert dec / n >= 0.95


def test_disentangled_pose_update(scenario, pyramids):
    base = dict(aligner=False, orientation_path=False, camera_path=False)
    deltas = []
    for shared in (True, False):
        ctx = ViewContext(scenario.template, scenario.cams, pyramids, EngineConfig(shared_orientation=shared, **base))
        lay = layout_for(ctx)
        d = descent_step(ctx, scenario.init, 1)
        np.testing.assert_array_equal(d[lay.orient], 0.0)
        np.testing.assert_array_equal(d[lay.cam], 0.0)
        deltas.append(d[: lay.n_pose + lay.n_beta])
    np.testing.assert_allclose(deltas[0], deltas[1], atol=1e-12)


def test_neural_pose_update_ignores_orientation_decoder(scenario, pyramids):
    cfg = EngineConfig(mode="neural", aligner=False, orientation_path=False, camera_path=False)
    ctx = ViewContext(scenario.template, scenario.cams, pyramids, cfg)
    w1 = init_weights(FusionConfig(**SMALL_NEURAL), seed=3)
    rng = np.random.default_rng(3)
    w1.tensors["ps_dec.1.W"] = rng.normal(size=w1.tensors["ps_dec.1.W"].shape) * 0.01
    w2 = init_weights(FusionConfig(**SMALL_NEURAL), seed=3)
    w2.tensors = dict(w1.tensors)
    w2.tensors["ori_dec.1.W"] = rng.normal(size=w2.tensors["ori_dec.1.W"].shape)
    a, _ = neural_step(ctx, scenario.init, 1, w1)
    b, _ = neural_step(ctx, scenario.init, 1, w2)
    np.testing.assert_array_equal(a.theta, b.theta)
    np.testing.assert_array_equal(a.beta, b.beta)
    assert not np.allclose(a.theta, scenario.init.theta)


def test_residual_non_increasing_on_a_few_seeds():
    for seed in range(5):
        _, trace = run(generate_scenario(seed=seed))
        r = trace.residual_px
        assert all(b <= a + 0.25 for a, b in zip(r[1:], r[2:]))


def test_orientation_modes_and_calibration_free(scenario):
    for mode in ("ind", "ind_align", "tran_align"):
        state, trace = run(scenario, EngineConfig.with_orientation_mode(mode))
        assert trace.mpjpe[-1] < trace.mpjpe[0]
    state, trace = run(scenario, EngineConfig(calibrated=False))
    assert trace.final_solve is None and state.scale == 1.0
    assert np.all(np.isfinite(trace.mpjpe))


def test_calibration_free_recovers_camera_offsets():
    # far rig, so weak perspective is accurate; the offsets start ~200 mm off
    cfg = ScenarioConfig(focal=5000.0, rig_radius=60000.0)
    finals = []
    for seed in range(4):
        sc = generate_scenario(cfg, seed)
        _, trace = run(sc, EngineConfig(calibrated=False, default_focal=5000.0))
        finals.append(trace.mpjpe[-1] / trace.mpjpe[0])
    assert np.median(finals) < 0.25


def test_scale_solve_recorded(scenario):
    _, trace = run(scenario)
    assert trace.final_solve["ok"]
    _, off = run(scenario, EngineConfig(scale_solve=False))
    assert off.final_solve is None


def test_run_views_requires_matching_init(ctx, scenario):
    bad = scenario.init.replace(view_orient=scenario.init.view_orient[:2], view_cam=scenario.init.view_cam[:2])
    with pytest.raises(EngineError):
        run_views(ctx, bad)


def test_occluded_and_noisy_scenarios_run():
    sc = generate_scenario(ScenarioConfig(occluded_views=2, pixel_noise=0.5), seed=2)
    for agg in ("max", "avg", "softmax_sum", "transformer_max"):
        _, trace = run(sc, EngineConfig(aggregation=agg))
        assert trace.mpjpe[-1] < trace.mpjpe[0]
