"""The iterative multi-view regression loop.

One run is an initialization from grid-sampled features followed by three
feedback iterations. Each iteration aligns the per-view orientations, samples
the current mesh in every view, fuses the samples per vertex and updates the
pose, shape, per-view orientation and per-view camera. After the last
iteration a single linear solve recovers the global translation and body
scale.

Two regressors share this loop. In descent mode the pyramids hold analytic
misalignment fields and the update is a damped Gauss-Newton step on
residuals built from the sampled offsets and surface codes, weighted by the
vertex-wise view fusion. In neural mode file-loaded decoders predict the
updates.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from .body_model import (
    BodyState,
    BodyTemplate,
    kinematics,
    neutral_state,
    pose_jacobian,
    shape_jacobian,
)
from .estimators import (
    SolveError,
    align_orientations,
    solve_translation_scale,
    translation_to_weak_persp,
    update_orientation,
    weak_persp_to_translation,
)
from .features import (
    CH_CODE,
    CH_DU,
    CH_DV,
    CH_OCC,
    CODE_SCALE_MM,
    extract_paf,
    grid_sample_init,
    sample,
    sample_grad,
    surface_codes,
)
from .fusion import (
    AggregationKind,
    aggregate,
    aggregation_weights,
    camera_preactivation,
    decode_camera,
    decode_grid,
    decode_orientation,
    decode_pose_shape,
    orientation_tokens,
    project_tokens,
    transformer_encode,
)
from .geometry import (
    DEFAULT_FOCAL,
    WEAK_UNIT_MM,
    DegenerateRotationError,
    GeometryError,
    axis_angle_to_matrix,
    chordal_mean,
    geodesic_deg,
    matrix_to_rot6d,
    skew,
)
from .metrics import mpjpe

GRID = "grid"
DEFAULT_SCHEDULE = (GRID, 1, 1, 2)
RESIDUAL_LEVEL = 2
MODES = ("descent", "neural")

# named orientation strategies: (aligner, shared orientation update)
ORIENTATION_MODES = {
    "ind": (False, False),
    "ind_align": (True, False),
    "tran_align": (True, True),
}


class EngineError(ValueError):
    pass


@dataclass
class EngineConfig:
    n_views: int = 4
    n_iterations: int = 4
    schedule: tuple = DEFAULT_SCHEDULE
    mode: str = "descent"
    aggregation: str = "max"
    calibrated: bool = True
    aligner: bool = True
    shared_orientation: bool = True  # one joint orientation update for all views
    scale_solve: bool = True
    orientation_path: bool = True
    camera_path: bool = True
    step: float = 1.0
    damping: float = 1e-3
    default_focal: float = DEFAULT_FOCAL
    grid_res: int = 8
    code_gate_mm: float = 2.0  # largest accepted surface-code fit error
    code_neighbors: int = 3
    code_extrapolation: float = 0.1  # most negative accepted affine weight
    damping_floor: float = 1e-3  # per-group Tikhonov floor, relative to the group's mean curvature
    robust_px: float = 1.0  # Cauchy scale of the sample weights; 0 disables
    seed: int = 0

    def __post_init__(self):
        self.schedule = tuple(self.schedule)
        if self.mode not in MODES:
            raise EngineError(f"unknown mode {self.mode!r}")
        try:
            self.aggregation = AggregationKind.parse(self.aggregation).value
        except ValueError as exc:
            raise EngineError(str(exc)) from None
        if len(self.schedule) != self.n_iterations:
            raise EngineError("schedule length must equal the iteration count")
        if self.n_iterations < 1 or self.schedule[0] != GRID:
            raise EngineError("the schedule starts with grid sampling")
        if any(lv not in (1, 2) for lv in self.schedule[1:]):
            raise EngineError("feedback iterations sample pyramid levels 1 or 2")
        if not self.step > 0 or not self.damping >= 0:
            raise EngineError("need step > 0 and damping >= 0")
        if not self.code_gate_mm > 0 or self.code_neighbors < 1 or self.robust_px < 0:
            raise EngineError("need code_gate_mm > 0, code_neighbors >= 1 and robust_px >= 0")
        if self.n_views < 1:
            raise EngineError("need at least one view")

    @classmethod
    def with_orientation_mode(cls, name, **kw):
        aligner, shared = ORIENTATION_MODES[name]
        return cls(aligner=aligner, shared_orientation=shared, **kw)

    @property
    def use_aligner(self):
        return self.calibrated and self.aligner and self.n_views >= 2

    @property
    def use_scale_solve(self):
        return self.calibrated and self.scale_solve and self.n_views >= 2

    @property
    def use_shared_orientation(self):
        return self.calibrated and self.shared_orientation

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["schedule"] = list(self.schedule)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class IterationTrace:
    states: list = field(default_factory=list)
    residual_px: list = field(default_factory=list)
    mpjpe: list = field(default_factory=list)
    levels: list = field(default_factory=list)
    aligner: list = field(default_factory=list)
    failures: list = field(default_factory=list)
    final_solve: dict | None = None

    def record(self, state, residual, err, level, aligner=None, failures=()):
        self.states.append(state)
        self.residual_px.append(float(residual))
        self.mpjpe.append(None if err is None else float(err))
        self.levels.append(level)
        self.aligner.append(aligner)
        self.failures.append(list(failures))

    def __len__(self):
        return len(self.states)

    def to_dict(self):
        return {
            "levels": [str(x) for x in self.levels],
            "residual_px": self.residual_px,
            "mpjpe": self.mpjpe,
            "aligner": self.aligner,
            "failures": self.failures,
            "final_solve": self.final_solve,
            "states": [s.to_dict() for s in self.states],
        }


# ---------------------------------------------------------------------------
# per-view geometry
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ViewContext:
    """Everything an iteration needs besides the state."""

    template: BodyTemplate
    cams: list
    pyramids: list
    config: EngineConfig

    def __post_init__(self):
        n = self.config.n_views
        if len(self.cams) != n or len(self.pyramids) != n:
            raise EngineError(f"expected {n} cameras and pyramids, got {len(self.cams)} and {len(self.pyramids)}")

    @property
    def n(self):
        return len(self.cams)

    def crop(self, v):
        return self.cams[v].resolution[0]


def view_translation(ctx: ViewContext, v, cam_params):
    """Camera-frame translation of view ``v`` from its weak-perspective camera."""
    cam = ctx.cams[v]
    focal = cam.focal if ctx.config.calibrated else ctx.config.default_focal
    return weak_persp_to_translation(cam_params[0], cam_params[1:], focal, ctx.crop(v))


def project_view(ctx: ViewContext, v, points, orient, cam_params):
    """Pixels and in-front flags of body-frame ``points`` in view ``v``."""
    X = points @ orient.T
    if ctx.config.calibrated:
        Xc = X + view_translation(ctx, v, cam_params)
        z = Xc[:, 2]
        K = ctx.cams[v].K
        safe = np.where(z > 1e-9, z, 1.0)
        uv = np.stack([K[0, 0] * Xc[:, 0] / safe + K[0, 2], K[1, 1] * Xc[:, 1] / safe + K[1, 2]], axis=1)
        return uv, z > 1e-9
    half = 0.5 * ctx.crop(v)
    s, o = cam_params[0], cam_params[1:]
    uv = half + half * s * (X[:, :2] + o) / WEAK_UNIT_MM
    return uv, np.ones(len(points), dtype=bool)


def per_view_world(ctx: ViewContext, state: BodyState, points):
    """World-frame copy of body-frame ``points`` as reconstructed by each view."""
    out = []
    for v, cam in enumerate(ctx.cams):
        T = view_translation(ctx, v, state.view_cam[v])
        out.append(cam.R.T @ (state.view_orient[v] @ points.T + (T - cam.T)[:, None]))
    return [o.T for o in out]


def sample_offsets(ctx: ViewContext, state: BodyState, level, kin=None):
    """Sampled ``(du, dv)`` offsets and validity for every view: ``(N, n, 2)``, ``(N, n)``."""
    tpl = ctx.template
    kin = kin or kinematics(tpl, state, tpl.down_idx)
    res = np.zeros((ctx.n, len(kin.posed), 2))
    ok = np.zeros((ctx.n, len(kin.posed)), dtype=bool)
    for v in range(ctx.n):
        uv, front = project_view(ctx, v, kin.posed, state.view_orient[v], state.view_cam[v])
        vals, inside = sample(ctx.pyramids[v][level], uv)
        ok[v] = inside & front
        res[v] = np.where(ok[v][:, None], vals[:, CH_DU : CH_DV + 1], 0.0)
    return res, ok


def reprojection_residual(ctx: ViewContext, state: BodyState, level=RESIDUAL_LEVEL):
    """Mean sampled pixel misalignment over valid vertex samples of all views."""
    res, ok = sample_offsets(ctx, state, level)
    if not ok.any():
        return 0.0
    return float(np.linalg.norm(res[ok], axis=1).mean())


# ---------------------------------------------------------------------------
# descent mode: residuals, Jacobians and the damped Gauss-Newton step
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ParamLayout:
    """Column layout of the descent-mode parameter increment."""

    n_pose: int
    n_beta: int
    n_views: int
    shared_orientation: bool

    @property
    def n_orient(self):
        return 3 if self.shared_orientation else 3 * self.n_views

    @property
    def pose(self):
        return slice(0, self.n_pose)

    @property
    def beta(self):
        return slice(self.n_pose, self.n_pose + self.n_beta)

    @property
    def orient(self):
        a = self.n_pose + self.n_beta
        return slice(a, a + self.n_orient)

    @property
    def cam(self):
        a = self.n_pose + self.n_beta + self.n_orient
        return slice(a, a + 3 * self.n_views)

    @property
    def size(self):
        return self.n_pose + self.n_beta + self.n_orient + 3 * self.n_views


def layout_for(ctx: ViewContext) -> ParamLayout:
    tpl = ctx.template
    return ParamLayout(3 * (tpl.n_joints - 1), tpl.n_betas, ctx.n, ctx.config.use_shared_orientation)


def pixel_jacobian(ctx: ViewContext, state: BodyState, v, P, dP):
    """Pixels of body points ``P`` in view ``v`` and ``d pixel / d params``.

    ``dP`` is ``d P / d (pose, beta)``; returns ``(uv, front, D)`` with ``D``
    of shape ``(n, 2, P)`` in the column layout of `layout_for`.
    """
    lay = layout_for(ctx)
    n = len(P)
    O = state.view_orient[v]
    cam_p = state.view_cam[v]
    uv, front = project_view(ctx, v, P, O, cam_p)
    X = P @ O.T
    Jp = np.zeros((n, 2, 3))
    if ctx.config.calibrated:
        Xc = X + view_translation(ctx, v, cam_p)
        K = ctx.cams[v].K
        z = np.where(front, Xc[:, 2], 1.0)
        Jp[:, 0, 0] = K[0, 0] / z
        Jp[:, 0, 2] = -K[0, 0] * Xc[:, 0] / z**2
        Jp[:, 1, 1] = K[1, 1] / z
        Jp[:, 1, 2] = -K[1, 1] * Xc[:, 1] / z**2
    else:
        half = 0.5 * ctx.crop(v)
        Jp[:, 0, 0] = Jp[:, 1, 1] = half * cam_p[0] / WEAK_UNIT_MM
    cols = np.zeros((n, 3, lay.size))
    cols[:, :, : lay.n_pose + lay.n_beta] = np.einsum("ij,njp->nip", O, dP)
    rot_cols = -skew(X)  # left increment of O in the camera frame
    if lay.shared_orientation:
        cols[:, :, lay.orient] = rot_cols @ ctx.cams[v].R
    else:
        cols[:, :, lay.orient.start + 3 * v : lay.orient.start + 3 * v + 3] = rot_cols
    D = np.einsum("nab,nbp->nap", Jp, cols)
    c0 = lay.cam.start + 3 * v
    if ctx.config.calibrated:
        D[:, :, c0 : c0 + 3] = Jp  # camera translation increment, mm
    else:
        half = 0.5 * ctx.crop(v)
        D[:, :, c0] = half * (X[:, :2] + cam_p[1:]) / WEAK_UNIT_MM
        D[:, 0, c0 + 1] = D[:, 1, c0 + 2] = half * cam_p[0] / WEAK_UNIT_MM
    return uv, front, D


def _body_jacobian(ctx, state):
    tpl = ctx.template
    kin = kinematics(tpl, state, tpl.down_idx)
    n = len(kin.posed)
    dP = np.concatenate(
        [pose_jacobian(tpl, kin).reshape(n, 3, -1), shape_jacobian(tpl, state, kin)], axis=2
    )
    return kin.posed, dP


def residual_jacobian(ctx: ViewContext, state: BodyState, level):
    """Sampled offset residuals and their analytic Jacobian.

    Returns ``(r, J, ok)`` with ``r`` of shape ``(N, n, 2)``, ``J`` of shape
    ``(N, n, 2, P)`` for the columns of `layout_for`, and validity ``ok``.
    The Jacobian chains the sampling gradient, the projection Jacobian and
    the kinematic Jacobians; increments are applied by `apply_increment`.
    """
    lay = layout_for(ctx)
    P, dP = _body_jacobian(ctx, state)
    n = len(P)
    r = np.zeros((ctx.n, n, 2))
    J = np.zeros((ctx.n, n, 2, lay.size))
    ok = np.zeros((ctx.n, n), dtype=bool)
    for v in range(ctx.n):
        uv, front, D = pixel_jacobian(ctx, state, v, P, dP)
        fmap = ctx.pyramids[v][level]
        vals, inside = sample(fmap, uv)
        G = sample_grad(fmap, uv)[:, CH_DU : CH_DV + 1, :]  # (n, 2, 2)
        ok[v] = inside & front
        r[v] = np.where(ok[v][:, None], vals[:, CH_DU : CH_DV + 1], 0.0)
        J[v] = np.where(ok[v][:, None, None], np.einsum("nab,nbp->nap", G, D), 0.0)
    return r, J, ok


@dataclass
class Correspondences:
    """Code-matched residuals of every view.

    ``r`` and ``J`` are shaped as in `residual_jacobian`; ``confidence`` is
    the sampled occupancy of every view and vertex.
    """

    r: np.ndarray
    J: np.ndarray
    ok: np.ndarray
    confidence: np.ndarray


def correspondence_residuals(ctx: ViewContext, state: BodyState, level) -> Correspondences:
    """Residuals between the pixel each sample points at and the surface point it names.

    A sample at ``uv`` points at ``uv + (du, dv)`` and carries the surface
    code of the body point seen there. The code is written as an affine
    combination of the codes of its nearest downsampled vertices; the
    residual is the pointed-at pixel minus the same combination of those
    vertices' current projections. The pointed-at pixel is held fixed in the
    Jacobian. Samples whose code is not reproduced within ``code_gate_mm``,
    or that need strong extrapolation, are invalid.
    """
    cfg = ctx.config
    lay = layout_for(ctx)
    P, dP = _body_jacobian(ctx, state)
    n = len(P)
    own = surface_codes(ctx.template)
    k = cfg.code_neighbors
    gate = cfg.code_gate_mm / CODE_SCALE_MM
    r = np.zeros((ctx.n, n, 2))
    J = np.zeros((ctx.n, n, 2, lay.size))
    ok = np.zeros((ctx.n, n), dtype=bool)
    conf = np.zeros((ctx.n, n))
    for v in range(ctx.n):
        uv, front, D = pixel_jacobian(ctx, state, v, P, dP)
        vals, inside = sample(ctx.pyramids[v][level], uv)
        code = vals[:, CH_CODE : CH_CODE + own.shape[1]]
        dist = np.linalg.norm(code[:, None, :] - own[None], axis=2)
        nb = np.argsort(dist, axis=1, kind="stable")[:, :k]
        A = np.concatenate([np.swapaxes(own[nb], 1, 2), np.ones((n, 1, k))], axis=1)
        b = np.concatenate([code, np.ones((n, 1))], axis=1)
        wts = np.einsum("nij,nj->ni", np.linalg.pinv(A, rcond=1e-6), b)
        fit = np.linalg.norm(np.einsum("nij,nj->ni", A, wts) - b, axis=1)
        good = (fit < gate) & (wts.min(axis=1) > -cfg.code_extrapolation)
        ok[v] = inside & front & front[nb].all(axis=1) & good
        target = uv + vals[:, CH_DU : CH_DV + 1]
        est = np.einsum("nk,nkc->nc", wts, uv[nb])
        r[v] = np.where(ok[v][:, None], target - est, 0.0)
        J[v] = np.where(ok[v][:, None, None], -np.einsum("nk,nkap->nap", wts, D[nb]), 0.0)
        conf[v] = np.where(ok[v], vals[:, CH_OCC], 0.0)
    return Correspondences(r, J, ok, conf)


def apply_increment(ctx: ViewContext, state: BodyState, delta):
    """Apply a descent-mode parameter increment; returns ``(state, failures)``.

    Joint increments right-multiply the local rotations, orientation
    increments left-multiply in the camera frame (a shared increment is a
    world-frame rotation) and reach the state as additive 6D deltas.
    Calibrated camera increments move the view translation in millimeters;
    calibration-free ones move ``(s, o_x, o_y)`` directly.
    """
    lay = layout_for(ctx)
    failures = []
    dth = delta[lay.pose].reshape(-1, 3)
    theta = np.stack([th @ axis_angle_to_matrix(d) for th, d in zip(state.theta, dth)])
    beta = state.beta + delta[lay.beta]
    orient = state.view_orient.copy()
    if ctx.config.orientation_path:
        dori = delta[lay.orient].reshape(-1, 3)
        for v in range(ctx.n):
            w = ctx.cams[v].R @ dori[0] if lay.shared_orientation else dori[v]
            target = axis_angle_to_matrix(w) @ orient[v]
            try:
                orient[v] = update_orientation(orient[v], matrix_to_rot6d(target) - matrix_to_rot6d(orient[v]))
            except DegenerateRotationError:
                failures.append(f"orientation update of view {v} degenerate")
    cams = state.view_cam.copy()
    if ctx.config.camera_path:
        dcam = delta[lay.cam].reshape(-1, 3)
        for v in range(ctx.n):
            try:
                if ctx.config.calibrated:
                    T = view_translation(ctx, v, cams[v]) + dcam[v]
                    cams[v] = translation_to_weak_persp(T, ctx.cams[v].focal, ctx.crop(v))
                else:
                    new = cams[v] + dcam[v]
                    if new[0] <= 0:
                        raise GeometryError("scale must stay positive")
                    cams[v] = new
            except GeometryError:
                failures.append(f"camera update of view {v} rejected")
    return state.replace(theta=theta, beta=beta, view_orient=orient, view_cam=cams), failures


def fusion_weights(ctx: ViewContext, corr: Correspondences):
    """Per-sample least-squares weights ``(N, n, 2)`` from vertex-wise view fusion.

    The aggregation kind turns the per-view confidences of each vertex into
    convex view weights, scaled by the view count so that average pooling
    weighs every sample one. A Cauchy factor then damps large residuals.
    """
    cfg = ctx.config
    score = np.repeat(corr.confidence[..., None], 2, axis=2)
    w = aggregation_weights(score, corr.ok, cfg.aggregation) * ctx.n
    w = np.where(corr.ok[..., None], w, 0.0)
    if cfg.robust_px > 0:
        w = w / (1.0 + np.sum(corr.r**2, axis=-1, keepdims=True) / cfg.robust_px**2)
    return w


def descent_step(ctx: ViewContext, state: BodyState, level):
    """Damped Gauss-Newton increment on the fused correspondence residuals."""
    cfg = ctx.config
    lay = layout_for(ctx)
    corr = correspondence_residuals(ctx, state, level)
    w = fusion_weights(ctx, corr).reshape(-1)
    active = np.ones(lay.size, dtype=bool)
    if not cfg.orientation_path:
        active[lay.orient] = False
    if not cfg.camera_path:
        active[lay.cam] = False
    Ja = corr.J.reshape(-1, lay.size)[:, active]
    r = corr.r.reshape(-1)
    H = Ja.T @ (w[:, None] * Ja)
    g = Ja.T @ (w * r)
    d = np.diag(H).copy()
    floor = np.zeros(len(d))
    # camera scale and offsets have different units, so they get separate floors
    cam = np.arange(lay.size)[lay.cam]
    groups = (lay.pose, lay.beta, lay.orient, cam[0::3], np.concatenate([cam[1::3], cam[2::3]]))
    for sl in groups:
        cols = np.zeros(lay.size, dtype=bool)
        cols[sl] = True
        cols = cols[active]
        if cols.any():
            floor[cols] = cfg.damping_floor * max(float(d[cols].mean()), 1e-12)
    A = H + np.diag(cfg.damping * d + floor)
    delta = np.zeros(lay.size)
    delta[active] = -cfg.step * np.linalg.solve(A, g)
    return delta


# ---------------------------------------------------------------------------
# neural mode
# ---------------------------------------------------------------------------


def _apply_pose_deltas(state: BodyState, dtheta6, dbeta):
    theta = state.theta.copy()
    failures = []
    for j, d in enumerate(dtheta6):
        try:
            theta[j] = update_orientation(theta[j], d)
        except DegenerateRotationError:
            failures.append(f"joint {j + 1} update degenerate")
    return state.replace(theta=theta, beta=state.beta + dbeta), failures


def neural_step(ctx: ViewContext, state: BodyState, level, weights):
    cfg = ctx.config
    tpl = ctx.template
    kin = kinematics(tpl, state, tpl.down_idx)
    paf = []
    for v in range(ctx.n):
        weak = None
        if not cfg.calibrated:
            # weak projection of the camera-aligned body
            weak = (state.view_cam[v][0], state.view_cam[v][1:])
            pts = kin.posed @ state.view_orient[v].T
            paf.append(extract_paf(pts, ctx.cams[v], ctx.pyramids[v], level, weak=weak))
        else:
            pts = ctx.cams[v].R.T @ (state.view_orient[v] @ kin.posed.T
                                     + (view_translation(ctx, v, state.view_cam[v]) - ctx.cams[v].T)[:, None])
            paf.append(extract_paf(pts.T, ctx.cams[v], ctx.pyramids[v], level))
    feats = np.stack([p.features for p in paf])  # (N, n, C')
    masks = np.stack([p.valid for p in paf])
    # pose and shape: per-vertex tokens, fused over views, decoded jointly
    tokens = project_tokens(feats, weights)
    fused = aggregate(tokens, masks, cfg.aggregation, encoder=weights.pose_encoder)
    dtheta, dbeta = decode_pose_shape(fused, weights)
    state, failures = _apply_pose_deltas(state, dtheta, dbeta)
    # orientation and camera: one token per view
    o6 = np.stack([matrix_to_rot6d(O) for O in state.view_orient])
    otok = orientation_tokens(feats, o6, weights)
    orient = state.view_orient.copy()
    if cfg.orientation_path:
        view_ok = masks.any(axis=1)
        enc = weights.orientation_encoder
        refined = transformer_encode(otok, enc, mask=view_ok) if enc is not None else otok
        dO = decode_orientation(refined, weights)
        for v in range(ctx.n):
            try:
                orient[v] = update_orientation(orient[v], dO[v])
            except DegenerateRotationError:
                failures.append(f"orientation update of view {v} degenerate")
    cams = state.view_cam.copy()
    if cfg.camera_path:
        for v in range(ctx.n):
            cams[v] = decode_camera(otok[v], weights, base=camera_preactivation(cams[v]))
    return state.replace(view_orient=orient, view_cam=cams), failures


# ---------------------------------------------------------------------------
# the loop
# ---------------------------------------------------------------------------


def _align(ctx: ViewContext, state: BodyState):
    res = align_orientations(state.view_orient, ctx.cams)
    diag = {"outlier": res.outlier, "skew_deg": [float(x) for x in res.skew]}
    return state.replace(view_orient=res.aligned, global_orient=res.consensus), diag


def initialize(ctx: ViewContext, init_spec: BodyState, weights=None) -> BodyState:
    """Initial state: per-view orientations and cameras come from ``init_spec``.

    Descent mode keeps ``init_spec``'s pose and shape. Neural mode decodes
    pose and shape from the view-pooled grid samples of the coarsest map,
    starting from the neutral body.
    """
    cfg = ctx.config
    if init_spec.n_views != ctx.n:
        raise EngineError(f"init has {init_spec.n_views} views, the rig has {ctx.n}")
    state = init_spec
    if cfg.mode == "neural":
        if weights is None:
            raise EngineError("neural mode needs weights")
        grid = np.stack([grid_sample_init(p[0], cfg.grid_res) for p in ctx.pyramids])
        dtheta, dbeta = decode_grid(grid.max(axis=0), weights)
        neutral = neutral_state(ctx.template)
        state, _ = _apply_pose_deltas(
            state.replace(theta=neutral.theta, beta=neutral.beta), dtheta, dbeta
        )
    return state


def iterate(ctx: ViewContext, state: BodyState, t, weights=None):
    """One feedback iteration; returns ``(state, aligner diagnostics, failures)``."""
    cfg = ctx.config
    if not 1 <= t < cfg.n_iterations:
        raise EngineError(f"feedback iteration index {t} out of range")
    level = cfg.schedule[t]
    diag = None
    if cfg.use_aligner:
        state, diag = _align(ctx, state)
    if cfg.mode == "descent":
        delta = descent_step(ctx, state, level)
        state, failures = apply_increment(ctx, state, delta)
    else:
        state, failures = neural_step(ctx, state, level, weights)
    if cfg.use_aligner:
        state, _ = _align(ctx, state)
    return state, diag, failures


def world_orientation(ctx: ViewContext, state: BodyState):
    return chordal_mean(np.stack([c.R.T @ O for c, O in zip(ctx.cams, state.view_orient)]))


def finalize(ctx: ViewContext, state: BodyState):
    """Global orientation, translation and scale of the final state.

    With the scale solve the pelvis of every view is put back on its camera
    ray at its weak-perspective depth. Without it (or when it fails) the
    scale stays 1 and the translation is the mean of the per-view ones.
    """
    cfg = ctx.config
    tpl = ctx.template
    O_g = world_orientation(ctx, state)
    kin = kinematics(tpl, state, np.array([], dtype=int))
    p = kin.joints[0]
    T_views = np.stack([
        c.R.T @ (view_translation(ctx, v, state.view_cam[v]) - c.T) for v, c in enumerate(ctx.cams)
    ])
    fallback = state.replace(global_orient=O_g, transl=T_views.mean(axis=0), scale=1.0)
    if not cfg.use_scale_solve:
        return fallback, None
    px, depth = [], []
    for v, cam in enumerate(ctx.cams):
        X = state.view_orient[v] @ p + view_translation(ctx, v, state.view_cam[v])
        px.append(cam.K[:2, :2] @ (X[:2] / X[2]) + cam.K[:2, 2])
        depth.append(X[2])
    info = {"ok": False}
    try:
        sol = solve_translation_scale(p, O_g, ctx.cams, np.array(px), np.array(depth))
        info = {"ok": bool(sol.ok), "scale": sol.scale, "residual_mm": sol.residual,
                "transl": [float(x) for x in sol.transl]}
    except SolveError as exc:
        info["error"] = str(exc)
        return fallback, info
    if not sol.ok:
        return fallback, info
    return state.replace(global_orient=O_g, transl=sol.transl, scale=sol.scale), info


def root_aligned_error(ctx: ViewContext, state: BodyState, gt_joints):
    """Mean over views of the root-aligned joint error of each view's reconstruction."""
    kin = kinematics(ctx.template, state, np.array([], dtype=int))
    return float(np.mean([mpjpe(j, gt_joints) for j in per_view_world(ctx, state, kin.joints)]))


def run_views(ctx: ViewContext, init_spec: BodyState, weights=None, gt_joints=None):
    """Full schedule on prepared views; returns ``(final state, trace)``."""
    cfg = ctx.config
    if cfg.mode == "neural" and weights is None:
        raise EngineError("neural mode needs weights")
    if init_spec.n_views != ctx.n:
        raise EngineError(f"init has {init_spec.n_views} views, the rig has {ctx.n}")
    trace = IterationTrace()

    def err(s):
        return None if gt_joints is None else root_aligned_error(ctx, s, gt_joints)

    state = init_spec
    trace.record(state, reprojection_residual(ctx, state), err(state), "init")
    state = initialize(ctx, init_spec, weights)
    trace.record(state, reprojection_residual(ctx, state), err(state), f"{GRID}0")
    for t in range(1, cfg.n_iterations):
        state, diag, failures = iterate(ctx, state, t, weights)
        trace.record(state, reprojection_residual(ctx, state), err(state), cfg.schedule[t], diag, failures)
    state, info = finalize(ctx, state)
    trace.final_solve = info
    return state, trace


def run(scenario, config: EngineConfig | None = None, weights=None):
    """Run the loop on a synthetic scenario; returns ``(final state, trace)``."""
    config = config or EngineConfig()
    ctx = ViewContext(scenario.template, scenario.cams, scenario.pyramids(), config)
    return run_views(ctx, scenario.init, weights, gt_joints=scenario.gt_mesh[1])


def orientation_errors(ctx_cams, state: BodyState, gt_orient):
    """Per-view geodesic error of the world-frame orientation, degrees."""
    return np.array([geodesic_deg(c.R.T @ O, gt_orient) for c, O in zip(ctx_cams, state.view_orient)])
