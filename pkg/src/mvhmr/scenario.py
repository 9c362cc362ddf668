"""Synthetic multi-view scenarios: ground-truth body, camera ring, init noise.

A scenario is fully determined by its config and seed. Ground truth, the
perturbed initial estimate and occluder placement draw from independent
child streams of the seed, so changing the noise settings never changes the
ground truth.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from functools import cached_property, lru_cache
from pathlib import Path

import numpy as np

from .body_model import BodyState, BodyTemplate, forward, kinematics, make_template
from .estimators import translation_to_weak_persp, weak_persp_to_translation
from .features import PyramidConfig, surface_codes, synth_pyramid
from .geometry import (
    CROP_RES,
    CameraView,
    axis_angle_to_matrix,
    chordal_mean,
    look_at,
    project_points,
    rotation_with_angle,
)


@dataclass
class TemplateConfig:
    seed: int = 0
    n_verts: int = 432
    n_betas: int = 10
    n_joints: int = 16
    n_down: int = 108


@dataclass
class ScenarioConfig:
    n_views: int = 4
    rig_radius: float = 5000.0
    rig_height: float = 900.0
    focal: float = 400.0
    resolution: int = CROP_RES
    # ground truth
    joint_cap_deg: float = 60.0
    beta_range: float = 2.0
    tilt_cap_deg: float = 30.0
    center_jitter_mm: float = 150.0
    scale_range: tuple = (1.0, 1.0)
    # initial estimate (stand-in for a single-view initializer)
    init_orient_deg: float = 20.0
    init_transl_mm: float = 200.0
    init_joint_rad: float = 0.15
    skew_view: int | None = None
    skew_deg: float = 30.0
    # image evidence
    pixel_noise: float = 0.0
    occluded_views: int = 0
    occluder_frac: float = 0.25
    template: TemplateConfig = field(default_factory=TemplateConfig)
    pyramid: PyramidConfig = field(default_factory=PyramidConfig)

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["template"] = TemplateConfig(**d.get("template", {}))
        pyr = dict(d.get("pyramid", {}))
        if "sizes" in pyr:
            pyr["sizes"] = tuple(pyr["sizes"])
        pyr["occluders"] = [tuple(r) for r in pyr.get("occluders", [])]
        d["pyramid"] = PyramidConfig(**pyr)
        if "scale_range" in d:
            d["scale_range"] = tuple(d["scale_range"])
        return cls(**d)


@lru_cache(maxsize=8)
def _template(seed, n_verts, n_betas, n_joints, n_down):
    return make_template(seed, n_verts, n_betas, n_joints, n_down)


def template_for(cfg: TemplateConfig) -> BodyTemplate:
    return _template(cfg.seed, cfg.n_verts, cfg.n_betas, cfg.n_joints, cfg.n_down)


def make_rig(cfg: ScenarioConfig) -> list[CameraView]:
    """Inward-looking cameras evenly spaced on a horizontal circle."""
    target = np.array([0.0, cfg.rig_height, 0.0])
    cams = []
    for v in range(cfg.n_views):
        ang = 2 * np.pi * v / cfg.n_views
        center = target + cfg.rig_radius * np.array([np.sin(ang), 0.0, -np.cos(ang)])
        cams.append(look_at(center, target, cfg.focal, (cfg.resolution, cfg.resolution)))
    return cams


def view_params(state: BodyState, cams, scale_ref=1.0):
    """Per-view orientation and weak-perspective camera consistent with ``state``.

    The per-view cameras assume a body of scale ``scale_ref``; a true scale
    ``a`` shows up as translations (and depths) divided by ``a / scale_ref``.
    """
    orient = np.stack([cam.R @ state.global_orient for cam in cams])
    wcams = []
    for cam in cams:
        T = (cam.R @ state.transl + cam.T) * (scale_ref / state.scale)
        wcams.append(translation_to_weak_persp(T, cam.focal, cam.resolution[0]))
    return orient, np.stack(wcams)


def world_translations(view_cam, cams):
    """Body origin in world coordinates implied by each view's camera."""
    out = []
    for c, cam in zip(view_cam, cams):
        T = weak_persp_to_translation(c[0], c[1:], cam.focal, cam.resolution[0])
        out.append(cam.R.T @ (T - cam.T))
    return np.stack(out)


@dataclass
class Scenario:
    seed: int
    config: ScenarioConfig
    cams: list
    gt: BodyState
    init: BodyState
    occluders: list  # per view list of rectangles

    @property
    def template(self) -> BodyTemplate:
        return template_for(self.config.template)

    @cached_property
    def gt_mesh(self):
        return forward(self.template, self.gt)

    def pyramids(self):
        cfg = self.config
        rng = np.random.default_rng(np.random.SeedSequence(self.seed).spawn(4)[3])
        verts = self.gt_mesh[0][self.template.down_idx]
        out = []
        for v, cam in enumerate(self.cams):
            pcfg = dataclasses.replace(cfg.pyramid, occluders=list(self.occluders[v]))
            jitter = rng.normal(scale=cfg.pixel_noise, size=(len(verts), 2)) if cfg.pixel_noise > 0 else None
            out.append(synth_pyramid(verts, cam, pcfg, jitter=jitter, codes=surface_codes(self.template)))
        return out

    def to_dict(self):
        return {
            "seed": self.seed,
            "config": self.config.to_dict(),
            "cameras": [c.to_dict() for c in self.cams],
            "gt": self.gt.to_dict(),
            "init": self.init.to_dict(),
            "occluders": [[list(r) for r in rects] for rects in self.occluders],
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            seed=int(d["seed"]),
            config=ScenarioConfig.from_dict(d["config"]),
            cams=[CameraView.from_dict(c) for c in d["cameras"]],
            gt=BodyState.from_dict(d["gt"]),
            init=BodyState.from_dict(d["init"]),
            occluders=[[tuple(r) for r in rects] for rects in d["occluders"]],
        )

    def save(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n", encoding="utf-8")
        return path

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def _random_axis(rng):
    a = rng.normal(size=3)
    return a / np.linalg.norm(a)


def _inside_all(verts, cams, margin=4.0):
    for cam in cams:
        uv, z = project_points(cam.to_camera(verts), cam.K)
        w, h = cam.resolution
        if np.any(z <= 0) or np.any(uv < margin) or np.any(uv[:, 0] > w - margin) or np.any(uv[:, 1] > h - margin):
            return False
    return True


def _sample_gt(cfg: ScenarioConfig, tpl: BodyTemplate, cams, rng):
    kj = tpl.n_joints
    cap = np.radians(cfg.joint_cap_deg)
    for _ in range(200):
        theta = np.stack([axis_angle_to_matrix(_random_axis(rng) * rng.uniform(0, cap)) for _ in range(kj - 1)])
        beta = rng.uniform(-cfg.beta_range, cfg.beta_range, size=tpl.n_betas)
        yaw = axis_angle_to_matrix(np.array([0.0, rng.uniform(0, 2 * np.pi), 0.0]))
        tilt_axis = np.array([np.cos(a := rng.uniform(0, 2 * np.pi)), 0.0, np.sin(a)])
        tilt = axis_angle_to_matrix(tilt_axis * rng.uniform(0, np.radians(cfg.tilt_cap_deg)))
        orient = tilt @ yaw
        lo, hi = cfg.scale_range
        scale = float(rng.uniform(lo, hi)) if hi > lo else float(lo)
        jitter = rng.uniform(-cfg.center_jitter_mm, cfg.center_jitter_mm, size=3)
        state = BodyState(theta=theta, beta=beta, global_orient=orient, scale=scale)
        kin = kinematics(tpl, state)
        target = np.array([0.0, cfg.rig_height, 0.0]) + jitter
        transl = target - scale * orient @ kin.joints[0]
        state = state.replace(transl=transl)
        verts, _ = forward(tpl, state)
        if _inside_all(verts, cams):
            return state
    raise RuntimeError("could not place the ground-truth body inside every view")


def _occluders(cfg: ScenarioConfig, gt_verts, cams, rng):
    out = []
    side = np.sqrt(cfg.occluder_frac)
    for v, cam in enumerate(cams):
        if v >= cfg.occluded_views:
            out.append([])
            continue
        uv, _ = project_points(cam.to_camera(gt_verts), cam.K)
        cx, cy = uv.mean(axis=0)
        w, h = cam.resolution
        sx, sy = rng.choice([-1, 1], size=2)
        x0, x1 = sorted([cx, cx + sx * side * w])
        y0, y1 = sorted([cy, cy + sy * side * h])
        out.append([(float(x0), float(y0), float(x1), float(y1))])
    return out


def perturb_init(gt: BodyState, cams, cfg: ScenarioConfig, rng) -> BodyState:
    """Ground truth perturbed by the configured noise caps, in per-view form."""
    orient, wcams = view_params(gt, cams)
    new_orient = np.empty_like(orient)
    new_cams = np.empty_like(wcams)
    for v, cam in enumerate(cams):
        ang = rng.uniform(0, np.radians(cfg.init_orient_deg))
        if cfg.skew_view is not None and v == cfg.skew_view:
            ang = np.radians(cfg.skew_deg)
        new_orient[v] = rotation_with_angle(rng, ang) @ orient[v]
        T = weak_persp_to_translation(wcams[v][0], wcams[v][1:], cam.focal, cam.resolution[0])
        T = T + _random_axis(rng) * rng.uniform(0, cfg.init_transl_mm)
        new_cams[v] = translation_to_weak_persp(T, cam.focal, cam.resolution[0])
    theta = np.stack([
        th @ axis_angle_to_matrix(_random_axis(rng) * rng.uniform(0, cfg.init_joint_rad)) for th in gt.theta
    ])
    world = np.stack([cam.R.T @ O for cam, O in zip(cams, new_orient)])
    return BodyState(
        theta=theta,
        beta=np.zeros_like(gt.beta),
        global_orient=chordal_mean(world),
        transl=world_translations(new_cams, cams).mean(axis=0),
        scale=1.0,
        view_orient=new_orient,
        view_cam=new_cams,
    )


def generate_scenario(cfg: ScenarioConfig | None = None, seed: int = 0) -> Scenario:
    cfg = cfg or ScenarioConfig()
    tpl = template_for(cfg.template)
    cams = make_rig(cfg)
    gt_ss, init_ss, occ_ss, _ = np.random.SeedSequence(seed).spawn(4)
    gt = _sample_gt(cfg, tpl, cams, np.random.default_rng(gt_ss))
    orient, wcams = view_params(gt, cams)
    gt = gt.replace(view_orient=orient, view_cam=wcams)
    init = perturb_init(gt, cams, cfg, np.random.default_rng(init_ss))
    occ = _occluders(cfg, forward(tpl, gt)[0], cams, np.random.default_rng(occ_ss))
    return Scenario(seed, cfg, cams, gt, init, occ)
