"""Procedural articulated body with shape blendshapes and linear blend skinning.

The template is a capsule person (torso, head, two arms with elbows and
hands, two legs with knees and feet) sampled into rings of vertices. It has
the same equation structure as the usual parametric body models:

    shaped = V0 + sum_s beta_s * B_s
    joints = J @ shaped
    posed  = LBS(shaped, joints, theta)
    world  = scale * O_g @ posed + T_g

Coordinates are millimeters, y up, the body faces +z in the rest pose.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import skew

JOINT_NAMES = (
    "pelvis", "spine", "neck", "head",
    "l_shoulder", "l_elbow", "l_wrist",
    "r_shoulder", "r_elbow", "r_wrist",
    "l_hip", "l_knee", "l_ankle",
    "r_hip", "r_knee", "r_ankle",
)  # fmt: skip
PARENTS = (-1, 0, 1, 2, 2, 4, 5, 2, 7, 8, 0, 10, 11, 0, 13, 14)

_REST_JOINTS = np.array(
    [
        [0, 950, 0], [0, 1150, 0], [0, 1420, 0], [0, 1500, 0],
        [170, 1400, 0], [336, 1162, 0], [479, 957, 0],
        [-170, 1400, 0], [-336, 1162, 0], [-479, 957, 0],
        [95, 900, 0], [100, 500, 0], [100, 90, 0],
        [-95, 900, 0], [-100, 500, 0], [-100, 90, 0],
    ],
    dtype=float,
)  # fmt: skip
# end points of terminal segments (hands, feet, top of head)
_TIPS = {
    3: np.array([0.0, 1640.0, 0.0]),
    6: np.array([576.0, 818.0, 0.0]),
    9: np.array([-576.0, 818.0, 0.0]),
    12: np.array([100.0, 40.0, 150.0]),
    15: np.array([-100.0, 40.0, 150.0]),
}

# (start, end, radius, owning joint, skinning candidates)
_PARTS = (
    ((0, 880, 0), (0, 1400, 0), 140.0, 0, (0, 1, 2)),
    ((0, 1500, 0), (0, 1640, 0), 95.0, 3, (2, 3)),
    ((170, 1400, 0), (336, 1162, 0), 50.0, 4, (2, 4, 5)),
    ((336, 1162, 0), (479, 957, 0), 40.0, 5, (4, 5, 6)),
    ((479, 957, 0), (576, 818, 0), 35.0, 6, (5, 6)),
    ((-170, 1400, 0), (-336, 1162, 0), 50.0, 7, (2, 7, 8)),
    ((-336, 1162, 0), (-479, 957, 0), 40.0, 8, (7, 8, 9)),
    ((-479, 957, 0), (-576, 818, 0), 35.0, 9, (8, 9)),
    ((95, 900, 0), (100, 500, 0), 75.0, 10, (0, 10, 11)),
    ((100, 500, 0), (100, 90, 0), 55.0, 11, (10, 11, 12)),
    ((100, 90, 0), (100, 40, 150), 40.0, 12, (11, 12)),
    ((-95, 900, 0), (-100, 500, 0), 75.0, 13, (0, 13, 14)),
    ((-100, 500, 0), (-100, 90, 0), 55.0, 14, (13, 14, 15)),
    ((-100, 90, 0), (-100, 40, 150), 40.0, 15, (14, 15)),
)
_TERMINAL_PARTS = (1, 4, 7, 10, 13)

SKIN_SIGMA_MM = 30.0
MAX_INFLUENCES = 4


@dataclass(frozen=True)
class BodyTemplate:
    v_template: np.ndarray  # (M, 3)
    shapedirs: np.ndarray  # (S, M, 3)
    j_regressor: np.ndarray  # (Kj, M)
    parents: tuple
    skin_weights: np.ndarray  # (M, Kj)
    down_idx: np.ndarray  # (|D|,)
    faces: np.ndarray  # (F, 3)
    seed: int = 0
    # derived, filled in __post_init__
    skin_idx: np.ndarray = field(init=False, repr=False)
    skin_w: np.ndarray = field(init=False, repr=False)
    subtree: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        order = np.argsort(-self.skin_weights, axis=1, kind="stable")[:, :MAX_INFLUENCES]
        w = np.take_along_axis(self.skin_weights, order, axis=1)
        object.__setattr__(self, "skin_idx", order)
        object.__setattr__(self, "skin_w", w)
        kj = len(self.parents)
        sub = np.eye(kj, dtype=bool)
        for j in range(kj - 1, 0, -1):
            sub[self.parents[j]] |= sub[j]
        object.__setattr__(self, "subtree", sub)

    @property
    def n_verts(self) -> int:
        return self.v_template.shape[0]

    @property
    def n_joints(self) -> int:
        return len(self.parents)

    @property
    def n_betas(self) -> int:
        return self.shapedirs.shape[0]


@dataclass(frozen=True)
class BodyState:
    """Full parameter set of one body estimate.

    ``theta`` holds the local rotations of joints 1..Kj-1 (the root rotation
    is ``global_orient``). ``view_orient`` and ``view_cam`` are the per-view
    body orientation in each camera frame and the weak-perspective camera
    ``(s, o_x, o_y)``; both may be empty arrays when no views are tracked.
    """

    theta: np.ndarray
    beta: np.ndarray
    global_orient: np.ndarray = field(default_factory=lambda: np.eye(3))
    transl: np.ndarray = field(default_factory=lambda: np.zeros(3))
    scale: float = 1.0
    view_orient: np.ndarray = field(default_factory=lambda: np.zeros((0, 3, 3)))
    view_cam: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError("body scale must be positive")

    def replace(self, **kw) -> "BodyState":
        return dataclasses.replace(self, **kw)

    @property
    def n_views(self) -> int:
        return len(self.view_orient)

    def to_dict(self):
        return {
            "theta": self.theta.tolist(),
            "beta": self.beta.tolist(),
            "global_orient": self.global_orient.tolist(),
            "transl": self.transl.tolist(),
            "scale": float(self.scale),
            "view_orient": self.view_orient.tolist(),
            "view_cam": self.view_cam.tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            theta=np.array(d["theta"], dtype=float).reshape(-1, 3, 3),
            beta=np.array(d["beta"], dtype=float),
            global_orient=np.array(d["global_orient"], dtype=float),
            transl=np.array(d["transl"], dtype=float),
            scale=float(d["scale"]),
            view_orient=np.array(d["view_orient"], dtype=float).reshape(-1, 3, 3),
            view_cam=np.array(d["view_cam"], dtype=float).reshape(-1, 3),
        )


def neutral_state(tpl: BodyTemplate, n_views: int = 0) -> BodyState:
    return BodyState(
        theta=np.tile(np.eye(3), (tpl.n_joints - 1, 1, 1)),
        beta=np.zeros(tpl.n_betas),
        view_orient=np.tile(np.eye(3), (n_views, 1, 1)),
        view_cam=np.tile([1.0, 0.0, 0.0], (n_views, 1)),
    )


# ---------------------------------------------------------------------------
# template construction
# ---------------------------------------------------------------------------


def _allocate(weights, total, minimum=1):
    weights = np.asarray(weights, dtype=float)
    n = len(weights)
    base = np.full(n, minimum)
    rest = total - base.sum()
    share = weights / weights.sum() * rest
    alloc = base + np.floor(share).astype(int)
    remainder = share - np.floor(share)
    for i in np.argsort(-remainder, kind="stable")[: total - alloc.sum()]:
        alloc[i] += 1
    return alloc


def _segment_distance(points, a, b):
    ab = b - a
    t = np.clip(((points - a) @ ab) / (ab @ ab), 0.0, 1.0)
    return np.linalg.norm(points - (a + t[:, None] * ab), axis=1)


def _joint_segments():
    segs = {j: [] for j in range(len(PARENTS))}
    for j, p in enumerate(PARENTS):
        if p >= 0:
            segs[p].append((_REST_JOINTS[p], _REST_JOINTS[j]))
    for j, tip in _TIPS.items():
        segs[j].append((_REST_JOINTS[j], tip))
    return segs


def _farthest_point_sampling(points, k):
    chosen = [0]
    dist = np.linalg.norm(points - points[0], axis=1)
    for _ in range(k - 1):
        nxt = int(np.argmax(dist))
        chosen.append(nxt)
        dist = np.minimum(dist, np.linalg.norm(points - points[nxt], axis=1))
    return np.array(chosen)


def make_template(seed: int = 0, n_verts: int = 432, n_betas: int = 10, n_joints: int = 16,
                  n_down: int = 108) -> BodyTemplate:
    """Build a deterministic capsule-person template.

    Only the 16-joint skeleton is provided; other joint counts raise.
    """
    if n_joints != len(PARENTS):
        raise ValueError(f"only the {len(PARENTS)}-joint skeleton is available, got {n_joints}")
    if n_verts < 4 * n_joints:
        raise ValueError("n_verts must be at least 4 * n_joints")
    if n_betas < 0:
        raise ValueError("n_betas must be non-negative")
    if not 1 <= n_down <= n_verts:
        raise ValueError("n_down must lie in [1, n_verts]")
    rng = np.random.default_rng(seed)

    n_around = 8 if n_verts >= 224 else 4
    n_rings = n_verts // n_around
    extra = n_verts - n_rings * n_around
    parts = [(np.array(a, float), np.array(b, float), r, own, cand) for a, b, r, own, cand in _PARTS]
    lateral = [np.linalg.norm(b - a) * r for a, b, r, _, _ in parts]
    rings = _allocate(lateral, n_rings)

    verts, owner, faces = [], [], []
    ring_starts = {}
    for pi, ((a, b, radius, own, _), nr) in enumerate(zip(parts, rings)):
        axis = (b - a) / np.linalg.norm(b - a)
        helper = np.array([0.0, 0.0, 1.0]) if abs(axis[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
        e1 = np.cross(axis, helper)
        e1 /= np.linalg.norm(e1)
        e2 = np.cross(axis, e1)
        phase = rng.uniform(0, 2 * np.pi)
        start = len(verts)
        ring_starts[pi] = (start, nr)
        for k in range(nr):
            c = a + (b - a) * (k + 0.5) / nr
            for m in range(n_around):
                ang = phase + 2 * np.pi * (m + 0.5 * (k % 2)) / n_around
                verts.append(c + radius * (np.cos(ang) * e1 + np.sin(ang) * e2))
                owner.append(pi)
        for k in range(nr - 1):
            r0, r1 = start + k * n_around, start + (k + 1) * n_around
            for m in range(n_around):
                m1 = (m + 1) % n_around
                faces.append((r0 + m, r0 + m1, r1 + m))
                faces.append((r0 + m1, r1 + m1, r1 + m))
    # leftover vertices become poles at terminal ends
    for e in range(extra):
        pi = _TERMINAL_PARTS[e % len(_TERMINAL_PARTS)]
        a, b, radius, _, _ = parts[pi]
        axis = (b - a) / np.linalg.norm(b - a)
        lift = radius * (0.5 + 0.1 * (e // len(_TERMINAL_PARTS)))
        idx = len(verts)
        verts.append(b + lift * axis)
        owner.append(pi)
        start, nr = ring_starts[pi]
        last = start + (nr - 1) * n_around
        for m in range(n_around):
            faces.append((last + m, last + (m + 1) % n_around, idx))
    V0 = np.array(verts)
    owner = np.array(owner)

    # skinning: gaussian falloff in distance to each candidate joint's bones
    segs = _joint_segments()
    W = np.zeros((len(V0), n_joints))
    for pi, (_, _, _, _, cand) in enumerate(parts):
        sel = np.nonzero(owner == pi)[0]
        d = np.stack(
            [np.min([_segment_distance(V0[sel], s0, s1) for s0, s1 in segs[j]], axis=0) for j in cand],
            axis=1,
        )
        w = np.exp(-((d - d.min(axis=1, keepdims=True)) ** 2) / (2 * SKIN_SIGMA_MM**2))
        if w.shape[1] > MAX_INFLUENCES:
            cut = np.sort(w, axis=1)[:, -MAX_INFLUENCES][:, None]
            w = np.where(w >= cut, w, 0.0)
        W[np.ix_(sel, cand)] = w / w.sum(axis=1, keepdims=True)

    # joint regressor: gaussian-weighted neighbourhood of each rest joint
    Jreg = np.zeros((n_joints, len(V0)))
    for j in range(n_joints):
        d = np.linalg.norm(V0 - _REST_JOINTS[j], axis=1)
        near = np.argsort(d, kind="stable")[:12]
        w = np.exp(-(d[near] ** 2) / (2 * 60.0**2))
        Jreg[j, near] = w / w.sum()

    # shape blendshapes: stature, girth, then random smooth fields
    B = np.zeros((n_betas, len(V0), 3))
    if n_betas > 0:
        B[0, :, 1] = 0.025 * V0[:, 1]
    if n_betas > 1:
        for pi, (a, b, _, _, _) in enumerate(parts):
            sel = owner == pi
            ab = b - a
            t = np.clip(((V0[sel] - a) @ ab) / (ab @ ab), 0, 1)
            radial = V0[sel] - (a + t[:, None] * ab)
            B[1, sel] = 0.08 * radial
    for s in range(2, n_betas):
        for _ in range(3):
            direction = rng.normal(size=3)
            direction /= np.linalg.norm(direction)
            wavelength = rng.uniform(1200.0, 3000.0)
            amp = rng.normal(size=3) * 6.0
            ph = rng.uniform(0, 2 * np.pi)
            B[s] += np.sin(2 * np.pi * (V0 @ direction) / wavelength + ph)[:, None] * amp

    return BodyTemplate(
        v_template=V0,
        shapedirs=B,
        j_regressor=Jreg,
        parents=PARENTS,
        skin_weights=W,
        down_idx=_farthest_point_sampling(V0, n_down),
        faces=np.array(faces, dtype=int),
        seed=seed,
    )


# ---------------------------------------------------------------------------
# forward model
# ---------------------------------------------------------------------------


@dataclass
class Kinematics:
    """Intermediate quantities of one forward pass, in the body frame."""

    shaped: np.ndarray  # (n, 3) shaped rest vertices (selected rows)
    joints_rest: np.ndarray  # (Kj, 3)
    rot: np.ndarray  # (Kj, 3, 3) global joint rotations
    joints: np.ndarray  # (Kj, 3) posed joints
    per_joint: np.ndarray  # (n, 4, 3) vertex transformed by each influencing joint
    posed: np.ndarray  # (n, 3)
    vert_idx: np.ndarray


def kinematics(tpl: BodyTemplate, state: BodyState, vert_idx=None) -> Kinematics:
    beta = np.asarray(state.beta, dtype=float)
    full_shaped = tpl.v_template + np.tensordot(beta, tpl.shapedirs, axes=1) if beta.size else tpl.v_template
    J = tpl.j_regressor @ full_shaped
    if vert_idx is None:
        vert_idx = np.arange(tpl.n_verts)
    shaped = full_shaped[vert_idx]
    kj = tpl.n_joints
    rot = np.empty((kj, 3, 3))
    pos = np.empty((kj, 3))
    rot[0] = np.eye(3)
    pos[0] = J[0]
    for j in range(1, kj):
        p = tpl.parents[j]
        rot[j] = rot[p] @ state.theta[j - 1]
        pos[j] = rot[p] @ (J[j] - J[p]) + pos[p]
    idx = tpl.skin_idx[vert_idx]
    w = tpl.skin_w[vert_idx]
    local = shaped[:, None, :] - J[idx]
    per_joint = np.einsum("nkij,nkj->nki", rot[idx], local) + pos[idx]
    posed = np.einsum("nk,nki->ni", w, per_joint)
    return Kinematics(shaped, J, rot, pos, per_joint, posed, np.asarray(vert_idx))


def to_world(points, state: BodyState, orient=None, transl=None, scale=None):
    orient = state.global_orient if orient is None else orient
    transl = state.transl if transl is None else transl
    scale = state.scale if scale is None else scale
    return scale * points @ np.asarray(orient).T + transl


def forward(tpl: BodyTemplate, state: BodyState, vert_idx=None):
    """World-frame vertices and joints for ``state``."""
    kin = kinematics(tpl, state, vert_idx)
    return to_world(kin.posed, state), to_world(kin.joints, state)


def downsample(vertices, tpl: BodyTemplate):
    vertices = np.asarray(vertices)
    if vertices.shape[0] != tpl.n_verts:
        raise ValueError(f"expected {tpl.n_verts} vertices, got {vertices.shape[0]}")
    return vertices[tpl.down_idx]


def pelvis(joints):
    return np.asarray(joints)[0]


def pose_jacobian(tpl: BodyTemplate, kin: Kinematics):
    """d posed / d (local rotation increments), shape ``(n, 3, Kj-1, 3)``.

    The increment of joint ``j`` right-multiplies its local rotation:
    ``theta_j <- theta_j @ exp([delta]_x)``.
    """
    idx = tpl.skin_idx[kin.vert_idx]
    w = tpl.skin_w[kin.vert_idx]
    sub = tpl.subtree[:, idx]  # (Kj, n, 4)
    ws = sub * w[None]
    acc = np.einsum("jnk,nki->nji", ws, kin.per_joint)
    acc -= ws.sum(axis=2).T[:, :, None] * kin.joints[None]
    jac = -np.einsum("njab,jbc->njac", skew(acc), kin.rot)
    return np.swapaxes(jac[:, 1:], 1, 2)


def shape_jacobian(tpl: BodyTemplate, state: BodyState, kin: Kinematics):
    """d posed / d beta, shape ``(n, 3, S)``."""
    S = tpl.n_betas
    if S == 0:
        return np.zeros((len(kin.vert_idx), 3, 0))
    Bsel = tpl.shapedirs[:, kin.vert_idx]  # (S, n, 3)
    dJ = np.einsum("jm,smc->sjc", tpl.j_regressor, tpl.shapedirs)  # (S, Kj, 3)
    da = np.empty_like(dJ)
    da[:, 0] = dJ[:, 0]
    for j in range(1, tpl.n_joints):
        p = tpl.parents[j]
        da[:, j] = (dJ[:, j] - dJ[:, p]) @ kin.rot[p].T + da[:, p]
    idx = tpl.skin_idx[kin.vert_idx]
    w = tpl.skin_w[kin.vert_idx]
    local = Bsel[:, :, None, :] - dJ[:, idx]  # (S, n, 4, 3)
    moved = np.einsum("nkij,snkj->snki", kin.rot[idx], local) + da[:, idx]
    out = np.einsum("nk,snki->nis", w, moved)
    return out


def write_obj(path, vertices, faces):
    path = Path(path)
    lines = [f"v {x:.4f} {y:.4f} {z:.4f}" for x, y, z in np.asarray(vertices)]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in np.asarray(faces)]
    path.write_text("\n".join(lines) + "\n")
    return path
