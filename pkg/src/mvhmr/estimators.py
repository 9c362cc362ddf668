"""Global orientation and global translation/scale estimation.

The orientation path keeps one body orientation per camera. The aligner maps
them to the world frame with the camera rotations, drops the view that
disagrees most with the others, averages the rest and broadcasts the result
back. The translation path turns each view's weak-perspective camera into a
depth and solves for one translation and one body scale that put the pelvis
on every view's pelvis ray.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import (
    WEAK_UNIT_MM,
    DegenerateRotationError,
    GeometryError,
    chordal_mean,
    geodesic_deg,
    matrix_to_rot6d,
    rot6d_to_matrix,
)


class SolveError(GeometryError):
    pass


@dataclass(frozen=True)
class AlignerResult:
    aligned: np.ndarray  # (N, 3, 3) per-view orientation in camera frames
    outlier: int
    consensus: np.ndarray  # world-frame rotation
    skew: np.ndarray  # (N,) summed geodesic disagreement, degrees


@dataclass(frozen=True)
class TranslationSolve:
    transl: np.ndarray
    scale: float
    residual: float
    depths: np.ndarray
    ok: bool = True


def align_orientations(view_orient, cams) -> AlignerResult:
    view_orient = np.asarray(view_orient, dtype=float)
    n = len(view_orient)
    if n < 2 or len(cams) != n:
        raise GeometryError("the aligner needs at least two calibrated views")
    world = np.stack([cam.R.T @ O for cam, O in zip(cams, view_orient)])
    pair = geodesic_deg(world[:, None], world[None, :])
    skew = pair.sum(axis=1)
    outlier = int(np.argmax(skew))  # first maximum on ties
    keep = [v for v in range(n) if v != outlier]
    consensus = chordal_mean(world[keep])
    aligned = np.stack([cam.R @ consensus for cam in cams])
    return AlignerResult(aligned, outlier, consensus, skew)


def update_orientation(orient, delta6d):
    """Add a 6D delta to the 6D form of ``orient`` and re-orthonormalise.

    Raises `DegenerateRotationError` if the sum collapses; callers keep the
    previous rotation in that case.
    """
    return rot6d_to_matrix(matrix_to_rot6d(orient) + np.asarray(delta6d, dtype=float))


def weak_persp_to_translation(s, o, focal, crop_res):
    """Camera-frame translation (mm) equivalent to a weak-perspective camera."""
    if s <= 0:
        raise GeometryError("weak-perspective scale must be positive")
    return np.array([o[0], o[1], WEAK_UNIT_MM * 2.0 * focal / (s * crop_res)])


def translation_to_weak_persp(T, focal, crop_res):
    if T[2] <= 0:
        raise GeometryError("translation must have positive depth")
    return np.array([WEAK_UNIT_MM * 2.0 * focal / (T[2] * crop_res), T[0], T[1]])


def solve_translation_scale(pelvis_body, global_orient, cams, pelvis_px, depths,
                            fixed_scale=None) -> TranslationSolve:
    """Least-squares global translation and body scale from per-view pelvis rays.

    For each view ``v`` the pelvis ``T_g + a * O_g @ p`` must sit at depth
    ``a * z_v`` on the ray through ``pelvis_px[v]``:

        R_v @ T_g + a * (R_v @ O_g @ p - z_v * d_v) = -T_v

    with ``d_v = ((u - c_x) / f_x, (v - c_y) / f_y, 1)``. With
    ``fixed_scale`` the scale is held at that value and only ``T_g`` is solved.
    """
    n = len(cams)
    if n < 2:
        raise SolveError("the translation solve needs at least two views")
    p_w = np.asarray(global_orient) @ np.asarray(pelvis_body, dtype=float)
    A = np.zeros((3 * n, 4))
    b = np.zeros(3 * n)
    for v, cam in enumerate(cams):
        K = cam.K
        uv = pelvis_px[v]
        y = (uv[1] - K[1, 2]) / K[1, 1]
        x = (uv[0] - K[0, 2] - K[0, 1] * y) / K[0, 0]
        d = np.array([x, y, 1.0])
        A[3 * v : 3 * v + 3, :3] = cam.R
        A[3 * v : 3 * v + 3, 3] = cam.R @ p_w - depths[v] * d
        b[3 * v : 3 * v + 3] = -cam.T
    if fixed_scale is not None:
        b = b - float(fixed_scale) * A[:, 3]
        A = A[:, :3]
    sv = np.linalg.svd(A, compute_uv=False)
    if sv[-1] <= 1e-10 * sv[0]:
        raise SolveError("translation/scale system is rank deficient")
    sol, *_ = np.linalg.lstsq(A, b, rcond=None)
    residual = float(np.linalg.norm(A @ sol - b))
    if fixed_scale is not None:
        sol = np.append(sol, float(fixed_scale))
    T_g, a = sol[:3], float(sol[3])
    return TranslationSolve(T_g, a, residual, np.asarray(depths, dtype=float), ok=a > 0)


def translation_residual(T_g, a, pelvis_body, global_orient, cams, pelvis_px, depths):
    """Norm of the translation/scale system residual at ``(T_g, a)``."""
    p_w = np.asarray(global_orient) @ np.asarray(pelvis_body, dtype=float)
    r = []
    for v, cam in enumerate(cams):
        K = cam.K
        uv = pelvis_px[v]
        y = (uv[1] - K[1, 2]) / K[1, 1]
        x = (uv[0] - K[0, 2] - K[0, 1] * y) / K[0, 0]
        d = np.array([x, y, 1.0])
        r.append(cam.R @ T_g + a * (cam.R @ p_w - depths[v] * d) + cam.T)
    return float(np.linalg.norm(np.concatenate(r)))

