"""Rotations, pinhole cameras, rays and triangulation.

Lengths are millimeters and angles radians, except `geodesic_deg` which
reports degrees. Rotations are plain ``(3, 3)`` float arrays; the 6D form is
only used where a regressor emits additive updates.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# Default crop resolution (pixels) for the weak-perspective camera.
CROP_RES = 224
# Default focal (pixels) used when no calibration is available.
DEFAULT_FOCAL = 5000.0
# The weak-perspective scale is expressed per meter of body size.
WEAK_UNIT_MM = 1000.0


class GeometryError(ValueError):
    """Raised for degenerate geometric input."""


class DegenerateRotationError(GeometryError):
    pass


class BehindCameraError(GeometryError):
    pass


# ---------------------------------------------------------------------------
# rotations
# ---------------------------------------------------------------------------


def skew(v):
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def axis_angle_to_matrix(rotvec):
    """Exponential map (Rodrigues) for one or many rotation vectors."""
    rotvec = np.asarray(rotvec, dtype=float)
    theta = np.linalg.norm(rotvec, axis=-1)[..., None, None]
    K = skew(rotvec)
    small = theta < 1e-8
    safe = np.where(small, 1.0, theta)
    a = np.where(small, 1.0 - theta**2 / 6.0, np.sin(safe) / safe)
    b = np.where(small, 0.5 - theta**2 / 24.0, (1.0 - np.cos(safe)) / safe**2)
    eye = np.broadcast_to(np.eye(3), K.shape)
    return eye + a * K + b * (K @ K)


def matrix_to_axis_angle(R):
    """Logarithm map; returns rotation vectors with norm in [0, pi]."""
    R = np.asarray(R, dtype=float)
    cos = np.clip((np.trace(R, axis1=-2, axis2=-1) - 1.0) / 2.0, -1.0, 1.0)
    angle = np.arccos(cos)
    w = np.stack(
        [R[..., 2, 1] - R[..., 1, 2], R[..., 0, 2] - R[..., 2, 0], R[..., 1, 0] - R[..., 0, 1]],
        axis=-1,
    )
    sin = np.sin(angle)
    out = np.empty(w.shape)
    regular = sin > 1e-6
    scale = np.where(regular, angle / (2.0 * np.where(regular, sin, 1.0)), 0.5)
    out[...] = w * scale[..., None]
    # near pi the antisymmetric part vanishes; recover the axis from R + I
    near_pi = (~regular) & (angle > np.pi / 2)
    if np.any(near_pi):
        Rp = R[near_pi]
        ang = angle[near_pi]
        S = (Rp + np.eye(3)) / 2.0
        cols = np.argmax(np.diagonal(S, axis1=-2, axis2=-1), axis=-1)
        axes = S[np.arange(len(Rp)), :, cols]
        axes /= np.linalg.norm(axes, axis=-1, keepdims=True)
        out[near_pi] = axes * ang[:, None]
    return out


def rot6d_to_matrix(r):
    """Gram-Schmidt map from the 6D representation to a rotation matrix.

    ``r`` holds the first and second matrix columns back to back, shape
    ``(..., 6)``. Raises `DegenerateRotationError` when either half is zero
    or the two halves are collinear.
    """
    r = np.asarray(r, dtype=float)
    a, b = r[..., :3], r[..., 3:]
    na = np.linalg.norm(a, axis=-1, keepdims=True)
    if np.any(na < 1e-12) or not np.all(np.isfinite(r)):
        raise DegenerateRotationError("6D rotation has a zero or non-finite first column")
    x = a / na
    b_perp = b - np.sum(x * b, axis=-1, keepdims=True) * x
    nb = np.linalg.norm(b_perp, axis=-1, keepdims=True)
    if np.any(nb < 1e-9 * np.linalg.norm(b, axis=-1, keepdims=True)) or np.any(nb < 1e-12):
        raise DegenerateRotationError("6D rotation halves are collinear or zero")
    y = b_perp / nb
    z = np.cross(x, y)
    return np.stack([x, y, z], axis=-1)


def matrix_to_rot6d(R):
    R = np.asarray(R, dtype=float)
    return np.concatenate([R[..., :, 0], R[..., :, 1]], axis=-1)


def geodesic_deg(R1, R2):
    """Angle in degrees of the relative rotation ``R1 @ R2.T``."""
    R1 = np.asarray(R1, dtype=float)
    R2 = np.asarray(R2, dtype=float)
    R = R1 @ np.swapaxes(R2, -1, -2)
    cos = np.clip((np.trace(R, axis1=-2, axis2=-1) - 1.0) / 2.0, -1.0, 1.0)
    # same angle as arccos(cos), but accurate near 0 degrees
    w = np.stack([R[..., 2, 1] - R[..., 1, 2], R[..., 0, 2] - R[..., 2, 0], R[..., 1, 0] - R[..., 0, 1]], axis=-1)
    sin = 0.5 * np.linalg.norm(w, axis=-1)
    return np.degrees(np.arctan2(sin, cos))


def project_to_rotation(M):
    """Nearest rotation (Frobenius) to a 3x3 matrix, determinant corrected."""
    U, S, Vt = np.linalg.svd(M)
    if S[-1] <= 1e-10 * S[0]:
        raise GeometryError("matrix is rank deficient; no unique nearest rotation")
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
    return U @ D @ Vt


def chordal_mean(rotations):
    """Chordal L2 mean: the arithmetic mean matrix projected back onto SO(3)."""
    rotations = np.asarray(rotations, dtype=float)
    if rotations.ndim != 3 or len(rotations) == 0:
        raise GeometryError("chordal_mean needs a non-empty list of rotations")
    return project_to_rotation(rotations.mean(axis=0))


def is_rotation(R, tol=1e-9):
    R = np.asarray(R, dtype=float)
    ortho = np.abs(np.swapaxes(R, -1, -2) @ R - np.eye(3)).max() <= tol
    return bool(ortho and np.all(np.abs(np.linalg.det(R) - 1.0) <= tol))


def random_rotation(rng, max_angle=np.pi):
    """Rotation about a uniformly random axis by an angle uniform in [0, max_angle]."""
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    return axis_angle_to_matrix(axis * rng.uniform(0.0, max_angle))


def rotation_with_angle(rng, angle):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    return axis_angle_to_matrix(axis * angle)


# ---------------------------------------------------------------------------
# cameras
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CameraView:
    """Calibrated pinhole camera: ``x_cam = R @ x_world + T``."""

    K: np.ndarray
    R: np.ndarray
    T: np.ndarray
    resolution: tuple[int, int] = (CROP_RES, CROP_RES)

    def __post_init__(self):
        K = np.asarray(self.K, dtype=float)
        if K.shape != (3, 3) or abs(K[1, 0]) + abs(K[2, 0]) + abs(K[2, 1]) > 0 or K[2, 2] != 1.0:
            raise GeometryError("K must be upper triangular with K[2,2] = 1")
        if K[0, 0] <= 0 or K[1, 1] <= 0:
            raise GeometryError("focal entries must be positive")
        if self.resolution[0] <= 0 or self.resolution[1] <= 0:
            raise GeometryError("resolution must be positive")
        object.__setattr__(self, "K", K)
        object.__setattr__(self, "R", np.asarray(self.R, dtype=float))
        object.__setattr__(self, "T", np.asarray(self.T, dtype=float).reshape(3))

    @property
    def focal(self) -> float:
        return float(self.K[0, 0])

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.R.T @ self.T

    def to_camera(self, X):
        return np.asarray(X, dtype=float) @ self.R.T + self.T

    def to_dict(self):
        return {
            "K": self.K.tolist(),
            "R": self.R.tolist(),
            "T": self.T.tolist(),
            "resolution": list(self.resolution),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(np.array(d["K"]), np.array(d["R"]), np.array(d["T"]), tuple(d["resolution"]))


def intrinsics(focal, width=CROP_RES, height=CROP_RES):
    return np.array([[focal, 0.0, width / 2.0], [0.0, focal, height / 2.0], [0.0, 0.0, 1.0]])


def look_at(center, target, focal, resolution=(CROP_RES, CROP_RES), up=(0.0, 1.0, 0.0)):
    """Camera at ``center`` looking at ``target``; image y points down."""
    center = np.asarray(center, dtype=float)
    z = np.asarray(target, dtype=float) - center
    z /= np.linalg.norm(z)
    x = np.cross(-np.asarray(up, dtype=float), z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    R = np.stack([x, y, z])
    return CameraView(intrinsics(focal, *resolution), R, -R @ center, resolution)


def project_points(X_cam, K):
    """Vectorised pinhole projection of camera-frame points.

    Returns ``(uv, depth)``; callers decide what to do with depth <= 0.
    """
    X_cam = np.asarray(X_cam, dtype=float)
    z = X_cam[..., 2]
    safe = np.where(np.abs(z) < 1e-12, 1e-12, z)
    x = X_cam[..., 0] / safe
    y = X_cam[..., 1] / safe
    u = K[0, 0] * x + K[0, 1] * y + K[0, 2]
    v = K[1, 1] * y + K[1, 2]
    return np.stack([u, v], axis=-1), z


def project_perspective(X, cam: CameraView):
    """Project a world point (mm) to pixels; raises if it is behind the camera."""
    Xc = cam.to_camera(X)
    if np.any(Xc[..., 2] <= 0):
        raise BehindCameraError("point has non-positive depth in the camera frame")
    uv, _ = project_points(Xc, cam.K)
    return uv


def project_weak_perspective(X, s, o, crop_res=CROP_RES):
    """Scaled orthographic projection into crop pixels.

    ``s`` maps one meter of body to half the crop, ``o`` is an in-plane
    offset in millimeters added before scaling.
    """
    if s <= 0:
        raise GeometryError("weak-perspective scale must be positive")
    X = np.asarray(X, dtype=float)
    o = np.asarray(o, dtype=float)
    half = crop_res / 2.0
    return half + half * s * (X[..., :2] + o) / WEAK_UNIT_MM


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 1.0]))

    def __post_init__(self):
        d = np.asarray(self.direction, dtype=float)
        n = np.linalg.norm(d)
        if n == 0:
            raise GeometryError("ray direction must be nonzero")
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=float))
        object.__setattr__(self, "direction", d / n)

    def distance(self, X):
        diff = np.asarray(X, dtype=float) - self.origin
        return float(np.linalg.norm(diff - (diff @ self.direction) * self.direction))


def pixel_ray(cam: CameraView, uv) -> Ray:
    h = np.array([uv[0], uv[1], 1.0])
    d = cam.R.T @ np.linalg.solve(cam.K, h)
    return Ray(cam.center, d)


def triangulate(rays):
    """Least-squares point closest to all rays (point-to-line normal equations)."""
    if len(rays) < 2:
        raise GeometryError("triangulate needs at least two rays")
    A = np.zeros((3, 3))
    b = np.zeros(3)
    for ray in rays:
        P = np.eye(3) - np.outer(ray.direction, ray.direction)
        A += P
        b += P @ ray.origin
    w = np.linalg.eigvalsh(A)
    if w[0] < 1e-9 * max(w[-1], 1.0):
        raise GeometryError("ray bundle is degenerate (parallel or identical rays)")
    return np.linalg.solve(A, b)
