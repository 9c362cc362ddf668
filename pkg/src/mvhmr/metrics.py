"""Pose and mesh error metrics (millimeters / degrees / percent)."""

from __future__ import annotations

import numpy as np

from .geometry import geodesic_deg

PCK_THRESHOLD_MM = 150.0
AUC_STEP_MM = 5.0


def _pair(pred, gt):
    pred = np.asarray(pred, dtype=float)
    gt = np.asarray(gt, dtype=float)
    if pred.shape != gt.shape or pred.ndim != 2 or pred.shape[1] != 3:
        raise ValueError(f"point sets must both be (K, 3); got {pred.shape} and {gt.shape}")
    return pred, gt


def _root_aligned(pred, gt, pred_root=None, gt_root=None):
    pred, gt = _pair(pred, gt)
    pr = pred[0] if pred_root is None else np.asarray(pred_root, dtype=float)
    gr = gt[0] if gt_root is None else np.asarray(gt_root, dtype=float)
    return pred - pr, gt - gr


def mpjpe(pred, gt):
    """Mean joint distance after subtracting each set's root (row 0, the pelvis)."""
    p, g = _root_aligned(pred, gt)
    return float(np.linalg.norm(p - g, axis=1).mean())


def mpjpe_abs(pred, gt):
    """Mean joint distance without any alignment."""
    p, g = _pair(pred, gt)
    return float(np.linalg.norm(p - g, axis=1).mean())


def procrustes_align(pred, gt):
    """Similarity transform of ``pred`` that best matches ``gt`` in least squares."""
    p, g = _pair(pred, gt)
    mp, mg = p.mean(axis=0), g.mean(axis=0)
    P, G = p - mp, g - mg
    var = np.sum(P * P)
    if len(p) < 3 or var < 1e-12:
        raise ValueError("Procrustes alignment needs at least 3 non-coincident points")
    U, S, Vt = np.linalg.svd(G.T @ P)
    if S[1] < 1e-12 * max(S[0], 1e-300):
        raise ValueError("Procrustes alignment of collinear points is ill-defined")
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt)) or 1.0])
    R = U @ D @ Vt
    scale = np.trace(np.diag(S) @ D) / var
    return scale * P @ R.T + mg


def pa_mpjpe(pred, gt):
    aligned = procrustes_align(pred, gt)
    return float(np.linalg.norm(aligned - np.asarray(gt, dtype=float), axis=1).mean())


def pve(pred_verts, gt_verts, pred_root=None, gt_root=None):
    """Mean vertex distance after subtracting each mesh's root point.

    The roots default to row 0, matching `mpjpe`; pass the pelvis joints to
    align meshes the way joints are aligned.
    """
    p, g = _root_aligned(pred_verts, gt_verts, pred_root, gt_root)
    return float(np.linalg.norm(p - g, axis=1).mean())


def pck_auc(pred, gt, threshold=PCK_THRESHOLD_MM, step=AUC_STEP_MM):
    """``(PCK, AUC)`` in percent on root-aligned joints.

    AUC is the mean PCK over thresholds ``0, step, ..., threshold``.
    """
    p, g = _root_aligned(pred, gt)
    d = np.linalg.norm(p - g, axis=1)
    pck = 100.0 * float(np.mean(d <= threshold))
    grid = np.arange(0.0, threshold + 0.5 * step, step)
    auc = 100.0 * float(np.mean([np.mean(d <= t) for t in grid]))
    return pck, auc


def orientation_error(pred_R, gt_R):
    """Geodesic angle between two orientation matrices, degrees."""
    return float(geodesic_deg(pred_R, gt_R))
