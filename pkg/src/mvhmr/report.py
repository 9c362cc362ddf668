"""Per-scenario evaluation and byte-stable report files.

Numbers are written with a fixed number of decimals and JSON is written with
sorted keys, so the same inputs always give the same bytes.
"""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path

import numpy as np

from .body_model import forward
from .engine import IterationTrace, orientation_errors
from .metrics import mpjpe, mpjpe_abs, pa_mpjpe, pck_auc, pve

FLOAT_FORMAT = "{:.6f}"

METRICS = ("mpjpe", "pa_mpjpe", "pve", "mpjpe_abs", "o_err_deg", "pck", "auc", "scale")

PROTOCOL_NOTE = (
    "Synthetic protocol: procedurally generated body, noiseless analytic feature "
    "pyramids, simulated camera ring. Values are not comparable with numbers "
    "measured on real-image benchmarks."
)


def evaluate(scenario, state, trace: IterationTrace | None = None) -> dict:
    """All report metrics of a final state against the scenario's ground truth."""
    tpl = scenario.template
    verts, joints = forward(tpl, state)
    gt_verts, gt_joints = scenario.gt_mesh
    pck, auc = pck_auc(joints, gt_joints)
    out = {
        "mpjpe": mpjpe(joints, gt_joints),
        "pa_mpjpe": pa_mpjpe(joints, gt_joints),
        "pve": pve(verts, gt_verts, joints[0], gt_joints[0]),
        "mpjpe_abs": mpjpe_abs(joints, gt_joints),
        "o_err_deg": float(orientation_errors(scenario.cams, state, scenario.gt.global_orient).mean()),
        "pck": pck,
        "auc": auc,
        "scale": float(state.scale),
    }
    if trace is not None:
        out["curve_mpjpe"] = list(trace.mpjpe)
        out["curve_residual_px"] = list(trace.residual_px)
    return out


def fmt(x):
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return FLOAT_FORMAT.format(float(x))
    return str(x)


def csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([fmt(row[h]) for h in header])
    return buf.getvalue()


def write_csv(path, header, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(csv_text(header, rows), encoding="utf-8")
    return path


def _rounded(obj):
    if isinstance(obj, dict):
        return {str(k): _rounded(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_rounded(v) for v in obj]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        return float(FLOAT_FORMAT.format(float(obj)))
    if isinstance(obj, np.ndarray):
        return _rounded(obj.tolist())
    return obj


def write_json(path, obj):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_rounded(obj), indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return path


def iteration_rows(trace: IterationTrace):
    return [
        {"iteration": i, "level": str(lv), "residual_px": r, "mpjpe": m if m is not None else float("nan"),
         "failures": len(f)}
        for i, (lv, r, m, f) in enumerate(zip(trace.levels, trace.residual_px, trace.mpjpe, trace.failures))
    ]


ITERATION_HEADER = ("iteration", "level", "residual_px", "mpjpe", "failures")
