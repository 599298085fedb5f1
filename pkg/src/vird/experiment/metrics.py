"""Localization error metrics."""

from __future__ import annotations

import math

import numpy as np

from ..geometry import Pose, wrap_angle

POSITION_THRESHOLDS_M = (1.0, 5.0)
ORIENTATION_THRESHOLDS_DEG = (1.0, 5.0)


def pose_error(pred: Pose, gt: Pose) -> dict:
    """Position error, its split in the true heading frame, and yaw error in degrees."""
    ex, ey = pred.x - gt.x, pred.y - gt.y
    # heading of a clockwise-from-east yaw in east/north components
    hx, hy = math.cos(gt.theta), -math.sin(gt.theta)
    return {
        "pos_err_m": math.hypot(ex, ey),
        "longitudinal_m": abs(ex * hx + ey * hy),
        "lateral_m": abs(-ex * hy + ey * hx),
        "orient_err_deg": abs(math.degrees(wrap_angle(pred.theta - gt.theta))),
    }


def recall(values, threshold: float) -> float:
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        return float("nan")
    return float(100.0 * np.mean(values < threshold))


def aggregate(errors: list[dict]) -> dict:
    """Mean/median errors and threshold recalls (percent) over per-sample errors."""
    if not errors:
        return {}
    pos = np.array([e["pos_err_m"] for e in errors])
    ori = np.array([e["orient_err_deg"] for e in errors])
    lat = np.array([e["lateral_m"] for e in errors])
    lon = np.array([e["longitudinal_m"] for e in errors])
    out = {
        "pos_mean_m": float(pos.mean()),
        "pos_median_m": float(np.median(pos)),
        "orient_mean_deg": float(ori.mean()),
        "orient_median_deg": float(np.median(ori)),
    }
    for t in POSITION_THRESHOLDS_M:
        out[f"lateral_R@{t:g}m"] = recall(lat, t)
        out[f"longitudinal_R@{t:g}m"] = recall(lon, t)
    for t in ORIENTATION_THRESHOLDS_DEG:
        out[f"orient_R@{t:g}deg"] = recall(ori, t)
    return out
