"""Top-down rasteriser and cylindrical panorama raycaster."""

from __future__ import annotations

import math

import numpy as np

from ..geometry import ImageFrame, Pose
from .scene import SceneError, SceneSpec

LIGHT = np.array([0.6, 0.8])


def satellite_frame(scene: SceneSpec, width_px: int) -> ImageFrame:
    return ImageFrame(scene.extent / width_px, width_px, width_px)


def pixel_centers(frame: ImageFrame) -> tuple[np.ndarray, np.ndarray]:
    """World coordinates of every pixel centre, each ``(height_px, width_px)``."""
    u = np.arange(frame.width_px) + 0.5
    v = np.arange(frame.height_px) + 0.5
    x = (u - frame.width_px / 2.0) * frame.resolution
    y = (frame.height_px / 2.0 - v) * frame.resolution
    return np.meshgrid(x, y, indexing="xy")


def render_satellite(scene: SceneSpec, frame: ImageFrame) -> np.ndarray:
    """North-up orthographic raster ``(H, W, 3)`` in ``[0, 1]``; roofs drawn over the ground."""
    x, y = pixel_centers(frame)
    img = scene.surface_color(x, y)
    for b in scene.buildings:
        img[b.contains(x, y)] = b.roof
    return img


def facade_shade(normal: np.ndarray) -> np.ndarray:
    """Lambert-like factor in ``[0.3, 1]`` for wall normals ``(..., 2)``."""
    return 0.65 + 0.35 * (normal @ LIGHT)


def column_azimuths(theta: float, hfov: float, width: int) -> np.ndarray:
    """Yaw seen by each panorama column; column 0 looks at ``theta - hfov / 2``."""
    return theta - hfov / 2.0 + hfov * np.arange(width) / width


def row_elevations(height: int, elev_min: float, elev_max: float) -> np.ndarray:
    return elev_max - (np.arange(height) + 0.5) * (elev_max - elev_min) / height


def horizon_row(height: int, elev_min: float, elev_max: float) -> int:
    """First row below the horizon."""
    return int(np.argmax(row_elevations(height, elev_min, elev_max) < 0))


def _ray_box(ox, oy, dx, dy, b):
    """Slab intersection of 2-D rays with an axis-aligned box.

    Returns entry distance (``inf`` on a miss) and the entry-face normal.
    """
    with np.errstate(divide="ignore", invalid="ignore"):
        tx1 = (b.xmin - ox) / dx
        tx2 = (b.xmax - ox) / dx
        ty1 = (b.ymin - oy) / dy
        ty2 = (b.ymax - oy) / dy
    # rays parallel to a slab: inside -> (-inf, inf), outside -> miss
    in_x = (ox >= b.xmin) & (ox <= b.xmax)
    in_y = (oy >= b.ymin) & (oy <= b.ymax)
    txmin = np.where(dx == 0, np.where(in_x, -np.inf, np.inf), np.minimum(tx1, tx2))
    txmax = np.where(dx == 0, np.where(in_x, np.inf, -np.inf), np.maximum(tx1, tx2))
    tymin = np.where(dy == 0, np.where(in_y, -np.inf, np.inf), np.minimum(ty1, ty2))
    tymax = np.where(dy == 0, np.where(in_y, np.inf, -np.inf), np.maximum(ty1, ty2))
    t_in = np.maximum(txmin, tymin)
    t_out = np.minimum(txmax, tymax)
    hit = (t_in <= t_out) & (t_in > 0)
    x_face = txmin >= tymin
    normal = np.where(x_face[:, None], np.stack([-np.sign(dx), np.zeros_like(dx)], -1),
                      np.stack([np.zeros_like(dy), -np.sign(dy)], -1))
    return np.where(hit, t_in, np.inf), normal


def render_ground(scene: SceneSpec, pose: Pose, hfov: float = 2 * math.pi, size=(32, 128),
                  cam_height: float = 1.6, elev_range=(-math.pi / 4, math.pi / 4)) -> np.ndarray:
    """Cylindrical panorama ``(H, W, 3)`` in ``[0, 1]`` seen from ``pose``.

    Columns sample yaw linearly (clockwise from east, left to right); rows
    sample elevation linearly from ``elev_range[1]`` (top) to ``elev_range[0]``.
    """
    if scene.building_at(pose.x, pose.y) >= 0:
        raise SceneError(f"camera at ({pose.x:.2f}, {pose.y:.2f}) is inside a building")
    H, W = size
    elev_min, elev_max = elev_range
    az = column_azimuths(pose.theta, hfov, W)
    # clockwise-from-east yaw: east component cos, north component -sin
    dx = np.cos(az)
    dy = -np.sin(az)
    tan_e = np.tan(row_elevations(H, elev_min, elev_max))[:, None]  # (H, 1)

    with np.errstate(divide="ignore"):
        t_ground = np.where(tan_e < 0, -cam_height / tan_e, np.inf) * np.ones((1, W))
    gx = pose.x + np.where(np.isfinite(t_ground), t_ground, 0.0) * dx
    gy = pose.y + np.where(np.isfinite(t_ground), t_ground, 0.0) * dy
    img = np.where((tan_e < 0)[..., None], scene.surface_color(gx, gy), scene.sky_color)
    nearest = t_ground.copy()

    for b in scene.buildings:
        t_in, normal = _ray_box(pose.x, pose.y, dx, dy, b)
        z = cam_height + t_in[None, :] * tan_e  # ray height at the wall
        wall = np.isfinite(t_in)[None, :] & (z >= 0) & (z <= b.height) & (t_in[None, :] < nearest)
        if not wall.any():
            continue
        color = b.facade[None, :] * facade_shade(normal)[:, None]  # (W, 3)
        img = np.where(wall[..., None], np.clip(color, 0, 1)[None], img)
        nearest = np.where(wall, t_in[None, :], nearest)
    return img


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
