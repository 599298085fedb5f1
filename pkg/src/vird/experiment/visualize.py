"""Static PNG output: attention heatmaps, reconstructions and pose overlays."""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np
import torch
from PIL import Image, ImageDraw
from PIL.PngImagePlugin import PngInfo

from ..geometry import Pose, pose_to_pixel, snap_angle
from ..model import VIRD, to_tensor
from ..reconstruction import DECODER_KEYS, decode_view, shift_crop_batch
from .evaluate import eval_grid, localize
from .losses import crop_polar_images

HEATMAP_SCALE = 8
POSE_SCALE = 4
GT_COLOR = (0, 200, 0)
PRED_COLOR = (230, 30, 30)


def normalize_u8(a: np.ndarray) -> tuple[np.ndarray, float, float]:
    """Map ``a`` linearly onto ``0..255``; a constant array maps to zeros."""
    a = np.asarray(a, dtype=np.float64)
    lo, hi = float(a.min()), float(a.max())
    if hi <= lo:
        return np.zeros(a.shape, dtype=np.uint8), lo, hi
    return np.rint((a - lo) / (hi - lo) * 255.0).astype(np.uint8), lo, hi


def attention_panels(weights: dict, row: int, W: int) -> list[tuple[str, np.ndarray]]:
    """``(H_K, W)`` arrays for one shared-axis row; position-only weights are repeated over columns."""
    panels = []
    for name in ("A_s2p", "A_g", "A_g_prime"):
        if name not in weights:
            continue
        A = weights[name].detach().double().cpu().numpy()
        if A.ndim == 2:
            panels.append((name, np.repeat(A[row][:, None], W, axis=1)))
        else:  # (B, H_Q, H_K, W)
            panels.append((name, A[0, row]))
    return panels


def save_heatmap(panels, path, scale: int = HEATMAP_SCALE) -> Path:
    """Stack normalized panels vertically, one separator row between them.

    Min/max of every raw panel go into the PNG text chunks.
    """
    info = PngInfo()
    blocks = []
    for i, (name, a) in enumerate(panels):
        u8, lo, hi = normalize_u8(a)
        info.add_text(f"{name}_min", repr(lo))
        info.add_text(f"{name}_max", repr(hi))
        blocks.append(np.kron(u8, np.ones((scale, scale), dtype=np.uint8)))
        if i < len(panels) - 1:
            blocks.append(np.zeros((1, u8.shape[1] * scale), dtype=np.uint8))
    img = np.concatenate(blocks, axis=0)
    Image.fromarray(img, mode="L").save(path, pnginfo=info)
    return Path(path)


def _u8(image: torch.Tensor) -> np.ndarray:
    return (image.detach().clamp(0, 1).permute(1, 2, 0).numpy() * 255.0 + 0.5).astype(np.uint8)


def _arrow(draw: ImageDraw.ImageDraw, pose: Pose, frame, color, scale: int, length_m: float = 3.0):
    u, v = pose_to_pixel(pose, frame)
    u, v = u * scale, v * scale
    L = length_m / frame.resolution * scale
    # clockwise yaw: heading (cos, -sin) in east/north, i.e. (+cos, +sin) in pixel coordinates
    tu, tv = u + L * math.cos(pose.theta), v + L * math.sin(pose.theta)
    draw.line([(u, v), (tu, tv)], fill=color, width=2)
    r = max(2, scale // 2 + 1)
    draw.ellipse([u - r, v - r, u + r, v + r], outline=color, width=2)


def pose_overlay(sat: np.ndarray, frame, gt: Pose | None, pred: Pose, path, scale: int = POSE_SCALE) -> Path:
    img = Image.fromarray(sat).resize((sat.shape[1] * scale, sat.shape[0] * scale), Image.NEAREST)
    draw = ImageDraw.Draw(img)
    if gt is not None:
        _arrow(draw, gt, frame, GT_COLOR, scale)
    _arrow(draw, pred, frame, PRED_COLOR, scale)
    img.save(path)
    return Path(path)


@torch.no_grad()
def emit_visualizations(model: VIRD, sample, out_dir, rows=None, G: int | None = None,
                        n_theta: int | None = None) -> list[Path]:
    """Write ``<id>_attn_<row>.png``, ``<id>_recon_<i2j>.png`` and ``<id>_pose.png``.

    Attention files are only produced when the attention module is active.
    """
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot write visualizations to {out_dir}: {exc}") from exc
    was_training = model.training
    model.eval()
    written = []
    I_g = to_tensor(sample.grd)[None]
    I_s = to_tensor(sample.sat)[None]
    D_g, weights = model.ground(I_g, return_weights=True)
    F_s = model.sat_features(I_s)
    pos = np.array([[[sample.pose.x, sample.pose.y]]])
    F_s2p = model.sat_polar(F_s, pos)
    _, sat_w = model.cepa.satellite(F_s2p, return_weights=True)
    weights = {**sat_w, **weights}

    if weights:
        H_Q = model.cepa.H_Q
        for r in (range(H_Q) if rows is None else rows):
            if not 0 <= r < H_Q:
                raise ValueError(f"row {r} outside the shared axis of height {H_Q}")
            path = out_dir / f"{sample.id}_attn_{r}.png"
            written.append(save_heatmap(attention_panels(weights, r, model.W_g), path))

    k = snap_angle(sample.pose.theta, model.W_s)[1]
    blocks = model.sat_blocks(F_s, pos)[:, 0]
    D_s = shift_crop_batch(blocks, [k], model.W_g)
    ratio = model.image_polar.W_s // model.W_s
    I_s2p = crop_polar_images(model.polar_image(I_s, pos)[:, 0], np.array([k * ratio]), model.data.pano_w)
    sources = {"g2g": D_g, "g2s": D_g, "s2s": D_s, "s2g": D_s}
    targets = {"g2g": I_g, "s2g": I_g, "s2s": I_s2p, "g2s": I_s2p}
    for key in DECODER_KEYS:
        rec = decode_view(sources[key], model.decoders[key])
        pair = np.concatenate([_u8(targets[key][0]), _u8(rec[0])], axis=1)
        path = out_dir / f"{sample.id}_recon_{key}.png"
        Image.fromarray(pair).save(path)
        written.append(path)

    tc = model.cfg.train
    grid = eval_grid(model, tc.test_grid if G is None else G, tc.test_ntheta if n_theta is None else n_theta)
    _, pred, _ = localize(model, sample.sat, sample.grd, grid, tc.use_regression)
    written.append(pose_overlay(sample.sat, model.sat_frame, sample.pose, pred, out_dir / f"{sample.id}_pose.png"))
    model.train(was_training)
    return written
