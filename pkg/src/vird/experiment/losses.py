"""Mini-batch assembly and the combined training objective."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from ..config import TrainConfig
from ..geometry import make_pose_grid, snap_angle
from ..model import VIRD, to_tensor
from ..posesearch import infonce_loss, regress_residual, regression_loss, sample_training_residual_poses, \
    similarity_scores
from ..reconstruction import DECODER_KEYS, decode_view, l1, shift_crop_batch

LOSS_KEYS = ("L_total", "L_recon", "L_match", "L_reg")


@dataclass
class Batch:
    I_g: torch.Tensor  # (B, 3, H, W)
    I_s: torch.Tensor  # (B, 3, A, A)
    poses: np.ndarray  # (B, 3) true poses
    positions: np.ndarray  # (B, P, 2): grid nodes, then the true position, then regression samples
    n_grid: int
    grid_shifts: np.ndarray  # (n_theta,)
    gt_index: np.ndarray  # (B,) flat candidate index of the snapped true pose
    gt_shift: np.ndarray  # (B,) descriptor column shift of the true yaw
    reg_shifts: np.ndarray  # (B, N_r)
    reg_poses: np.ndarray  # (B, N_r, 3)
    reg_targets: np.ndarray  # (B, N_r, 3)

    @property
    def size(self) -> int:
        return self.I_g.shape[0]


def make_batch(pairs, model: VIRD, cfg: TrainConfig, rng: np.random.Generator) -> Batch:
    W_s = model.W_s
    positions, gt_index, gt_shift = [], [], []
    reg_shifts, reg_poses, reg_targets = [], [], []
    grid = None
    for p in pairs:
        anchor = (p.pose.x, p.pose.y) if cfg.align_train_grid else None
        grid = make_pose_grid(cfg.search_extent, cfg.train_grid, cfg.train_ntheta, model.sat_frame,
                              model.polar, anchor=anchor)
        ix, iy, t = grid.nearest(p.pose)
        gt_index.append((ix * grid.G + iy) * grid.n_theta + t)
        gt_shift.append(snap_angle(p.pose.theta, W_s)[1])
        samples = sample_training_residual_poses(p.pose, model.cfg.regression, rng, W_s)
        reg_poses.append([s[0].as_tuple() for s in samples])
        reg_targets.append([s[1] for s in samples])
        reg_shifts.append([snap_angle(s[0].theta, W_s)[1] for s in samples])
        positions.append(np.concatenate([grid.positions, [[p.pose.x, p.pose.y]],
                                         np.array(reg_poses[-1])[:, :2]]))
    return Batch(
        I_g=to_tensor(np.stack([p.grd for p in pairs])),
        I_s=to_tensor(np.stack([p.sat for p in pairs])),
        poses=np.array([p.pose.as_tuple() for p in pairs]),
        positions=np.stack(positions),
        n_grid=grid.G * grid.G,
        grid_shifts=grid.shifts,
        gt_index=np.array(gt_index),
        gt_shift=np.array(gt_shift),
        reg_shifts=np.array(reg_shifts),
        reg_poses=np.array(reg_poses),
        reg_targets=np.array(reg_targets),
    )


def crop_polar_images(images: torch.Tensor, shifts, W_out: int) -> torch.Tensor:
    """Shift-and-crop ``(B, C, H, W_s)`` images along width, one shift per row."""
    cols = images.permute(0, 3, 1, 2)  # (B, W_s, C, H)
    return shift_crop_batch(cols, shifts, W_out).permute(0, 2, 3, 1)


def total_loss(batch: Batch, model: VIRD, cfg: TrainConfig) -> tuple[torch.Tensor, dict]:
    """``L_recon + L_match + L_reg`` and a float breakdown.

    Disabled components contribute exactly zero. The breakdown also carries
    the unweighted ``L_origin`` and ``L_cross`` terms.
    """
    B = batch.size
    zero = torch.zeros((), dtype=batch.I_g.dtype)
    D_g = model.ground(batch.I_g)
    F_s = model.sat_features(batch.I_s)
    blocks = model.sat_blocks(F_s, batch.positions)
    n = batch.n_grid
    parts = {"L_match": zero, "L_reg": zero, "L_origin": zero, "L_cross": zero, "L_recon": zero}

    if cfg.use_match:
        scores = similarity_scores(D_g, blocks[:, :n], batch.grid_shifts)
        parts["L_match"] = infonce_loss(scores.reshape(B, -1), torch.as_tensor(batch.gt_index), cfg.tau)

    if cfg.use_origin or cfg.use_cross:
        D_s = shift_crop_batch(blocks[:, n], batch.gt_shift, model.W_g)
        ratio = model.image_polar.W_s // model.W_s
        I_s2p = model.polar_image(batch.I_s, batch.positions[:, n:n + 1])[:, 0]
        I_s2p = crop_polar_images(I_s2p, batch.gt_shift * ratio, model.data.pano_w)
        sources = {"g2g": D_g, "g2s": D_g, "s2s": D_s, "s2g": D_s}
        wanted = set()
        if cfg.use_origin:
            wanted |= {"g2g", "s2s"}
        if cfg.use_cross:
            wanted |= {"g2s", "s2g"}
        recon = {k: decode_view(sources[k], model.decoders[k]) if k in wanted else None for k in DECODER_KEYS}
        if cfg.use_origin:
            parts["L_origin"] = l1(batch.I_g, recon["g2g"]) + l1(I_s2p, recon["s2s"])
        if cfg.use_cross:
            parts["L_cross"] = l1(batch.I_g, recon["s2g"]) + l1(I_s2p, recon["g2s"])
        parts["L_recon"] = cfg.alpha1 * parts["L_origin"] * float(cfg.use_origin) \
            + cfg.alpha2 * parts["L_cross"] * float(cfg.use_cross)

    if cfg.use_regression:
        n_r = batch.reg_shifts.shape[1]
        reg_blocks = blocks[:, n + 1:].reshape(B * n_r, model.W_s, model.C_d)
        D_s_r = shift_crop_batch(reg_blocks, batch.reg_shifts.reshape(-1), model.W_g)
        D_g_r = D_g[:, None].expand(B, n_r, *D_g.shape[1:]).reshape(B * n_r, *D_g.shape[1:])
        poses = torch.as_tensor(batch.reg_poses.reshape(-1, 3), dtype=D_g.dtype)
        delta = regress_residual(D_g_r, D_s_r, poses, model.regressor, model.half_extent)
        target = torch.as_tensor(batch.reg_targets.reshape(-1, 3), dtype=D_g.dtype)
        parts["L_reg"] = regression_loss(delta, target, model.cfg.regression.beta)

    total = parts["L_recon"] + parts["L_match"] + parts["L_reg"]
    if not torch.isfinite(total):
        detail = ", ".join(f"{k}={float(v.detach()):.4g}" for k, v in parts.items())
        raise FloatingPointError(f"non-finite loss: {detail}")
    breakdown = {k: float(v.detach()) for k, v in parts.items()}
    breakdown["L_total"] = float(total.detach())
    return total, breakdown

