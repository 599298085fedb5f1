"""Descriptor matching over candidate poses and residual pose regression."""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .geometry import Pose, PoseGrid, crop_indices, snap_angle, wrap_angle

NORM_EPS = 1e-12


@dataclass
class RegressionConfig:
    # two test-grid strides at the default 16 m / 20 x 20 search (0.8 m stride) and
    # 0.7 of the 22.5 deg orientation step of a 16-column descriptor
    dx_max: float = 1.6
    dy_max: float = 1.6
    dtheta_max_deg: float = 15.75
    n_r: int = 4
    beta: float = 5.0
    conv_widths: tuple = (32, 64)
    kernel: int = 3
    hidden: int = 128
    frame: str = "heading"  # frame of the predicted position residual: "heading" or "world"

    def __post_init__(self):
        self.conv_widths = tuple(int(c) for c in self.conv_widths)
        if self.frame not in ("heading", "world"):
            raise ValueError(f"frame must be 'heading' or 'world', got {self.frame!r}")
        if min(self.dx_max, self.dy_max, self.dtheta_max_deg) <= 0:
            raise ValueError("regression ranges must be positive")
        if self.n_r < 1:
            raise ValueError("n_r must be >= 1")

    @property
    def dtheta_max(self) -> float:
        return math.radians(self.dtheta_max_deg)

    @property
    def ranges(self) -> tuple[float, float, float]:
        return (self.dx_max, self.dy_max, self.dtheta_max)


@dataclass
class SimilarityVolume:
    scores: torch.Tensor  # (G, G, n_theta)
    grid: PoseGrid
    tag: str = field(default="")

    @property
    def shape(self):
        return tuple(self.scores.shape)


def l2_normalize(x: torch.Tensor) -> torch.Tensor:
    return x / x.norm(dim=-1, keepdim=True).clamp_min(NORM_EPS)


def crop_index_table(shifts, W_s: int, W_g: int) -> torch.Tensor:
    return torch.as_tensor(np.stack([crop_indices(int(s), W_s, W_g) for s in shifts]))


def similarity_scores(D_g: torch.Tensor, D_s: torch.Tensor, shifts, W_g: int | None = None) -> torch.Tensor:
    """Cosine similarity of a ground descriptor with every shifted satellite crop.

    Args:
        D_g: ``(..., W_g, C_d)`` ground blocks.
        D_s: ``(..., P, W_s, C_d)`` satellite blocks, one per candidate position.
        shifts: integral column shift of each orientation candidate.

    Returns:
        ``(..., P, n_theta)`` scores in ``[-1, 1]``.
    """
    W_g = D_g.shape[-2] if W_g is None else W_g
    W_s = D_s.shape[-2]
    idx = crop_index_table(shifts, W_s, W_g).to(D_s.device)  # (N, W_g)
    crops = D_s[..., idx, :]  # (..., P, N, W_g, C_d)
    crops = crops.flatten(-2)
    g = D_g.flatten(-2)[..., None, None, :]
    return (l2_normalize(crops) * l2_normalize(g)).sum(-1)


def similarity_volume(D_g: torch.Tensor, D_s: torch.Tensor, grid: PoseGrid, chunk: int | None = None,
                      jobs: int = 1, tag: str = "") -> SimilarityVolume:
    """Exhaustive score volume for one sample.

    ``D_s`` holds one ``(W_s, C_d)`` descriptor per grid position in the
    order of ``grid.positions``. Positions may be processed in chunks
    (optionally on ``jobs`` threads); every score depends on its candidate
    only, so the result does not depend on the chunking.
    """
    if D_s.shape[0] != grid.G * grid.G:
        raise ValueError(f"{D_s.shape[0]} satellite descriptors for a grid of {grid.G * grid.G} positions")
    if D_s.shape[-2] != grid.W_s:
        raise ValueError(f"descriptor width {D_s.shape[-2]} != grid W_s {grid.W_s}")
    if chunk is None or chunk >= D_s.shape[0]:
        scores = similarity_scores(D_g, D_s, grid.shifts)
    else:
        parts = [D_s[i:i + chunk] for i in range(0, D_s.shape[0], chunk)]
        if jobs > 1:
            with ThreadPoolExecutor(jobs) as pool:
                outs = list(pool.map(lambda p: similarity_scores(D_g, p, grid.shifts), parts))
        else:
            outs = [similarity_scores(D_g, p, grid.shifts) for p in parts]
        scores = torch.cat(outs, dim=0)
    return SimilarityVolume(scores.reshape(grid.G, grid.G, grid.n_theta), grid, tag)


def infonce_loss(scores: torch.Tensor, gt_index, tau: float = 0.05) -> torch.Tensor:
    """Contrastive loss of the true candidate against all others.

    ``scores`` is a volume (any shape, flattened) or a batch ``(B, M)`` with
    ``gt_index`` of shape ``(B,)``; batches are averaged.
    """
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    if isinstance(scores, SimilarityVolume):
        scores = scores.scores
    if isinstance(gt_index, (int, np.integer)):
        flat = scores.reshape(1, -1)
        gt = torch.tensor([int(gt_index)], device=scores.device)
    else:
        flat = scores.reshape(scores.shape[0], -1)
        gt = torch.as_tensor(gt_index, device=scores.device).long().reshape(-1)
    if (gt < 0).any() or (gt >= flat.shape[1]).any():
        raise IndexError(f"ground-truth index outside volume of {flat.shape[1]} candidates")
    return F.cross_entropy(flat / tau, gt)


def coarse_match(vol: SimilarityVolume) -> tuple[Pose, int]:
    """Best-scoring candidate; ties go to the smallest flat index."""
    scores = vol.scores.detach().cpu().numpy().ravel() if isinstance(vol.scores, torch.Tensor) \
        else np.asarray(vol.scores).ravel()
    if scores.size == 0:
        raise ValueError("empty similarity volume")
    flat = int(np.argmax(scores))
    return vol.grid.pose(*vol.grid.unravel(flat)), flat


class RegressionHead(nn.Module):
    """Descriptor difference + coarse pose -> bounded residual ``(dx, dy, dtheta)``."""

    def __init__(self, C_d: int, W_g: int, cfg: RegressionConfig, circular: bool = True):
        super().__init__()
        self.cfg = cfg
        self.circular = circular
        self.pad = cfg.kernel // 2
        chans = [C_d, *cfg.conv_widths]
        self.convs = nn.ModuleList(nn.Conv1d(chans[i], chans[i + 1], cfg.kernel) for i in range(len(chans) - 1))
        self.fc1 = nn.Linear(chans[-1] * W_g + 4, cfg.hidden)
        self.fc2 = nn.Linear(cfg.hidden, 3)
        self.register_buffer("scale", torch.tensor(cfg.ranges, dtype=torch.float32))

    def forward(self, diff: torch.Tensor, pose_feat: torch.Tensor) -> torch.Tensor:
        x = diff.transpose(-1, -2)  # (B, C_d, W_g)
        for conv in self.convs:
            x = F.pad(x, (self.pad, self.pad), mode="circular" if self.circular else "constant")
            x = F.relu(conv(x))
        x = torch.cat([x.flatten(1), pose_feat], dim=-1)
        x = self.fc2(F.relu(self.fc1(x)))
        return torch.tanh(x) * self.scale.to(x.dtype)


def pose_features(poses: torch.Tensor, half_extent: float) -> torch.Tensor:
    """``(B, 3)`` poses -> ``(B, 4)``: scaled position and yaw on the unit circle."""
    return torch.stack([poses[:, 0] / half_extent, poses[:, 1] / half_extent,
                        torch.cos(poses[:, 2]), torch.sin(poses[:, 2])], dim=-1)


def regress_residual(D_g: torch.Tensor, D_s_pm: torch.Tensor, p_m: torch.Tensor, head: RegressionHead,
                     half_extent: float) -> torch.Tensor:
    """Residual for coarse poses ``p_m (B, 3)``.

    Both descriptors are ``(B, W_g, C_d)`` blocks (``D_s_pm`` already aligned to
    ``p_m``); each is L2-normalised as a whole before differencing.
    """
    if D_g.shape != D_s_pm.shape:
        raise ValueError(f"descriptor shapes differ: {tuple(D_g.shape)} vs {tuple(D_s_pm.shape)}")
    B = D_g.shape[0]
    diff = l2_normalize(D_g.reshape(B, -1)) - l2_normalize(D_s_pm.reshape(B, -1))
    delta = head(diff.reshape(D_g.shape), pose_features(p_m, half_extent))
    if head.cfg.frame == "world":
        return delta
    return heading_to_world(delta, p_m[:, 2], head.cfg)


def heading_to_world(delta: torch.Tensor, theta: torch.Tensor, cfg: RegressionConfig) -> torch.Tensor:
    """Rotate (forward, left) residuals into (east, north) and clamp to the configured box."""
    c, s = torch.cos(theta), torch.sin(theta)
    fwd, left = delta[:, 0], delta[:, 1]
    # heading (cos, -sin) and its left normal (sin, cos) for a clockwise yaw
    dx = (fwd * c + left * s).clamp(-cfg.dx_max, cfg.dx_max)
    dy = (-fwd * s + left * c).clamp(-cfg.dy_max, cfg.dy_max)
    return torch.stack([dx, dy, delta[:, 2]], dim=-1)


def regression_loss(delta: torch.Tensor, delta_star: torch.Tensor, beta: float = 5.0) -> torch.Tensor:
    """``beta * (|dx - dx*| + |dy - dy*| + |dtheta - dtheta*|)``, averaged over rows."""
    err = (delta - delta_star).abs()
    return beta * err.reshape(-1, 3).sum(-1).mean()


def sample_training_residual_poses(p_star: Pose, cfg: RegressionConfig, rng: np.random.Generator,
                                   W_s: int) -> list[tuple[Pose, tuple[float, float, float]]]:
    """``n_r`` coarse poses around ``p_star`` with their true residuals.

    Positions are uniform in the box ``p_star +- (dx_max, dy_max)``; yaws are
    uniform in ``+- dtheta_max`` and then snapped to an integral column shift.
    """
    out = []
    for _ in range(cfg.n_r):
        x = p_star.x + rng.uniform(-cfg.dx_max, cfg.dx_max)
        y = p_star.y + rng.uniform(-cfg.dy_max, cfg.dy_max)
        theta, _ = snap_angle(p_star.theta + rng.uniform(-cfg.dtheta_max, cfg.dtheta_max), W_s)
        pose = Pose(x, y, theta)
        out.append((pose, (p_star.x - pose.x, p_star.y - pose.y, wrap_angle(p_star.theta - pose.theta))))
    return out
