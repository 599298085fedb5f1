"""Decoders from descriptors back to images and the view-reconstruction loss."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .geometry import TWO_PI, crop_indices, snap_angle, wrap_angle

DECODER_KEYS = ("g2g", "s2s", "g2s", "s2g")


@dataclass
class ReconWeights:
    alpha1: float = 1.0
    alpha2: float = 10.0

    def __post_init__(self):
        if self.alpha1 < 0 or self.alpha2 < 0:
            raise ValueError("reconstruction weights must be non-negative")


def align_satellite_descriptor(blocks: torch.Tensor, theta: float, W_g: int) -> torch.Tensor:
    """Rotate ``(..., W_s, C_d)`` satellite blocks to ``theta`` and crop to ``W_g`` columns.

    ``theta`` is snapped to the nearest column; a deviation of more than half
    a column is rejected.
    """
    W_s = blocks.shape[-2]
    snapped, shift = snap_angle(theta, W_s)
    if abs(wrap_angle(theta - snapped)) > 0.5 * TWO_PI / W_s + 1e-9:
        raise ValueError(f"theta={theta!r} is more than half a column from an integral shift (W_s={W_s})")
    idx = torch.as_tensor(crop_indices(shift, W_s, W_g), device=blocks.device)
    return torch.index_select(blocks, blocks.dim() - 2, idx)


def shift_crop_batch(blocks: torch.Tensor, shifts, W_g: int) -> torch.Tensor:
    """Per-row shift-and-crop: ``blocks (N, W_s, ...)`` with one integral shift per row."""
    W_s = blocks.shape[1]
    start = (W_s - W_g) // 2
    shifts = torch.as_tensor(shifts, device=blocks.device).long()
    idx = (start + shifts[:, None] + torch.arange(W_g, device=blocks.device)[None]) % W_s
    gather = idx.reshape(idx.shape + (1,) * (blocks.dim() - 2)).expand(-1, -1, *blocks.shape[2:])
    return torch.gather(blocks, 1, gather)


class Decoder(nn.Module):
    """Descriptor ``(B, W_g, C_d)`` -> image ``(B, out_channels, H_img, W_img)``.

    Each column is expanded by an MLP into a ``channels x H_img/4 x bw``
    block (``bw = W_img / (4 W_g)``), then two nearest x2 upsampling +
    3x3 convolution stages reach full resolution.
    """

    def __init__(self, C_d: int, W_g: int, out_size: tuple[int, int], out_channels: int = 3,
                 channels: int = 16, hidden: int = 64, circular: bool = True):
        super().__init__()
        H_img, W_img = out_size
        if H_img % 4 or W_img % (4 * W_g):
            raise ValueError(f"target size {out_size} incompatible with {W_g} columns and x4 upsampling")
        self.W_g = W_g
        self.C_d = C_d
        self.channels = channels
        self.h0 = H_img // 4
        self.bw = W_img // (4 * W_g)
        self.out_size = (H_img, W_img)
        self.circular = circular
        self.fc1 = nn.Linear(C_d, hidden)
        self.fc2 = nn.Linear(hidden, channels * self.h0 * self.bw)
        self.conv1 = nn.Conv2d(channels, channels, 3)
        self.conv2 = nn.Conv2d(channels, out_channels, 3)

    def _pad(self, x):
        if self.circular:
            return F.pad(F.pad(x, (1, 1, 0, 0), mode="circular"), (0, 0, 1, 1), mode="replicate")
        return F.pad(x, (1, 1, 1, 1), mode="replicate")

    def forward(self, blocks: torch.Tensor) -> torch.Tensor:
        if blocks.shape[-2:] != (self.W_g, self.C_d):
            raise ValueError(f"descriptor blocks {tuple(blocks.shape[-2:])} != ({self.W_g}, {self.C_d})")
        B = blocks.shape[0]
        x = self.fc2(F.relu(self.fc1(blocks)))  # (B, W_g, ch*h0*bw)
        x = x.reshape(B, self.W_g, self.channels, self.h0, self.bw)
        x = x.permute(0, 2, 3, 1, 4).reshape(B, self.channels, self.h0, self.W_g * self.bw)
        x = F.interpolate(x, scale_factor=2, mode="nearest")
        x = F.relu(self.conv1(self._pad(x)))
        x = F.interpolate(x, scale_factor=2, mode="nearest")
        return self.conv2(self._pad(x))


def decode_view(descriptor: torch.Tensor, decoder: Decoder) -> torch.Tensor:
    """Decode a flat ``(B, K_g)`` or block ``(B, W_g, C_d)`` descriptor."""
    if descriptor.dim() == 2:
        if descriptor.shape[-1] != decoder.W_g * decoder.C_d:
            raise ValueError(f"descriptor length {descriptor.shape[-1]} != {decoder.W_g * decoder.C_d}")
        descriptor = descriptor.reshape(-1, decoder.W_g, decoder.C_d)
    return decoder(descriptor)


def l1(target: torch.Tensor, recon: torch.Tensor) -> torch.Tensor:
    """Mean absolute difference over pixels and channels (batch-averaged)."""
    if target.shape != recon.shape:
        raise ValueError(f"target {tuple(target.shape)} and reconstruction {tuple(recon.shape)} differ")
    return (target - recon).abs().mean()


def recon_terms(I_g, I_s2p, recon: dict) -> tuple[torch.Tensor, torch.Tensor]:
    """``(L_origin, L_cross)`` for precomputed reconstructions keyed by ``DECODER_KEYS``."""
    origin = l1(I_g, recon["g2g"]) + l1(I_s2p, recon["s2s"])
    cross = l1(I_g, recon["s2g"]) + l1(I_s2p, recon["g2s"])
    return origin, cross


def recon_loss(I_g, I_s2p, D_g, D_s2p, decoders, w: ReconWeights):
    """Returns ``(L_origin, L_cross, L_recon)``.

    ``decoders`` maps ``DECODER_KEYS`` to modules; ``D_g`` and ``D_s2p`` are the
    ground descriptor and the satellite descriptor aligned to the true pose.
    """
    recon = {
        "g2g": decode_view(D_g, decoders["g2g"]),
        "s2s": decode_view(D_s2p, decoders["s2s"]),
        "g2s": decode_view(D_g, decoders["g2s"]),
        "s2g": decode_view(D_s2p, decoders["s2g"]),
    }
    origin, cross = recon_terms(I_g, I_s2p, recon)
    return origin, cross, w.alpha1 * origin + w.alpha2 * cross
