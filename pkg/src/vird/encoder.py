"""Small convolutional backbone and column-wise descriptor head."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass
class EncoderConfig:
    widths: tuple = (16, 32, 32)
    ground_strides: tuple = (2, 2, 2)
    satellite_strides: tuple = (2, 1, 1)
    share_weights: bool = False
    descriptor_dim: int = 8
    mlp_hidden: int | None = None

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        self.ground_strides = tuple(int(s) for s in self.ground_strides)
        self.satellite_strides = tuple(int(s) for s in self.satellite_strides)
        if len(self.widths) != len(self.ground_strides) or len(self.widths) != len(self.satellite_strides):
            raise ValueError("one stride per stage is required for each view")
        if min(self.widths) < 1 or self.descriptor_dim < 1:
            raise ValueError("channel counts must be >= 1")
        if self.share_weights and self.ground_strides != self.satellite_strides:
            raise ValueError("shared backbones need identical strides")

    @property
    def channels(self) -> int:
        return self.widths[-1]

    @property
    def hidden(self) -> int:
        return self.mlp_hidden or 4 * self.descriptor_dim

    def factor(self, view: str) -> int:
        strides = self.ground_strides if view == "ground" else self.satellite_strides
        f = 1
        for s in strides:
            f *= s
        return f


class FeatureEncoder(nn.Module):
    """Stack of 3x3 convolutions; horizontal padding is circular for panoramas."""

    def __init__(self, widths, strides, in_channels: int = 3, circular: bool = False):
        super().__init__()
        self.circular = circular
        self.strides = tuple(strides)
        chans = [in_channels, *widths]
        self.convs = nn.ModuleList(
            nn.Conv2d(chans[i], chans[i + 1], 3, stride=s) for i, s in enumerate(strides))

    @property
    def factor(self) -> int:
        f = 1
        for s in self.strides:
            f *= s
        return f

    def _pad(self, x, circular):
        if circular:
            x = F.pad(x, (1, 1, 0, 0), mode="circular")
            return F.pad(x, (0, 0, 1, 1))
        return F.pad(x, (1, 1, 1, 1))

    def forward(self, x, circular: bool | None = None):
        circular = self.circular if circular is None else circular
        f = self.factor
        if x.shape[-2] % f or x.shape[-1] % f:
            raise ValueError(f"image size {tuple(x.shape[-2:])} is not divisible by downsample factor {f}")
        for i, conv in enumerate(self.convs):
            x = conv(self._pad(x, circular))
            if i < len(self.convs) - 1:
                x = F.relu(x)
        return x


def extract_features(image: torch.Tensor, encoder: FeatureEncoder, circular: bool | None = None) -> torch.Tensor:
    """``(B, 3, H, W)`` (or unbatched) image -> ``(B, C, H/f, W/f)`` features."""
    if image.dim() == 3:
        return encoder(image[None], circular)[0]
    return encoder(image, circular)


class ColumnEncoder(nn.Module):
    """Shared MLP compressing each ``C x H_Q`` column into ``C_d`` values."""

    def __init__(self, in_features: int, out_features: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(in_features, hidden)
        self.fc2 = nn.Linear(hidden, out_features)

    def forward(self, feats: torch.Tensor) -> torch.Tensor:
        return vertical_directional_encode(feats, self)

    def mlp(self, cols: torch.Tensor) -> torch.Tensor:
        return self.fc2(F.relu(self.fc1(cols)))


def vertical_directional_encode(feats: torch.Tensor, head: ColumnEncoder) -> torch.Tensor:
    """``(..., C, H_Q, W)`` -> ``(..., W, C_d)`` descriptor blocks, one per column.

    Column vectors are flattened channel-major (index ``c * H_Q + h``).
    """
    *lead, C, H, W = feats.shape
    cols = feats.reshape(*lead, C * H, W).transpose(-1, -2)
    return head.mlp(cols)


def flatten_descriptor(blocks: torch.Tensor) -> torch.Tensor:
    """``(..., W, C_d)`` -> ``(..., W * C_d)`` with column-major blocks."""
    return blocks.reshape(*blocks.shape[:-2], -1)


def unflatten_descriptor(flat: torch.Tensor, C_d: int) -> torch.Tensor:
    if flat.shape[-1] % C_d:
        raise ValueError(f"descriptor length {flat.shape[-1]} is not a multiple of {C_d}")
    return flat.reshape(*flat.shape[:-1], flat.shape[-1] // C_d, C_d)
