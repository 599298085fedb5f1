"""The full network: backbones, CEPA, descriptor heads, decoders, regressor."""

from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn

from .cepa import CEPA
from .config import RunConfig
from .encoder import ColumnEncoder, FeatureEncoder, vertical_directional_encode
from .geometry import ImageFrame, PolarConfig, polar_transform, world_to_pixel
from .posesearch import RegressionHead
from .reconstruction import DECODER_KEYS, Decoder
from .synthdata.scene import SynthParams

PIXEL_MEAN = 0.5
PIXEL_STD = 0.25


def to_tensor(images: np.ndarray) -> torch.Tensor:
    """``(..., H, W, 3)`` uint8 -> ``(..., 3, H, W)`` float in ``[0, 1]``."""
    t = torch.from_numpy(np.array(images, dtype=np.float32)) / 255.0
    return t.movedim(-1, -3)


class VIRD(nn.Module):
    """Cross-view pose estimator.

    Geometry (image sizes, ground resolution, field of view) comes from the
    dataset parameters; everything else from ``RunConfig``.
    """

    def __init__(self, cfg: RunConfig, data: SynthParams):
        super().__init__()
        self.cfg = cfg
        self.data = data
        enc = cfg.encoder
        full = abs(data.hfov_deg - 360.0) < 1e-9
        self.full_circle = full
        self.ground_encoder = FeatureEncoder(enc.widths, enc.ground_strides, circular=full)
        if enc.share_weights:
            self.sat_encoder = self.ground_encoder
        else:
            self.sat_encoder = FeatureEncoder(enc.widths, enc.satellite_strides, circular=False)
        f_g = enc.factor("ground")
        f_s = enc.factor("satellite")
        if data.pano_h % f_g or data.pano_w % f_g:
            raise ValueError(f"panorama {data.pano_h}x{data.pano_w} not divisible by {f_g}")
        self.H = data.pano_h // f_g
        self.W_g = data.pano_w // f_g
        self.sat_frame = ImageFrame(data.resolution, data.sat_px, data.sat_px)
        self.feat_frame = self.sat_frame.downsampled(f_s)
        self.polar = PolarConfig.for_ground(cfg.polar.r_min, cfg.polar.r_max, self.H, self.W_g, data.hfov)
        self.image_polar = PolarConfig.for_ground(cfg.polar.r_min, cfg.polar.r_max, data.pano_h, data.pano_w,
                                                  data.hfov)
        self.W_s = self.polar.W_s
        C = enc.channels
        self.cepa = CEPA(C, self.H, cfg.cepa.H_Q, cfg.cepa.d_p, cfg.cepa.d_k, cfg.cepa.pe_kind,
                         cfg.cepa.phi_hidden, circular=full, enabled=cfg.cepa.enabled, context=cfg.cepa.context)
        H_Q = self.cepa.H_Q
        C_d = enc.descriptor_dim
        self.C_d = C_d
        self.ground_head = ColumnEncoder(C * H_Q, C_d, enc.hidden)
        self.sat_head = ColumnEncoder(C * H_Q, C_d, enc.hidden)
        size = (data.pano_h, data.pano_w)
        self.decoders = nn.ModuleDict({
            k: Decoder(C_d, self.W_g, size, 3, cfg.decoder.channels, cfg.decoder.hidden, circular=True)
            for k in DECODER_KEYS})
        self.regressor = RegressionHead(C_d, self.W_g, cfg.regression, circular=full)
        self.half_extent = cfg.train.search_extent / 2.0

    @staticmethod
    def normalize(images: torch.Tensor) -> torch.Tensor:
        return (images - PIXEL_MEAN) / PIXEL_STD

    def ground_features(self, I_g: torch.Tensor) -> torch.Tensor:
        return self.ground_encoder(self.normalize(I_g), circular=self.full_circle)

    def ground(self, I_g: torch.Tensor, return_weights: bool = False):
        """Panoramas ``(B, 3, H, W)`` -> descriptor blocks ``(B, W_g, C_d)``."""
        F_g = self.ground_features(I_g)
        F_gp, weights = self.cepa.ground(F_g, return_weights=True)
        blocks = vertical_directional_encode(F_gp, self.ground_head)
        return (blocks, weights) if return_weights else blocks

    def sat_features(self, I_s: torch.Tensor) -> torch.Tensor:
        return self.sat_encoder(self.normalize(I_s), circular=False)

    def sat_polar(self, F_s: torch.Tensor, positions) -> torch.Tensor:
        """``positions`` in metres ``(B, P, 2)`` -> polar features ``(B, P, C, H, W_s)``."""
        positions = torch.as_tensor(positions, dtype=F_s.dtype)
        centers = world_to_pixel(positions, self.feat_frame)
        return polar_transform(F_s, centers, self.polar, self.feat_frame, mode=self.cfg.polar.mode)

    def sat_blocks(self, F_s: torch.Tensor, positions) -> torch.Tensor:
        """East-centred satellite descriptor blocks ``(B, P, W_s, C_d)``."""
        F_s2p = self.sat_polar(F_s, positions)
        return vertical_directional_encode(self.cepa.satellite(F_s2p), self.sat_head)

    def polar_image(self, I_s: torch.Tensor, positions) -> torch.Tensor:
        """Polar resampling of the raw satellite images at ``positions (B, P, 2)``."""
        positions = torch.as_tensor(positions, dtype=I_s.dtype)
        centers = world_to_pixel(positions, self.sat_frame)
        return polar_transform(I_s, centers, self.image_polar, self.sat_frame, mode="bilinear")

    def manifest(self) -> dict:
        return {"H": self.H, "W_g": self.W_g, "W_s": self.W_s, "H_Q": self.cepa.H_Q, "C_d": self.C_d,
                "feature_resolution": self.feat_frame.resolution}
