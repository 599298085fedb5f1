"""Coordinate conventions, polar resampling and azimuth alignment.

World coordinates are metres with x pointing east and y pointing north; the
origin is the centre of the satellite image. Yaw is measured clockwise from
east, so with image axes u (right) and v (down) a heading ``theta`` points
along ``(cos theta, sin theta)`` in pixel space.

Continuous pixel coordinates place pixel ``i`` on the interval ``[i, i + 1)``;
the image centre of an ``A x A`` raster is ``(A / 2, A / 2)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

TWO_PI = 2.0 * math.pi
SHIFT_TOLERANCE = 1e-6


def wrap_angle(theta):
    """Wrap an angle (scalar, numpy array or tensor) into ``[-pi, pi)``."""
    if isinstance(theta, torch.Tensor):
        out = torch.remainder(theta + math.pi, TWO_PI) - math.pi
        return torch.where(out >= math.pi, out - TWO_PI, out)
    if isinstance(theta, np.ndarray):
        out = np.mod(theta + math.pi, TWO_PI) - math.pi
        return np.where(out >= math.pi, out - TWO_PI, out)
    out = math.fmod(float(theta) + math.pi, TWO_PI)
    if out < 0:
        out += TWO_PI
    out -= math.pi
    if out >= math.pi:
        out -= TWO_PI
    return out


@dataclass(frozen=True)
class Pose:
    """Planar camera pose: position in metres, yaw in radians."""

    x: float
    y: float
    theta: float

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise ValueError(f"pose position must be finite, got ({self.x}, {self.y})")
        if not math.isfinite(self.theta):
            raise ValueError(f"pose yaw must be finite, got {self.theta}")
        object.__setattr__(self, "x", float(self.x))
        object.__setattr__(self, "y", float(self.y))
        object.__setattr__(self, "theta", wrap_angle(self.theta))

    def __add__(self, delta) -> "Pose":
        dx, dy, dtheta = delta
        return Pose(self.x + float(dx), self.y + float(dy), self.theta + float(dtheta))

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.x, self.y, self.theta)


@dataclass(frozen=True)
class ImageFrame:
    """Geo-referencing of a north-up raster centred on the world origin."""

    resolution: float
    width_px: int
    height_px: int

    def __post_init__(self):
        if not self.resolution > 0:
            raise ValueError(f"resolution must be positive, got {self.resolution}")
        if self.width_px < 1 or self.height_px < 1:
            raise ValueError(f"frame size must be >= 1, got {self.width_px}x{self.height_px}")

    @property
    def width_m(self) -> float:
        return self.width_px * self.resolution

    @property
    def height_m(self) -> float:
        return self.height_px * self.resolution

    def downsampled(self, factor: int) -> "ImageFrame":
        """Frame of a feature map computed with a total stride of ``factor``."""
        if self.width_px % factor or self.height_px % factor:
            raise ValueError(f"factor {factor} does not divide {self.width_px}x{self.height_px}")
        return ImageFrame(self.resolution * factor, self.width_px // factor, self.height_px // factor)


def pose_to_pixel(pose, frame: ImageFrame) -> tuple[float, float]:
    """Continuous pixel coordinates of a pose (or any object with x, y)."""
    u = frame.width_px / 2.0 + pose.x / frame.resolution
    v = frame.height_px / 2.0 - pose.y / frame.resolution
    return u, v


def pixel_to_pose(u: float, v: float, frame: ImageFrame, theta: float = 0.0) -> Pose:
    x = (u - frame.width_px / 2.0) * frame.resolution
    y = (frame.height_px / 2.0 - v) * frame.resolution
    return Pose(x, y, theta)


def world_to_pixel(xy, frame: ImageFrame):
    """Vectorised ``pose_to_pixel`` for an ``(..., 2)`` array or tensor of positions."""
    u = frame.width_px / 2.0 + xy[..., 0] / frame.resolution
    v = frame.height_px / 2.0 - xy[..., 1] / frame.resolution
    if isinstance(xy, torch.Tensor):
        return torch.stack([u, v], dim=-1)
    return np.stack([u, v], axis=-1)


@dataclass(frozen=True)
class PolarConfig:
    """Polar sampling layout.

    Radii are metres; ``H`` output rows run from ``r_max`` (top) towards
    ``r_min`` (bottom) and ``W_s`` columns cover the full circle.
    """

    r_min: float
    r_max: float
    H: int
    W_s: int
    hfov: float = TWO_PI

    def __post_init__(self):
        if not 0 <= self.r_min < self.r_max:
            raise ValueError(f"need 0 <= r_min < r_max, got {self.r_min}, {self.r_max}")
        if self.H < 1 or self.W_s < 1:
            raise ValueError(f"polar output must be at least 1x1, got {self.H}x{self.W_s}")
        if self.W_s % 2:
            raise ValueError(f"W_s must be even so that theta=-pi is an integral shift, got {self.W_s}")
        if not 0 < self.hfov <= TWO_PI + 1e-12:
            raise ValueError(f"hfov must lie in (0, 2pi], got {self.hfov}")
        if self.W_g > self.W_s:
            raise ValueError("ground width exceeds polar width")

    @classmethod
    def for_ground(cls, r_min: float, r_max: float, H: int, W_g: int, hfov: float = TWO_PI) -> "PolarConfig":
        return cls(r_min, r_max, H, int(round(TWO_PI / hfov * W_g)), hfov)

    @property
    def W_g(self) -> int:
        return int(round(self.W_s * self.hfov / TWO_PI))

    @property
    def full_circle(self) -> bool:
        return self.W_g == self.W_s

    def with_size(self, H: int, W_g: int) -> "PolarConfig":
        return PolarConfig.for_ground(self.r_min, self.r_max, H, W_g, self.hfov)


def polar_radii(cfg: PolarConfig, frame: ImageFrame) -> np.ndarray:
    """Sampling radius in pixels for each output row."""
    r_min = cfg.r_min / frame.resolution
    r_max = cfg.r_max / frame.resolution
    v = np.arange(cfg.H, dtype=np.float64)
    return (r_max - r_min) * (1.0 - v / cfg.H) + r_min


def polar_source_coords(center, cfg: PolarConfig, frame: ImageFrame,
                        rows=None, cols=None) -> tuple[np.ndarray, np.ndarray]:
    """Source pixel coordinates ``(u_s, v_s)`` sampled by each polar output pixel.

    ``rows``/``cols`` default to the integer output grid but may be any
    (broadcastable) row and column positions.
    """
    u_c, v_c = float(center[0]), float(center[1])
    if not (math.isfinite(u_c) and math.isfinite(v_c)):
        raise ValueError(f"polar centre must be finite, got {center}")
    if cfg.r_max / frame.resolution <= 0:
        raise ValueError("r_max must be positive in pixels")
    rows = np.arange(cfg.H, dtype=np.float64) if rows is None else np.asarray(rows, dtype=np.float64)
    cols = np.arange(cfg.W_s, dtype=np.float64) if cols is None else np.asarray(cols, dtype=np.float64)
    r_min = cfg.r_min / frame.resolution
    r_max = cfg.r_max / frame.resolution
    rho = ((r_max - r_min) * (1.0 - rows / cfg.H) + r_min)[:, None]
    phi = (TWO_PI / cfg.W_s * cols)[None, :]
    return u_c - rho * np.cos(phi), v_c - rho * np.sin(phi)


def _polar_offsets(cfg: PolarConfig, frame: ImageFrame, dtype, device) -> torch.Tensor:
    # (H, W_s, 2) offsets from the centre in pixels; shared by every candidate
    rho = torch.as_tensor(polar_radii(cfg, frame), dtype=dtype, device=device)[:, None]
    phi = TWO_PI / cfg.W_s * torch.arange(cfg.W_s, dtype=dtype, device=device)[None, :]
    return torch.stack([-rho * torch.cos(phi), -rho * torch.sin(phi)], dim=-1)


def polar_transform(sat: torch.Tensor, centers, cfg: PolarConfig, frame: ImageFrame,
                    mode: str = "bilinear") -> torch.Tensor:
    """Resample a satellite map into azimuth/radius coordinates.

    Args:
        sat: ``(C, A, A)`` or ``(B, C, A, A)`` map in the geometry of ``frame``.
        centers: pixel coordinates ``(2,)``, ``(P, 2)`` or ``(B, P, 2)``.
        cfg: output layout; radii are converted to pixels through ``frame``.
        mode: ``"bilinear"`` or ``"nearest"``; samples outside the map are zero.

    Returns:
        ``(C, H, W_s)``, ``(P, C, H, W_s)`` or ``(B, P, C, H, W_s)`` following
        the shapes of the inputs. Column ``W_s / 2`` looks east.
    """
    squeeze_batch = sat.dim() == 3
    if squeeze_batch:
        sat = sat[None]
    B, C, Hs, Ws = sat.shape
    centers = torch.as_tensor(centers, dtype=sat.dtype, device=sat.device)
    squeeze_p = centers.dim() == 1
    if squeeze_p:
        centers = centers[None]
    if centers.dim() == 2:
        centers = centers[None].expand(B, -1, -1)
    if centers.shape[0] != B or centers.shape[-1] != 2:
        raise ValueError(f"centres of shape {tuple(centers.shape)} do not match batch {B}")
    if not torch.isfinite(centers).all():
        raise ValueError("polar centre must be finite")
    if cfg.r_max / frame.resolution <= 0:
        raise ValueError("r_max must be positive in pixels")
    P = centers.shape[1]
    offsets = _polar_offsets(cfg, frame, sat.dtype, sat.device)
    coords = centers[:, :, None, None, :] + offsets  # (B, P, H, W_s, 2)
    scale = torch.tensor([2.0 / Ws, 2.0 / Hs], dtype=sat.dtype, device=sat.device)
    grid = coords * scale - 1.0
    grid = grid.reshape(B, P * cfg.H, cfg.W_s, 2)
    out = F.grid_sample(sat, grid, mode=mode, padding_mode="zeros", align_corners=False)
    out = out.reshape(B, C, P, cfg.H, cfg.W_s).permute(0, 2, 1, 3, 4)
    if squeeze_p:
        out = out[:, 0]
    if squeeze_batch:
        out = out[0]
    return out


def shift_columns(theta: float, W_s: int) -> int:
    """Integral column shift that aligns an east-centred polar array with ``theta``."""
    s = float(theta) / TWO_PI * W_s
    k = round(s)
    if abs(s - k) > SHIFT_TOLERANCE:
        raise ValueError(f"theta={theta!r} is not an integral shift for W_s={W_s} (shift {s:.6f})")
    return int(k)


def snap_angle(theta: float, W_s: int) -> tuple[float, int]:
    """Nearest integral-shift angle to ``theta`` and its shift in ``[-W_s/2, W_s/2)``."""
    k = int(round(wrap_angle(theta) / TWO_PI * W_s))
    if k >= W_s // 2:
        k -= W_s
    return wrap_angle(TWO_PI * k / W_s), k


def crop_indices(shift: int, W_s: int, W_g: int) -> np.ndarray:
    start = (W_s - W_g) // 2
    return (start + shift + np.arange(W_g)) % W_s


def cyclic_shift_crop(cols, theta: float, W_g: int, axis: int = -1):
    """Rotate an azimuth-indexed array to yaw ``theta`` and centre-crop it.

    Output column ``j`` is input column ``(start + s + j) mod W_s`` with
    ``start = (W_s - W_g) // 2`` and ``s = theta / 2pi * W_s``. Works on numpy
    arrays and tensors; the azimuth axis is ``axis``.
    """
    W_s = cols.shape[axis]
    if W_g > W_s:
        raise ValueError(f"W_g={W_g} exceeds W_s={W_s}")
    idx = crop_indices(shift_columns(theta, W_s), W_s, W_g)
    if isinstance(cols, torch.Tensor):
        return torch.index_select(cols, axis, torch.as_tensor(idx, device=cols.device))
    return np.take(cols, idx, axis=axis)


def largest_divisor_at_most(n: int, limit: int) -> int:
    limit = max(1, min(int(limit), n))
    for d in range(limit, 0, -1):
        if n % d == 0:
            return d
    return 1


@dataclass(frozen=True)
class PoseGrid:
    """Candidate poses: a ``G x G`` position lattice times ``n_theta`` yaws.

    Flat candidate index is ``(ix * G + iy) * n_theta + t`` with ``xs`` and
    ``ys`` ascending.
    """

    xs: np.ndarray
    ys: np.ndarray
    thetas: np.ndarray
    shifts: np.ndarray
    stride: float
    W_s: int
    extent: float = field(default=0.0)

    @property
    def G(self) -> int:
        return len(self.xs)

    @property
    def n_theta(self) -> int:
        return len(self.thetas)

    @property
    def size(self) -> int:
        return self.G * self.G * self.n_theta

    @property
    def positions(self) -> np.ndarray:
        """``(G*G, 2)`` positions in metres, x-major."""
        gx, gy = np.meshgrid(self.xs, self.ys, indexing="ij")
        return np.stack([gx.ravel(), gy.ravel()], axis=-1)

    def unravel(self, flat: int) -> tuple[int, int, int]:
        ix, rem = divmod(int(flat), self.G * self.n_theta)
        iy, t = divmod(rem, self.n_theta)
        return ix, iy, t

    def pose(self, ix: int, iy: int, t: int) -> Pose:
        return Pose(self.xs[ix], self.ys[iy], self.thetas[t])

    def nearest(self, pose: Pose) -> tuple[int, int, int]:
        ix = int(np.argmin(np.abs(self.xs - pose.x)))
        iy = int(np.argmin(np.abs(self.ys - pose.y)))
        d = np.abs(np.array([wrap_angle(a - pose.theta) for a in self.thetas]))
        return ix, iy, int(np.argmin(d))


def make_pose_grid(extent: float, G: int, n_theta: int, frame: ImageFrame, cfg: PolarConfig,
                   anchor: tuple[float, float] | None = None) -> PoseGrid:
    """Uniform candidate grid over a square search extent centred in ``frame``.

    Positions are cell-centred. When ``anchor`` is given the lattice keeps its
    stride but is offset so that ``anchor`` is a lattice node. ``n_theta`` is
    reduced to the largest divisor of ``cfg.W_s`` not exceeding it.
    """
    if G < 1:
        raise ValueError(f"grid size must be >= 1, got {G}")
    if n_theta < 1:
        raise ValueError(f"n_theta must be >= 1, got {n_theta}")
    half_cover = min(frame.width_m, frame.height_m) / 2.0
    if extent / 2.0 + cfg.r_max > half_cover + 1e-9:
        raise ValueError(
            f"search extent {extent} m plus r_max {cfg.r_max} m exceeds satellite coverage "
            f"{2 * half_cover} m")
    stride = extent / G

    def axis(a):
        if anchor is None:
            offset = stride / 2.0
        else:
            offset = (a + extent / 2.0) % stride
        return -extent / 2.0 + offset + stride * np.arange(G)

    xs = axis(None if anchor is None else anchor[0])
    ys = axis(None if anchor is None else anchor[1])
    n = largest_divisor_at_most(cfg.W_s, n_theta)
    step = cfg.W_s // n
    shifts = -cfg.W_s // 2 + step * np.arange(n)
    thetas = TWO_PI * shifts / cfg.W_s
    return PoseGrid(xs=xs, ys=ys, thetas=thetas, shifts=shifts, stride=stride, W_s=cfg.W_s, extent=extent)
