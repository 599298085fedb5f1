"""Context-enhanced positional attention.

Both views are resampled onto a shared virtual vertical axis of height
``H_Q``. Satellite weights depend on positions only; ground weights are
refined per column with the ground feature map before being applied.
"""

from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

PE_KINDS = ("sinusoidal", "sinusoidal-learnable", "learnable")


def sinusoidal_pe(length: int, d_p: int) -> np.ndarray:
    """``(length, d_p)`` table with ``sin``/``cos`` pairs at geometric frequencies."""
    if d_p < 2 or d_p % 2:
        raise ValueError(f"d_p must be even and >= 2, got {d_p}")
    pos = np.arange(length, dtype=np.float64)[:, None]
    freq = 10000.0 ** (np.arange(0, d_p, 2, dtype=np.float64) / d_p)
    pe = np.empty((length, d_p), dtype=np.float64)
    pe[:, 0::2] = np.sin(pos / freq)
    pe[:, 1::2] = np.cos(pos / freq)
    return pe


def positional_attention(P_a: torch.Tensor, P_v: torch.Tensor, W_q: torch.Tensor,
                         W_k: torch.Tensor) -> torch.Tensor:
    """Softmax over the view axis of scaled query/key products; ``(H_Q, H_K)``."""
    if P_a.shape[-1] != W_q.shape[0] or P_v.shape[-1] != W_k.shape[0]:
        raise ValueError("encoding width does not match projection input")
    if W_q.shape[1] != W_k.shape[1]:
        raise ValueError(f"query width {W_q.shape[1]} != key width {W_k.shape[1]}")
    d_k = W_q.shape[1]
    logits = (P_a @ W_q) @ (P_v @ W_k).transpose(-1, -2) / math.sqrt(d_k)
    return torch.softmax(logits, dim=-1)


def context_enhance(A_g: torch.Tensor, F_g: torch.Tensor, phi) -> torch.Tensor:
    """Refine ground attention with ground context.

    Args:
        A_g: ``(H_Q, H_K)`` positional weights of the ground view.
        F_g: ``(B, C, H_K, W_g)`` ground features (or unbatched ``(C, H_K, W_g)``).
        phi: module mapping ``(N, C + 1, H_K, W_g)`` to ``(N, 1, H_K, W_g)``.

    Returns:
        ``(B, H_Q, H_K, W_g)`` weights; each ``(h_q, w)`` slice sums to 2.
    """
    unbatched = F_g.dim() == 3
    if unbatched:
        F_g = F_g[None]
    B, C, H_K, W_g = F_g.shape
    H_Q = A_g.shape[0]
    if A_g.shape[1] != H_K:
        raise ValueError(f"attention has {A_g.shape[1]} keys, features have height {H_K}")
    in_ch = getattr(phi, "in_channels", C + 1)
    if in_ch != C + 1:
        raise ValueError(f"context network expects {in_ch} channels, got {C} + 1")
    a = A_g.reshape(1, H_Q, 1, H_K, 1).expand(B, H_Q, 1, H_K, W_g)
    f = F_g.reshape(B, 1, C, H_K, W_g).expand(B, H_Q, C, H_K, W_g)
    feat = torch.cat([a, f], dim=2).reshape(B * H_Q, C + 1, H_K, W_g)
    feat = phi(feat).reshape(B, H_Q, H_K, W_g)
    out = torch.softmax(feat, dim=-2) + a.reshape(B, H_Q, H_K, W_g)
    return out[0] if unbatched else out


def vertical_transform(F_in: torch.Tensor, A: torch.Tensor) -> torch.Tensor:
    """Weighted sum over the feature height.

    ``A`` is either shared ``(H_Q, H_K)`` or per column ``(..., H_Q, H_K, W)``
    with leading dims matching the batch dims of ``F_in`` (``(..., C, H_K, W)``).
    """
    if A.dim() == 2:
        if A.shape[1] != F_in.shape[-2]:
            raise ValueError(f"weights have {A.shape[1]} keys, features have height {F_in.shape[-2]}")
        return torch.einsum("qk,...ckw->...cqw", A, F_in)
    if A.shape[-2] != F_in.shape[-2] or A.shape[-1] != F_in.shape[-1]:
        raise ValueError(f"weights {tuple(A.shape)} incompatible with features {tuple(F_in.shape)}")
    return torch.einsum("...qkw,...ckw->...cqw", A, F_in)


class ContextNet(nn.Module):
    """Two 3x3 convolutions producing one logit per (height, azimuth) cell."""

    def __init__(self, in_channels: int, hidden: int = 16, circular: bool = True):
        super().__init__()
        self.in_channels = in_channels
        self.circular = circular
        self.conv1 = nn.Conv2d(in_channels, hidden, 3)
        self.conv2 = nn.Conv2d(hidden, 1, 3)

    def _pad(self, x):
        if self.circular:
            x = F.pad(x, (1, 1, 0, 0), mode="circular")
            return F.pad(x, (0, 0, 1, 1))
        return F.pad(x, (1, 1, 1, 1))

    def forward(self, x):
        x = F.relu(self.conv1(self._pad(x)))
        return self.conv2(self._pad(x))


class CEPA(nn.Module):
    """Dual-view vertical transformation onto the shared virtual axis.

    With ``enabled=False`` both views pass through unchanged (polar-only
    model); with ``context=False`` the ground view uses plain positional
    attention.
    """

    def __init__(self, channels: int, H_K: int, H_Q: int | None = None, d_p: int = 64, d_k: int = 32,
                 pe_kind: str = "sinusoidal", phi_hidden: int = 16, circular: bool = True,
                 enabled: bool = True, context: bool = True):
        super().__init__()
        if pe_kind not in PE_KINDS:
            raise ValueError(f"unknown encoding kind {pe_kind!r}; expected one of {PE_KINDS}")
        self.enabled = enabled
        self.context = context
        self.H_K = H_K
        self.H_Q = H_K if (H_Q is None or not enabled) else H_Q
        self.d_k = d_k
        if not enabled:
            return
        tables = {
            "P_a": sinusoidal_pe(self.H_Q, d_p),
            "P_g": sinusoidal_pe(H_K, d_p),
            "P_s2p": sinusoidal_pe(H_K, d_p),
        }
        for name, table in tables.items():
            t = torch.tensor(table, dtype=torch.float32)
            if pe_kind == "sinusoidal":
                self.register_buffer(name, t)
            elif pe_kind == "sinusoidal-learnable":
                setattr(self, name, nn.Parameter(t))
            else:
                setattr(self, name, nn.Parameter(torch.randn_like(t) * 0.1))
        # (d_p, d_k) projections, bias-free
        scale = 1.0 / math.sqrt(d_p)
        self.W_q_g = nn.Parameter(torch.randn(d_p, d_k) * scale)
        self.W_k_g = nn.Parameter(torch.randn(d_p, d_k) * scale)
        self.W_q_s = nn.Parameter(torch.randn(d_p, d_k) * scale)
        self.W_k_s = nn.Parameter(torch.randn(d_p, d_k) * scale)
        if context:
            self.phi = ContextNet(channels + 1, phi_hidden, circular=circular)

    def ground_weights(self) -> torch.Tensor:
        return positional_attention(self.P_a, self.P_g, self.W_q_g, self.W_k_g)

    def satellite_weights(self) -> torch.Tensor:
        return positional_attention(self.P_a, self.P_s2p, self.W_q_s, self.W_k_s)

    def ground(self, F_g: torch.Tensor, return_weights: bool = False):
        """``(B, C, H_K, W_g)`` -> ``(B, C, H_Q, W_g)``."""
        if not self.enabled:
            return (F_g, {}) if return_weights else F_g
        A_g = self.ground_weights()
        weights = {"A_g": A_g}
        if self.context:
            A = context_enhance(A_g, F_g, self.phi)
            weights["A_g_prime"] = A
        else:
            A = A_g
        out = vertical_transform(F_g, A)
        return (out, weights) if return_weights else out

    def satellite(self, F_s2p: torch.Tensor, return_weights: bool = False):
        """``(..., C, H_K, W_s)`` -> ``(..., C, H_Q, W_s)``."""
        if not self.enabled:
            return (F_s2p, {}) if return_weights else F_s2p
        A = self.satellite_weights()
        out = vertical_transform(F_s2p, A)
        return (out, {"A_s2p": A}) if return_weights else out
