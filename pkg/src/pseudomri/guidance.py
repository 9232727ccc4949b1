"""Adaptive-weight conditioning: blends a KOA-grade map and an intensity map.

All functions accept optional leading batch dimensions; maps are ``(..., h, w)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

NUM_GRADES = 5
KAPPA = 1e-5
EPS_STAB = 1e-8


def check_koa(probs: torch.Tensor, atol: float = 1e-6) -> torch.Tensor:
    if probs.shape[-1] != NUM_GRADES:
        raise ValueError(f"KOA distribution needs {NUM_GRADES} entries, got {probs.shape[-1]}")
    if bool(((probs < 0) | (probs > 1)).any()) or bool(((probs.sum(-1) - 1).abs() > atol).any()):
        raise ValueError("KOA probabilities must lie in [0, 1] and sum to 1")
    return probs


def smoothed_one_hot(grade, smoothing: float = 0.1, dtype=torch.float32) -> torch.Tensor:
    """Label-mode KOA distribution: one-hot on ``grade`` mixed with a uniform floor."""
    grade = torch.as_tensor(grade, dtype=torch.long)
    if bool(((grade < 0) | (grade >= NUM_GRADES)).any()):
        raise ValueError(f"grade must lie in 0..{NUM_GRADES - 1}")
    onehot = F.one_hot(grade, NUM_GRADES).to(dtype)
    return (1.0 - smoothing) * onehot + smoothing / NUM_GRADES


def gain(map_: torch.Tensor, mu, kappa: float = KAPPA) -> torch.Tensor:
    """``mu * sqrt(sum(map**2) + kappa)`` over the last two dims."""
    if kappa <= 0:
        raise ValueError("kappa must be positive")
    return mu * torch.sqrt(map_.pow(2).sum(dim=(-2, -1)) + kappa)


def normalize_gains(g_p, g_i, eps_stab: float = EPS_STAB):
    denom = g_p + g_i + eps_stab
    return g_p / denom, g_i / denom


def modulate(map_: torch.Tensor, g_hat, nu, o) -> torch.Tensor:
    mult = 1.0 + torch.sigmoid(nu * torch.as_tensor(g_hat) + o)
    return map_ * mult[..., None, None]


def joint_weight(p_map: torch.Tensor, i_map: torch.Tensor, w_p: torch.Tensor, w_i: torch.Tensor,
                 p_k: Optional[int] = None) -> torch.Tensor:
    """Row-softmax of ``(W_p p)^T (W_i i) / sqrt(p_k)``.

    Map columns are the attention tokens: ``W_p`` and ``W_i`` are ``(p_k, h)``, so the
    result is ``(..., w, w)``.
    """
    if w_p.shape[-1] != p_map.shape[-2] or w_i.shape[-1] != i_map.shape[-2]:
        raise ValueError("projection width must equal the map height")
    if w_p.shape[-2] != w_i.shape[-2]:
        raise ValueError("W_p and W_i must project to the same dimension")
    p_k = w_p.shape[-2] if p_k is None else p_k
    scores = (w_p @ p_map).transpose(-2, -1) @ (w_i @ i_map) / math.sqrt(p_k)
    return torch.softmax(scores, dim=-1)


def combine(lam: torch.Tensor, p_tilde: torch.Tensor, i_tilde: torch.Tensor) -> torch.Tensor:
    """Apply the joint weight to ``p_tilde + i_tilde``: column ``n`` becomes ``sum_m lam[n, m] * col_m``."""
    if p_tilde.shape != i_tilde.shape:
        raise ValueError(f"shape mismatch: {tuple(p_tilde.shape)} vs {tuple(i_tilde.shape)}")
    if lam.shape[-1] != p_tilde.shape[-1] or lam.shape[-2] != p_tilde.shape[-1]:
        raise ValueError("joint weight must be (w, w) for maps of width w")
    return (p_tilde + i_tilde) @ lam.transpose(-2, -1)


def project_koa_to_map(probs: torch.Tensor, h: int, w: int, proj: torch.Tensor) -> torch.Tensor:
    if proj.shape != (h * w, NUM_GRADES) or probs.shape[-1] != NUM_GRADES:
        raise ValueError(f"projection must be ({h * w}, {NUM_GRADES}), got {tuple(proj.shape)}")
    return (probs @ proj.transpose(0, 1)).reshape(probs.shape[:-1] + (h, w))


def intensity_map(xray: torch.Tensor, h: int, w: int) -> torch.Tensor:
    """Area-average a ``(..., H, W)`` radiograph down to the guidance plane."""
    lead = xray.shape[:-2]
    flat = xray.reshape((-1, 1) + tuple(xray.shape[-2:]))
    return F.adaptive_avg_pool2d(flat, (h, w)).reshape(lead + (h, w))


def embed_depth(depth, dim: int, max_freq: float = 100.0) -> torch.Tensor:
    """Sinusoidal depth features ``[sin(d * w_k), cos(d * w_k)]`` with ``w_k`` geometric in [1, max_freq]."""
    if dim <= 0 or dim % 2:
        raise ValueError(f"depth embedding dim must be even and positive, got {dim}")
    depth = torch.as_tensor(depth)
    if not depth.is_floating_point():
        depth = depth.to(torch.float32)
    half = dim // 2
    freqs = torch.exp(torch.linspace(0.0, math.log(max_freq), half, dtype=torch.float64)).to(depth.dtype)
    args = depth[..., None] * freqs
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


@dataclass
class GuidanceBundle:
    p_map: torch.Tensor
    i_map: torch.Tensor
    y_combined: torch.Tensor
    g_hat_p: torch.Tensor
    g_hat_i: torch.Tensor
    joint: torch.Tensor
    depth: Optional[torch.Tensor] = None


class AdaptiveWeight(nn.Module):
    """Learnable parameters and forward composition of the adaptive-weight module."""

    def __init__(self, h: int, w: int, attn_dim: int = 8, kappa: float = KAPPA, eps_stab: float = EPS_STAB):
        super().__init__()
        self.h, self.w, self.attn_dim = h, w, attn_dim
        self.kappa, self.eps_stab = kappa, eps_stab
        self.mu_p = nn.Parameter(torch.tensor(1.0))
        self.mu_i = nn.Parameter(torch.tensor(1.0))
        self.nu_p = nn.Parameter(torch.tensor(1.0))
        self.nu_i = nn.Parameter(torch.tensor(1.0))
        self.o_p = nn.Parameter(torch.tensor(0.0))
        self.o_i = nn.Parameter(torch.tensor(0.0))
        self.w_p = nn.Parameter(torch.randn(attn_dim, h) / math.sqrt(h))
        self.w_i = nn.Parameter(torch.randn(attn_dim, h) / math.sqrt(h))
        self.proj = nn.Parameter(torch.randn(h * w, NUM_GRADES) * 0.5)

    def forward(self, probs: torch.Tensor, i_map: torch.Tensor, depth=None) -> GuidanceBundle:
        if i_map.shape[-2:] != (self.h, self.w):
            raise ValueError(f"intensity map must be {(self.h, self.w)}, got {tuple(i_map.shape[-2:])}")
        p_map = project_koa_to_map(probs, self.h, self.w, self.proj)
        g_p = gain(p_map, self.mu_p, self.kappa)
        g_i = gain(i_map, self.mu_i, self.kappa)
        gh_p, gh_i = normalize_gains(g_p, g_i, self.eps_stab)
        p_t = modulate(p_map, gh_p, self.nu_p, self.o_p)
        i_t = modulate(i_map, gh_i, self.nu_i, self.o_i)
        lam = joint_weight(p_map, i_map, self.w_p, self.w_i, self.attn_dim)
        y = combine(lam, p_t, i_t)
        depth = None if depth is None else torch.as_tensor(depth)
        return GuidanceBundle(p_map, i_map, y, gh_p, gh_i, lam, depth)
