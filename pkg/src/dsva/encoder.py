"""Patch-grid vision transformer.

Images are channels-last ``(..., H, W, C)`` tensors.  The encoder returns the
``N = k*k`` patch tokens only; there is no class token.
"""

from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from dsva.core import Config, ShapeError

LN_EPS = 1e-5


def _as_tensor(x, dtype=None) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x if dtype is None else x.to(dtype)
    return torch.as_tensor(np.asarray(x), dtype=dtype or torch.float64)


def patchify(images, k: int) -> torch.Tensor:
    """Cut ``(..., H, W, C)`` images into ``k*k`` flattened patches.

    Patch ``n = row * k + col``; each patch is flattened row-major with
    channels last, giving ``(..., N, (H/k) * (W/k) * C)``.
    """
    x = _as_tensor(images)
    if x.dim() < 3:
        raise ShapeError(f"expected (..., H, W, C) images, got shape {tuple(x.shape)}")
    *lead, H, W, C = x.shape
    if H % k or W % k:
        raise ShapeError(f"image {H}x{W} is not divisible into a {k}x{k} grid")
    ph, pw = H // k, W // k
    x = x.reshape(*lead, k, ph, k, pw, C)
    nd = len(lead)
    perm = list(range(nd)) + [nd, nd + 2, nd + 1, nd + 3, nd + 4]
    return x.permute(*perm).reshape(*lead, k * k, ph * pw * C)


def unpatchify(patches: torch.Tensor, k: int, channels: int) -> torch.Tensor:
    """Inverse of :func:`patchify` for square patches."""
    *lead, N, P = patches.shape
    side = int(round(math.sqrt(P // channels)))
    x = patches.reshape(*lead, k, k, side, side, channels)
    nd = len(lead)
    perm = list(range(nd)) + [nd, nd + 2, nd + 1, nd + 3, nd + 4]
    return x.permute(*perm).reshape(*lead, k * side, k * side, channels)


def embed_patches(patches: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor, positional: torch.Tensor) -> torch.Tensor:
    """``Z0[n] = patches[n] @ weight + bias + positional[n]``."""
    if patches.shape[-1] != weight.shape[0]:
        raise ShapeError(f"patch length {patches.shape[-1]} != projection input {weight.shape[0]}")
    if patches.shape[-2] != positional.shape[0]:
        raise ShapeError(f"{patches.shape[-2]} patches but {positional.shape[0]} positional embeddings")
    return patches @ weight + bias + positional


def self_attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, return_weights: bool = False):
    """Scaled dot-product attention ``softmax(Q K^T / sqrt(d)) V`` over the token axis."""
    scores = q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1])
    weights = torch.softmax(scores, dim=-1)
    out = weights @ v
    return (out, weights) if return_weights else out


def mhsa(z: torch.Tensor, qkv_weight: torch.Tensor, proj_weight: torch.Tensor, heads: int, return_weights: bool = False):
    """Multi-head self-attention.

    ``qkv_weight`` is ``D x 3*s*d``: the first ``s*d`` columns are the query
    heads (head ``h`` owns columns ``h*d:(h+1)*d``), then keys, then values.
    ``proj_weight`` maps the concatenated head outputs ``s*d`` back to ``D``.
    """
    if qkv_weight.shape[0] != z.shape[-1] or qkv_weight.shape[1] % (3 * heads):
        raise ShapeError(f"qkv weight {tuple(qkv_weight.shape)} incompatible with D={z.shape[-1]}, heads={heads}")
    d = qkv_weight.shape[1] // (3 * heads)
    if proj_weight.shape[0] != heads * d:
        raise ShapeError(f"projection input {proj_weight.shape[0]} != heads*head_dim {heads * d}")
    *lead, N, _ = z.shape
    qkv = (z @ qkv_weight).reshape(*lead, N, 3, heads, d)
    # (..., heads, N, d)
    q, k, v = (qkv[..., i, :, :].transpose(-2, -3) for i in range(3))
    out, weights = self_attention(q, k, v, return_weights=True)
    out = out.transpose(-2, -3).reshape(*lead, N, heads * d)
    out = out @ proj_weight
    return (out, weights) if return_weights else out


class Block(nn.Module):
    def __init__(self, dim: int, heads: int, head_dim: int):
        super().__init__()
        self.heads = heads
        self.ln1_weight = nn.Parameter(torch.ones(dim))
        self.ln1_bias = nn.Parameter(torch.zeros(dim))
        self.qkv_weight = nn.Parameter(torch.zeros(dim, 3 * heads * head_dim))
        self.proj_weight = nn.Parameter(torch.zeros(heads * head_dim, dim))
        self.ln2_weight = nn.Parameter(torch.ones(dim))
        self.ln2_bias = nn.Parameter(torch.zeros(dim))
        self.fc1_weight = nn.Parameter(torch.zeros(dim, 4 * dim))
        self.fc1_bias = nn.Parameter(torch.zeros(4 * dim))
        self.fc2_weight = nn.Parameter(torch.zeros(4 * dim, dim))
        self.fc2_bias = nn.Parameter(torch.zeros(dim))

    def forward(self, z: torch.Tensor, return_weights: bool = False):
        dim = z.shape[-1]
        h = F.layer_norm(z, (dim,), self.ln1_weight, self.ln1_bias, LN_EPS)
        attn_out, weights = mhsa(h, self.qkv_weight, self.proj_weight, self.heads, return_weights=True)
        z = z + attn_out
        h = F.layer_norm(z, (dim,), self.ln2_weight, self.ln2_bias, LN_EPS)
        z = z + F.gelu(h @ self.fc1_weight + self.fc1_bias) @ self.fc2_weight + self.fc2_bias
        return (z, weights) if return_weights else z


class Encoder(nn.Module):
    """Parameters and forward pass of the patch transformer."""

    def __init__(self, grid: int, patch_side: int, channels: int, dim: int, layers: int, heads: int, head_dim: int):
        super().__init__()
        self.grid = grid
        self.patch_side = patch_side
        self.channels = channels
        self.dim = dim
        self.heads = heads
        self.head_dim = head_dim
        patch_len = patch_side * patch_side * channels
        self.patch_weight = nn.Parameter(torch.zeros(patch_len, dim))
        self.patch_bias = nn.Parameter(torch.zeros(dim))
        self.positional = nn.Parameter(torch.zeros(grid * grid, dim))
        self.blocks = nn.ModuleList(Block(dim, heads, head_dim) for _ in range(layers))

    @classmethod
    def from_config(cls, config: Config, channels: int = 3, generator: torch.Generator | None = None) -> "Encoder":
        enc = cls(config.grid, config.patch_side, channels, config.dim, config.layers, config.heads, config.qkv_dim)
        enc.reset_parameters(generator)
        return enc

    @property
    def num_layers(self) -> int:
        return len(self.blocks)

    def reset_parameters(self, generator: torch.Generator | None = None) -> None:
        with torch.no_grad():
            for name, p in self.named_parameters():
                if name.endswith("_bias"):
                    p.zero_()
                elif name.startswith("blocks") and ("ln1_weight" in name or "ln2_weight" in name):
                    p.fill_(1.0)
                elif name == "positional":
                    p.normal_(0.0, 0.02, generator=generator)
                else:
                    _trunc_normal_(p, 0.02, generator)

    def forward(self, images, return_attention: bool = False):
        return encode(images, self, return_attention=return_attention)


def _trunc_normal_(p: torch.Tensor, std: float, generator: torch.Generator | None) -> None:
    # resample outside +-2 std; keeps initialisation on the seeded generator
    p.normal_(0.0, std, generator=generator)
    for _ in range(100):
        bad = p.abs() > 2 * std
        if not bad.any():
            break
        fresh = torch.empty_like(p).normal_(0.0, std, generator=generator)
        p.copy_(torch.where(bad, fresh, p))
    p.clamp_(-2 * std, 2 * std)


def encode(images, params: Encoder, return_attention: bool = False):
    """Run the patch transformer and return the final ``(..., N, D)`` token grid.

    With ``return_attention`` the per-layer attention weights
    ``(..., heads, N, N)`` are returned alongside.
    """
    x = _as_tensor(images, params.patch_weight.dtype)
    if x.shape[-1] != params.channels:
        raise ShapeError(f"expected {params.channels} channels, got {x.shape[-1]}")
    side = params.grid * params.patch_side
    if x.shape[-3] != side or x.shape[-2] != side:
        raise ShapeError(f"expected {side}x{side} images, got {x.shape[-3]}x{x.shape[-2]}")
    z = embed_patches(patchify(x, params.grid), params.patch_weight, params.patch_bias, params.positional)
    attention = []
    for block in params.blocks:
        z, w = block(z, return_weights=True)
        attention.append(w)
    return (z, attention) if return_attention else z
