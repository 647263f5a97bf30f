"""Fusion of a patch's local tokens with its context token."""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

__all__ = ["TokenSequence", "MultiHeadSelfAttention", "FusionBlock", "fuse", "select_local_tokens"]

FUSION_VARIANTS = ("msa", "cat", "dot")


@dataclass
class TokenSequence:
    tokens: torch.Tensor  # (B, T, L)
    layout: str  # "fused": context token last; "local_only"

    def __post_init__(self):
        if self.layout not in ("fused", "local_only"):
            raise ValueError(f"unknown layout {self.layout!r}")


class MultiHeadSelfAttention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads:
            raise ValueError(f"token dim {dim} not divisible by {heads} heads")
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, t, d = x.shape
        h = self.heads
        q, k, v = self.qkv(x).view(b, t, 3, h, d // h).permute(2, 0, 3, 1, 4)
        attn = torch.softmax(q @ k.transpose(-2, -1) / (d // h) ** 0.5, dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, t, d)
        return self.proj(out)


class _PreNormBlock(nn.Module):
    def __init__(self, dim: int, heads: int, ffn: bool):
        super().__init__()
        self.norm = nn.LayerNorm(dim)
        self.attn = MultiHeadSelfAttention(dim, heads)
        self.ffn = None
        if ffn:
            self.ffn = nn.Sequential(nn.LayerNorm(dim), nn.Linear(dim, 4 * dim), nn.GELU(), nn.Linear(4 * dim, dim))

    def forward(self, z):
        z = z + self.attn(self.norm(z))
        if self.ffn is not None:
            z = z + self.ffn(z)
        return z


class FusionBlock(nn.Module):
    """Pre-norm self-attention over ``[local + e_pos ; context]``, or CAT/DOT ablations.

    ``e_pos`` is learned and starts at zero; the context token gets no
    positional encoding.
    """

    def __init__(self, n_tokens: int, dim: int, variant: str = "msa", layers: int = 1, heads: int = 8, ffn: bool = False):
        super().__init__()
        if variant not in FUSION_VARIANTS:
            raise ValueError(f"unknown fusion variant {variant!r}")
        if variant == "msa" and layers < 1:
            raise ValueError("msa fusion needs at least one attention layer")
        self.variant = variant
        self.n_tokens = n_tokens
        self.dim = dim
        self.pos_embed = nn.Parameter(torch.zeros(n_tokens, dim))
        if variant == "msa":
            self.blocks = nn.ModuleList([_PreNormBlock(dim, heads, ffn) for _ in range(layers)])
        elif variant == "cat":
            self.proj = nn.Linear(2 * dim, dim)

    def forward(self, z_local: torch.Tensor, z_context: torch.Tensor) -> TokenSequence:
        squeeze = z_local.dim() == 2
        if squeeze:
            z_local, z_context = z_local.unsqueeze(0), z_context.reshape(1, -1)
        z_context = z_context.reshape(z_local.shape[0], 1, -1)
        if z_local.shape[1:] != (self.n_tokens, self.dim) or z_context.shape[-1] != self.dim:
            raise ValueError(
                f"expected local tokens ({self.n_tokens}, {self.dim}) and a {self.dim}-dim context, "
                f"got {tuple(z_local.shape[1:])} and {z_context.shape[-1]}"
            )
        if self.variant == "msa":
            z = torch.cat([z_local + self.pos_embed, z_context], dim=1)
            for block in self.blocks:
                z = block(z)
            out = TokenSequence(z, "fused")
        elif self.variant == "cat":
            both = torch.cat([z_local, z_context.expand_as(z_local)], dim=-1)
            out = TokenSequence(self.proj(both), "local_only")
        else:
            out = TokenSequence(z_local * z_context, "local_only")
        if squeeze:
            out.tokens = out.tokens[0]
        return out


def fuse(z_local: torch.Tensor, z_context: torch.Tensor, block: FusionBlock) -> TokenSequence:
    return block(z_local, z_context)


def select_local_tokens(fused: TokenSequence) -> torch.Tensor:
    """Drop the trailing context token."""
    if fused.layout != "fused":
        raise ValueError("token selection needs a fused sequence")
    return fused.tokens[..., :-1, :]
