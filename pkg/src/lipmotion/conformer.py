"""Conformer blocks (macaron FFN, self-attention, optional cross-attention, conv module)."""
from __future__ import annotations

import torch
from torch import nn


class FeedForward(nn.Module):
    def __init__(self, dim: int, ffn_dim: int, dropout: float):
        super().__init__()
        self.net = nn.Sequential(
            nn.LayerNorm(dim), nn.Linear(dim, ffn_dim), nn.SiLU(), nn.Dropout(dropout),
            nn.Linear(ffn_dim, dim), nn.Dropout(dropout),
        )

    def forward(self, x):
        return self.net(x)


class ConvModule(nn.Module):
    # LayerNorm over channels instead of BatchNorm: batch statistics would make
    # eval outputs depend on the batch composition.
    def __init__(self, dim: int, kernel: int, dropout: float):
        super().__init__()
        if kernel % 2 == 0:
            raise ValueError("conv kernel must be odd")
        self.norm = nn.LayerNorm(dim)
        self.pw1 = nn.Conv1d(dim, 2 * dim, 1)
        self.dw = nn.Conv1d(dim, dim, kernel, padding=kernel // 2, groups=dim)
        self.norm2 = nn.LayerNorm(dim)
        self.pw2 = nn.Conv1d(dim, dim, 1)
        self.drop = nn.Dropout(dropout)

    def forward(self, x):
        h = self.norm(x).transpose(1, 2)
        h = nn.functional.glu(self.pw1(h), dim=1)
        h = self.dw(h).transpose(1, 2)
        h = nn.functional.silu(self.norm2(h)).transpose(1, 2)
        return self.drop(self.pw2(h).transpose(1, 2))


class ConformerLayer(nn.Module):
    def __init__(self, dim: int, ffn_dim: int, heads: int, kernel: int, dropout: float,
                 cross_attention: bool = False):
        super().__init__()
        self.ff1 = FeedForward(dim, ffn_dim, dropout)
        self.attn_norm = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, heads, dropout=dropout, batch_first=True)
        self.cross = None
        if cross_attention:
            self.cross_norm = nn.LayerNorm(dim)
            self.cross = nn.MultiheadAttention(dim, heads, dropout=dropout, batch_first=True)
        self.conv = ConvModule(dim, kernel, dropout)
        self.ff2 = FeedForward(dim, ffn_dim, dropout)
        self.out_norm = nn.LayerNorm(dim)
        self.drop = nn.Dropout(dropout)

    def forward(self, x, context=None, key_padding_mask=None):
        x = x + 0.5 * self.ff1(x)
        h = self.attn_norm(x)
        x = x + self.drop(self.attn(h, h, h, key_padding_mask=key_padding_mask, need_weights=False)[0])
        if self.cross is not None:
            if context is None:
                raise ValueError("cross-attention layer needs a context")
            h = self.cross_norm(x)
            x = x + self.drop(self.cross(h, context, context, need_weights=False)[0])
        x = x + self.conv(x)
        x = x + 0.5 * self.ff2(x)
        return self.out_norm(x)


class AudioEncoder(nn.Module):
    """Audio-rate features [B, 2N, D_s] -> frame-rate hidden [B, N, dim]."""

    def __init__(self, in_dim: int, dim: int, ffn_dim: int, heads: int, kernel: int, layers: int,
                 dropout: float, down_kernel: int = 3, down_stride: int = 2, down_padding: int = 1):
        super().__init__()
        self.inp = nn.Linear(in_dim, dim)
        self.layers = nn.ModuleList(
            [ConformerLayer(dim, ffn_dim, heads, kernel, dropout) for _ in range(layers)]
        )
        self.down = nn.Conv1d(dim, dim, down_kernel, stride=down_stride, padding=down_padding)

    def forward(self, feats):
        h = self.inp(feats)
        for layer in self.layers:
            h = layer(h)
        return self.down(h.transpose(1, 2)).transpose(1, 2)
