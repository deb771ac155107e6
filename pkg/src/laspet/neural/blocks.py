"""Building blocks: residual conv blocks, windowed (cross-)attention and attention gates.

Convolutional parts use ``(B, C, D, H, W)`` tensors, transformer parts ``(B, D, H, W, C)``.
"""
from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

MASK_VALUE = -100.0


class ConvUnit(nn.Module):
    def __init__(self, cin: int, cout: int, slope: float):
        super().__init__()
        self.conv = nn.Conv3d(cin, cout, 3, padding=1)
        self.norm = nn.InstanceNorm3d(cout, affine=True)
        self.slope = slope

    def forward(self, x):
        return F.leaky_relu(self.norm(self.conv(x)), self.slope)


class ConvBlock(nn.Module):
    """Two conv units plus a residual connection (1x1 projection when the width changes)."""

    def __init__(self, cin: int, cout: int, slope: float = 0.01):
        super().__init__()
        self.unit1 = ConvUnit(cin, cout, slope)
        self.unit2 = ConvUnit(cout, cout, slope)
        self.skip = nn.Identity() if cin == cout else nn.Conv3d(cin, cout, 1)

    def forward(self, x):
        return self.skip(x) + self.unit2(self.unit1(x))


def window_partition(x: torch.Tensor, ws: int) -> torch.Tensor:
    """``(B, D, H, W, C)`` -> ``(B * n_windows, ws**3, C)``."""
    b, d, h, w, c = x.shape
    if d % ws or h % ws or w % ws:
        raise ValueError(f"spatial shape {(d, h, w)} not divisible by window {ws}")
    x = x.view(b, d // ws, ws, h // ws, ws, w // ws, ws, c)
    return x.permute(0, 1, 3, 5, 2, 4, 6, 7).reshape(-1, ws**3, c)


def window_reverse(windows: torch.Tensor, ws: int, shape) -> torch.Tensor:
    """Inverse of :func:`window_partition`; ``shape`` is ``(B, D, H, W)``."""
    b, d, h, w = shape
    c = windows.shape[-1]
    x = windows.reshape(b, d // ws, h // ws, w // ws, ws, ws, ws, c)
    return x.permute(0, 1, 4, 2, 5, 3, 6, 7).reshape(b, d, h, w, c)


def relative_position_index(ws: int) -> torch.Tensor:
    coords = torch.stack(torch.meshgrid(*[torch.arange(ws)] * 3, indexing="ij")).flatten(1)
    rel = (coords[:, :, None] - coords[:, None, :]).permute(1, 2, 0) + (ws - 1)
    m = 2 * ws - 1
    return rel[..., 0] * m * m + rel[..., 1] * m + rel[..., 2]


def shift_mask(res, ws: int, shift: int) -> torch.Tensor:
    """Additive attention mask keeping cyclically shifted windows from mixing unrelated regions."""
    img = torch.zeros(1, *res, 1)
    cnt = 0
    spans = (slice(0, -ws), slice(-ws, -shift), slice(-shift, None))
    for sd in spans:
        for sh in spans:
            for sw in spans:
                img[:, sd, sh, sw, :] = cnt
                cnt += 1
    win = window_partition(img, ws).squeeze(-1)
    diff = win[:, None, :] - win[:, :, None]
    return torch.where(diff != 0, MASK_VALUE, 0.0)


class WindowAttention(nn.Module):
    """Multi-head scaled dot-product attention inside windows with a learned relative position bias.

    Queries come from ``xq`` and keys/values from ``xkv``; passing the same tensor gives self-attention.
    """

    def __init__(self, dim: int, heads: int, ws: int):
        super().__init__()
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by {heads} heads")
        self.heads, self.ws = heads, ws
        self.scale = (dim // heads) ** -0.5
        self.q = nn.Linear(dim, dim)
        self.kv = nn.Linear(dim, 2 * dim)
        self.proj = nn.Linear(dim, dim)
        self.bias_table = nn.Parameter(torch.zeros((2 * ws - 1) ** 3, heads))
        nn.init.trunc_normal_(self.bias_table, std=0.02)
        self.register_buffer("rel_index", relative_position_index(ws), persistent=False)

    def forward(self, xq, xkv=None, mask=None, return_attn: bool = False):
        xkv = xq if xkv is None else xkv
        bw, n, c = xq.shape
        hd = c // self.heads
        q = self.q(xq).view(bw, n, self.heads, hd).transpose(1, 2)
        k, v = self.kv(xkv).view(bw, n, 2, self.heads, hd).permute(2, 0, 3, 1, 4)
        scores = (q * self.scale) @ k.transpose(-2, -1)
        bias = self.bias_table[self.rel_index.reshape(-1)].view(n, n, self.heads).permute(2, 0, 1)
        scores = scores + bias.unsqueeze(0)
        if mask is not None:
            nw = mask.shape[0]
            scores = scores.view(bw // nw, nw, self.heads, n, n) + mask[None, :, None]
            scores = scores.view(bw, self.heads, n, n)
        attn = scores.softmax(dim=-1)
        out = self.proj((attn @ v).transpose(1, 2).reshape(bw, n, c))
        return (out, attn) if return_attn else out


class Mlp(nn.Module):
    def __init__(self, dim: int, ratio: float):
        super().__init__()
        hidden = int(dim * ratio)
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


def w_msa(x, attn: WindowAttention, shift: int = 0, mask=None):
    """Windowed self-attention on ``(B, D, H, W, C)`` with optional cyclic shift."""
    b, d, h, w, _ = x.shape
    if shift:
        x = torch.roll(x, (-shift,) * 3, dims=(1, 2, 3))
    out = window_reverse(attn(window_partition(x, attn.ws), mask=mask), attn.ws, (b, d, h, w))
    if shift:
        out = torch.roll(out, (shift,) * 3, dims=(1, 2, 3))
    return out


def w_mca(q_src, kv_src, attn: WindowAttention):
    """Windowed cross-attention: queries from ``q_src`` (PET2), keys and values from ``kv_src`` (PET1)."""
    if q_src.shape != kv_src.shape:
        raise ValueError(f"cross-attention inputs differ in shape: {tuple(q_src.shape)} vs {tuple(kv_src.shape)}")
    b, d, h, w, _ = q_src.shape
    out = attn(window_partition(q_src, attn.ws), window_partition(kv_src, attn.ws))
    return window_reverse(out, attn.ws, (b, d, h, w))


class SwinBlock(nn.Module):
    def __init__(self, dim: int, heads: int, ws: int, res: int, shifted: bool, mlp_ratio: float):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = WindowAttention(dim, heads, ws)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, mlp_ratio)
        # no shift when a single window already covers the grid
        self.shift = ws // 2 if shifted and res > ws else 0
        mask = shift_mask((res,) * 3, ws, self.shift) if self.shift else None
        self.register_buffer("mask", mask, persistent=False)

    def forward(self, x):
        x = x + w_msa(self.norm1(x), self.attn, self.shift, self.mask)
        return x + self.mlp(self.norm2(x))


class CrossBlock(nn.Module):
    """PET2-only update: ``z2 + W-MCA(LN(z2), LN(z1))`` followed by a residual MLP."""

    def __init__(self, dim: int, heads: int, ws: int, mlp_ratio: float):
        super().__init__()
        self.norm_q = nn.LayerNorm(dim)
        self.norm_kv = nn.LayerNorm(dim)
        self.attn = WindowAttention(dim, heads, ws)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, mlp_ratio)

    def forward(self, z1, z2):
        z2 = z2 + w_mca(self.norm_q(z2), self.norm_kv(z1), self.attn)
        return z2 + self.mlp(self.norm2(z2))


def lawa_block(z1, z2, shared: nn.Module, cross: CrossBlock):
    """Longitudinally-aware window attention stage.

    ``z1`` only passes through the shared self-attention path; ``z2`` gets the
    same path plus a cross-attention residual reading from the PET1 features.
    """
    z1_out = shared(z1)
    z2_out = cross(z1_out, shared(z2))
    return z1_out, z2_out


class PatchMerging(nn.Module):
    """Halve the resolution by concatenating 2x2x2 neighbours, then project 8C -> 2C."""

    def __init__(self, dim: int):
        super().__init__()
        self.norm = nn.LayerNorm(8 * dim)
        self.reduce = nn.Linear(8 * dim, 2 * dim, bias=False)

    def forward(self, x):
        parts = [x[:, i::2, j::2, k::2] for i in (0, 1) for j in (0, 1) for k in (0, 1)]
        return self.reduce(self.norm(torch.cat(parts, dim=-1)))


class AttentionGate(nn.Module):
    """Additive attention gate; ``logits`` returns the pre-sigmoid coefficients."""

    def __init__(self, x_ch: int, g_ch: int, inter: int):
        super().__init__()
        self.wx = nn.Conv3d(x_ch, inter, 1, bias=False)
        self.wg = nn.Conv3d(g_ch, inter, 1)
        self.psi = nn.Conv3d(inter, 1, 1)

    def logits(self, g, x):
        return self.psi(F.relu(self.wx(x) + self.wg(g)))

    def forward(self, g, x):
        return torch.sigmoid(self.logits(g, x))


class LaagRefine(nn.Module):
    """Learnable 7x7x7 refinement of the PET2 gate logits from concatenated PET1/PET2 coefficients."""

    def __init__(self, kernel: int = 7):
        super().__init__()
        self.conv = nn.Conv3d(2, 1, kernel, padding=kernel // 2)
        nn.init.zeros_(self.conv.weight)
        nn.init.zeros_(self.conv.bias)

    def forward(self, logits2, alpha1):
        alpha2 = torch.sigmoid(logits2)
        return torch.sigmoid(logits2 + self.conv(torch.cat([alpha1, alpha2], dim=1)))


def laag(g1, x1, g2, x2, gate: AttentionGate, refine: LaagRefine):
    """Gate both skips; the PET2 coefficients are refined with the PET1 ones. Returns gated skips and coefficients."""
    a1 = gate(g1, x1)
    a2 = refine(gate.logits(g2, x2), a1)
    return x1 * a1, x2 * a2, a1, a2
