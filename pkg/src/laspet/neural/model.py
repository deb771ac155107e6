"""Dual-branch longitudinally-aware segmentation network.

Every weight lives under either ``shared.`` (used by both branches) or
``cross.`` (W-MCA stages and LAAG refinement, PET2 branch only).  The PET1
branch is evaluated completely before the PET2 branch starts, so its output
cannot depend on the PET2 input.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import torch
from torch import nn

from laspet.neural.blocks import (
    AttentionGate,
    ConvBlock,
    CrossBlock,
    LaagRefine,
    PatchMerging,
    SwinBlock,
)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class LasNetConfig:
    in_channels: int = 2
    feature_dim: int = 12
    depths: tuple[int, ...] = (2, 2, 2)
    heads: tuple[int, ...] = (2, 2, 2)
    window_size: int = 3
    patch_size: int = 24
    mlp_ratio: float = 2.0
    leaky_slope: float = 0.01
    laag_kernel: int = 7

    def __post_init__(self):
        if len(self.depths) != len(self.heads) or not self.depths:
            raise ConfigError("depths and heads must be non-empty and of equal length")
        for i, h in enumerate(self.heads):
            dim = self.feature_dim * 2**i
            if dim % h:
                raise ConfigError(f"stage {i}: feature dim {dim} not divisible by {h} heads")
        for i in range(len(self.depths)):
            res = self.stage_resolution(i)
            if res % 1 or int(res) % self.window_size:
                raise ConfigError(
                    f"patch {self.patch_size} gives stage {i} resolution {res}, not divisible by window {self.window_size}"
                )
        if self.laag_kernel % 2 == 0:
            raise ConfigError("laag_kernel must be odd")

    def stage_resolution(self, i: int) -> float:
        return self.patch_size / 2 ** (i + 1)

    @classmethod
    def from_dict(cls, d: dict) -> "LasNetConfig":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown model config keys: {sorted(extra)}")
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


class LasNet(nn.Module):
    def __init__(self, cfg: LasNetConfig | None = None, longitudinal: bool = True):
        super().__init__()
        self.cfg = cfg = cfg or LasNetConfig()
        self.longitudinal = longitudinal
        c, slope, n = cfg.feature_dim, cfg.leaky_slope, len(cfg.depths)
        dims = [c * 2**i for i in range(n)]

        sh = nn.Module()
        sh.enc0 = ConvBlock(cfg.in_channels, c, slope)
        sh.embed = nn.Conv3d(cfg.in_channels, c, 2, stride=2)
        sh.stages = nn.ModuleList(
            nn.Sequential(*[
                SwinBlock(dims[i], cfg.heads[i], cfg.window_size, int(cfg.stage_resolution(i)), b % 2 == 1, cfg.mlp_ratio)
                for b in range(cfg.depths[i])
            ])
            for i in range(n)
        )
        sh.merges = nn.ModuleList(PatchMerging(dims[i]) for i in range(n - 1))
        sh.skips = nn.ModuleList(ConvBlock(d, d, slope) for d in dims)
        # decoder, coarsest first: level i upsamples from dims[i] to dims[i-1] (or c at full resolution)
        outs = [c] + dims[:-1]
        sh.ups = nn.ModuleList(nn.ConvTranspose3d(dims[i], outs[i], 2, stride=2) for i in range(n))
        sh.gates = nn.ModuleList(AttentionGate(outs[i], outs[i], max(outs[i] // 2, 1)) for i in range(n))
        sh.decs = nn.ModuleList(ConvBlock(2 * outs[i], outs[i], slope) for i in range(n))
        sh.head = nn.Conv3d(c, 1, 1)
        self.shared = sh
        if longitudinal:
            cr = nn.Module()
            cr.lawa = nn.ModuleList(CrossBlock(dims[i], cfg.heads[i], cfg.window_size, cfg.mlp_ratio) for i in range(n))
            cr.laag = nn.ModuleList(LaagRefine(cfg.laag_kernel) for _ in range(n))
            self.cross = cr

    def _check(self, x):
        if x.dim() != 5 or x.shape[1] != self.cfg.in_channels:
            raise ConfigError(f"expected (B, {self.cfg.in_channels}, D, H, W), got {tuple(x.shape)}")
        if any(s % (self.cfg.window_size * 2 ** len(self.cfg.depths)) for s in x.shape[2:]):
            raise ConfigError(f"spatial shape {tuple(x.shape[2:])} incompatible with window/stage layout")

    def _encode(self, x, z_ref=None):
        sh = self.shared
        skip0 = sh.enc0(x)
        z = sh.embed(x).permute(0, 2, 3, 4, 1)
        zs = []
        for i, stage in enumerate(sh.stages):
            if i:
                z = sh.merges[i - 1](z)
            z = stage(z)
            if z_ref is not None:
                z = self.cross.lawa[i](z_ref[i], z)
            zs.append(z)
        skips = [skip0] + [sh.skips[i](zi.permute(0, 4, 1, 2, 3)) for i, zi in enumerate(zs)]
        return zs, skips

    def _decode(self, skips, alphas_ref=None):
        sh = self.shared
        n = len(sh.stages)
        y = skips[n]
        alphas = []
        for i in reversed(range(n)):
            g = sh.ups[i](y)
            x = skips[i]
            if alphas_ref is None:
                a = sh.gates[i](g, x)
            else:
                a = self.cross.laag[i](sh.gates[i].logits(g, x), alphas_ref[i])
            alphas.append(a)
            y = sh.decs[i](torch.cat([g, x * a], dim=1))
        return sh.head(y), alphas[::-1]

    def forward_pet1(self, pet1ct):
        """PET1 logits plus the intermediate features the PET2 branch reads."""
        self._check(pet1ct)
        zs, skips = self._encode(pet1ct)
        logits, alphas = self._decode(skips)
        return logits, zs, alphas

    def forward(self, pet1ct, pet2ct=None):
        logits1, z1, a1 = self.forward_pet1(pet1ct)
        if not self.longitudinal or pet2ct is None:
            return logits1, None
        self._check(pet2ct)
        if pet2ct.shape != pet1ct.shape:
            raise ConfigError(f"PET1/PET2 shape mismatch: {tuple(pet1ct.shape)} vs {tuple(pet2ct.shape)}")
        _, skips2 = self._encode(pet2ct, z_ref=z1)
        logits2, _ = self._decode(skips2, alphas_ref=a1)
        return logits1, logits2


def parameter_registry(model: nn.Module) -> dict[str, dict]:
    """name -> {shape, numel, group} where group is ``shared`` or ``cross``."""
    reg = {}
    for name, p in model.named_parameters():
        group = name.split(".", 1)[0]
        if group not in ("shared", "cross"):
            raise ConfigError(f"parameter {name} is outside the shared/cross registry")
        reg[name] = {"shape": list(p.shape), "numel": p.numel(), "group": group}
    return reg


def count_parameters(model: nn.Module) -> dict[str, int]:
    counts = {"shared": 0, "cross": 0}
    for entry in parameter_registry(model).values():
        counts[entry["group"]] += entry["numel"]
    counts["total"] = counts["shared"] + counts["cross"]
    return counts


def init_weights(model: nn.Module, seed: int) -> nn.Module:
    """Deterministic re-initialization (keeps the zero-initialized LAAG refinement at zero)."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, p in model.named_parameters():
            if ".laag." in name:
                p.zero_()
            elif name.endswith("bias_table"):
                p.copy_(torch.randn(p.shape, generator=gen) * 0.02)
            elif p.dim() > 1:
                fan_in = math.prod(p.shape[1:])
                p.copy_(torch.randn(p.shape, generator=gen) * math.sqrt(2.0 / fan_in) * 0.5)
            elif "norm" in name and name.endswith("weight"):
                p.fill_(1.0)
            else:
                p.zero_()
    return model
