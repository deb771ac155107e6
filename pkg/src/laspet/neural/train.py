"""Toy training loop: lesion-centred patch sampling, optional augmentation, AdamW with cosine annealing."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

import numpy as np
import torch
from scipy import ndimage

from laspet.neural.loss import joint_loss
from laspet.neural.model import LasNet, LasNetConfig, init_weights
from laspet.volgrid import CT_RANGE, PET_RANGE, Volume3D, normalize

LESION_CENTRED_PROB = 8.0 / 9.0


@dataclass(frozen=True)
class OptConfig:
    steps: int = 200
    lr: float = 1e-4
    weight_decay: float = 1e-5
    cosine: bool = True
    seed: int = 0
    lesion_prob: float = LESION_CENTRED_PROB
    augment: bool = False
    max_rotation_deg: float = 25.0
    zoom_range: tuple[float, float] = (0.8, 1.2)

    @classmethod
    def from_dict(cls, d: dict) -> "OptConfig":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown optimizer config keys: {sorted(extra)}")
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


@dataclass
class TrainResult:
    model: LasNet
    losses: list[float] = field(default_factory=list)


def network_input(pet: Volume3D, ct: Volume3D) -> np.ndarray:
    """Two-channel ``(2, D, H, W)`` float32 input with PET and CT clamped to their windows."""
    return np.stack([normalize(pet, *PET_RANGE).values, normalize(ct, *CT_RANGE).values]).astype(np.float32)


def study_arrays(study) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    x1 = network_input(study.pet1, study.ct1)
    x2 = network_input(study.pet2, study.ct2)
    y1 = study.gt1.mask().astype(np.float32)
    y2 = study.gt2.mask().astype(np.float32)
    return x1, x2, y1, y2


def _pad_to_patch(a: np.ndarray, patch: int) -> np.ndarray:
    pad = [(0, 0)] * (a.ndim - 3) + [(0, max(0, patch - s)) for s in a.shape[-3:]]
    return np.pad(a, pad)


def sample_patch(rng: np.random.Generator, arrays, patch: int, lesion_prob: float):
    x1, x2, y1, y2 = (_pad_to_patch(a, patch) for a in arrays)
    shape = np.asarray(y1.shape)
    fg = np.argwhere((y1 > 0) | (y2 > 0))
    if len(fg) and rng.random() < lesion_prob:
        centre = fg[rng.integers(len(fg))]
        start = np.clip(centre - patch // 2, 0, shape - patch)
    else:
        start = np.array([rng.integers(0, s - patch + 1) for s in shape])
    sl = tuple(slice(s, s + patch) for s in start)
    return x1[(slice(None),) + sl], x2[(slice(None),) + sl], y1[sl], y2[sl]


def _rotation(rng, max_deg: float) -> np.ndarray:
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    a = np.radians(rng.uniform(-max_deg, max_deg))
    k = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + np.sin(a) * k + (1 - np.cos(a)) * k @ k


def augment(rng: np.random.Generator, x1, x2, y1, y2, cfg: OptConfig):
    """Same random flip, rotation and zoom for both time points (images linear, labels nearest)."""
    for ax in range(3):
        if rng.random() < 0.5:
            x1, x2 = np.flip(x1, ax + 1), np.flip(x2, ax + 1)
            y1, y2 = np.flip(y1, ax), np.flip(y2, ax)
    mat = _rotation(rng, cfg.max_rotation_deg) / rng.uniform(*cfg.zoom_range)
    c = (np.asarray(y1.shape) - 1) / 2.0
    off = c - mat @ c

    def warp(a, order):
        return ndimage.affine_transform(a, mat, offset=off, order=order, mode="constant")

    x1 = np.stack([warp(ch, 1) for ch in x1])
    x2 = np.stack([warp(ch, 1) for ch in x2])
    return x1, x2, warp(np.ascontiguousarray(y1), 0), warp(np.ascontiguousarray(y2), 0)


def train_toy(studies, cfg: LasNetConfig | None = None, opt: OptConfig | None = None,
              model: LasNet | None = None) -> TrainResult:
    """Train on random patches of the given studies; deterministic for a fixed seed."""
    cfg = cfg or LasNetConfig()
    opt = opt or OptConfig()
    if not studies:
        raise ValueError("train_toy needs at least one study")
    torch.manual_seed(opt.seed)
    model = model or init_weights(LasNet(cfg), opt.seed)
    rng = np.random.Generator(np.random.Philox(opt.seed))
    data = [study_arrays(s) for s in studies]
    params = list(model.parameters())
    optim = torch.optim.AdamW(params, lr=opt.lr, weight_decay=opt.weight_decay)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(optim, T_max=max(opt.steps, 1)) if opt.cosine else None
    losses = []
    model.train()
    for _ in range(opt.steps):
        arrays = data[rng.integers(len(data))]
        x1, x2, y1, y2 = sample_patch(rng, arrays, cfg.patch_size, opt.lesion_prob)
        if opt.augment:
            x1, x2, y1, y2 = augment(rng, x1, x2, y1, y2, opt)
        t = [torch.from_numpy(np.ascontiguousarray(a, dtype=np.float32))[None] for a in (x1, x2)]
        y = [torch.from_numpy(np.ascontiguousarray(a, dtype=np.float32))[None, None] for a in (y1, y2)]
        optim.zero_grad()
        l1, l2 = model(t[0], t[1])
        loss = joint_loss(y[0], y[1], l1, l2)
        loss.backward()
        optim.step()
        if sched is not None:
            sched.step()
        losses.append(float(loss.detach()))
    model.eval()
    return TrainResult(model, losses)
