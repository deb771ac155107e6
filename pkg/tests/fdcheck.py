"""Float64 finite-difference gradient checks for the network building blocks."""
import numpy as np
import torch

from laspet.neural import blocks
from laspet.neural.loss import joint_loss

import oracles

H = 1e-6


def _scalar(fn, weight):
    def f():
        with torch.no_grad():
            out = fn()
            return float((out * weight).sum()) if weight is not None else float(out)
    return f


def check(fn, inputs, module=None, rng=None, n_entries=24, n_dirs=2):
    """Worst relative error between autograd and central differences.

    ``fn()`` returns a tensor built from ``inputs`` (and ``module`` parameters).
    Gradients are compared on a random subset of input entries and along
    random directions in parameter space.
    """
    rng = rng or np.random.default_rng(0)
    out = fn()
    weight = None if out.dim() == 0 else torch.from_numpy(rng.normal(size=tuple(out.shape)))
    f = _scalar(fn, weight)
    params = [p for p in module.parameters() if p.requires_grad] if module is not None else []
    leaves = list(inputs) + params
    for t in leaves:
        t.grad = None
    loss = fn() if weight is None else (fn() * weight).sum()
    loss.backward()
    worst = 0.0
    for x in inputs:
        flat_idx = rng.choice(x.numel(), size=min(n_entries, x.numel()), replace=False)
        auto = x.grad.reshape(-1)[flat_idx].numpy()
        num = np.empty(len(flat_idx))
        with torch.no_grad():
            view = x.view(-1)
            for j, i in enumerate(flat_idx):
                old = float(view[i])
                view[i] = old + H
                fp = f()
                view[i] = old - H
                fm = f()
                view[i] = old
                num[j] = (fp - fm) / (2 * H)
        worst = max(worst, oracles.relative_error(auto, num))
    for _ in range(n_dirs if params else 0):
        dirs = [torch.from_numpy(rng.normal(size=tuple(p.shape))) for p in params]
        auto = sum(float((p.grad * d).sum()) for p, d in zip(params, dirs) if p.grad is not None)

        def along(s):
            with torch.no_grad():
                for p, d in zip(params, dirs):
                    p.add_(s * d)
            v = f()
            with torch.no_grad():
                for p, d in zip(params, dirs):
                    p.sub_(s * d)
            return v

        num = (along(H) - along(-H)) / (2 * H)
        worst = max(worst, oracles.relative_error([auto], [num]))
    return worst


def _t(rng, *shape, scale=1.0):
    return torch.from_numpy(rng.normal(size=shape) * scale).requires_grad_(True)


def _randomize(module, rng, scale=0.5):
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(torch.from_numpy(rng.normal(size=tuple(p.shape)) * scale))
    return module


def conv_block(rng):
    m = _randomize(blocks.ConvBlock(2, 3).double(), rng)
    x = _t(rng, 1, 2, 4, 4, 4)
    return check(lambda: m(x), [x], m, rng)


def w_msa(rng):
    attn = _randomize(blocks.WindowAttention(4, 2, 3).double(), rng)
    shift = int(rng.integers(0, 2))
    mask = blocks.shift_mask((6, 6, 6), 3, 1).double() if shift else None
    x = _t(rng, 1, 6, 6, 6, 4)
    return check(lambda: blocks.w_msa(x, attn, shift, mask), [x], attn, rng)


def w_mca(rng):
    attn = _randomize(blocks.WindowAttention(4, 2, 3).double(), rng)
    q, kv = _t(rng, 1, 3, 3, 6, 4), _t(rng, 1, 3, 3, 6, 4)
    return check(lambda: blocks.w_mca(q, kv, attn), [q, kv], attn, rng)


def gate(rng):
    m = _randomize(blocks.AttentionGate(3, 3, 2).double(), rng)
    g, x = _t(rng, 1, 3, 4, 4, 4), _t(rng, 1, 3, 4, 4, 4)
    return check(lambda: x * m(g, x), [g, x], m, rng)


def laag_kernel(rng):
    m = _randomize(blocks.LaagRefine(7).double(), rng, scale=0.1)
    logits2 = _t(rng, 1, 1, 5, 5, 5)
    a1 = torch.from_numpy(rng.uniform(0.05, 0.95, size=(1, 1, 5, 5, 5))).requires_grad_(True)
    return check(lambda: m(logits2, a1), [logits2, a1], m, rng)


def loss(rng):
    l1, l2 = _t(rng, 1, 1, 4, 4, 4, scale=2.0), _t(rng, 1, 1, 4, 4, 4, scale=2.0)
    y1 = torch.from_numpy((rng.random((1, 1, 4, 4, 4)) < 0.3).astype(np.float64))
    y2 = torch.from_numpy((rng.random((1, 1, 4, 4, 4)) < 0.3).astype(np.float64))
    return check(lambda: joint_loss(y1, y2, l1, l2), [l1, l2], None, rng)


OPS = {
    "conv_block": conv_block,
    "w_msa": w_msa,
    "w_mca": w_mca,
    "attention_gate": gate,
    "laag_kernel": laag_kernel,
    "joint_loss": loss,
}
