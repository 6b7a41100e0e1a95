"""Central finite-difference gradient comparison shared by the test modules."""

from __future__ import annotations

import numpy as np
import torch

STEP = 1e-4
RTOL = 1e-4


def _coords(t: torch.Tensor, limit: int | None, rng: np.random.Generator):
    n = t.numel()
    if limit is None or n <= limit:
        return np.arange(n)
    return np.sort(rng.choice(n, size=limit, replace=False))


def fd_relative_error(fn, tensors, per_tensor: int | None = None, seed: int = 0, step: float = STEP,
                      pooled: bool = False) -> float:
    """Max over ``tensors`` of ||g_analytic - g_fd|| / max(||g_analytic||, ||g_fd||).

    ``fn()`` must return a scalar built from ``tensors`` (float64 leaves with
    ``requires_grad``). With ``per_tensor`` set, only that many randomly chosen
    coordinates of each tensor are probed. ``pooled`` measures the error once
    over all probed coordinates together, which is what matters for a large
    parameter set where single tensors can carry gradients at round-off level.
    """
    tensors = list(tensors)
    analytic = torch.autograd.grad(fn(), tensors, allow_unused=True)
    rng = np.random.default_rng(seed)
    worst = 0.0
    all_ana, all_num = [], []
    with torch.no_grad():
        for t, g in zip(tensors, analytic):
            g = torch.zeros_like(t) if g is None else g
            flat = t.view(-1)
            idx = _coords(t, per_tensor, rng)
            num = np.empty(len(idx))
            for k, i in enumerate(idx):
                orig = flat[i].item()
                flat[i] = orig + step
                up = fn().item()
                flat[i] = orig - step
                down = fn().item()
                flat[i] = orig
                num[k] = (up - down) / (2 * step)
            ana = g.reshape(-1)[torch.as_tensor(idx)].numpy()
            all_ana.append(ana)
            all_num.append(num)
            scale = max(np.linalg.norm(ana), np.linalg.norm(num), 1e-12)
            worst = max(worst, float(np.linalg.norm(ana - num) / scale))
    if pooled:
        ana, num = np.concatenate(all_ana), np.concatenate(all_num)
        return float(np.linalg.norm(ana - num) / max(np.linalg.norm(ana), np.linalg.norm(num), 1e-12))
    return worst


def projected(fn, seed: int = 0):
    """Turn a tensor-valued ``fn`` into a scalar via a fixed random projection."""
    cache = {}

    def scalar():
        out = fn()
        outs = out if isinstance(out, (list, tuple)) else [out]
        total = outs[0].new_zeros(())
        for k, o in enumerate(outs):
            if k not in cache:
                g = torch.Generator().manual_seed(seed + k)
                cache[k] = torch.randn(o.shape, generator=g, dtype=o.dtype)
            total = total + (o * cache[k]).sum()
        return total

    return scalar
