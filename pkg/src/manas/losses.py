"""Loss terms for the weight step (trainA) and the architecture step (trainB)."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, fields

import torch

from .metrics import ssim

LOG_EPS = 1e-7
CSV_HEADER = ("step", "ext", "int", "arch", "comp", "trainA", "trainB")


def mse(a, b):
    return ((a - b) ** 2).mean()


def _check_outputs(outputs, gt=None):
    if outputs.dim() != 4:
        raise ValueError(f"outputs must be (N, C, H, W), got {tuple(outputs.shape)}")
    if gt is not None and tuple(gt.shape) != tuple(outputs.shape[1:]):
        raise ValueError(f"ground truth {tuple(gt.shape)} does not match outputs {tuple(outputs.shape[1:])}")


def external_loss(outputs, gt):
    """Mean over the N outputs of MSE(O_i, G) + (1 - SSIM(O_i, G))."""
    _check_outputs(outputs, gt)
    n = outputs.shape[0]
    g = gt.expand_as(outputs)
    m = ((outputs - g) ** 2).flatten(1).mean(dim=1)
    s = ssim(outputs, g)
    return m.sum() / n + (1 - s).sum() / n


def internal_loss(outputs):
    """Mean pairwise MSE over the C(N, 2) unordered output pairs."""
    _check_outputs(outputs)
    n = outputs.shape[0]
    if n < 2:
        raise ValueError("internal loss needs at least two outputs")
    total = outputs.new_zeros(())
    for i in range(n):
        for j in range(i + 1, n):
            total = total + mse(outputs[i], outputs[j])
    return total / math.comb(n, 2)


def complexity_loss(alphas, betas, omega, lam):
    """Expected module size under the relaxed choice probabilities.

    ``alphas``/``omega`` are (..., 2) and ``betas``/``lam`` (..., 7); the sum of
    probability-weighted sizes is divided by the total number of alpha and
    beta scalars. Either group may be empty.
    """
    if alphas.shape != omega.shape or betas.shape != lam.shape:
        raise ValueError(
            f"complexity table arity mismatch: alphas {tuple(alphas.shape)} vs omega "
            f"{tuple(omega.shape)}, betas {tuple(betas.shape)} vs lam {tuple(lam.shape)}"
        )
    count = alphas.numel() + betas.numel()
    if count == 0:
        return alphas.new_zeros(())
    omega = omega.to(alphas.dtype)
    lam = lam.to(betas.dtype)
    return ((alphas * omega).sum() + (betas * lam).sum()) / count


def _neg_binary_entropy_sum(p):
    p = p.clamp(LOG_EPS, 1 - LOG_EPS)
    return -(p * torch.log(p) + (1 - p) * torch.log(1 - p)).sum()


def arch_reg_loss(alphas, betas):
    """Mean binary entropy of every alpha plus mean binary entropy of every beta."""
    total = alphas.new_zeros(())
    if alphas.numel():
        total = total + _neg_binary_entropy_sum(alphas) / alphas.numel()
    if betas.numel():
        total = total + _neg_binary_entropy_sum(betas) / betas.numel()
    return total


@dataclass
class LossReport:
    ext: object
    internal: object
    arch: object
    comp: object
    trainA: object
    trainB: object

    def detach(self) -> "LossReport":
        vals = (getattr(self, f.name) for f in fields(self))
        return LossReport(*(float(v.detach()) if isinstance(v, torch.Tensor) else float(v) for v in vals))

    def csv_row(self, step: int) -> list:
        r = self.detach()
        return [step, r.ext, r.internal, r.arch, r.comp, r.trainA, r.trainB]

    def check_finite(self) -> None:
        from .core import NumericalAbort

        for f in fields(self):
            v = getattr(self, f.name)
            v = float(v.detach()) if isinstance(v, torch.Tensor) else float(v)
            if not math.isfinite(v):
                name = "int" if f.name == "internal" else f.name
                raise NumericalAbort(f"loss component {name} is {v}")


def train_a_loss(outputs, gt, use_internal: bool = True) -> LossReport:
    """L_ext + L_int; with ``use_internal=False`` the internal term is reported as 0."""
    ext = external_loss(outputs, gt)
    internal = internal_loss(outputs) if use_internal else ext.new_zeros(())
    total = ext + internal
    zero = ext.new_zeros(())
    return LossReport(ext, internal, zero, zero, total, total)


def train_b_loss(outputs, gt, alphas, betas, table, lambda_arch: float, lambda_comp: float,
                 use_internal: bool = True) -> LossReport:
    a = train_a_loss(outputs, gt, use_internal)
    arch = arch_reg_loss(alphas, betas)
    comp = complexity_loss(alphas, betas, table.omega, table.lam)
    total = a.trainA + lambda_arch * arch + lambda_comp * comp
    return LossReport(a.ext, a.internal, arch, comp, a.trainA, total)


def write_loss_log(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_HEADER)
        for row in rows:
            w.writerow([row[0]] + [repr(float(v)) for v in row[1:]])


def read_loss_log(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [
            {k: (int(v) if k == "step" else float(v)) for k, v in row.items()}
            for row in csv.DictReader(fh)
        ]
