"""
The loss terms on tiny inputs
=============================

Closed-form values for the internal, architecture and complexity terms, and
how trainA and trainB combine them.
"""

import math

import torch

from manas.losses import arch_reg_loss, complexity_loss, internal_loss, train_a_loss, train_b_loss
from manas.supernet import ComplexityTable

# three constant outputs 0, 1, 2: pairwise MSEs 1, 4, 1
outs = torch.stack([torch.full((3, 16, 16), float(v)) for v in (0, 1, 2)])
print("internal:", internal_loss(outs).item())

# entropy term: ln 2 at the fence, near zero at a vertex
print("arch at (0.5, 0.5):", arch_reg_loss(torch.tensor([[0.5, 0.5]]), torch.zeros(0, 7)).item(), "ln2 =", math.log(2))
print("arch at (1, 0):", arch_reg_loss(torch.tensor([[1.0, 0.0]]), torch.zeros(0, 7)).item())

# complexity: expected size under alpha, averaged over the choice count
print("complexity toy:", complexity_loss(torch.tensor([[0.0, 1.0]]), torch.zeros(0, 7),
                                         torch.tensor([[0.1, 0.2]]), torch.zeros(0, 7)).item())

gt = torch.full((3, 16, 16), 0.5)
rep = train_a_loss(outs.clamp(0, 1), gt)
print(f"trainA = ext {rep.ext.item():.4f} + int {rep.internal.item():.4f} = {rep.trainA.item():.4f}")

table = ComplexityTable(torch.full((1, 4, 2), 0.01), torch.full((1, 3, 7), 0.001))
alphas, betas = torch.full((1, 4, 2), 0.5), torch.full((1, 3, 7), 1 / 7)
rep = train_b_loss(outs.clamp(0, 1), gt, alphas, betas, table, lambda_arch=0.01, lambda_comp=1.0)
print(f"trainB = trainA + 0.01*{rep.arch.item():.4f} + 1.0*{rep.comp.item():.6f} = {rep.trainB.item():.4f}")
