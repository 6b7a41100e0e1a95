"""
Why the entropy term matters
============================

Optimizing only the architecture regularizer from a near-uniform start drives
every choice to a vertex, so binarization loses little.
"""

import torch

from manas.core import NetworkConfig, SearchConfig
from manas.losses import arch_reg_loss
from manas.search_engine import ArchParams

cfg = NetworkConfig(num_cells=2, channels=8)
arch = ArchParams(cfg)
g = torch.Generator().manual_seed(0)
with torch.no_grad():
    arch.mu.add_(1e-3 * torch.randn(arch.mu.shape, generator=g))
    arch.nu.add_(1e-3 * torch.randn(arch.nu.shape, generator=g))

lam = SearchConfig().lambda_arch
opt = torch.optim.Adam(arch.parameters(), lr=1e-2)
for step in range(1001):
    with torch.no_grad():
        if step % 200 == 0:
            a = arch.alphas().max(-1).values.min().item()
            b = arch.betas().max(-1).values.min().item()
            print(f"step {step:4d}  L_arch {arch_reg_loss(arch.alphas(), arch.betas()).item():.5f}  "
                  f"min max(alpha) {a:.4f}  min max(beta) {b:.4f}")
    opt.zero_grad()
    (lam * arch_reg_loss(arch.alphas(), arch.betas())).backward()
    opt.step()
