"""
Supernet: relaxed mixture vs the binarized network
==================================================

With one-hot architecture weights the relaxed supernet and the discrete
network built from the same genotype compute the same function.
"""

import numpy as np
import torch

from manas.core import AttentionOpKind, ColumnChoice, Genotype, NetworkConfig
from manas.search_engine import ArchParams, binarize
from manas.search_space import param_count
from manas.supernet import Mode, derive_discrete, instantiate

cfg = NetworkConfig(num_cells=2, channels=8, height=32, width=32)
sup = instantiate(cfg, Mode.RELAXED, seed=0)
print("supernet params:", param_count(sup))

rng = np.random.default_rng(0)
cols = rng.integers(0, 2, (2, cfg.columns))
ops = rng.integers(0, 7, (2, 3))
g = Genotype.build(cfg, [[ColumnChoice(int(c)) for c in r] for r in cols],
                   [[AttentionOpKind(int(k)) for k in r] for r in ops])
print(g.to_json().decode())

disc = derive_discrete(sup, g)
print("discrete params:", param_count(disc))

x = torch.rand(3, 3, 32, 32)
a = torch.nn.functional.one_hot(torch.as_tensor(cols), 2).float()
b = torch.nn.functional.one_hot(torch.as_tensor(ops), 7).float()
with torch.no_grad():
    diff = (sup.forward_relaxed(x, a, b) - disc(x)).abs().max().item()
print("max |relaxed - discrete| with one-hot weights:", diff)

# uniform logits binarize to the first candidate everywhere
print(binarize(ArchParams(cfg), cfg).to_json().decode()[:120], "...")
