"""
Complexity weight vs searched model size
========================================

Sizes enter the complexity term in millions of parameters, so at desk scale
(C=8) the term is ~1e-4 and the default sweep {0, 0.1, 1} barely moves the
architecture. Larger weights show the direction: bigger lambda, smaller net.
Takes a few minutes on one CPU.
"""

import sys

from manas.core import NetworkConfig, SearchConfig
from manas.data import synthetic_split
from manas.search_engine import run_search
from manas.search_space import param_count
from manas.supernet import Mode, instantiate

lambdas = [float(v) for v in sys.argv[1:]] or [0.0, 1.0, 100.0, 1000.0]
split = synthetic_split(4, 4, 2, 32, seed=1)
cfg = NetworkConfig(num_cells=1, channels=8)
for lam in lambdas:
    g, _, _ = run_search(cfg, SearchConfig(iterations=300, lambda_comp=lam, rng_seed=1), split)
    cell = g.cells[0]
    print(f"lambda_comp {lam:>7g}: params {param_count(instantiate(cfg, Mode.DISCRETE, g)):>6}  "
          f"columns {''.join(c.code for c in cell.columns)}  attention {[k.op_name for k in cell.attention]}")
