"""
A tour of the multi-scale search space
======================================

Build each module on a small pyramid, print what comes out, and count
parameters. Runs in a second on CPU.
"""

import torch

from manas.core import AttentionOpKind
from manas.search_space import AttentionModule, Fusion, Parallel, Transition, make_attention_op, param_count

torch.manual_seed(0)
C = 8
pyr = [torch.rand(1, C, 32, 32)]

# a transition appends one half-resolution level
pyr = Transition(C)(pyr)
print("after transition:", [tuple(x.shape[-2:]) for x in pyr])

# parallel: one residual block per level, levels never talk
par = Parallel(C, len(pyr))
print("parallel keeps shapes:", [tuple(x.shape[-2:]) for x in par(pyr)], "params", param_count(par))

# fusion: every level receives every other level (down by strided conv, up by bilinear)
fus = Fusion(C, len(pyr))
print("fusion paths:", list(fus.paths.keys()), "params", param_count(fus))

# the seven attention ops, each acting on half the channels
for kind in AttentionOpKind:
    op = make_attention_op(kind, C // 2)
    print(f"  {kind.name:<9} params {param_count(op):>4}")

# the attention module applies three ops per level and mixes the two halves
att = AttentionModule(C, len(pyr), kinds=[AttentionOpKind.CA_V1, AttentionOpKind.NORM, AttentionOpKind.SPATIAL])
out = att(pyr)
print("attention output:", [tuple(x.shape) for x in out])

# relaxed form: a softmax mixture over all seven ops per site
mixed = AttentionModule(C, len(pyr))
beta = torch.softmax(torch.randn(3, 7), -1)
print("relaxed attention output:", [tuple(x.shape) for x in mixed(pyr, beta)])
