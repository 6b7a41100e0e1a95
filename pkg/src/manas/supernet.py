"""Cells and the full de-raining network, relaxed and discrete."""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .core import (
    NUM_ATTENTION_OPS,
    NUM_SITES,
    ColumnChoice,
    ConfigError,
    Genotype,
    GenotypeError,
    NetworkConfig,
    check_pyramid,
    validate_config,
)
from .search_space import (
    AttentionModule,
    Fusion,
    Parallel,
    ResidualBlock,
    Transition,
    conv3x3,
    param_count,
    seeded_init,
    upsample_to,
)

_COLUMN_KEYS = {ColumnChoice.PARALLEL: "parallel", ColumnChoice.FUSION: "fusion"}
SIMPLEX_TOL = 1e-6


class Mode(enum.Enum):
    RELAXED = "relaxed"
    DISCRETE = "discrete"


class Cell(nn.Module):
    """Transition, M searched columns, then the attention module.

    ``index`` is 1-based: cell ``t`` consumes ``t`` scales and emits ``t + 1``.
    """

    def __init__(self, index: int, cfg: NetworkConfig, genes=None):
        super().__init__()
        self.index = index
        scales = index + 1
        C = cfg.channels
        self.transition = Transition(C)
        self.columns = nn.ModuleList()
        for m in range(cfg.columns):
            if genes is None:
                col = nn.ModuleDict({"parallel": Parallel(C, scales), "fusion": Fusion(C, scales)})
            else:
                choice = genes.columns[m]
                mod = Parallel(C, scales) if choice is ColumnChoice.PARALLEL else Fusion(C, scales)
                col = nn.ModuleDict({_COLUMN_KEYS[choice]: mod})
            self.columns.append(col)
        self.choices = None if genes is None else tuple(genes.columns)
        self.attention = AttentionModule(C, scales, None if genes is None else genes.attention)
        self.column_calls = 0

    def forward(self, pyr, alpha=None, beta=None):
        x = self.transition(pyr)
        for m, col in enumerate(self.columns):
            if alpha is None:
                x = col[_COLUMN_KEYS[self.choices[m]]](x)
            else:
                p = col["parallel"](x)
                f = col["fusion"](x)
                x = [alpha[m, 0] * a + alpha[m, 1] * b for a, b in zip(p, f)]
            self.column_calls += 1 if alpha is None else 2
        return self.attention(x, beta)


class DerainNetwork(nn.Module):
    """Stem, T cells and a collapse-to-1x tail producing a 3-channel image.

    The stem is a 3->C conv followed by two residual blocks; the tail sums every
    level upsampled to full resolution, applies ReLU and a 1x1 conv to RGB.
    """

    def __init__(self, cfg: NetworkConfig, mode: Mode = Mode.RELAXED, genotype: Genotype | None = None):
        super().__init__()
        validate_config(cfg)
        mode = Mode(mode)
        if mode is Mode.DISCRETE:
            if genotype is None:
                raise ConfigError("DISCRETE network needs a genotype")
            _check_genotype_matches(genotype, cfg)
        elif genotype is not None:
            raise ConfigError("RELAXED network takes no genotype")
        self.cfg = cfg
        self.mode = mode
        self.genotype = genotype
        C = cfg.channels
        self.stem = nn.ModuleDict(
            {"head": conv3x3(3, C), "blocks": nn.Sequential(ResidualBlock(C), ResidualBlock(C))}
        )
        self.cells = nn.ModuleList(
            Cell(t, cfg, None if genotype is None else genotype.cells[t - 1])
            for t in range(1, cfg.num_cells + 1)
        )
        self.tail = nn.Conv2d(C, 3, 1)
        self.check_shapes = False

    # counters used to verify how many searched operators a forward touches
    def reset_counters(self) -> None:
        for cell in self.cells:
            cell.column_calls = 0
            cell.attention.site_calls = 0

    def searched_op_calls(self) -> list[int]:
        return [cell.column_calls + cell.attention.site_calls for cell in self.cells]

    def _stem(self, image):
        if image.dim() != 4 or image.shape[1] != 3:
            raise ValueError(f"expected a (B, 3, H, W) image batch, got {tuple(image.shape)}")
        step = 2 ** self.cfg.num_cells
        if image.shape[-2] % step or image.shape[-1] % step:
            raise ValueError(f"image dims {tuple(image.shape[-2:])} not divisible by {step}")
        return [self.stem["blocks"](self.stem["head"](image))]

    def _tail(self, pyr):
        acc = pyr[0]
        for x in pyr[1:]:
            acc = acc + upsample_to(x, pyr[0])
        return self.tail(F.relu(acc))

    def forward(self, image, alphas=None, betas=None):
        if self.mode is Mode.RELAXED:
            return self.forward_relaxed(image, alphas, betas)
        return self.forward_discrete(image)

    def forward_relaxed(self, image, alphas, betas):
        """Mixture forward. ``alphas``: (T, M, 2); ``betas``: (T, 3, 7), rows on the simplex."""
        if self.mode is not Mode.RELAXED:
            raise ConfigError("forward_relaxed needs a RELAXED network")
        T, M = self.cfg.num_cells, self.cfg.columns
        if T:
            if alphas is None or betas is None:
                raise ValueError("relaxed forward needs alphas and betas")
            if tuple(alphas.shape) != (T, M, 2) or tuple(betas.shape) != (T, NUM_SITES, NUM_ATTENTION_OPS):
                raise ValueError(
                    f"arch shapes {tuple(alphas.shape)}, {tuple(betas.shape)}; "
                    f"expected {(T, M, 2)}, {(T, NUM_SITES, NUM_ATTENTION_OPS)}"
                )
            _check_simplex(alphas, "alpha")
            _check_simplex(betas, "beta")
        pyr = self._stem(image)
        for t, cell in enumerate(self.cells):
            pyr = cell(pyr, alphas[t], betas[t])
            if self.check_shapes:
                check_pyramid(pyr)
        return self._tail(pyr)

    def forward_discrete(self, image):
        if self.mode is not Mode.DISCRETE or self.genotype is None:
            raise ConfigError("forward_discrete needs a DISCRETE network with a genotype")
        pyr = self._stem(image)
        for cell in self.cells:
            pyr = cell(pyr)
            if self.check_shapes:
                check_pyramid(pyr)
        return self._tail(pyr)

    def complexity_table(self) -> "ComplexityTable":
        """Per-instance parameter counts, in millions, for the complexity loss."""
        if self.mode is not Mode.RELAXED:
            raise ConfigError("complexity table needs the RELAXED supernet")
        T, M = self.cfg.num_cells, self.cfg.columns
        omega = torch.zeros(T, M, 2, dtype=torch.float64)
        lam = torch.zeros(T, NUM_SITES, NUM_ATTENTION_OPS, dtype=torch.float64)
        for t, cell in enumerate(self.cells):
            for m, col in enumerate(cell.columns):
                omega[t, m, 0] = param_count(col["parallel"])
                omega[t, m, 1] = param_count(col["fusion"])
            lam[t] = cell.attention.site_param_counts()
        return ComplexityTable(omega / 1e6, lam / 1e6)


@dataclass
class ComplexityTable:
    omega: torch.Tensor  # (..., 2) sizes of the parallel / fusion instances
    lam: torch.Tensor  # (..., 7) sizes of the attention ops per site


def _check_simplex(p: torch.Tensor, name: str) -> None:
    with torch.no_grad():
        if not torch.isfinite(p).all() or (p < 0).any() or (p > 1).any():
            raise ValueError(f"{name} probabilities must be finite and in [0, 1]")
        err = (p.sum(dim=-1) - 1).abs().max().item()
        if err > SIMPLEX_TOL:
            raise ValueError(f"{name} rows do not sum to 1 (max error {err:.3g})")


def _check_genotype_matches(genotype: Genotype, cfg: NetworkConfig) -> None:
    g = genotype.config
    if (g.num_cells, g.channels, g.columns) != (cfg.num_cells, cfg.channels, cfg.columns):
        raise GenotypeError(
            f"genotype built for T={g.num_cells}, C={g.channels}, M={g.columns}; "
            f"network wants T={cfg.num_cells}, C={cfg.channels}, M={cfg.columns}"
        )


def instantiate(
    cfg: NetworkConfig,
    mode: Mode | str = Mode.RELAXED,
    genotype: Genotype | None = None,
    seed: int = 0,
    dtype: torch.dtype = torch.float32,
) -> DerainNetwork:
    """Build a network and initialize it deterministically from ``seed``.

    Initial values depend only on ``(seed, parameter path)``, so a discrete
    network starts from exactly the weights the supernet holds for the same
    candidates.
    """
    net = DerainNetwork(cfg, Mode(mode), genotype)
    seeded_init(net, seed)
    return net.to(dtype)


def derive_discrete(supernet: DerainNetwork, genotype: Genotype) -> DerainNetwork:
    """Discrete network carrying the supernet's weights for the chosen candidates."""
    net = DerainNetwork(supernet.cfg, Mode.DISCRETE, genotype)
    src = supernet.state_dict()
    net.load_state_dict({k: src[k] for k in net.state_dict()})
    return net.to(next(supernet.parameters()).dtype)


# ---------------------------------------------------------------------------
# weight checkpoint: npz archive of little-endian float32 tensors + metadata
# ---------------------------------------------------------------------------

META_KEY = "__meta__"


def save_weights(path, net: DerainNetwork, extra: dict | None = None) -> None:
    arrays = {
        name: t.detach().cpu().numpy().astype("<f4") for name, t in net.state_dict().items()
    }
    meta = {
        "config": net.cfg.to_json_dict(),
        "shared_attention_choice": net.cfg.shared_attention_choice,
        "mode": net.mode.value,
        "genotype": None if net.genotype is None else net.genotype.to_dict(),
        "shapes": {k: list(v.shape) for k, v in arrays.items()},
    }
    if extra:
        meta.update(extra)
    arrays[META_KEY] = np.array(json.dumps(meta, sort_keys=True))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_weights(path) -> DerainNetwork:
    with np.load(path, allow_pickle=False) as z:
        if META_KEY not in z.files:
            raise ValueError(f"{path}: not a weight checkpoint (no metadata)")
        meta = json.loads(str(z[META_KEY]))
        cfg = NetworkConfig.from_json_dict(
            meta["config"], shared_attention_choice=meta.get("shared_attention_choice", False)
        )
        genotype = None if meta["genotype"] is None else Genotype.from_dict(meta["genotype"])
        net = DerainNetwork(cfg, Mode(meta["mode"]), genotype)
        state = {}
        for name, ref in net.state_dict().items():
            if name not in z.files:
                raise ValueError(f"{path}: missing tensor {name}")
            arr = z[name]
            if list(arr.shape) != list(ref.shape):
                raise ValueError(f"{path}: {name} has shape {arr.shape}, expected {tuple(ref.shape)}")
            state[name] = torch.from_numpy(arr.astype(np.float32))
    net.load_state_dict(state)
    return net
