"""Multi-scale operators and the attention-op sub-space.

A feature pyramid is a plain list of ``(B, C, H, W)`` tensors, level ``d``
holding the maps at resolution ``0.5**d``.
"""

from __future__ import annotations

import math
import zlib
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .core import AttentionOpKind, NUM_SITES

Pyramid = list  # list[torch.Tensor]

CHANNEL_REDUCTION = 4


def conv3x3(c_in: int, c_out: int, stride: int = 1) -> nn.Conv2d:
    return nn.Conv2d(c_in, c_out, 3, stride=stride, padding=1)


def param_count(module: nn.Module) -> int:
    """Exact number of learnable scalars owned by ``module``."""
    return sum(p.numel() for p in module.parameters())


def _check_channels(x: torch.Tensor, channels: int, what: str) -> None:
    if x.shape[1] != channels:
        raise ValueError(f"{what}: input has {x.shape[1]} channels, weights expect {channels}")


class ResidualBlock(nn.Module):
    """x + conv(relu(conv(x))), channel preserving."""

    def __init__(self, channels: int):
        super().__init__()
        self.channels = channels
        self.conv1 = conv3x3(channels, channels)
        self.conv2 = conv3x3(channels, channels)

    def forward(self, x):
        _check_channels(x, self.channels, "residual block")
        return x + self.conv2(F.relu(self.conv1(x)))


class Transition(nn.Module):
    """Pass every level through and append one stride-2 level below the last."""

    def __init__(self, channels: int):
        super().__init__()
        self.channels = channels
        self.down = conv3x3(channels, channels, stride=2)

    def forward(self, pyr: Pyramid) -> Pyramid:
        _check_channels(pyr[-1], self.channels, "transition")
        return list(pyr) + [self.down(pyr[-1])]


class Parallel(nn.Module):
    """One residual block per scale, applied independently."""

    def __init__(self, channels: int, num_scales: int):
        super().__init__()
        self.blocks = nn.ModuleList(ResidualBlock(channels) for _ in range(num_scales))

    def forward(self, pyr: Pyramid) -> Pyramid:
        if len(pyr) != len(self.blocks):
            raise ValueError(f"parallel module built for {len(self.blocks)} scales, got {len(pyr)}")
        return [blk(x) for blk, x in zip(self.blocks, pyr)]


def upsample_to(x: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    return F.interpolate(x, size=like.shape[-2:], mode="bilinear", align_corners=False)


class Fusion(nn.Module):
    """Every output scale is ReLU of the sum of all input scales brought to it.

    Higher-resolution sources reach a lower-resolution target through a chain
    of ``dst - src`` stride-2 convs owned by that (src, dst) pair; lower
    resolution sources are bilinearly upsampled; the same scale passes as is.
    """

    def __init__(self, channels: int, num_scales: int):
        super().__init__()
        self.channels = channels
        self.num_scales = num_scales
        self.paths = nn.ModuleDict()
        for src in range(num_scales):
            for dst in range(src + 1, num_scales):
                self.paths[f"{src}_{dst}"] = nn.Sequential(
                    *(conv3x3(channels, channels, stride=2) for _ in range(dst - src))
                )

    def forward(self, pyr: Pyramid) -> Pyramid:
        if len(pyr) != self.num_scales:
            raise ValueError(f"fusion module built for {self.num_scales} scales, got {len(pyr)}")
        for x in pyr:
            _check_channels(x, self.channels, "fusion")
        out = []
        for dst in range(self.num_scales):
            acc = None
            for src in range(self.num_scales):
                if src == dst:
                    term = pyr[src]
                elif src < dst:
                    term = self.paths[f"{src}_{dst}"](pyr[src])
                else:
                    term = upsample_to(pyr[src], pyr[dst])
                acc = term if acc is None else acc + term
            out.append(F.relu(acc))
        return out


# ---------------------------------------------------------------------------
# attention operations (act on one C/2 split group)
# ---------------------------------------------------------------------------


class ChannelAttention(nn.Module):
    """Sigmoid gate from an MLP on the global average (and optionally max) pool."""

    def __init__(self, channels: int, with_max: bool, reduction: int = CHANNEL_REDUCTION):
        super().__init__()
        hidden = max(1, channels // reduction)
        self.channels = channels
        self.with_max = with_max
        self.mlp = nn.Sequential(
            nn.Conv2d(channels, hidden, 1, bias=False),
            nn.ReLU(),
            nn.Conv2d(hidden, channels, 1, bias=False),
        )

    def gate(self, z):
        logit = self.mlp(z.mean(dim=(2, 3), keepdim=True))
        if self.with_max:
            logit = logit + self.mlp(z.amax(dim=(2, 3), keepdim=True))
        return torch.sigmoid(logit)

    def forward(self, z):
        _check_channels(z, self.channels, "channel attention")
        return self.gate(z) * z


class SpatialAttention(nn.Module):
    # Pools along the channel axis, so the gate is an H x W map.
    def __init__(self, channels: int):
        super().__init__()
        self.channels = channels
        self.conv = conv3x3(2, 1)

    def gate(self, z):
        pooled = torch.cat([z.mean(dim=1, keepdim=True), z.amax(dim=1, keepdim=True)], dim=1)
        return torch.sigmoid(self.conv(pooled))

    def forward(self, z):
        _check_channels(z, self.channels, "spatial attention")
        return self.gate(z) * z


class NormAttention(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.channels = channels
        self.conv = nn.Conv2d(channels, channels, 3, padding=1, groups=channels)

    def gate(self, z):
        return torch.sigmoid(self.conv(z))

    def forward(self, z):
        _check_channels(z, self.channels, "normalization attention")
        return self.gate(z) * z


class BlockAttention(nn.Module):
    """Spatial attention followed by normalization attention."""

    def __init__(self, channels: int):
        super().__init__()
        self.spatial = SpatialAttention(channels)
        self.norm = NormAttention(channels)

    def forward(self, z):
        return self.norm(self.spatial(z))


class IdentityAttention(nn.Module):
    def forward(self, z):
        return z


class ZeroAttention(nn.Module):
    def forward(self, z):
        return torch.zeros_like(z)


def make_attention_op(kind: AttentionOpKind, channels: int) -> nn.Module:
    kind = AttentionOpKind(kind)
    if kind is AttentionOpKind.CA_V1:
        return ChannelAttention(channels, with_max=False)
    if kind is AttentionOpKind.CA_V2:
        return ChannelAttention(channels, with_max=True)
    if kind is AttentionOpKind.SPATIAL:
        return SpatialAttention(channels)
    if kind is AttentionOpKind.NORM:
        return NormAttention(channels)
    if kind is AttentionOpKind.CBA:
        return BlockAttention(channels)
    if kind is AttentionOpKind.IDENTITY:
        return IdentityAttention()
    return ZeroAttention()


_OP_TYPES = {
    AttentionOpKind.CA_V1: ChannelAttention,
    AttentionOpKind.CA_V2: ChannelAttention,
    AttentionOpKind.SPATIAL: SpatialAttention,
    AttentionOpKind.NORM: NormAttention,
    AttentionOpKind.CBA: BlockAttention,
    AttentionOpKind.IDENTITY: IdentityAttention,
    AttentionOpKind.ZERO: ZeroAttention,
}


def apply_attention(kind: AttentionOpKind, z: torch.Tensor, op: nn.Module) -> torch.Tensor:
    """Evaluate attention op ``kind`` on split group ``z`` with weights ``op``."""
    try:
        kind = AttentionOpKind(kind)
    except ValueError:
        raise ValueError(f"unknown attention kind {kind!r}") from None
    expected = _OP_TYPES[kind]
    if not isinstance(op, expected):
        raise ValueError(f"{kind.name} needs {expected.__name__} weights, got {type(op).__name__}")
    if isinstance(op, ChannelAttention) and op.with_max != (kind is AttentionOpKind.CA_V2):
        raise ValueError(f"{kind.name}: channel attention variant mismatch")
    return op(z)


class AttentionModule(nn.Module):
    """Split-attend-concat block applied independently at every scale.

    With ``kinds`` given, each of the three sites holds only its chosen op;
    otherwise every site holds all seven candidates and the forward takes a
    ``(3, 7)`` mixing-weight tensor.
    """

    def __init__(self, channels: int, num_scales: int, kinds: Sequence[AttentionOpKind] | None = None):
        super().__init__()
        if channels % 2:
            raise ValueError(f"attention module needs even channels, got {channels}")
        self.channels = channels
        self.num_scales = num_scales
        self.kinds = None if kinds is None else tuple(AttentionOpKind(k) for k in kinds)
        if self.kinds is not None and len(self.kinds) != NUM_SITES:
            raise ValueError(f"need {NUM_SITES} attention kinds, got {len(self.kinds)}")
        half = channels // 2
        candidates = list(AttentionOpKind) if self.kinds is None else None
        self.scales = nn.ModuleList()
        for _ in range(num_scales):
            sites = nn.ModuleList()
            for s in range(NUM_SITES):
                ops = candidates if candidates is not None else [self.kinds[s]]
                sites.append(nn.ModuleDict({k.op_name: make_attention_op(k, half) for k in ops}))
            self.scales.append(sites)
        self.fuse = nn.ModuleList(nn.Conv2d(3 * half, channels, 1) for _ in range(num_scales))
        self.site_calls = 0

    def _site(self, ops: nn.ModuleDict, s: int, z, beta):
        if beta is None:
            kind = self.kinds[s]
            return apply_attention(kind, z, ops[kind.op_name])
        out = None
        for kind in AttentionOpKind:
            term = beta[s, kind] * apply_attention(kind, z, ops[kind.op_name])
            out = term if out is None else out + term
        return out

    def forward(self, pyr: Pyramid, beta: torch.Tensor | None = None) -> Pyramid:
        if len(pyr) != self.num_scales:
            raise ValueError(f"attention module built for {self.num_scales} scales, got {len(pyr)}")
        if beta is None and self.kinds is None:
            raise ValueError("relaxed attention module needs mixing weights")
        out = []
        for d, x in enumerate(pyr):
            _check_channels(x, self.channels, "attention module")
            sites = self.scales[d]
            x1, x2 = torch.chunk(x, 2, dim=1)
            y1 = self._site(sites[0], 0, x1, beta)
            y2 = self._site(sites[1], 1, x2, beta) + self._site(sites[2], 2, y1, beta)
            out.append(self.fuse[d](torch.cat([y1, y2, y1 + y2], dim=1)))
        self.site_calls += NUM_SITES
        return out

    def site_param_counts(self) -> torch.Tensor:
        """(3, 7) table: parameters of op k at site s, summed over scales."""
        table = torch.zeros(NUM_SITES, len(AttentionOpKind), dtype=torch.float64)
        for sites in self.scales:
            for s, ops in enumerate(sites):
                for name, op in ops.items():
                    table[s, AttentionOpKind.from_name(name)] += param_count(op)
        return table


# ---------------------------------------------------------------------------
# initialization
# ---------------------------------------------------------------------------


def _path_seed(seed: int, path: str) -> int:
    # torch's CPU generator keeps only the low 32 bits of a seed
    return int(np.random.SeedSequence([seed & 0xFFFFFFFF, zlib.crc32(path.encode())]).generate_state(1)[0])


TRANSITION_GAIN = 0.1


def seeded_init(module: nn.Module, seed: int, prefix: str = "") -> None:
    """Fan-in uniform init drawn per parameter path.

    Each tensor gets its own generator keyed on ``(seed, path)``, so two
    modules sharing a path get identical values regardless of what else was
    built. Biases and the last conv on every branch that adds into a running
    sum (residual conv2, end of each fusion down chain) start at zero, so a
    freshly built cell stays close to the identity however deep. For the same
    reason the 1x1 output conv of an attention module starts as a selector
    that passes ``[Y1; Y2]`` through and ignores ``Y1 + Y2``, and a
    transition's strided conv is drawn at a tenth of the usual bound: the new
    level starts faint (not zero, which would park it on the ReLU kink).
    """
    silent, select, faint = set(), set(), set()
    for mname, m in module.named_modules():
        pre = mname + "." if mname else ""
        if isinstance(m, Transition):
            faint.add(pre + "down.weight")
        elif isinstance(m, Fusion):
            for key, chain in m.paths.items():
                silent.add(f"{pre}paths.{key}.{len(chain) - 1}.weight")
        elif isinstance(m, AttentionModule):
            select.update(f"{pre}fuse.{d}.weight" for d in range(m.num_scales))
    with torch.no_grad():
        for name, p in module.named_parameters():
            path = prefix + name
            if name.endswith("bias") or name.endswith("conv2.weight") or name in silent:
                p.zero_()
                continue
            if name in select:
                p.zero_()
                p[:, :, 0, 0].fill_diagonal_(1.0)
                continue
            fan_in = p[0].numel() if p.dim() > 1 else p.numel()
            bound = math.sqrt(3.0 / fan_in) * (TRANSITION_GAIN if name in faint else 1.0)
            g = torch.Generator().manual_seed(_path_seed(seed, path))
            vals = torch.rand(p.shape, generator=g, dtype=torch.float64) * 2 - 1
            p.copy_((vals * bound).to(p.dtype))
