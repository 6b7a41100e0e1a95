"""Shared types, configuration and validation."""

from __future__ import annotations

import enum
import json
from dataclasses import asdict, dataclass, field
from typing import Sequence


class ConfigError(ValueError):
    """Invalid network, search or run configuration."""


class GenotypeError(ValueError):
    """Malformed genotype document."""


class NumericalAbort(RuntimeError):
    """A loss or gradient became NaN/Inf; the run cannot be trusted."""


class AttentionOpKind(enum.IntEnum):
    # Order is the op index k used by the beta vectors.
    CA_V1 = 0
    CA_V2 = 1
    SPATIAL = 2
    NORM = 3
    CBA = 4
    IDENTITY = 5
    ZERO = 6

    @property
    def op_name(self) -> str:
        return self.name.lower()

    @classmethod
    def from_name(cls, name: str) -> "AttentionOpKind":
        if not isinstance(name, str) or name != name.lower() or name.upper() not in cls.__members__:
            raise GenotypeError(f"unknown attention op {name!r}")
        return cls[name.upper()]


class ColumnChoice(enum.IntEnum):
    PARALLEL = 0
    FUSION = 1

    @property
    def code(self) -> str:
        return "P" if self is ColumnChoice.PARALLEL else "F"

    @classmethod
    def from_code(cls, code: str) -> "ColumnChoice":
        if code == "P":
            return cls.PARALLEL
        if code == "F":
            return cls.FUSION
        raise GenotypeError(f"unknown column choice {code!r} (expected 'P' or 'F')")


NUM_ATTENTION_OPS = len(AttentionOpKind)
NUM_SITES = 3


@dataclass(frozen=True)
class NetworkConfig:
    num_cells: int = 1
    channels: int = 8
    columns: int = 4
    multi_to_one: int = 3
    height: int = 32
    width: int = 32
    shared_attention_choice: bool = False

    def scales_after_cell(self, t: int) -> int:
        """Number of active scales after cell ``t`` (1-based)."""
        return t + 1

    def to_json_dict(self) -> dict:
        return {
            "T": self.num_cells,
            "C": self.channels,
            "M": self.columns,
            "N": self.multi_to_one,
            "H": self.height,
            "W": self.width,
        }

    @classmethod
    def from_json_dict(cls, d: dict, **extra) -> "NetworkConfig":
        try:
            return cls(
                num_cells=int(d["T"]),
                channels=int(d["C"]),
                columns=int(d["M"]),
                multi_to_one=int(d["N"]),
                height=int(d["H"]),
                width=int(d["W"]),
                **extra,
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise GenotypeError(f"bad config block: {exc}") from None


def validate_config(cfg: NetworkConfig) -> None:
    """Raise :class:`ConfigError` unless ``cfg`` describes a buildable network.

    ``num_cells == 0`` is accepted (stem and tail only).
    """
    if cfg.num_cells < 0:
        raise ConfigError(f"num_cells must be >= 0, got {cfg.num_cells}")
    if cfg.channels <= 0:
        raise ConfigError(f"channels must be positive, got {cfg.channels}")
    if cfg.channels % 2:
        raise ConfigError(f"channels must be even for the attention split, got {cfg.channels}")
    if cfg.columns <= 0:
        raise ConfigError(f"columns must be positive, got {cfg.columns}")
    if cfg.multi_to_one < 2:
        raise ConfigError(f"multi_to_one must be >= 2, got {cfg.multi_to_one}")
    step = 2 ** cfg.num_cells
    for name in ("height", "width"):
        v = getattr(cfg, name)
        if v <= 0 or v % step:
            raise ConfigError(f"{name}={v} is not a positive multiple of 2**num_cells={step}")


@dataclass(frozen=True)
class SearchConfig:
    lambda_arch: float = 0.01
    lambda_comp: float = 0.0
    iterations: int = 300
    lr_w_max: float = 2e-3
    lr_w_min: float = 1e-4
    momentum: float = 0.9
    weight_decay_w: float = 3e-4
    lr_arch: float = 3e-4
    weight_decay_arch: float = 1e-3
    warmup_frac: float = 0.1
    pairs_per_batch: int = 1
    patch: int = 0  # 0: use whole images
    flip: bool = True
    resize_instead_of_crop: bool = False
    checkpoint_every: int = 0
    rng_seed: int = 0

    def __post_init__(self):
        if self.lambda_arch < 0 or self.lambda_comp < 0:
            raise ConfigError("lambda_arch and lambda_comp must be non-negative")
        if self.iterations < 0:
            raise ConfigError("iterations must be >= 0")
        if not 0.0 <= self.warmup_frac < 1.0:
            raise ConfigError("warmup_frac must lie in [0, 1)")
        if self.pairs_per_batch < 1:
            raise ConfigError("pairs_per_batch must be >= 1")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    lr: float = 1e-3
    weight_decay: float = 3e-4
    internal_loss: bool = True
    pairs_per_batch: int = 1
    patch: int = 0
    flip: bool = True
    resize_instead_of_crop: bool = False
    rng_seed: int = 0


@dataclass(frozen=True)
class CellGenotype:
    columns: tuple[ColumnChoice, ...]
    attention: tuple[AttentionOpKind, ...]


@dataclass(frozen=True)
class Genotype:
    config: NetworkConfig
    cells: tuple[CellGenotype, ...] = field(default_factory=tuple)

    def __post_init__(self):
        if len(self.cells) != self.config.num_cells:
            raise GenotypeError(
                f"genotype has {len(self.cells)} cells, config says T={self.config.num_cells}"
            )
        for i, c in enumerate(self.cells):
            if len(c.columns) != self.config.columns:
                raise GenotypeError(
                    f"cell {i}: {len(c.columns)} column entries, expected M={self.config.columns}"
                )
            if len(c.attention) != NUM_SITES:
                raise GenotypeError(
                    f"cell {i}: {len(c.attention)} attention entries, expected {NUM_SITES}"
                )

    @classmethod
    def build(
        cls,
        config: NetworkConfig,
        columns: Sequence[Sequence],
        attention: Sequence[Sequence],
    ) -> "Genotype":
        cells = tuple(
            CellGenotype(
                tuple(ColumnChoice(c) if not isinstance(c, str) else ColumnChoice.from_code(c) for c in cols),
                tuple(AttentionOpKind(a) if not isinstance(a, str) else AttentionOpKind.from_name(a) for a in att),
            )
            for cols, att in zip(columns, attention)
        )
        return cls(config, cells)

    def to_dict(self) -> dict:
        return {
            "version": 1,
            "config": self.config.to_json_dict(),
            "cells": [
                {
                    "columns": [c.code for c in cell.columns],
                    "attention": [a.op_name for a in cell.attention],
                }
                for cell in self.cells
            ],
        }

    def to_json(self) -> bytes:
        return json.dumps(self.to_dict(), indent=2).encode("utf-8")

    @classmethod
    def from_dict(cls, doc: dict) -> "Genotype":
        if not isinstance(doc, dict):
            raise GenotypeError("genotype document must be a JSON object")
        if doc.get("version") != 1:
            raise GenotypeError(f"unsupported genotype version {doc.get('version')!r}")
        if "config" not in doc or "cells" not in doc:
            raise GenotypeError("genotype document needs 'config' and 'cells'")
        config = NetworkConfig.from_json_dict(doc["config"])
        cells = doc["cells"]
        if not isinstance(cells, list):
            raise GenotypeError("'cells' must be a list")
        parsed = []
        for i, cell in enumerate(cells):
            if not isinstance(cell, dict) or "columns" not in cell or "attention" not in cell:
                raise GenotypeError(f"cell {i} needs 'columns' and 'attention'")
            cols, att = cell["columns"], cell["attention"]
            if not isinstance(cols, list) or not isinstance(att, list):
                raise GenotypeError(f"cell {i}: 'columns' and 'attention' must be lists")
            parsed.append(
                CellGenotype(
                    tuple(ColumnChoice.from_code(c) for c in cols),
                    tuple(AttentionOpKind.from_name(a) for a in att),
                )
            )
        return cls(config, tuple(parsed))

    @classmethod
    def from_json(cls, data: bytes | str) -> "Genotype":
        try:
            doc = json.loads(data)
        except json.JSONDecodeError as exc:
            raise GenotypeError(f"malformed genotype JSON: {exc}") from None
        return cls.from_dict(doc)


def config_dict(obj) -> dict:
    return asdict(obj)


def check_pyramid(maps: Sequence) -> None:
    """Assert the feature-pyramid invariants on a list of (B, C, H, W) maps.

    Level ``d`` must have spatial size ``ceil(H0 / 2**d)``; all levels share
    one even channel count.
    """
    if not maps:
        raise ValueError("empty feature pyramid")
    b0, c0, h0, w0 = maps[0].shape
    if c0 % 2:
        raise ValueError(f"pyramid channel count {c0} is odd")
    for d, x in enumerate(maps):
        b, c, h, w = x.shape
        if b != b0 or c != c0:
            raise ValueError(f"level {d}: shape {tuple(x.shape)} disagrees with level 0 {tuple(maps[0].shape)}")
        eh, ew = -(-h0 // 2**d), -(-w0 // 2**d)
        if (h, w) != (eh, ew):
            raise ValueError(f"level {d}: spatial {(h, w)}, expected {(eh, ew)}")
