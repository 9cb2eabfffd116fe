"""Model configuration, presets, weight initialization and the full forward pass.

Weight names follow one grammar::

    stem.{conv|norm}.{param}
    stage{i}.downsample.{conv|norm}.{param}          i = 2..4
    stage{i}.block{j}.{sublayer}.{param}             i = 1..4, j from 0
    head.{norm|fc}.{param}

where ``param`` is ``weight``/``bias`` for convolutions and linear maps and
``gamma``/``beta`` for norms (plus ``running_mean``/``running_var`` with batch
norm).  The name set and order are a pure function of the config.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import autograd as ag
from . import blocks as B
from .tensor import DimensionError

ACTIVATIONS = ("gelu", "hard_swish")
NORMS = ("layer", "batch")
POSITIONS = ("start", "end")


class ConfigError(ValueError):
    """Raised for a config that violates a structural invariant."""


@dataclass(frozen=True)
class StageConfig:
    conv_blocks: int
    sdta_blocks: int
    width: int
    kernel: int
    splits: int
    sdta_position: str = "end"

    @property
    def depth(self) -> int:
        return self.conv_blocks + self.sdta_blocks

    def block_kinds(self) -> list[str]:
        conv, sdta = ["conv"] * self.conv_blocks, ["sdta"] * self.sdta_blocks
        return sdta + conv if self.sdta_position == "start" else conv + sdta


@dataclass(frozen=True)
class ModelConfig:
    stages: tuple[StageConfig, ...]
    heads: int = 4
    expansion_ratio: int = 4
    activation: str = "gelu"
    norm: str = "layer"
    pe_stage: int | None = 2
    num_classes: int = 1000
    resolution: int = 256
    temperature: bool = False
    name: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(self.stages))

    @property
    def widths(self) -> tuple[int, ...]:
        return tuple(s.width for s in self.stages)

    @property
    def kernels(self) -> tuple[int, ...]:
        return tuple(s.kernel for s in self.stages)

    @property
    def conv_depths(self) -> tuple[int, ...]:
        return tuple(s.conv_blocks for s in self.stages)

    @property
    def sdta_depths(self) -> tuple[int, ...]:
        return tuple(s.sdta_blocks for s in self.stages)

    @property
    def splits(self) -> tuple[int, ...]:
        return tuple(s.splits for s in self.stages)

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    def with_layout(
        self,
        conv: tuple[int, ...] | None = None,
        sdta: tuple[int, ...] | None = None,
        position: str | None = None,
        kernels: tuple[int, ...] | None = None,
        splits: tuple[int, ...] | None = None,
        **changes,
    ) -> "ModelConfig":
        """Copy with per-stage block counts, placement, kernels or splits swapped.

        ``pe_stage`` follows the first stage holding an SDTA block when the
        current PE stage loses its SDTA blocks.
        """
        stages = []
        for i, s in enumerate(self.stages):
            stages.append(
                dataclasses.replace(
                    s,
                    conv_blocks=s.conv_blocks if conv is None else conv[i],
                    sdta_blocks=s.sdta_blocks if sdta is None else sdta[i],
                    sdta_position=s.sdta_position if position is None else position,
                    kernel=s.kernel if kernels is None else kernels[i],
                    splits=s.splits if splits is None else splits[i],
                )
            )
        cfg = dataclasses.replace(self, stages=tuple(stages), **changes)
        if "pe_stage" not in changes and cfg.pe_stage is not None:
            if cfg.stages[cfg.pe_stage - 1].sdta_blocks == 0:
                with_sdta = [i + 1 for i, s in enumerate(cfg.stages) if s.sdta_blocks]
                cfg = dataclasses.replace(cfg, pe_stage=with_sdta[0] if with_sdta else None)
        return cfg

    def validate(self) -> "ModelConfig":
        if len(self.stages) != 4:
            raise ConfigError(f"exactly 4 stages required, got {len(self.stages)}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"activation must be one of {ACTIVATIONS}, got {self.activation!r}")
        if self.norm not in NORMS:
            raise ConfigError(f"norm must be one of {NORMS}, got {self.norm!r}")
        if self.heads < 1 or self.expansion_ratio < 1 or self.num_classes < 1:
            raise ConfigError("heads, expansion_ratio and num_classes must be positive")
        if self.resolution % 32:
            raise ConfigError(f"resolution must be divisible by 32, got {self.resolution}")
        for i, s in enumerate(self.stages, start=1):
            if s.width < 1 or s.conv_blocks < 0 or s.sdta_blocks < 0:
                raise ConfigError(f"stage {i}: invalid width or block counts")
            if s.kernel < 1 or s.kernel % 2 == 0:
                raise ConfigError(f"stage {i}: kernel must be odd, got {s.kernel}")
            if s.sdta_position not in POSITIONS:
                raise ConfigError(f"stage {i}: sdta_position must be 'start' or 'end'")
            if s.sdta_blocks:
                if s.width % self.heads:
                    raise ConfigError(f"stage {i}: width {s.width} not divisible by {self.heads} heads")
                try:
                    B.split_widths(s.width, s.splits)
                except (ValueError, DimensionError) as e:
                    raise ConfigError(f"stage {i}: {e}") from None
        if self.pe_stage is not None:
            if not 1 <= self.pe_stage <= 4:
                raise ConfigError(f"pe_stage must be 1..4 or None, got {self.pe_stage}")
            if self.stages[self.pe_stage - 1].sdta_blocks == 0:
                raise ConfigError(f"pe_stage {self.pe_stage} has no SDTA block to attach to")
        return self


def _stages(widths, conv=(3, 2, 8, 2), sdta=(0, 1, 1, 1), kernels=(3, 5, 7, 9), splits=(2, 2, 3, 4)):
    return tuple(StageConfig(c, s, w, k, t) for c, s, w, k, t in zip(conv, sdta, widths, kernels, splits))


# B widths are not published: S's widths scaled by 1.85 and rounded to
# multiples of 8, giving 18.27M parameters against an 18.5M budget.
B_WIDTHS = (88, 176, 296, 560)

# The shared (3, 2, 8, 2) conv layout puts XXS at 1.79M params / 362M MAdds,
# ~38% over its 1.3M / 261M budget; this shallower stack gives 1.32M / 256M.
XXS_CONV_DEPTHS = (2, 1, 5, 1)

PRESET_WIDTHS = {
    "XXS": (24, 48, 88, 168),
    "XS": (32, 64, 100, 192),
    "S": (48, 96, 160, 304),
    "B": B_WIDTHS,
}


def preset(name: str) -> ModelConfig:
    """Layout of a named variant: XXS, XS, S or B."""
    key = name.upper()
    if key not in PRESET_WIDTHS:
        raise ConfigError(f"unknown variant {name!r}; valid presets: {', '.join(PRESET_WIDTHS)}")
    conv = XXS_CONV_DEPTHS if key == "XXS" else (3, 2, 8, 2)
    return ModelConfig(_stages(PRESET_WIDTHS[key], conv=conv), name=key).validate()


def tiny(num_classes: int = 10, resolution: int = 64, **changes) -> ModelConfig:
    """Desk-scale config used for gradient checks and the toy training run."""
    cfg = ModelConfig(
        _stages((8, 16, 16, 32), conv=(1, 1, 1, 1)),
        num_classes=num_classes,
        resolution=resolution,
        name="tiny",
    )
    return cfg.replace(**changes).validate()


ABLATIONS: dict[str, dict] = {
    # hybrid layouts
    "sdta_last_stage_only": dict(conv=(3, 3, 9, 0), sdta=(0, 0, 0, 3)),
    "sdta_last_two_stages": dict(conv=(3, 3, 0, 0), sdta=(0, 0, 9, 3)),
    "hybrid": dict(conv=(3, 2, 8, 2), sdta=(0, 1, 1, 1)),
    # SDTA stage coverage
    "no_sdta": dict(conv=(3, 3, 9, 3), sdta=(0, 0, 0, 0)),
    "sdta_stage4": dict(conv=(3, 3, 9, 2), sdta=(0, 0, 0, 1)),
    "sdta_stages34": dict(conv=(3, 3, 8, 2), sdta=(0, 0, 1, 1)),
    "sdta_stages234": dict(conv=(3, 2, 8, 2), sdta=(0, 1, 1, 1)),
    "sdta_all_stages": dict(conv=(2, 2, 8, 2), sdta=(1, 1, 1, 1)),
    # placement
    "sdta_at_start": dict(position="start"),
    "sdta_at_end": dict(position="end"),
    # component removals
    "no_sdta_fixed_kernels": dict(conv=(3, 3, 9, 3), sdta=(0, 0, 0, 0), kernels=(7, 7, 7, 7)),
    "no_adaptive_branching": dict(splits=(2, 2, 2, 2)),
    "no_adaptive_branching_no_pe": dict(splits=(2, 2, 2, 2), pe_stage=None),
    # activation / normalization
    "hardswish_batchnorm": dict(activation="hard_swish", norm="batch"),
}


def ablation(name: str, base: ModelConfig | None = None) -> ModelConfig:
    """Apply a named ablation layout to ``base`` (default: the S preset)."""
    if name not in ABLATIONS:
        raise ConfigError(f"unknown ablation {name!r}; known: {', '.join(ABLATIONS)}")
    base = preset("S") if base is None else base
    cfg = base.with_layout(**ABLATIONS[name])
    return cfg.replace(name=f"{base.name}:{name}").validate()


# --- weights -----------------------------------------------------------------


def block_prefixes(config: ModelConfig) -> list[tuple[str, int, str]]:
    """``(prefix, stage, kind)`` for every encoder block in execution order."""
    out = []
    for i, s in enumerate(config.stages, start=1):
        for j, kind in enumerate(s.block_kinds()):
            out.append((f"stage{i}.block{j}.", i, kind))
    return out


def pe_block(config: ModelConfig) -> str | None:
    """Prefix of the SDTA block that receives the positional encoding."""
    if config.pe_stage is None:
        return None
    for prefix, stage, kind in block_prefixes(config):
        if stage == config.pe_stage and kind == "sdta":
            return prefix
    return None


def weight_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Canonical ordered map from weight name to shape."""
    config.validate()
    norm, r = config.norm, config.expansion_ratio
    shapes: dict[str, tuple] = {}

    def put(prefix, local):
        shapes.update({prefix + k: v for k, v in local.items()})

    put("stem.", B.stem_shapes(config.widths[0], norm))
    pe_at = pe_block(config)
    blocks = block_prefixes(config)
    for i, s in enumerate(config.stages, start=1):
        if i > 1:
            put(f"stage{i}.downsample.", B.downsample_shapes(config.widths[i - 2], s.width, norm))
        for prefix, stage, kind in blocks:
            if stage != i:
                continue
            if kind == "conv":
                put(prefix, B.conv_encoder_shapes(s.width, s.kernel, r, norm))
            else:
                put(prefix, B.sdta_encoder_shapes(
                    s.width, s.splits, config.heads, r, norm, pe=prefix == pe_at,
                    temperature=config.temperature,
                ))
    c4 = config.widths[-1]
    shapes.update({"head.norm.gamma": (c4,), "head.norm.beta": (c4,)})
    if norm == "batch":
        shapes.update({"head.norm.running_mean": (c4,), "head.norm.running_var": (c4,)})
    shapes.update({"head.fc.weight": (c4, config.num_classes), "head.fc.bias": (config.num_classes,)})
    return shapes


_ONES = ("gamma", "running_var", "temperature")
_ZEROS = ("bias", "beta", "running_mean")


def is_buffer(name: str) -> bool:
    """Running statistics are stored with the weights but never trained."""
    return name.endswith(("running_mean", "running_var"))


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02, bound: float = 2.0) -> np.ndarray:
    """Normal(0, std) samples redrawn until strictly inside ``+-bound*std``."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) >= bound
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) >= bound
    return out * std


def build_model(config: ModelConfig, seed: int = 0, dtype=np.float32) -> dict[str, np.ndarray]:
    """Deterministically initialized weights for ``config``."""
    rng = np.random.default_rng(seed)
    weights = {}
    for name, shape in weight_shapes(config).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf in _ONES:
            w = np.ones(shape)
        elif leaf in _ZEROS:
            w = np.zeros(shape)
        else:
            w = trunc_normal(rng, shape)
        weights[name] = w.astype(dtype)
    return weights


def check_weights(config: ModelConfig, weights: Mapping[str, np.ndarray]) -> None:
    expected = weight_shapes(config)
    if set(expected) != set(weights):
        missing = sorted(set(expected) - set(weights))[:5]
        extra = sorted(set(weights) - set(expected))[:5]
        raise KeyError(f"weight names do not match config: missing {missing}, unexpected {extra}")
    for name, shape in expected.items():
        if tuple(ag.value(weights[name]).shape) != shape:
            raise DimensionError(f"{name}: shape {ag.value(weights[name]).shape} != {shape}")


# --- forward -----------------------------------------------------------------


def block_options(config: ModelConfig, stats: dict | None = None) -> B.BlockOptions:
    return B.BlockOptions(
        norm=config.norm, act=config.activation, temperature=config.temperature, stats=stats
    )


def model_forward(
    config: ModelConfig,
    weights: Mapping,
    x,
    *,
    stats: dict | None = None,
    features: list | None = None,
):
    """Logits ``(n, num_classes)`` for images ``x`` of shape ``(n, H, W, 3)``.

    ``H`` and ``W`` must be divisible by 32 but need not equal
    ``config.resolution``.  Stage outputs are appended to ``features`` when
    given.  Passing a ``stats`` dict switches batch norms to batch statistics
    (training mode) and collects them.
    """
    n, h, w, c = ag.value(x).shape
    if h % 32 or w % 32:
        raise DimensionError(f"input extents must be divisible by 32, got {h}x{w}")
    if c != 3:
        raise DimensionError(f"expected 3 input channels, got {c}")
    opts = block_options(config, stats)
    y = B.stem_forward(x, weights, "stem.", opts)
    blocks = block_prefixes(config)
    for i, s in enumerate(config.stages, start=1):
        if i > 1:
            y = B.downsample_forward(y, weights, f"stage{i}.downsample.", opts)
        for prefix, stage, kind in blocks:
            if stage != i:
                continue
            if kind == "conv":
                y = B.conv_encoder_forward(y, weights, prefix, opts)
            else:
                y = B.sdta_encoder_forward(y, weights, prefix, config.heads, s.splits, opts)
        if features is not None:
            features.append(ag.value(y))
    y = ag.global_avg_pool(y)
    y = B.norm_forward(y, weights, "head.norm", opts)
    return ag.linear(y, weights["head.fc.weight"], weights["head.fc.bias"])


def stage_shapes(config: ModelConfig, resolution: int | None = None) -> list[tuple[int, int, int]]:
    """Expected ``(H, W, C)`` of each stage output."""
    r = config.resolution if resolution is None else resolution
    return [(r // f, r // f, c) for f, c in zip((4, 8, 16, 32), config.widths)]
