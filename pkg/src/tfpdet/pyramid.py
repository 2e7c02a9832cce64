"""Temporal encoder and the multi-level temporal feature pyramid.

The encoder maps per-frame descriptors [D_in, L] to a stride-8 feature
sequence [D, L/8] through three conv+relu+pool blocks.  The pyramid keeps
that sequence as level 0 and derives coarser levels by cascaded
down-sampling, either parameter-free (max pooling) or learned (strided
convolution).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .errors import ConfigError

ENCODER_STRIDE = 8

# Initialization follows the split between the backbone stand-in and the
# detection-specific layers: the encoder replaces a pretrained feature
# extractor and gets fan-in-scaled weights, while every head/pyramid layer
# is drawn from N(0, 0.01^2) with biases at 0.1.
HEAD_WEIGHT_STD = 0.01
HEAD_BIAS = 0.1


@dataclass(frozen=True)
class EncoderConfig:
    input_dim: int
    hidden_dim: int = 64
    num_blocks: int = 3

    def __post_init__(self):
        if self.input_dim < 1 or self.hidden_dim < 1:
            raise ConfigError("encoder dims must be positive")
        if 2 ** self.num_blocks != ENCODER_STRIDE:
            raise ConfigError(
                f"encoder must have total stride {ENCODER_STRIDE}; {self.num_blocks} blocks give {2 ** self.num_blocks}"
            )


@dataclass(frozen=True)
class PyramidConfig:
    variant: str = "conv"
    num_levels: int = 3
    strides: tuple = (8, 16, 32)

    def __post_init__(self):
        if self.variant not in ("max", "conv"):
            raise ConfigError(f"pyramid variant must be 'max' or 'conv', got {self.variant!r}")
        if self.num_levels < 1 or len(self.strides) != self.num_levels:
            raise ConfigError(f"need one stride per level, got {self.strides} for {self.num_levels} levels")
        if self.strides[0] != ENCODER_STRIDE:
            raise ConfigError(f"level-0 stride must be {ENCODER_STRIDE}, got {self.strides[0]}")
        for a, b in zip(self.strides, self.strides[1:]):
            if b != 2 * a:
                raise ConfigError(f"strides must double per level, got {self.strides}")


@dataclass
class PyramidFeatures:
    """Per-level feature sequences [D, L_buf/stride_k] plus their strides."""

    levels: list
    strides: tuple


def init_encoder_params(cfg: EncoderConfig, rng: np.random.Generator) -> dict:
    params = {}
    c_in = cfg.input_dim
    for i in range(cfg.num_blocks):
        std = math.sqrt(2.0 / (c_in * 3))
        params[f"encoder.block{i}.w"] = nc.Parameter.create(
            f"encoder.block{i}.w", (cfg.hidden_dim, c_in, 3), ("gaussian", 0.0, std), rng
        )
        params[f"encoder.block{i}.b"] = nc.Parameter.create(
            f"encoder.block{i}.b", (cfg.hidden_dim,), ("constant", HEAD_BIAS), rng
        )
        c_in = cfg.hidden_dim
    return params


def init_pyramid_params(pcfg: PyramidConfig, hidden_dim: int, rng: np.random.Generator) -> dict:
    params = {}
    if pcfg.variant == "conv":
        for k in range(1, pcfg.num_levels):
            params[f"pyramid.down{k}.w"] = nc.Parameter.create(
                f"pyramid.down{k}.w", (hidden_dim, hidden_dim, 3), ("gaussian", 0.0, HEAD_WEIGHT_STD), rng
            )
            params[f"pyramid.down{k}.b"] = nc.Parameter.create(
                f"pyramid.down{k}.b", (hidden_dim,), ("constant", HEAD_BIAS), rng
            )
    return params


def encode(buffer_features, cfg: EncoderConfig, params: dict) -> nc.Tensor:
    """Run the encoder blocks: conv(k=3, pad=1) + relu + maxpool(k=2, s=2)."""
    x = buffer_features if isinstance(buffer_features, nc.Tensor) else nc.Tensor(buffer_features)
    if x.shape[0] != cfg.input_dim:
        raise ConfigError(f"encoder expects {cfg.input_dim} input channels, got {x.shape[0]}")
    if x.shape[1] % ENCODER_STRIDE != 0:
        raise ConfigError(f"buffer length {x.shape[1]} not divisible by encoder stride {ENCODER_STRIDE}")
    for i in range(cfg.num_blocks):
        x = nc.relu(nc.temporal_conv(x, params[f"encoder.block{i}.w"], params[f"encoder.block{i}.b"], stride=1, padding=1))
        x = nc.temporal_maxpool(x, k=2, stride=2)
    return x


def build_pyramid(base, cfg: PyramidConfig, params: dict) -> PyramidFeatures:
    """Cascade down-sampling from the stride-8 base map.

    MAX uses temporal_maxpool(k=2, s=2); CONV uses temporal_conv(k=3, s=2,
    pad=1) followed by relu, halving the length either way.
    """
    base = base if isinstance(base, nc.Tensor) else nc.Tensor(base)
    if cfg.num_levels > 1 and base.shape[1] % (2 ** (cfg.num_levels - 1)) != 0:
        raise ConfigError(
            f"base length {base.shape[1]} not divisible by {2 ** (cfg.num_levels - 1)} for {cfg.num_levels} levels"
        )
    levels = [base]
    for k in range(1, cfg.num_levels):
        prev = levels[-1]
        if cfg.variant == "max":
            levels.append(nc.temporal_maxpool(prev, k=2, stride=2))
        else:
            levels.append(
                nc.relu(nc.temporal_conv(prev, params[f"pyramid.down{k}.w"], params[f"pyramid.down{k}.b"], stride=2, padding=1))
            )
    return PyramidFeatures(levels=levels, strides=cfg.strides)
