"""Per-backbone extraction points.

Block semantics differ across architectures, so every supported backbone gets
one registry entry naming: how to build the model, which modules produce the
per-block feature maps (ordered from shallow to deep; block ids count back
from the end, -1 = deepest), and how token sequences map to (h, w, c) grids
for transformer families. This file is the single source of truth for where
features are read from.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import torch
from torch import nn
from torchvision import models


class RegistryError(ValueError):
    pass


@dataclass
class BackboneEntry:
    name: str
    family: str  # cnn | vit
    build: Callable[[str | None], nn.Module]
    blocks: Callable[[nn.Module], list[nn.Module]]  # shallow -> deep
    normalize_mean: tuple[float, float, float] = (0.485, 0.456, 0.406)
    normalize_std: tuple[float, float, float] = (0.229, 0.224, 0.225)


def _load_weights(model: nn.Module, weights: str | None) -> nn.Module:
    if weights in (None, "none"):
        return model
    state = torch.load(weights, map_location="cpu", weights_only=True)
    if isinstance(state, dict) and "state_dict" in state:
        state = state["state_dict"]
    model.load_state_dict(state)
    return model


def _build_resnet(ctor, weights_enum):
    def build(weights: str | None) -> nn.Module:
        if weights == "default":
            return ctor(weights=weights_enum)
        return _load_weights(ctor(weights=None), weights)
    return build


def _resnet_blocks(model: nn.Module) -> list[nn.Module]:
    return [model.layer1, model.layer2, model.layer3, model.layer4]


def _build_vit(ctor, weights_enum):
    def build(weights: str | None) -> nn.Module:
        if weights == "default":
            return ctor(weights=weights_enum)
        return _load_weights(ctor(weights=None), weights)
    return build


def _vit_blocks(model: nn.Module) -> list[nn.Module]:
    return list(model.encoder.layers)


REGISTRY: dict[str, BackboneEntry] = {
    "resnet18": BackboneEntry(
        name="resnet18", family="cnn",
        build=_build_resnet(models.resnet18, "IMAGENET1K_V1"),
        blocks=_resnet_blocks),
    "resnet34": BackboneEntry(
        name="resnet34", family="cnn",
        build=_build_resnet(models.resnet34, "IMAGENET1K_V1"),
        blocks=_resnet_blocks),
    "resnet50": BackboneEntry(
        name="resnet50", family="cnn",
        build=_build_resnet(models.resnet50, "IMAGENET1K_V2"),
        blocks=_resnet_blocks),
    "vit_b_16": BackboneEntry(
        name="vit_b_16", family="vit",
        build=_build_vit(models.vit_b_16, "IMAGENET1K_V1"),
        blocks=_vit_blocks),
}


def get_entry(name: str) -> BackboneEntry:
    try:
        return REGISTRY[name]
    except KeyError:
        raise RegistryError(
            f"unknown backbone {name!r}; known: {sorted(REGISTRY)}") from None


def tokens_to_grid(tokens: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Split a (1, 1+P, C) token sequence into ((h, w, c) grid, cls row)."""
    if tokens.dim() != 3 or tokens.shape[0] != 1:
        raise RegistryError(f"expected (1, tokens, c), got {tuple(tokens.shape)}")
    cls = tokens[0, 0]
    grid_tokens = tokens[0, 1:]
    side = int(math.isqrt(grid_tokens.shape[0]))
    if side * side != grid_tokens.shape[0]:
        raise RegistryError(
            f"token count {grid_tokens.shape[0]} is not a square grid")
    return grid_tokens.reshape(side, side, -1), cls
