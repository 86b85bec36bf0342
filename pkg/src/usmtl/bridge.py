"""Token-to-pyramid bridge: lazy projection, multi-scale resize, top-down FPN, pooling."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .encoder import HookedActivations, tokens_to_map
from .nn import Conv2d, LazyConv1x1, Module
from .tensor import Tensor

NUM_LEVELS = 4


@dataclass
class BridgeConfig:
    width: int = 256

    def to_dict(self) -> dict:
        return asdict(self)


def level_sizes(h: int, w: int, n: int = NUM_LEVELS) -> list[tuple[int, int]]:
    """Spatial extents at relative scales 1, 1/2, 1/4, 1/8 using ceil division."""
    sizes = [(h, w)]
    for _ in range(n - 1):
        ph, pw = sizes[-1]
        sizes.append((-(-ph // 2), -(-pw // 2)))
    return sizes


@dataclass
class FeaturePyramid:
    levels: list[Tensor]  # P2, P3, P4, P5

    @property
    def width(self) -> int:
        return self.levels[0].shape[1]

    def __getitem__(self, i):
        return self.levels[i]

    def __len__(self):
        return len(self.levels)


class FeatureBridge(Module):
    """Owns the per-hook projections and the FPN; exposes both feature pathways."""

    def __init__(self, config: BridgeConfig, rng: np.random.Generator):
        d = config.width
        self.config = config
        self.projections = [LazyConv1x1(d, rng) for _ in range(NUM_LEVELS)]
        self.fpn = FPN(d, rng)

    def project(self, hooked: HookedActivations) -> list[Tensor]:
        h, w = hooked.grid
        return [project_lazy(proj, tokens_to_map(tok, h, w)) for proj, tok in zip(self.projections, hooked.levels)]

    def token_pyramid(self, hooked: HookedActivations) -> list[Tensor]:
        return build_token_pyramid(self.project(hooked))

    def fpn_pathway(self, hooked: HookedActivations) -> FeaturePyramid:
        return self.fpn(self.token_pyramid(hooked))

    def v1_pathway(self, hooked: HookedActivations) -> tuple[list[Tensor], Tensor]:
        return build_v1_pathway(self.token_pyramid(hooked))


def project_lazy(projection: LazyConv1x1, fmap: Tensor) -> Tensor:
    return projection(fmap)


def build_token_pyramid(maps: list[Tensor]) -> list[Tensor]:
    """Resize level i (shallow to deep) to relative scale 2**-i of the native lattice."""
    if len(maps) != NUM_LEVELS:
        raise ValueError(f"build_token_pyramid: expected {NUM_LEVELS} maps, got {len(maps)}")
    h, w = maps[0].shape[2:]
    return [T.bilinear_resize(m, size) for m, size in zip(maps, level_sizes(h, w))]


class FPN(Module):
    """Top-down pathway: lateral 1x1 convs, bilinear upsample-add, 3x3 smoothing + ReLU."""

    def __init__(self, width: int, rng: np.random.Generator):
        self.lateral = [Conv2d(width, width, 1, rng) for _ in range(NUM_LEVELS)]
        self.smooth = [Conv2d(width, width, 3, rng) for _ in range(NUM_LEVELS)]

    def __call__(self, levels: list[Tensor]) -> FeaturePyramid:
        return fpn_fuse(self, levels)


def fpn_fuse(fpn: FPN, levels: list[Tensor]) -> FeaturePyramid:
    inner = [None] * NUM_LEVELS
    inner[-1] = fpn.lateral[-1](levels[-1])
    for i in range(NUM_LEVELS - 2, -1, -1):
        top = T.bilinear_resize(inner[i + 1], levels[i].shape[2:])
        inner[i] = fpn.lateral[i](levels[i]) + top
    return FeaturePyramid([T.relu(fpn.smooth[i](inner[i])) for i in range(NUM_LEVELS)])


def pool_global(levels) -> Tensor:
    """Concatenate per-level spatial means: B x (4*D), ordered finest first."""
    levels = levels.levels if isinstance(levels, FeaturePyramid) else levels
    return T.concat([T.global_avg_pool(p) for p in levels], axis=1)


def build_v1_pathway(token_pyramid: list[Tensor]) -> tuple[list[Tensor], Tensor]:
    """Unfused pathway: the token pyramid itself plus its pooled embedding."""
    return list(token_pyramid), pool_global(token_pyramid)
