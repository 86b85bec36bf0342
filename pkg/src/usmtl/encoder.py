"""Patch transformer encoder with forward hooks at four depths."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .nn import LayerNorm, Linear, Module, parameter
from .tensor import Tensor

INIT_STD = 0.02


@dataclass
class EncoderConfig:
    image_size: int = 64
    patch_size: int = 8
    width: int = 64
    depth: int = 8
    heads: int = 4
    hook_depths: tuple[int, ...] = (1, 3, 5, 7)

    def __post_init__(self):
        self.hook_depths = tuple(int(d) for d in self.hook_depths)
        if self.image_size % self.patch_size:
            raise ValueError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if len(self.hook_depths) != 4:
            raise ValueError(f"exactly 4 hook depths required, got {self.hook_depths}")
        if any(b <= a for a, b in zip(self.hook_depths, self.hook_depths[1:])):
            raise ValueError(f"hook depths must be strictly increasing: {self.hook_depths}")
        if self.hook_depths[0] < 0 or self.hook_depths[-1] >= self.depth:
            raise ValueError(f"hook depths {self.hook_depths} out of range for depth {self.depth}")
        if self.width % self.heads:
            raise ValueError(f"width {self.width} not divisible by heads {self.heads}")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_tokens(self) -> int:
        return self.grid * self.grid

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hook_depths"] = list(self.hook_depths)
        return d


@dataclass
class HookedActivations:
    """Token tensors B x N x C captured at each hook, shallow to deep."""

    levels: list[Tensor] = field(default_factory=list)
    grid: tuple[int, int] = (0, 0)

    def __len__(self):
        return len(self.levels)

    def __getitem__(self, i):
        return self.levels[i]


class Attention(Module):
    def __init__(self, width: int, heads: int, rng: np.random.Generator):
        self.qkv = Linear(width, 3 * width, rng, std=INIT_STD)
        self.proj = Linear(width, width, rng, std=INIT_STD)
        self._heads = heads

    def __call__(self, x: Tensor) -> Tensor:
        b, n, c = x.shape
        h = self._heads
        dh = c // h
        qkv = self.qkv(x).reshape(b, n, 3, h, dh).transpose(2, 0, 3, 1, 4)  # 3, B, h, N, dh
        q = T.reshape(T.slice_(qkv, 0, 0, 1), (b, h, n, dh))
        k = T.reshape(T.slice_(qkv, 0, 1, 2), (b, h, n, dh))
        v = T.reshape(T.slice_(qkv, 0, 2, 3), (b, h, n, dh))
        scores = T.mul(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
        attn = T.softmax(scores, axis=-1)
        out = T.matmul(attn, v).transpose(0, 2, 1, 3).reshape(b, n, c)
        return self.proj(out)


class Block(Module):
    """Pre-norm attention and MLP, both residual."""

    def __init__(self, width: int, heads: int, rng: np.random.Generator):
        self.norm1 = LayerNorm(width)
        self.attn = Attention(width, heads, rng)
        self.norm2 = LayerNorm(width)
        self.fc1 = Linear(width, 4 * width, rng, std=INIT_STD)
        self.fc2 = Linear(4 * width, width, rng, std=INIT_STD)

    def __call__(self, x: Tensor) -> Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.fc2(T.gelu(self.fc1(self.norm2(x))))


class ToyEncoder(Module):
    def __init__(self, config: EncoderConfig, rng: np.random.Generator):
        self.config = config
        p = config.patch_size
        self.patch_embed = Linear(3 * p * p, config.width, rng, std=INIT_STD)
        self.pos_embed = parameter(rng.normal(0.0, INIT_STD, size=(config.num_tokens, config.width)))
        self.blocks = [Block(config.width, config.heads, rng) for _ in range(config.depth)]

    def patchify(self, image: Tensor) -> Tensor:
        b = image.shape[0]
        p, g = self.config.patch_size, self.config.grid
        x = image.reshape(b, 3, g, p, g, p).transpose(0, 2, 4, 1, 3, 5)
        return x.reshape(b, g * g, 3 * p * p)

    def __call__(self, image) -> HookedActivations:
        return encode(self, image)


def encode(encoder: ToyEncoder, image) -> HookedActivations:
    """Run the encoder and capture block outputs at the configured hook depths."""
    image = T.as_tensor(image)
    cfg = encoder.config
    if image.ndim != 4 or image.shape[1] != 3:
        raise ValueError(f"encode: expected B x 3 x H x W, got {image.shape}")
    if image.shape[2:] != (cfg.image_size, cfg.image_size):
        raise ValueError(f"encode: image is {image.shape[2]}x{image.shape[3]}, encoder expects {cfg.image_size}x{cfg.image_size}")
    x = encoder.patch_embed(encoder.patchify(image)) + encoder.pos_embed
    wanted = set(cfg.hook_depths)
    captured = []
    for i, block in enumerate(encoder.blocks[: cfg.hook_depths[-1] + 1]):
        x = block(x)
        if i in wanted:
            captured.append(x)
    return HookedActivations(captured, (cfg.grid, cfg.grid))


def tokens_to_map(tokens, h: int, w: int) -> Tensor:
    """B x N x C tokens to B x C x h x w; token n lands at (n // w, n % w)."""
    tokens = T.as_tensor(tokens)
    if tokens.ndim != 3:
        raise ValueError(f"tokens_to_map: expected B x N x C, got {tokens.shape}")
    b, n, c = tokens.shape
    if n != h * w:
        raise ValueError(f"tokens_to_map: N={n} does not equal h*w={h}*{w}")
    return tokens.transpose(0, 2, 1).reshape(b, c, h, w)


def map_to_tokens(fmap) -> Tensor:
    fmap = T.as_tensor(fmap)
    b, c, h, w = fmap.shape
    return fmap.reshape(b, c, h * w).transpose(0, 2, 1)
