"""Task specs and the four prediction heads.

Each head predicts the maximum arity over its family and slices the leading
channels for the task at hand.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .bridge import FeaturePyramid
from .nn import Conv2d, Dropout, LayerNorm, LazyLinear, Linear, Module
from .tensor import Tensor

DROPOUT = 0.1


class Family(str, enum.Enum):
    SEGMENTATION = "segmentation"
    DETECTION = "detection"
    CLASSIFICATION = "classification"
    REGRESSION = "regression"

    @classmethod
    def parse(cls, value) -> "Family":
        if isinstance(value, Family):
            return value
        key = str(value).lower()
        aliases = {"seg": "segmentation", "det": "detection", "cls": "classification", "reg": "regression"}
        return cls(aliases.get(key, key))


@dataclass
class TaskSpec:
    task_id: str
    family: Family
    num_classes: int | None = None
    num_landmarks: int | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.family = Family.parse(self.family)
        if self.family in (Family.SEGMENTATION, Family.CLASSIFICATION):
            if self.num_classes is None or self.num_classes < 2:
                raise ValueError(f"{self.task_id}: {self.family.value} needs num_classes >= 2, got {self.num_classes}")
        elif self.family is Family.REGRESSION:
            if self.num_landmarks is None or self.num_landmarks < 1:
                raise ValueError(f"{self.task_id}: regression needs num_landmarks >= 1, got {self.num_landmarks}")

    @property
    def arity(self) -> int:
        if self.family is Family.REGRESSION:
            return self.num_landmarks
        if self.family is Family.DETECTION:
            return 1
        return self.num_classes

    def to_dict(self) -> dict:
        d = {"task_id": self.task_id, "family": self.family.value}
        if self.num_classes is not None:
            d["num_classes"] = self.num_classes
        if self.num_landmarks is not None:
            d["num_landmarks"] = self.num_landmarks
        if self.meta:
            d["meta"] = self.meta
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TaskSpec":
        return cls(d["task_id"], d["family"], d.get("num_classes"), d.get("num_landmarks"), dict(d.get("meta", {})))


def _check_arity(task: TaskSpec, family: Family, limit: int, what: str) -> int:
    if task.family is not family:
        raise ValueError(f"{what}: task {task.task_id} is {task.family.value}, expected {family.value}")
    if task.arity > limit:
        raise ValueError(f"{what}: task {task.task_id} arity {task.arity} exceeds head maximum {limit}")
    return task.arity


# ---------------------------------------------------------------------------
# segmentation
# ---------------------------------------------------------------------------


class SegmentationHeadV1(Module):
    def __init__(self, width: int, max_classes: int, rng: np.random.Generator):
        self.max_classes = max_classes
        self.top = Conv2d(width, width, 1, rng)
        self.fuse = [Conv2d(2 * width, width, 3, rng) for _ in range(3)]
        self.dropout = Dropout(DROPOUT, rng)
        self.classifier = Conv2d(width, max_classes, 1, rng)

    def __call__(self, levels: list[Tensor], task: TaskSpec, out_size: tuple[int, int]) -> Tensor:
        return seg_head_v1(self, levels, task, out_size)


def seg_head_v1(head: SegmentationHeadV1, levels: list[Tensor], task: TaskSpec, out_size) -> Tensor:
    """Coarsest level, three upsample-concat-conv stages toward the finest, 1x1 classifier."""
    k = _check_arity(task, Family.SEGMENTATION, head.max_classes, "seg_head_v1")
    x = T.relu(head.top(levels[-1]))
    for conv, skip in zip(head.fuse, reversed(levels[:-1])):
        x = T.bilinear_resize(x, skip.shape[2:])
        x = T.relu(conv(T.concat([x, skip], axis=1)))
    logits = head.classifier(head.dropout(x))
    logits = T.slice_(logits, 1, 0, k)
    return T.bilinear_resize(logits, out_size)


# ---------------------------------------------------------------------------
# detection
# ---------------------------------------------------------------------------


def coord_channels(batch: int, h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    """Normalized grid-center coordinates, each B x 1 x h x w."""
    gx = (np.arange(w) + 0.5) / w
    gy = (np.arange(h) + 0.5) / h
    cx = np.broadcast_to(gx[None, None, None, :], (batch, 1, h, w)).copy()
    cy = np.broadcast_to(gy[None, None, :, None], (batch, 1, h, w)).copy()
    return cx, cy


class _ResBlock(Module):
    def __init__(self, width: int, rng):
        self.conv1 = Conv2d(width, width, 3, rng)
        self.conv2 = Conv2d(width, width, 3, rng)

    def __call__(self, x):
        return T.relu(x + self.conv2(T.relu(self.conv1(x))))


class DetectionGridHead(Module):
    def __init__(self, width: int, rng: np.random.Generator, tower_blocks: int = 2):
        self.stem = Conv2d(3 * width + 2, width, 3, rng)
        self.tower = [_ResBlock(width, rng) for _ in range(tower_blocks)]
        self.out = Conv2d(width, 5, 1, rng)

    def __call__(self, pyramid: FeaturePyramid) -> tuple[Tensor, Tensor]:
        return det_head(self, pyramid)


def order_box_channels(raw: Tensor) -> Tensor:
    """Sigmoid the 4 box channels, then min/max so x1<=x2 and y1<=y2."""
    s = T.sigmoid(raw)
    a, b, c, d = (T.slice_(s, 1, i, i + 1) for i in range(4))
    return T.concat([T.minimum(a, c), T.minimum(b, d), T.maximum(a, c), T.maximum(b, d)], axis=1)


def det_head(head: DetectionGridHead, pyramid: FeaturePyramid) -> tuple[Tensor, Tensor]:
    p2, p3, p4 = pyramid[0], pyramid[1], pyramid[2]
    b, _, h, w = p2.shape
    cx, cy = coord_channels(b, h, w)
    x = T.concat([p2, T.bilinear_resize(p3, (h, w)), T.bilinear_resize(p4, (h, w)), cx, cy], axis=1)
    x = T.relu(head.stem(x))
    for block in head.tower:
        x = block(x)
    raw = head.out(x)
    boxes = order_box_channels(T.slice_(raw, 1, 0, 4))
    objectness = T.slice_(raw, 1, 4, 5)
    return boxes, objectness


def det_infer(boxes, objectness) -> np.ndarray:
    """Box at the max-objectness cell per sample (first cell in row-major order on ties)."""
    bx = boxes.data if isinstance(boxes, Tensor) else np.asarray(boxes)
    ob = objectness.data if isinstance(objectness, Tensor) else np.asarray(objectness)
    b, _, h, w = ob.shape
    flat = ob.reshape(b, h * w)
    idx = np.argmax(flat, axis=1)
    u, v = idx // w, idx % w
    return np.stack([bx[i, :, u[i], v[i]] for i in range(b)])


# ---------------------------------------------------------------------------
# global heads
# ---------------------------------------------------------------------------


class GatedMLPBlock(Module):
    """x + (W2 gelu(W1 x)) * sigmoid(Wg x)."""

    def __init__(self, width: int, rng: np.random.Generator, expansion: int = 2):
        self.fc1 = Linear(width, expansion * width, rng)
        self.fc2 = Linear(expansion * width, width, rng)
        self.gate = Linear(width, width, rng)
        self.force_gate: float | None = None

    def __call__(self, x: Tensor) -> Tensor:
        update = self.fc2(T.gelu(self.fc1(x)))
        if self.force_gate is not None:
            g = np.full(x.shape, float(self.force_gate))
        else:
            g = T.sigmoid(self.gate(x))
        return x + T.mul(update, g)


class ClassificationHead(Module):
    def __init__(self, max_classes: int, rng: np.random.Generator, hidden: int = 1024, blocks: int = 2):
        self.max_classes = max_classes
        self.proj = LazyLinear(hidden, rng)
        self.norm = LayerNorm(hidden)
        self.blocks = [GatedMLPBlock(hidden, rng) for _ in range(blocks)]
        self.classifier = Linear(hidden, max_classes, rng)

    def __call__(self, embedding: Tensor, task: TaskSpec) -> Tensor:
        return cls_head(self, embedding, task)


def cls_head(head: ClassificationHead, embedding: Tensor, task: TaskSpec) -> Tensor:
    k = _check_arity(task, Family.CLASSIFICATION, head.max_classes, "cls_head")
    x = T.gelu(head.norm(head.proj(embedding)))
    for block in head.blocks:
        x = block(x)
    return T.slice_(head.classifier(x), 1, 0, k)


class RegressionHeadV1(Module):
    def __init__(self, max_landmarks: int, rng: np.random.Generator, hidden: int = 1024):
        self.max_landmarks = max_landmarks
        self.proj = LazyLinear(hidden, rng)
        self.norm = LayerNorm(hidden)
        self.dropout = Dropout(DROPOUT, rng)
        self.regressor = Linear(hidden, 2 * max_landmarks, rng)

    def __call__(self, embedding: Tensor, task: TaskSpec) -> Tensor:
        return reg_head(self, embedding, task)


def reg_head(head: RegressionHeadV1, embedding: Tensor, task: TaskSpec) -> Tensor:
    m = _check_arity(task, Family.REGRESSION, head.max_landmarks, "reg_head")
    x = head.dropout(T.gelu(head.norm(head.proj(embedding))))
    return T.sigmoid(T.slice_(head.regressor(x), 1, 0, 2 * m))
