"""Task-routed multi-task model: encoder, bridge, and one shared head per family."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .bridge import BridgeConfig, FeatureBridge, pool_global
from .encoder import EncoderConfig, ToyEncoder
from .heads import (
    ClassificationHead,
    DetectionGridHead,
    Family,
    RegressionHeadV1,
    SegmentationHeadV1,
    TaskSpec,
)
from .losses import UncertaintyState
from .nn import Module, child_rng
from .tensor import Tensor

# Which feature pathway each family reads.
ROUTING = {
    Family.SEGMENTATION: "fpn_v1",
    Family.DETECTION: "fpn",
    Family.CLASSIFICATION: "global",
    Family.REGRESSION: "global_v1",
}


@dataclass
class HeadConfig:
    hidden: int = 1024
    det_tower_blocks: int = 2

    def to_dict(self):
        return asdict(self)


class UnifiedModel(Module):
    def __init__(self, tasks: list[TaskSpec], encoder_config: EncoderConfig, bridge_config: BridgeConfig,
                 head_config: HeadConfig | None = None, seed: int = 42):
        head_config = head_config or HeadConfig()
        self.tasks = {t.task_id: t for t in tasks}
        rng = np.random.default_rng(seed)
        self.encoder = ToyEncoder(encoder_config, child_rng(rng))
        self.bridge = FeatureBridge(bridge_config, child_rng(rng))
        d = bridge_config.width
        by_family = {f: [t for t in tasks if t.family is f] for f in Family}
        head_rng = child_rng(rng)
        self.seg_head = self.det_head = self.cls_head = self.reg_head = None
        if by_family[Family.SEGMENTATION]:
            c_max = max(t.num_classes for t in by_family[Family.SEGMENTATION])
            self.seg_head = SegmentationHeadV1(d, c_max, child_rng(head_rng))
        if by_family[Family.DETECTION]:
            self.det_head = DetectionGridHead(d, child_rng(head_rng), head_config.det_tower_blocks)
        if by_family[Family.CLASSIFICATION]:
            k_max = max(t.num_classes for t in by_family[Family.CLASSIFICATION])
            self.cls_head = ClassificationHead(k_max, child_rng(head_rng), head_config.hidden)
        if by_family[Family.REGRESSION]:
            m_max = max(t.num_landmarks for t in by_family[Family.REGRESSION])
            self.reg_head = RegressionHeadV1(m_max, child_rng(head_rng), head_config.hidden)
        self.uncertainty = UncertaintyState()

    def task(self, task_id: str) -> TaskSpec:
        try:
            return self.tasks[task_id]
        except KeyError:
            raise KeyError(f"unknown task {task_id!r}") from None

    def __call__(self, image, task_id: str):
        return self.forward(image, task_id)

    def forward(self, image, task_id: str):
        """Routed forward pass.

        Returns seg logits, ``(boxes, objectness)``, cls logits, or reg coords
        depending on the task family.
        """
        task = self.task(task_id)
        hooked = self.encoder(image)
        route = ROUTING[task.family]
        if route == "fpn_v1":
            levels, _ = self.bridge.v1_pathway(hooked)
            return self.seg_head(levels, task, image.shape[2:])
        if route == "fpn":
            return self.det_head(self.bridge.fpn_pathway(hooked))
        if route == "global":
            return self.cls_head(pool_global(self.bridge.fpn_pathway(hooked)), task)
        _, embedding = self.bridge.v1_pathway(hooked)
        return self.reg_head(embedding, task)

    def param_groups(self) -> dict[str, list[tuple[str, Tensor]]]:
        """Partition into 'backbone' (encoder) and 'heads' (everything else)."""
        groups = {"backbone": [], "heads": []}
        for name, p in self.named_parameters():
            groups["backbone" if name.startswith("encoder.") else "heads"].append((name, p))
        return groups


def decays(name: str, p: Tensor) -> bool:
    """Weight decay applies to weight matrices/kernels, not gains, biases or scalars."""
    leaf = name.rsplit(".", 1)[-1]
    return p.ndim >= 2 and leaf not in ("bias", "gain")
