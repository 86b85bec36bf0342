"""Training objectives for the four task families and uncertainty reweighting."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .heads import Family
from .nn import Module, parameter
from .tensor import Tensor

BACKGROUND_WEIGHT = 0.2
DICE_EPS = 1e-5
REG_BETA = 1.0
BOX_BETA = 0.05
RHO_MIN, RHO_MAX = 1.0, 50.0
_UNION_FLOOR = 1e-12


@dataclass
class LossConfig:
    lambda_box: float = 1.0
    lambda_iou: float = 1.0

    def to_dict(self):
        return {"lambda_box": self.lambda_box, "lambda_iou": self.lambda_iou}


@dataclass
class LossBreakdown:
    total: Tensor
    terms: dict[str, float] = field(default_factory=dict)
    task_id: str | None = None

    @property
    def value(self) -> float:
        return self.total.item()

    def to_dict(self) -> dict:
        return {"task_id": self.task_id, **self.terms, "total": self.value}


# ---------------------------------------------------------------------------
# segmentation / classification / regression
# ---------------------------------------------------------------------------


def one_hot(labels: np.ndarray, num_classes: int, axis: int = 1) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(f"class index out of range [0, {num_classes}): min {labels.min()}, max {labels.max()}")
    oh = (labels[..., None] == np.arange(num_classes)).astype(np.float64)
    return np.moveaxis(oh, -1, axis)


def seg_loss(logits: Tensor, mask, task_id: str | None = None) -> LossBreakdown:
    """Background-weighted cross-entropy plus soft Dice over foreground classes."""
    logits = T.as_tensor(logits)
    mask = np.asarray(mask)
    b, c, h, w = logits.shape
    if mask.shape != (b, h, w):
        raise ValueError(f"seg_loss: mask shape {mask.shape} does not match logits {logits.shape}")
    g = one_hot(mask, c)
    weights = np.ones(c)
    weights[0] = BACKGROUND_WEIGHT
    wg = g * weights[None, :, None, None]
    ce = T.mul(T.sum_(T.mul(T.log_softmax(logits, axis=1), wg)), -1.0 / (b * h * w))

    p = T.softmax(logits, axis=1)
    fg = T.slice_(p, 1, 1, c)
    g_fg = g[:, 1:]
    inter = T.sum_(T.mul(fg, g_fg), axis=(0, 2, 3))
    denom = T.sum_(fg, axis=(0, 2, 3)) + g_fg.sum(axis=(0, 2, 3))
    ratio = T.div(T.mul(inter, 2.0) + DICE_EPS, denom + DICE_EPS)
    dice = 1.0 - T.mul(T.sum_(ratio), 1.0 / max(1, c - 1))
    total = ce + dice
    return LossBreakdown(total, {"ce": ce.item(), "dice": dice.item()}, task_id)


def cls_loss(logits: Tensor, labels, task_id: str | None = None) -> LossBreakdown:
    logits = T.as_tensor(logits)
    labels = np.asarray(labels, dtype=int)
    b, k = logits.shape
    if labels.shape != (b,):
        raise ValueError(f"cls_loss: labels shape {labels.shape} does not match logits {logits.shape}")
    g = one_hot(labels, k, axis=1)
    ce = T.mul(T.sum_(T.mul(T.log_softmax(logits, axis=1), g)), -1.0 / b)
    return LossBreakdown(ce, {"ce": ce.item()}, task_id)


def reg_loss(pred: Tensor, target, task_id: str | None = None) -> LossBreakdown:
    pred = T.as_tensor(pred)
    target = np.asarray(target, dtype=np.float64)
    if target.shape != pred.shape:
        raise ValueError(f"reg_loss: target shape {target.shape} does not match prediction {pred.shape}")
    sl1 = T.mean(T.smooth_l1(pred - target, REG_BETA))
    return LossBreakdown(sl1, {"smooth_l1": sl1.item()}, task_id)


# ---------------------------------------------------------------------------
# detection
# ---------------------------------------------------------------------------


def grid_centers(h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    """(g_x, g_y) arrays of shape h x w: g_x = (v+0.5)/w, g_y = (u+0.5)/h."""
    gx = np.broadcast_to(((np.arange(w) + 0.5) / w)[None, :], (h, w))
    gy = np.broadcast_to(((np.arange(h) + 0.5) / h)[:, None], (h, w))
    return gx, gy


def positive_cells(gt_box, h: int, w: int) -> np.ndarray:
    """Boolean h x w mask of cells whose center lies in the box.

    An empty set is replaced by the single cell whose center is nearest the
    box center.
    """
    x1, y1, x2, y2 = (float(v) for v in gt_box)
    gx, gy = grid_centers(h, w)
    pos = (gx >= x1) & (gx <= x2) & (gy >= y1) & (gy <= y2)
    if not pos.any():
        d = (gx - 0.5 * (x1 + x2)) ** 2 + (gy - 0.5 * (y1 + y2)) ** 2
        pos = np.zeros((h, w), dtype=bool)
        pos[np.unravel_index(np.argmin(d), d.shape)] = True
    return pos


def objectness_ratio(n_pos: int, n_neg: int) -> float:
    return float(np.clip(n_neg / n_pos, RHO_MIN, RHO_MAX))


def iou(box_a, box_b) -> float:
    """IoU of two ordered (x1, y1, x2, y2) boxes; zero union gives 0."""
    ax1, ay1, ax2, ay2 = (float(v) for v in box_a)
    bx1, by1, bx2, by2 = (float(v) for v in box_b)
    iw = max(0.0, min(ax2, bx2) - max(ax1, bx1))
    ih = max(0.0, min(ay2, by2) - max(ay1, by1))
    inter = iw * ih
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    return inter / union if union > 0 else 0.0


def iou_tensor(pred: Tensor, gt: np.ndarray) -> Tensor:
    """Differentiable IoU between K x 4 predictions and one gt box."""
    x1, y1, x2, y2 = (T.slice_(pred, 1, i, i + 1) for i in range(4))
    gx1, gy1, gx2, gy2 = (float(v) for v in gt)
    iw = T.clamp(T.minimum(x2, gx2) - T.maximum(x1, gx1), lo=0.0)
    ih = T.clamp(T.minimum(y2, gy2) - T.maximum(y1, gy1), lo=0.0)
    inter = T.mul(iw, ih)
    area_p = T.mul(x2 - x1, y2 - y1)
    union = area_p + (gx2 - gx1) * (gy2 - gy1) - inter
    return T.reshape(T.div(inter, T.maximum(union, _UNION_FLOOR)), (pred.shape[0],))


def det_loss(boxes: Tensor, objectness: Tensor, gt_boxes, config: LossConfig | None = None,
             task_id: str | None = None) -> LossBreakdown:
    """Weighted objectness BCE over all cells plus SmoothL1 and (1 - IoU) over positives.

    ``boxes`` are already sigmoid-ordered, B x 4 x H x W; ``objectness`` holds raw
    logits B x 1 x H x W. The positive weight is computed per sample.
    """
    config = config or LossConfig()
    boxes, objectness = T.as_tensor(boxes), T.as_tensor(objectness)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    b, _, h, w = boxes.shape
    if gt_boxes.shape[0] != b:
        raise ValueError(f"det_loss: {gt_boxes.shape[0]} gt boxes for batch of {b}")
    obj_terms, box_terms, iou_terms = [], [], []
    for i in range(b):
        pos = positive_cells(gt_boxes[i], h, w)
        n_pos = int(pos.sum())
        rho = objectness_ratio(n_pos, h * w - n_pos)
        logit_i = T.reshape(T.slice_(objectness, 0, i, i + 1), (h, w))
        obj_terms.append(T.mean(T.bce_with_logits(logit_i, pos.astype(np.float64), rho)))

        cells = T.transpose(T.reshape(T.slice_(boxes, 0, i, i + 1), (4, h * w)), (1, 0))
        sel = np.flatnonzero(pos.reshape(-1))
        pred = _rows(cells, sel)
        box_terms.append(T.mean(T.smooth_l1(pred - gt_boxes[i][None, :], BOX_BETA)))
        iou_terms.append(T.mean(1.0 - iou_tensor(pred, gt_boxes[i])))
    l_obj = T.mul(_stack_sum(obj_terms), 1.0 / b)
    l_box = T.mul(_stack_sum(box_terms), 1.0 / b)
    l_iou = T.mul(_stack_sum(iou_terms), 1.0 / b)
    total = l_obj + T.mul(l_box, config.lambda_box) + T.mul(l_iou, config.lambda_iou)
    return LossBreakdown(total, {"obj": l_obj.item(), "box": l_box.item(), "iou": l_iou.item()}, task_id)


def _rows(x: Tensor, rows: np.ndarray) -> Tensor:
    """Select rows of a 2-d tensor via a constant 0/1 selection matrix."""
    sel = np.zeros((len(rows), x.shape[0]))
    sel[np.arange(len(rows)), rows] = 1.0
    return T.matmul(Tensor(sel), x)


def _stack_sum(terms: list[Tensor]) -> Tensor:
    out = terms[0]
    for t in terms[1:]:
        out = out + t
    return out


# ---------------------------------------------------------------------------
# uncertainty reweighting
# ---------------------------------------------------------------------------

REWEIGHTED_FAMILIES = (Family.CLASSIFICATION, Family.DETECTION)


class UncertaintyState(Module):
    """Learnable log-scale s_k per reweighted family; sigma_k = 1 + softplus(s_k)."""

    def __init__(self):
        self.s_classification = parameter(np.zeros(()))
        self.s_detection = parameter(np.zeros(()))

    def scalar(self, family) -> Tensor:
        family = Family.parse(family)
        if family not in REWEIGHTED_FAMILIES:
            raise ValueError(f"uncertainty reweighting applies to classification/detection only, got {family.value}")
        return getattr(self, f"s_{family.value}")

    def sigma(self, family) -> float:
        s = float(self.scalar(family).data)
        return 1.0 + math.log1p(math.exp(-abs(s))) + max(s, 0.0)


def uncertainty_reweight(raw: Tensor, family, state: UncertaintyState) -> Tensor:
    """raw / (2 sigma^2) + log(sigma)."""
    s = state.scalar(family)
    sigma = 1.0 + T.softplus(s)
    return T.div(T.as_tensor(raw), T.mul(T.mul(sigma, sigma), 2.0)) + T.log(sigma)
