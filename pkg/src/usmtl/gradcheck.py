"""Central finite-difference verification of every differentiable path."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import tensor as T
from .bridge import BridgeConfig, pool_global
from .encoder import EncoderConfig
from .heads import Family, TaskSpec
from .losses import LossConfig, UncertaintyState, cls_loss, det_loss, reg_loss, seg_loss, uncertainty_reweight
from .model import HeadConfig, UnifiedModel
from .tensor import Tensor

STEP = 1e-5
TOLERANCE = 1e-4


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    return float(np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric)))) if analytic.size else 0.0


def check_function(fn: Callable[[], Tensor], leaves: list[Tensor], step: float = STEP,
                   max_coords: int | None = None, rng: np.random.Generator | None = None) -> float:
    """Max relative error between backward() and central differences of scalar ``fn()``.

    With ``max_coords`` only that many randomly chosen coordinates per leaf are probed.
    """
    for leaf in leaves:
        leaf.grad = None
    out = fn()
    T.backward(out)
    worst = 0.0
    for leaf in leaves:
        analytic = leaf.grad.copy() if leaf.grad is not None else np.zeros_like(leaf.data)
        flat = leaf.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = (rng or np.random.default_rng(0)).choice(flat.size, max_coords, replace=False)
        numeric = np.empty(len(coords))
        for j, i in enumerate(coords):
            orig = flat[i]
            flat[i] = orig + step
            fp = fn().item()
            flat[i] = orig - step
            fm = fn().item()
            flat[i] = orig
            numeric[j] = (fp - fm) / (2 * step)
        worst = max(worst, rel_error(analytic.reshape(-1)[coords], numeric))
    return worst


def _away_from(rng, shape, kinks=(0.0,), margin=1e-2, scale=1.0):
    x = rng.normal(0.0, scale, size=shape)
    for k in kinks:
        near = np.abs(x - k) < margin
        x[near] += np.sign(x[near] - k + 1e-300) * 2 * margin
    return x


def _weighted(out: Tensor, weights: np.ndarray) -> Tensor:
    return T.sum_(T.mul(out, weights))


def _leaf(a) -> Tensor:
    return Tensor(a, requires_grad=True)


# Each case: rng -> (list of leaves, callable building the output tensor).
def _op_cases() -> dict[str, Callable]:
    cases: dict[str, Callable] = {}

    def elementwise(fn, kinks=(), positive=False):
        def make(rng):
            n = int(rng.integers(2, 5))
            x = np.abs(rng.normal(size=n)) + 0.2 if positive else _away_from(rng, (n,), kinks or (1e9,))
            a = _leaf(x)
            return [a], lambda: fn(a)
        return make

    def binary(fn, kinks=False, positive_b=False):
        def make(rng):
            n = int(rng.integers(2, 5))
            a = _leaf(rng.normal(size=n))
            bv = rng.normal(size=n)
            if kinks:
                bv = a.data + _away_from(rng, (n,), (0.0,), 0.05)
            if positive_b:
                bv = np.abs(bv) + 0.5
            b = _leaf(bv)
            return [a, b], lambda: fn(a, b)
        return make

    cases["add"] = binary(T.add)
    cases["sub"] = binary(T.sub)
    cases["mul"] = binary(T.mul)
    cases["mul_scalar"] = elementwise(lambda a: T.mul(a, 1.7))
    cases["div"] = binary(T.div, positive_b=True)
    cases["maximum"] = binary(T.maximum, kinks=True)
    cases["minimum"] = binary(T.minimum, kinks=True)
    cases["relu"] = elementwise(T.relu, kinks=(0.0,))
    cases["gelu"] = elementwise(T.gelu)
    cases["sigmoid"] = elementwise(T.sigmoid)
    cases["softplus"] = elementwise(T.softplus)
    cases["exp"] = elementwise(T.exp)
    cases["log"] = elementwise(T.log, positive=True)
    cases["clamp"] = elementwise(lambda a: T.clamp(a, -0.5, 0.5), kinks=(-0.5, 0.5))
    cases["smooth_l1_b1"] = elementwise(lambda a: T.smooth_l1(a, 1.0), kinks=(-1.0, 1.0))
    cases["smooth_l1_b005"] = elementwise(lambda a: T.smooth_l1(a, 0.05), kinks=(-0.05, 0.05))

    def bce(rng):
        n = int(rng.integers(2, 5))
        a = _leaf(rng.normal(size=n))
        y = (rng.random(n) < 0.5).astype(float)
        w = float(rng.uniform(1, 50))
        return [a], lambda: T.bce_with_logits(a, y, w)
    cases["bce_with_logits"] = bce

    def softmax_last(rng):
        a = _leaf(rng.normal(size=(2, int(rng.integers(2, 5)))))
        return [a], lambda: T.softmax(a, -1)
    cases["softmax_last"] = softmax_last

    def softmax_channel(rng):
        a = _leaf(rng.normal(size=(1, 3, 2, 2)))
        return [a], lambda: T.softmax(a, 1)
    cases["softmax_channel"] = softmax_channel

    def log_softmax(rng):
        a = _leaf(rng.normal(size=(2, 3)))
        return [a], lambda: T.log_softmax(a, 1)
    cases["log_softmax"] = log_softmax

    def matmul(rng):
        a = _leaf(rng.normal(size=(2, 3)))
        b = _leaf(rng.normal(size=(3, 2)))
        return [a, b], lambda: T.matmul(a, b)
    cases["matmul"] = matmul

    def bmm(rng):
        a = _leaf(rng.normal(size=(2, 2, 3)))
        b = _leaf(rng.normal(size=(2, 3, 2)))
        return [a, b], lambda: T.matmul(a, b)
    cases["matmul_batched"] = bmm

    def linear(rng):
        x = _leaf(rng.normal(size=(2, 3)))
        w = _leaf(rng.normal(size=(2, 3)))
        b = _leaf(rng.normal(size=2))
        return [x, w, b], lambda: T.linear(x, w, b)
    cases["linear"] = linear

    def conv(k):
        def make(rng):
            x = _leaf(rng.normal(size=(1, 2, 3, 3)))
            w = _leaf(rng.normal(size=(2, 2, k, k)))
            b = _leaf(rng.normal(size=2))
            return [x, w, b], lambda: T.conv2d(x, w, b)
        return make
    cases["conv2d_1x1"] = conv(1)
    cases["conv2d_3x3"] = conv(3)

    def layer_norm(rng):
        x = _leaf(rng.normal(size=(2, 4)))
        g = _leaf(rng.normal(size=4))
        b = _leaf(rng.normal(size=4))
        return [x, g, b], lambda: T.layer_norm(x, g, b)
    cases["layer_norm"] = layer_norm

    def resize(size):
        def make(rng):
            x = _leaf(rng.normal(size=(1, 1, 3, 4)))
            return [x], lambda: T.bilinear_resize(x, size)
        return make
    cases["bilinear_up"] = resize((5, 7))
    cases["bilinear_down"] = resize((2, 2))

    def gap(rng):
        x = _leaf(rng.normal(size=(1, 2, 2, 2)))
        return [x], lambda: T.global_avg_pool(x)
    cases["global_avg_pool"] = gap

    def concat(rng):
        a = _leaf(rng.normal(size=(2, 2)))
        b = _leaf(rng.normal(size=(2, 1)))
        return [a, b], lambda: T.concat([a, b], axis=1)
    cases["concat"] = concat

    def slc(rng):
        a = _leaf(rng.normal(size=(2, 4)))
        return [a], lambda: T.slice_(a, 1, 1, 3)
    cases["slice"] = slc

    def reductions(rng):
        a = _leaf(rng.normal(size=(2, 3)))
        return [a], lambda: T.concat([T.reshape(T.mean(a, axis=1), (2, 1)), T.sum_(a, axis=1, keepdims=True)], axis=1)
    cases["mean_sum"] = reductions

    def reshape_transpose(rng):
        a = _leaf(rng.normal(size=(2, 3)))
        return [a], lambda: T.transpose(T.reshape(a, (3, 2)), (1, 0))
    cases["reshape_transpose"] = reshape_transpose
    return cases


def _tiny_model(rng: np.random.Generator) -> UnifiedModel:
    tasks = [
        TaskSpec("seg", Family.SEGMENTATION, num_classes=3),
        TaskSpec("det", Family.DETECTION),
        TaskSpec("cls", Family.CLASSIFICATION, num_classes=3),
        TaskSpec("reg", Family.REGRESSION, num_landmarks=2),
    ]
    enc = EncoderConfig(image_size=16, patch_size=4, width=8, depth=4, heads=2, hook_depths=(0, 1, 2, 3))
    model = UnifiedModel(tasks, enc, BridgeConfig(width=4), HeadConfig(hidden=8, det_tower_blocks=1),
                         seed=int(rng.integers(0, 2**31)))
    model.eval()
    return model


def _composite_cases() -> dict[str, Callable]:
    """Head + loss pipelines on a tiny model; leaves are the input image and a sample of parameters."""

    def make(task_id, loss_fn):
        def build(rng):
            model = _tiny_model(rng)
            image = _leaf(rng.random((1, 3, 16, 16)))
            target = _target(task_id, rng)
            fn = lambda: loss_fn(model(image, task_id), target)
            fn()  # materialize lazy layers before picking leaves
            params = [p for _, p in model.named_parameters() if not _name_is_unused(_, task_id)]
            picks = [params[i] for i in rng.choice(len(params), min(4, len(params)), replace=False)]
            return [image] + picks, fn
        return build

    def seg(out, mask):
        return seg_loss(out, mask).total

    def det(out, box):
        return det_loss(out[0], out[1], box, LossConfig(1.0, 1.0)).total

    def cls(out, labels):
        return cls_loss(out, labels).total

    def reg(out, coords):
        return reg_loss(out, coords).total

    cases = {
        "seg_head+seg_loss": make("seg", seg),
        "det_head+det_loss": make("det", det),
        "cls_head+cls_loss": make("cls", cls),
        "reg_head+reg_loss": make("reg", reg),
    }

    def fpn_pool(rng):
        model = _tiny_model(rng)
        image = _leaf(rng.random((1, 3, 16, 16)))
        w = rng.normal(size=(1, 16))
        fn = lambda: _weighted(pool_global(model.bridge.fpn_pathway(model.encoder(image))), w)
        fn()
        return [image, model.encoder.patch_embed.weight, model.bridge.fpn.lateral[0].weight], fn
    cases["encoder+bridge+pool"] = fpn_pool

    def uncertainty(rng):
        state = UncertaintyState()
        state.s_detection.data = np.array(rng.normal())
        raw = _leaf(abs(rng.normal()) + 0.1)
        return [raw, state.s_detection], lambda: uncertainty_reweight(raw, "detection", state)
    cases["uncertainty_reweight"] = uncertainty
    return cases


def _name_is_unused(name: str, task_id: str) -> bool:
    family_heads = {"seg": "seg_head", "det": "det_head", "cls": "cls_head", "reg": "reg_head"}
    if name.startswith(("seg_head", "det_head", "cls_head", "reg_head")):
        return not name.startswith(family_heads[task_id])
    if name.startswith("uncertainty"):
        return True
    if name.startswith("bridge.fpn") and task_id in ("seg", "reg"):
        return True
    return False


def _target(task_id: str, rng: np.random.Generator):
    if task_id == "seg":
        return rng.integers(0, 3, size=(1, 16, 16))
    if task_id == "det":
        x1, x2 = np.sort(rng.uniform(0.05, 0.95, 2))
        y1, y2 = np.sort(rng.uniform(0.05, 0.95, 2))
        return np.array([[x1, y1, x2, y2]])
    if task_id == "cls":
        return rng.integers(0, 3, size=1)
    return rng.uniform(0, 1, size=(1, 4))


@dataclass
class CheckResult:
    name: str
    instances: int
    max_rel_error: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < TOLERANCE


@dataclass
class GradCheckReport:
    results: list[CheckResult] = field(default_factory=list)
    seconds: float = 0.0

    @property
    def max_rel_error(self) -> float:
        return max((r.max_rel_error for r in self.results), default=0.0)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    def lines(self) -> list[str]:
        out = [f"{'PASS' if r.passed else 'FAIL'}  {r.name:<24} n={r.instances:<3} max_rel_err={r.max_rel_error:.3e}"
               for r in self.results]
        out.append(f"max relative error {self.max_rel_error:.3e} over {len(self.results)} checks in {self.seconds:.1f}s")
        return out


def run_gradcheck(instances: int = 20, seed: int = 0, include_composites: bool = True) -> GradCheckReport:
    rng = np.random.default_rng(seed)
    start = time.perf_counter()
    report = GradCheckReport()
    cases = dict(_op_cases())
    if include_composites:
        cases.update(_composite_cases())
    composite_names = set(_composite_cases())
    for name, make in cases.items():
        worst = 0.0
        for _ in range(instances):
            leaves, fn = make(rng)
            out = fn()
            if out.size == 1:
                scalar = fn
            else:
                weights = rng.normal(size=out.shape)
                scalar = (lambda f, w: (lambda: _weighted(f(), w)))(fn, weights)
            max_coords = 6 if name in composite_names else None
            worst = max(worst, check_function(scalar, leaves, max_coords=max_coords, rng=rng))
        report.results.append(CheckResult(name, instances, worst))
    report.seconds = time.perf_counter() - start
    return report
