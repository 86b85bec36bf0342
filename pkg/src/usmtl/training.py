"""AdamW with split learning rates, gradient clipping, photometric augmentation, and the training loop."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import tensor as T
from .balancer import TaskBalancer
from .checkpoint import save_checkpoint
from .config import AugmentConfig, OptimConfig, RunConfig
from .data import DatasetManifest, atomic_write_text, load_sample, read_pgm
from .heads import Family
from .losses import REWEIGHTED_FAMILIES, cls_loss, det_loss, reg_loss, seg_loss, uncertainty_reweight
from .model import UnifiedModel, decays
from .tensor import Tensor

log = logging.getLogger(__name__)


class NumericalError(RuntimeError):
    """A loss or gradient became non-finite."""


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


class AdamW:
    """Decoupled weight decay Adam over the model's backbone/heads partition.

    Parameters whose gradient is ``None`` are skipped for that step.
    """

    def __init__(self, model: UnifiedModel, config: OptimConfig):
        self.model = model
        self.config = config
        self.state: dict[str, dict] = {}

    def lr_for(self, group: str) -> float:
        return self.config.lr_backbone if group == "backbone" else self.config.lr_heads

    def step(self) -> None:
        for group, params in self.model.param_groups().items():
            adamw_step(params, self.config, self.state, self.lr_for(group))


def adamw_step(params: list[tuple[str, Tensor]], config: OptimConfig, state: dict, lr: float) -> None:
    b1, b2 = config.betas
    for name, p in params:
        g = p.grad
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"adamw_step: non-finite gradient in parameter {name}")
        st = state.get(name)
        if st is None:
            st = state[name] = {"step": 0, "m": np.zeros_like(p.data), "v": np.zeros_like(p.data)}
        st["step"] += 1
        t = st["step"]
        if config.weight_decay and decays(name, p):
            p.data = np.asarray(p.data * (1.0 - lr * config.weight_decay))
        st["m"] = b1 * st["m"] + (1.0 - b1) * g
        st["v"] = b2 * st["v"] + (1.0 - b2) * (g * g)
        m_hat = st["m"] / (1.0 - b1**t)
        v_hat = st["v"] / (1.0 - b2**t)
        p.data = np.asarray(p.data - lr * m_hat / (np.sqrt(v_hat) + config.eps))


def grad_norm(params) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.sum(p.grad * p.grad))
    return math.sqrt(total)


def clip_gradients(params, max_norm: float = 1.0) -> float:
    """Scale all gradients so their global L2 norm is at most ``max_norm``; returns the scale."""
    params = list(params)
    norm = grad_norm(params)
    if norm <= max_norm:
        return 1.0
    scale = max_norm / norm
    for p in params:
        if p.grad is not None:
            p.grad = p.grad * scale
    return scale


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------


def gaussian_kernel(k: int) -> np.ndarray:
    sigma = k / 6.0
    x = np.arange(k) - (k - 1) / 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def motion_kernel(k: int, angle: int) -> np.ndarray:
    """Normalized line kernel at 0, 45, 90 or 135 degrees."""
    kern = np.zeros((k, k))
    c = k // 2
    idx = np.arange(k)
    if angle == 0:
        kern[c, :] = 1.0
    elif angle == 90:
        kern[:, c] = 1.0
    elif angle == 45:
        kern[idx[::-1], idx] = 1.0
    elif angle == 135:
        kern[idx, idx] = 1.0
    else:
        raise ValueError(f"motion blur angle must be one of 0/45/90/135, got {angle}")
    return kern / kern.sum()


def augment(image: np.ndarray, config: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Photometric augmentations on a 0..255 image, applied in a fixed order.

    One uniform draw per augmentation decides whether it fires, so the random
    stream consumption depends only on which augmentations fired.
    """
    img = np.asarray(image, dtype=np.float64)
    if rng.random() < config.brightness_contrast_p:
        alpha = 1.0 + rng.uniform(-config.contrast_limit, config.contrast_limit)
        beta = 255.0 * rng.uniform(-config.brightness_limit, config.brightness_limit)
        img = alpha * img + beta
    if rng.random() < config.noise_p:
        var = rng.uniform(*config.noise_var)
        img = img + rng.normal(0.0, math.sqrt(var), size=img.shape)
    if rng.random() < config.blur_p:
        g = gaussian_kernel(int(rng.choice(config.blur_kernels)))
        img = ndimage.convolve1d(ndimage.convolve1d(img, g, axis=0, mode="nearest"), g, axis=1, mode="nearest")
    if rng.random() < config.motion_p:
        k = int(rng.choice(config.motion_kernels))
        angle = int(rng.choice([0, 45, 90, 135]))
        img = ndimage.convolve(img, motion_kernel(k, angle), mode="nearest")
    return np.clip(img, 0.0, 255.0)


# ---------------------------------------------------------------------------
# loss routing
# ---------------------------------------------------------------------------


def family_loss(model: UnifiedModel, task_id: str, images: np.ndarray, targets: list, config: RunConfig):
    task = model.task(task_id)
    out = model(Tensor(images), task_id)
    fam = task.family
    if fam is Family.SEGMENTATION:
        return seg_loss(out, np.stack(targets), task_id)
    if fam is Family.DETECTION:
        boxes, obj = out
        return det_loss(boxes, obj, np.stack(targets), config.losses, task_id)
    if fam is Family.CLASSIFICATION:
        return cls_loss(out, np.asarray(targets, dtype=int), task_id)
    return reg_loss(out, np.stack(targets), task_id)


# ---------------------------------------------------------------------------
# loop
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    model: UnifiedModel
    records: list[dict] = field(default_factory=list)
    balancer: TaskBalancer | None = None


class _SampleCycler:
    """Per-task reshuffled pass over sample indices."""

    def __init__(self, n: int, rng: np.random.Generator):
        self.n, self.rng = n, rng
        self.order: list[int] = []

    def next(self) -> int:
        if not self.order:
            self.order = self.rng.permutation(self.n).tolist()
        return self.order.pop(0)


def build_model(manifest: DatasetManifest, config: RunConfig) -> UnifiedModel:
    return UnifiedModel(manifest.specs, config.encoder, config.bridge, config.heads, seed=config.optimizer.seed)


def train(manifest: DatasetManifest, config: RunConfig, steps: int | None = None, out_dir=None,
          progress: bool = False) -> TrainResult:
    """Optimize the routed model; writes checkpoint, config and JSONL log when ``out_dir`` is given."""
    opt_cfg = config.optimizer
    steps = opt_cfg.total_steps if steps is None else steps
    seed = opt_cfg.seed
    model = build_model(manifest, config)
    model.train()
    optimizer = AdamW(model, opt_cfg)
    specs = {s.task_id: s for s in manifest.specs}
    balancer = TaskBalancer(
        {t.spec.task_id: len(t.samples) for t in manifest.tasks if t.samples},
        {tid: s.family for tid, s in specs.items()},
        config.balancer,
        seed=seed,
    )
    pick_rng = np.random.default_rng([seed, 1])
    aug_rng = np.random.default_rng([seed, 2])
    cyclers = {t.spec.task_id: _SampleCycler(len(t.samples), pick_rng) for t in manifest.tasks if t.samples}
    raw_cache: dict[str, np.ndarray] = {}
    size = config.encoder.image_size
    use_aug = config.data.augment
    accum = opt_cfg.accumulation_steps

    def augment_fn(img):
        return augment(img, config.augment, aug_rng)

    records = []
    for step in range(1, steps + 1):
        sampler_p = balancer.probability_map()
        micro = {"task_id": [], "sample_ids": [], "raw_loss": [], "weighted_loss": [], "dynamic_weight": [], "sigma_k": []}
        for _ in range(accum):
            task_id = balancer.sample_task()
            entry = manifest.entry(task_id)
            images, targets, ids = [], [], []
            for _ in range(opt_cfg.per_device_batch):
                sample = entry.samples[cyclers[task_id].next()]
                if sample.image not in raw_cache:
                    raw_cache[sample.image] = read_pgm(manifest.root / sample.image)
                img, tgt, _ = load_sample(entry.spec, sample, manifest.root, size,
                                          augment_fn if use_aug else None, raw=raw_cache[sample.image])
                images.append(img)
                targets.append(tgt.value)
                ids.append(sample.sample_id)
            breakdown = family_loss(model, task_id, np.stack(images), targets, config)
            raw = breakdown.value
            if not np.isfinite(raw):
                raise NumericalError(f"non-finite loss at step {step} for task {task_id}")
            family = entry.spec.family
            if family in REWEIGHTED_FAMILIES:
                w = balancer.dynamic_weight(task_id)
                weighted_t = uncertainty_reweight(T.mul(breakdown.total, w), family, model.uncertainty)
                sigma = model.uncertainty.sigma(family)
            else:
                w, sigma = None, None
                weighted_t = breakdown.total
            weighted = weighted_t.item()
            if not np.isfinite(weighted):
                raise NumericalError(f"non-finite weighted loss at step {step} for task {task_id}")
            T.backward(T.mul(weighted_t, 1.0 / accum))
            micro["task_id"].append(task_id)
            micro["sample_ids"].append(ids)
            micro["raw_loss"].append(raw)
            micro["weighted_loss"].append(weighted)
            micro["dynamic_weight"].append(w)
            micro["sigma_k"].append(sigma)
        params = model.parameters()
        norm = grad_norm(params)
        if not np.isfinite(norm):
            raise NumericalError(f"non-finite gradient norm at step {step}")
        scale = clip_gradients(params, opt_cfg.clip_max_norm)
        optimizer.step()
        model.zero_grad()
        for task_id, raw in zip(micro["task_id"], micro["raw_loss"]):
            balancer.update_ema(task_id, raw)
        rec = {"step": step, **micro, "grad_norm": norm, "clip_scale": scale, "sampler_p": sampler_p}
        records.append(rec)
        if progress and (step == 1 or step % 10 == 0):
            log.info("step %d loss %.4f", step, float(np.mean(micro["raw_loss"])))
    result = TrainResult(model, records, balancer)
    if out_dir is not None:
        write_run(result, config, out_dir)
    return result


def write_run(result: TrainResult, config: RunConfig, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out / "checkpoint.pmtl", result.model.state_dict())
    atomic_write_text(out / "config.json", config.dumps())
    atomic_write_text(out / "train_log.jsonl", "".join(json.dumps(r) + "\n" for r in result.records))


def read_log(path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text(encoding="utf-8").splitlines() if line.strip()]


def family_loss_trace(records: list[dict], families: dict[str, Family]) -> dict[Family, list[tuple[int, float]]]:
    """Per family: (step, mean raw loss over that family's micro-steps) for steps where it appeared."""
    out: dict[Family, list[tuple[int, float]]] = {}
    for rec in records:
        acc: dict[Family, list[float]] = {}
        for tid, raw in zip(rec["task_id"], rec["raw_loss"]):
            acc.setdefault(Family.parse(families[tid]), []).append(raw)
        for fam, vals in acc.items():
            out.setdefault(fam, []).append((rec["step"], float(np.mean(vals))))
    return out
