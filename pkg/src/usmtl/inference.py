"""Single-pass inference over a manifest and scoring of prediction files."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint
from .config import RunConfig
from .data import (
    DataError,
    DatasetManifest,
    atomic_write_text,
    dump_json,
    load_sample,
    load_target,
    read_pgm,
    resize_nearest_np,
    write_pgm,
)
from .heads import Family, det_infer
from .metrics import MetricReport, Normalizer, SubtaskResult, auc, dice, f1_mcc, hausdorff, mre, normalize_and_score
from .losses import iou
from .model import UnifiedModel
from .tensor import Tensor

PREDICTIONS_VERSION = 1


def load_model(manifest: DatasetManifest, checkpoint_path, config: RunConfig | None = None) -> tuple[UnifiedModel, RunConfig]:
    """Rebuild the model from the run's config.json (next to the checkpoint) and load weights."""
    checkpoint_path = Path(checkpoint_path)
    if config is None:
        cfg_path = checkpoint_path.parent / "config.json"
        config = RunConfig.read(cfg_path) if cfg_path.exists() else RunConfig()
    model = UnifiedModel(manifest.specs, config.encoder, config.bridge, config.heads, seed=config.optimizer.seed)
    model.load_state_dict(load_checkpoint(checkpoint_path))
    model.eval()
    return model, config


def predict_sample(model: UnifiedModel, task_id: str, image: np.ndarray) -> dict:
    """Apply the family's inference rule to one 3 x S x S image."""
    task = model.task(task_id)
    out = model(Tensor(image[None]), task_id)
    if task.family is Family.SEGMENTATION:
        return {"mask": np.argmax(out.data[0], axis=0).astype(np.uint8)}
    if task.family is Family.DETECTION:
        boxes, obj = out
        return {"box": det_infer(boxes, obj)[0].tolist()}
    if task.family is Family.CLASSIFICATION:
        z = out.data[0]
        p = np.exp(z - z.max())
        p /= p.sum()
        return {"label": int(np.argmax(z)), "probs": p.tolist()}
    return {"landmarks": out.data[0].tolist()}


def run_eval(model: UnifiedModel, manifest: DatasetManifest, config: RunConfig, out_path) -> dict:
    """Predict every manifest sample; seg masks go to PGM files beside the predictions JSON."""
    out_path = Path(out_path)
    mask_dir_name = f"{out_path.stem}_masks"
    preds = []
    size = config.encoder.image_size
    for entry in manifest.tasks:
        spec = entry.spec
        for sample in entry.samples:
            img, _, (w, h) = load_sample(spec, sample, manifest.root, size)
            p = predict_sample(model, spec.task_id, img)
            rec = {"task_id": spec.task_id, "sample_id": sample.sample_id, "family": spec.family.value}
            if "mask" in p:
                rel = f"{mask_dir_name}/{sample.sample_id}.pgm"
                write_pgm(out_path.parent / rel, resize_nearest_np(p["mask"], h, w))
                rec["mask"] = rel
            else:
                rec.update(p)
            preds.append(rec)
    doc = {"version": PREDICTIONS_VERSION, "predictions": preds}
    atomic_write_text(out_path, dump_json(doc))
    return doc


def read_predictions(path) -> dict:
    path = Path(path)
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        raise DataError(f"{path}: cannot read predictions ({exc})") from None


def raw_metrics(manifest: DatasetManifest, predictions: dict, pred_root) -> MetricReport:
    """Raw per-subtask metrics from a predictions document; every sample must appear exactly once."""
    pred_root = Path(pred_root)
    index: dict[str, dict] = {}
    for rec in predictions.get("predictions", []):
        sid = rec["sample_id"]
        if sid in index:
            raise DataError(f"sample {sid} predicted more than once")
        index[sid] = rec
    expected = {s.sample_id for t in manifest.tasks for s in t.samples}
    missing = sorted(expected - set(index))
    extra = sorted(set(index) - expected)
    if missing or extra:
        raise DataError(f"predictions do not cover the manifest: missing={missing[:5]} extra={extra[:5]}")

    subtasks = []
    for entry in manifest.tasks:
        spec = entry.spec
        fam = spec.family
        if not entry.samples:
            continue
        recs = [index[s.sample_id] for s in entry.samples]
        targets = [load_target(spec, s, manifest.root) for s in entry.samples]
        if fam is Family.SEGMENTATION:
            dsc, hd = [], []
            for rec, tgt in zip(recs, targets):
                pm = read_pgm(pred_root / rec["mask"]).astype(np.int64)
                dsc.append(dice(pm, tgt.value, spec.num_classes))
                hd.append(hausdorff(pm, tgt.value, spec.num_classes))
            raw = {"DSC": float(np.mean(dsc)), "HD": float(np.mean(hd))}
        elif fam is Family.DETECTION:
            raw = {"IoU": float(np.mean([iou(r["box"], t.value) for r, t in zip(recs, targets)]))}
        elif fam is Family.CLASSIFICATION:
            labels = np.array([t.value for t in targets])
            probs = np.array([r["probs"] for r in recs])
            pred = np.array([r["label"] for r in recs])
            f1, mcc = f1_mcc(pred, labels, spec.num_classes)
            raw = {"AUC": auc(probs, labels), "F1": f1, "MCC": mcc}
        else:
            raw = {"MRE": float(np.mean([mre(r["landmarks"], t.value, s.orig_size)
                                         for r, t, s in zip(recs, targets, entry.samples)]))}
        subtasks.append(SubtaskResult(spec.task_id, fam, raw))
    return MetricReport(subtasks)


def score(manifest: DatasetManifest, predictions_path, normalizer: Normalizer) -> MetricReport:
    preds = read_predictions(predictions_path)
    return normalize_and_score(raw_metrics(manifest, preds, Path(predictions_path).parent), normalizer)


def perfect_predictions(manifest: DatasetManifest, out_path) -> dict:
    """Predictions equal to ground truth (probabilities one-hot); a fixed point for scoring."""
    out_path = Path(out_path)
    preds = []
    for entry in manifest.tasks:
        spec = entry.spec
        for s in entry.samples:
            rec = {"task_id": spec.task_id, "sample_id": s.sample_id, "family": spec.family.value}
            tgt = load_target(spec, s, manifest.root)
            if spec.family is Family.SEGMENTATION:
                rel = f"{out_path.stem}_masks/{s.sample_id}.pgm"
                write_pgm(out_path.parent / rel, tgt.value.astype(np.uint8))
                rec["mask"] = rel
            elif spec.family is Family.DETECTION:
                rec["box"] = tgt.value.tolist()
            elif spec.family is Family.CLASSIFICATION:
                rec["label"] = tgt.value
                rec["probs"] = np.eye(spec.num_classes)[tgt.value].tolist()
            else:
                rec["landmarks"] = tgt.value.tolist()
            preds.append(rec)
    doc = {"version": PREDICTIONS_VERSION, "predictions": preds}
    atomic_write_text(out_path, dump_json(doc))
    return doc
