"""Synthetic multi-task data, PGM images, the JSON manifest, and sample loading."""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

import numpy as np

from .heads import Family, TaskSpec
from .tensor import resize_matrix

MANIFEST_VERSION = 1


class DataError(Exception):
    """Unreadable, corrupt or inconsistent dataset content."""


# ---------------------------------------------------------------------------
# files
# ---------------------------------------------------------------------------


def atomic_write_bytes(path: str | os.PathLike, payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=False) + "\n"


def write_pgm(path, image: np.ndarray) -> None:
    image = np.asarray(image)
    if image.ndim != 2:
        raise ValueError(f"write_pgm: expected a 2-d array, got shape {image.shape}")
    if image.dtype != np.uint8:
        if image.min() < 0 or image.max() > 255:
            raise ValueError("write_pgm: values outside 0..255")
        image = image.astype(np.uint8)
    h, w = image.shape
    atomic_write_bytes(path, f"P5\n{w} {h}\n255\n".encode("ascii") + image.tobytes())


def read_pgm(path) -> np.ndarray:
    """Read an 8-bit binary PGM (P5) into an H x W uint8 array."""
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"{path}: {exc}") from None
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DataError(f"{path}: truncated PGM header")
        tokens.append(raw[start:pos])
    pos += 1  # single whitespace byte before the raster
    if tokens[0] != b"P5":
        raise DataError(f"{path}: not a binary PGM (magic {tokens[0]!r})")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise DataError(f"{path}: malformed PGM header") from None
    if maxval != 255:
        raise DataError(f"{path}: only 8-bit PGM supported (maxval {maxval})")
    body = raw[pos : pos + w * h]
    if len(body) != w * h:
        raise DataError(f"{path}: expected {w * h} pixel bytes, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w).copy()


# ---------------------------------------------------------------------------
# manifest
# ---------------------------------------------------------------------------


@dataclass
class Sample:
    sample_id: str
    image: str
    orig_size: tuple[int, int]  # (W, H)
    target: dict[str, Any]

    def to_dict(self):
        return {"id": self.sample_id, "image": self.image, "orig_size": list(self.orig_size), "target": self.target}

    @classmethod
    def from_dict(cls, d):
        return cls(d["id"], d["image"], tuple(int(v) for v in d["orig_size"]), dict(d["target"]))


@dataclass
class TaskEntry:
    spec: TaskSpec
    samples: list[Sample] = field(default_factory=list)


@dataclass
class DatasetManifest:
    tasks: list[TaskEntry]
    root: Path = Path(".")
    version: int = MANIFEST_VERSION

    @property
    def specs(self) -> list[TaskSpec]:
        return [t.spec for t in self.tasks]

    def entry(self, task_id: str) -> TaskEntry:
        for t in self.tasks:
            if t.spec.task_id == task_id:
                return t
        raise KeyError(f"task {task_id!r} not in manifest")

    def to_dict(self) -> dict:
        return {
            "version": self.version,
            "tasks": [{**t.spec.to_dict(), "samples": [s.to_dict() for s in t.samples]} for t in self.tasks],
        }

    def dumps(self) -> str:
        return dump_json(self.to_dict())

    def write(self, path) -> None:
        atomic_write_text(path, self.dumps())

    @classmethod
    def from_dict(cls, d: dict, root: Path) -> "DatasetManifest":
        tasks = []
        for td in d["tasks"]:
            spec = TaskSpec.from_dict(td)
            tasks.append(TaskEntry(spec, [Sample.from_dict(s) for s in td.get("samples", [])]))
        return cls(tasks, root, int(d.get("version", MANIFEST_VERSION)))

    @classmethod
    def read(cls, path) -> "DatasetManifest":
        path = Path(path)
        try:
            d = json.loads(path.read_text(encoding="utf-8"))
            return cls.from_dict(d, path.parent)
        except (OSError, ValueError, KeyError, TypeError) as exc:
            raise DataError(f"{path}: cannot read manifest ({exc})") from None

    def validate(self) -> None:
        for t in self.tasks:
            for s in t.samples:
                img = read_pgm(self.root / s.image)
                if img.shape != (s.orig_size[1], s.orig_size[0]):
                    raise DataError(f"{s.image}: size {img.shape[::-1]} differs from manifest {s.orig_size}")
                _validate_target(t.spec, s, self.root)


def _validate_target(spec: TaskSpec, s: Sample, root: Path) -> None:
    tgt = s.target
    fam = spec.family
    if fam is Family.SEGMENTATION:
        mask = read_pgm(root / tgt["mask"])
        if mask.max() >= spec.num_classes:
            raise DataError(f"{tgt['mask']}: class {mask.max()} >= {spec.num_classes}")
    elif fam is Family.DETECTION:
        x1, y1, x2, y2 = tgt["box"]
        if not (0 <= x1 <= x2 <= 1 and 0 <= y1 <= y2 <= 1):
            raise DataError(f"{s.sample_id}: box {tgt['box']} not ordered/normalized")
    elif fam is Family.CLASSIFICATION:
        if not 0 <= int(tgt["label"]) < spec.num_classes:
            raise DataError(f"{s.sample_id}: label {tgt['label']} out of range")
    else:
        lm = np.asarray(tgt["landmarks"], dtype=float)
        if lm.shape != (2 * spec.num_landmarks,) or lm.min() < 0 or lm.max() > 1:
            raise DataError(f"{s.sample_id}: landmarks must be {2 * spec.num_landmarks} values in [0,1]")


# ---------------------------------------------------------------------------
# synthetic generation
# ---------------------------------------------------------------------------


@dataclass
class SyntheticTaskRecipe:
    task_id: str
    family: Family
    count: int = 16
    size: tuple[int, int] = (64, 64)  # (W, H)
    num_classes: int | None = None
    num_landmarks: int | None = None
    noise: float = 8.0
    geometry: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        self.family = Family.parse(self.family)
        self.size = (int(self.size[0]), int(self.size[1]))

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticTaskRecipe":
        known = {"task_id", "family", "count", "size", "num_classes", "num_landmarks", "noise", "geometry"}
        extra = set(d) - known
        if extra:
            raise ValueError(f"recipe {d.get('task_id')}: unknown keys {sorted(extra)}")
        return cls(**d)

    def spec(self) -> TaskSpec:
        return TaskSpec(self.task_id, self.family, self.num_classes, self.num_landmarks)


def pixel_centers(w: int, h: int) -> tuple[np.ndarray, np.ndarray]:
    xs = np.arange(w) + 0.5
    ys = np.arange(h) + 0.5
    return np.meshgrid(xs, ys)


def ellipse_mask(w: int, h: int, cx: float, cy: float, ax: float, ay: float, angle: float) -> np.ndarray:
    """Pixels whose centers satisfy the rotated-ellipse inequality."""
    x, y = pixel_centers(w, h)
    c, s = np.cos(angle), np.sin(angle)
    u = (x - cx) * c + (y - cy) * s
    v = -(x - cx) * s + (y - cy) * c
    return (u / ax) ** 2 + (v / ay) ** 2 <= 1.0


def _speckle(rng, w, h, noise, base=60.0):
    return base + rng.normal(0.0, noise, size=(h, w))


def _to_u8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def _gen_segmentation(rng, r: SyntheticTaskRecipe):
    w, h = r.size
    g = r.geometry
    lo, hi = g.get("axis_range", (0.22, 0.38))
    img = _speckle(rng, w, h, r.noise)
    mask = np.zeros((h, w), dtype=np.uint8)
    shapes = []
    for c in range(1, r.num_classes):
        ax, ay = rng.uniform(lo, hi) * w, rng.uniform(lo, hi) * h
        if c > 1:
            ax, ay = 0.55 * ax, 0.55 * ay
        m = max(ax, ay)
        cx = rng.uniform(m * 0.8, w - m * 0.8)
        cy = rng.uniform(m * 0.8, h - m * 0.8)
        angle = rng.uniform(0, np.pi)
        mask[ellipse_mask(w, h, cx, cy, ax, ay, angle)] = c
        shapes.append({"class": c, "cx": cx, "cy": cy, "ax": ax, "ay": ay, "angle": angle})
    levels = np.linspace(60.0, 220.0, r.num_classes)
    img = img + (levels[mask] - 60.0)
    return _to_u8(img), {"mask": mask, "ellipses": shapes}


def _gen_detection(rng, r: SyntheticTaskRecipe):
    w, h = r.size
    g = r.geometry
    lo, hi = g.get("extent_range", (0.25, 0.6))
    bw = int(round(rng.uniform(lo, hi) * w))
    bh = int(round(rng.uniform(lo, hi) * h))
    x0 = int(rng.integers(0, w - bw + 1))
    y0 = int(rng.integers(0, h - bh + 1))
    img = _speckle(rng, w, h, r.noise)
    img[y0 : y0 + bh, x0 : x0 + bw] += g.get("contrast", 130.0)
    box = [x0 / w, y0 / h, (x0 + bw) / w, (y0 + bh) / h]
    return _to_u8(img), {"box": box}


def _gen_classification(rng, r: SyntheticTaskRecipe, label: int):
    w, h = r.size
    x, y = pixel_centers(w, h)
    cycles = 2.0 + 3.0 * label
    theta = rng.uniform(-0.3, 0.3) + label * np.pi / (2 * max(1, r.num_classes - 1))
    phase = rng.uniform(0, 2 * np.pi)
    t = (x / w) * np.cos(theta) + (y / h) * np.sin(theta)
    img = 120.0 + 70.0 * np.sin(2 * np.pi * cycles * t + phase) + rng.normal(0.0, r.noise, size=(h, w))
    return _to_u8(img), {"label": int(label)}


def _gen_regression(rng, r: SyntheticTaskRecipe):
    w, h = r.size
    m = r.num_landmarks
    margin = r.geometry.get("margin", 0.15)
    x, y = pixel_centers(w, h)
    img = _speckle(rng, w, h, r.noise, base=30.0)
    coords = []
    for j in range(m):
        px = rng.uniform(margin, 1 - margin) * w
        py = rng.uniform(margin, 1 - margin) * h
        sigma = (0.04 + 0.02 * j) * min(w, h)
        amp = 200.0 - 120.0 * j / max(1, m)
        img = img + amp * np.exp(-((x - px) ** 2 + (y - py) ** 2) / (2 * sigma**2))
        coords += [px / w, py / h]
    return _to_u8(img), {"landmarks": coords}


def gen_data(recipes: list[SyntheticTaskRecipe], out_dir, seed: int = 42) -> DatasetManifest:
    """Write images, masks and a manifest under ``out_dir``; returns the manifest."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"{out}: {exc}") from None
    tasks = []
    for ti, r in enumerate(recipes):
        rng = np.random.default_rng([seed, ti])
        spec = r.spec()
        samples = []
        for i in range(r.count):
            sid = f"{r.task_id}_{i:04d}"
            rel = f"{r.task_id}/{i:04d}.pgm"
            if r.family is Family.SEGMENTATION:
                img, tgt = _gen_segmentation(rng, r)
                mrel = f"{r.task_id}/{i:04d}_mask.pgm"
                write_pgm(out / mrel, tgt["mask"])
                target = {"mask": mrel, "ellipses": tgt["ellipses"]}
            elif r.family is Family.DETECTION:
                img, target = _gen_detection(rng, r)
            elif r.family is Family.CLASSIFICATION:
                img, target = _gen_classification(rng, r, i % r.num_classes)
            else:
                img, target = _gen_regression(rng, r)
            write_pgm(out / rel, img)
            samples.append(Sample(sid, rel, r.size, target))
        tasks.append(TaskEntry(spec, samples))
    manifest = DatasetManifest(tasks, out)
    manifest.write(out / "manifest.json")
    return manifest


def default_recipes(count: int = 16, size: tuple[int, int] = (64, 64)) -> list[SyntheticTaskRecipe]:
    """One task per family, used by the overfit suite."""
    return [
        SyntheticTaskRecipe("seg_ellipse", Family.SEGMENTATION, count, size, num_classes=2),
        SyntheticTaskRecipe("det_rect", Family.DETECTION, count, size),
        SyntheticTaskRecipe("cls_texture", Family.CLASSIFICATION, count, size, num_classes=2),
        SyntheticTaskRecipe("reg_blobs", Family.REGRESSION, count, size, num_landmarks=3),
    ]


def read_recipes(path) -> list[SyntheticTaskRecipe]:
    d = json.loads(Path(path).read_text(encoding="utf-8"))
    items = d["tasks"] if isinstance(d, dict) else d
    return [SyntheticTaskRecipe.from_dict(x) for x in items]


# ---------------------------------------------------------------------------
# loading
# ---------------------------------------------------------------------------


def resize_bilinear_np(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    h, w = img.shape[-2:]
    if (h, w) == (out_h, out_w):
        return img.astype(np.float64)
    return resize_matrix(h, out_h) @ img.astype(np.float64) @ resize_matrix(w, out_w).T


def resize_nearest_np(mask: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    h, w = mask.shape
    ys = np.minimum(((np.arange(out_h) + 0.5) * h / out_h).astype(int), h - 1)
    xs = np.minimum(((np.arange(out_w) + 0.5) * w / out_w).astype(int), w - 1)
    return mask[ys[:, None], xs[None, :]]


@dataclass
class Target:
    family: Family
    value: Any  # mask array, box list, label int, or landmark list


def load_target(spec: TaskSpec, sample: Sample, root: Path, image_size: int | None = None) -> Target:
    tgt = sample.target
    try:
        if spec.family is Family.SEGMENTATION:
            mask = read_pgm(root / tgt["mask"]).astype(np.int64)
            if image_size is not None:
                mask = resize_nearest_np(mask, image_size, image_size)
            return Target(spec.family, mask)
        if spec.family is Family.DETECTION:
            return Target(spec.family, np.asarray(tgt["box"], dtype=np.float64))
        if spec.family is Family.CLASSIFICATION:
            return Target(spec.family, int(tgt["label"]))
        return Target(spec.family, np.asarray(tgt["landmarks"], dtype=np.float64))
    except KeyError as exc:
        raise DataError(f"{sample.sample_id}: target missing field {exc}") from None


def load_sample(spec: TaskSpec, sample: Sample, root: Path, image_size: int,
                augment: Callable[[np.ndarray], np.ndarray] | None = None,
                raw: np.ndarray | None = None) -> tuple[np.ndarray, Target, tuple[int, int]]:
    """Image as 3 x S x S in [0, 1], the target at model resolution, and (W, H) original size.

    ``augment`` receives the resized grayscale image on the 0..255 scale.
    """
    img = read_pgm(root / sample.image) if raw is None else raw
    img = resize_bilinear_np(img, image_size, image_size)
    if augment is not None:
        img = augment(img)
    img = np.clip(img, 0.0, 255.0) / 255.0
    img3 = np.broadcast_to(img[None], (3, image_size, image_size)).copy()
    return img3, load_target(spec, sample, root, image_size), sample.orig_size
