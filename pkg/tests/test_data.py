import math
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from usmtl.data import (
    DataError,
    DatasetManifest,
    Sample,
    SyntheticTaskRecipe,
    default_recipes,
    gen_data,
    load_sample,
    read_pgm,
    read_recipes,
    resize_nearest_np,
    write_pgm,
)
from usmtl.heads import Family, TaskSpec


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("ds")
    recipes = default_recipes(count=6) + [
        SyntheticTaskRecipe("seg3", "seg", 4, (40, 30), num_classes=3),
        SyntheticTaskRecipe("cls3", "cls", 6, (32, 32), num_classes=3),
    ]
    return gen_data(recipes, out, seed=5), out


def _files(root: Path):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_counts_and_arity(tmp_path):
    m = gen_data([SyntheticTaskRecipe("s", Family.SEGMENTATION, 16, num_classes=2)], tmp_path)
    entry = m.entry("s")
    assert len(entry.samples) == 16 and entry.spec.num_classes == 2
    assert len(list((tmp_path / "s").glob("*_mask.pgm"))) == 16
    assert len(list((tmp_path / "s").glob("*.pgm"))) == 32


def test_same_seed_byte_identical(tmp_path):
    a = gen_data(default_recipes(count=3), tmp_path / "a", seed=9)
    gen_data(default_recipes(count=3), tmp_path / "b", seed=9)
    gen_data(default_recipes(count=3), tmp_path / "c", seed=10)
    fa, fb, fc = _files(tmp_path / "a"), _files(tmp_path / "b"), _files(tmp_path / "c")
    assert fa == fb
    assert fa != fc and fa.keys() == fc.keys()
    assert len(a.tasks) == 4


def _ellipse_loop(w, h, shapes):
    mask = np.zeros((h, w), dtype=np.uint8)
    for e in shapes:
        c, s = math.cos(e["angle"]), math.sin(e["angle"])
        for y in range(h):
            for x in range(w):
                dx, dy = x + 0.5 - e["cx"], y + 0.5 - e["cy"]
                u, v = dx * c + dy * s, -dx * s + dy * c
                if (u / e["ax"]) ** 2 + (v / e["ay"]) ** 2 <= 1.0:
                    mask[y, x] = e["class"]
    return mask


def test_masks_match_analytic_ellipses(dataset):
    manifest, root = dataset
    for tid in ("seg_ellipse", "seg3"):
        for s in manifest.entry(tid).samples:
            mask = read_pgm(root / s.target["mask"])
            w, h = s.orig_size
            assert np.array_equal(mask, _ellipse_loop(w, h, s.target["ellipses"]))
            assert mask.any()


def test_targets_consistent_with_images(dataset):
    manifest, root = dataset
    for s in manifest.entry("det_rect").samples:
        img = read_pgm(root / s.image).astype(float)
        w, h = s.orig_size
        x1, y1, x2, y2 = s.target["box"]
        inside = img[round(y1 * h):round(y2 * h), round(x1 * w):round(x2 * w)]
        assert inside.mean() > img.mean() + 20
    for s in manifest.entry("seg_ellipse").samples:
        img = read_pgm(root / s.image).astype(float)
        mask = read_pgm(root / s.target["mask"])
        assert img[mask == 1].mean() > img[mask == 0].mean() + 50
    labels = [s.target["label"] for s in manifest.entry("cls3").samples]
    assert sorted(set(labels)) == [0, 1, 2]
    manifest.validate()


def test_manifest_round_trip_byte_identical(dataset, tmp_path):
    _, root = dataset
    text = (root / "manifest.json").read_text()
    m = DatasetManifest.read(root / "manifest.json")
    m.write(tmp_path / "again.json")
    assert (tmp_path / "again.json").read_text() == text


@settings(max_examples=40, deadline=None)
@given(arrays(np.uint8, st.tuples(st.integers(1, 12), st.integers(1, 12))))
def test_pgm_round_trip(tmp_path_factory, img):
    path = tmp_path_factory.mktemp("pgm") / "x.pgm"
    write_pgm(path, img)
    back = read_pgm(path)
    assert back.dtype == np.uint8 and np.array_equal(back, img)


def test_pgm_header_comments(tmp_path):
    p = tmp_path / "c.pgm"
    p.write_bytes(b"P5\n# made by hand\n2 1\n255\n\x07\xff")
    np.testing.assert_array_equal(read_pgm(p), [[7, 255]])


@pytest.mark.parametrize("payload,match", [
    (b"P2\n2 2\n255\n1 2 3 4", "binary PGM"),
    (b"P5\n2 2\n255\n\x00\x01", "pixel bytes"),
    (b"P5\n2 2\n65535\n" + b"\x00" * 8, "8-bit"),
    (b"P5\n2", "truncated"),
])
def test_corrupt_pgm_names_path(tmp_path, payload, match):
    p = tmp_path / "bad.pgm"
    p.write_bytes(payload)
    with pytest.raises(DataError, match=match) as exc:
        read_pgm(p)
    assert str(p) in str(exc.value)


def test_missing_file(tmp_path):
    with pytest.raises(DataError, match="nothere"):
        read_pgm(tmp_path / "nothere.pgm")


def test_load_sample_resize_and_landmarks(tmp_path):
    img = (np.arange(50 * 100) % 256).astype(np.uint8).reshape(50, 100)
    write_pgm(tmp_path / "r.pgm", img)
    spec = TaskSpec("r", "reg", num_landmarks=1)
    sample = Sample("r0", "r.pgm", (100, 50), {"landmarks": [0.5, 0.5]})
    x, target, size = load_sample(spec, sample, tmp_path, 64)
    assert x.shape == (3, 64, 64) and 0.0 <= x.min() and x.max() <= 1.0
    assert np.array_equal(x[0], x[2])
    np.testing.assert_array_equal(target.value, [0.5, 0.5])
    assert size == (100, 50)
    assert np.allclose(target.value * np.array(size), [50.0, 25.0])


def test_load_sample_mask_classes_preserved(tmp_path):
    rng = np.random.default_rng(0)
    mask = rng.integers(0, 3, (37, 53)).astype(np.uint8)
    write_pgm(tmp_path / "m.pgm", mask)
    write_pgm(tmp_path / "i.pgm", np.zeros((37, 53), np.uint8))
    spec = TaskSpec("s", "seg", num_classes=3)
    _, target, _ = load_sample(spec, Sample("s0", "i.pgm", (53, 37), {"mask": "m.pgm"}), tmp_path, 32)
    assert target.value.shape == (32, 32)
    assert set(np.unique(target.value)) <= {0, 1, 2}


def test_nearest_resize_identity_and_subset():
    m = np.arange(12).reshape(3, 4)
    assert np.array_equal(resize_nearest_np(m, 3, 4), m)
    assert set(resize_nearest_np(m, 7, 2).ravel()) <= set(m.ravel())


def test_load_sample_augment_sees_0_255_scale(tmp_path):
    write_pgm(tmp_path / "a.pgm", np.full((8, 8), 200, np.uint8))
    seen = {}

    def aug(img):
        seen["max"] = img.max()
        return img + 100.0

    spec = TaskSpec("c", "cls", num_classes=2)
    x, _, _ = load_sample(spec, Sample("c0", "a.pgm", (8, 8), {"label": 1}), tmp_path, 8, augment=aug)
    assert seen["max"] == 200.0 and x.max() == 1.0


def test_missing_target_field(tmp_path):
    write_pgm(tmp_path / "a.pgm", np.zeros((4, 4), np.uint8))
    with pytest.raises(DataError, match="box"):
        load_sample(TaskSpec("d", "det"), Sample("d0", "a.pgm", (4, 4), {}), tmp_path, 4)


def test_bad_manifest(tmp_path):
    (tmp_path / "manifest.json").write_text("{not json")
    with pytest.raises(DataError, match="manifest"):
        DatasetManifest.read(tmp_path / "manifest.json")


def test_validate_catches_bad_box(tmp_path):
    m = gen_data([SyntheticTaskRecipe("d", "det", 2)], tmp_path)
    m.tasks[0].samples[0].target["box"] = [0.5, 0.2, 0.1, 0.9]
    with pytest.raises(DataError, match="ordered"):
        m.validate()


def test_read_recipes(tmp_path):
    p = tmp_path / "r.json"
    p.write_text('{"tasks": [{"task_id": "x", "family": "reg", "count": 2, "num_landmarks": 2}]}')
    (r,) = read_recipes(p)
    assert r.family is Family.REGRESSION and r.size == (64, 64)
    p.write_text('[{"task_id": "x", "family": "reg", "colour": 1}]')
    with pytest.raises(ValueError, match="colour"):
        read_recipes(p)


def test_unwritable_output(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(DataError):
        gen_data(default_recipes(count=1), blocker / "sub")
