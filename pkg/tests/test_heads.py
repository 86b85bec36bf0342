import numpy as np
import pytest

from oracles import iou_scalar
from usmtl import tensor as T
from usmtl.bridge import BridgeConfig
from usmtl.config import OptimConfig
from usmtl.encoder import EncoderConfig
from usmtl.heads import (
    ClassificationHead,
    Family,
    GatedMLPBlock,
    RegressionHeadV1,
    TaskSpec,
    coord_channels,
    det_infer,
    order_box_channels,
)
from usmtl.losses import cls_loss, det_loss, reg_loss, seg_loss
from usmtl.model import ROUTING, HeadConfig, UnifiedModel
from usmtl.tensor import Tensor
from usmtl.training import adamw_step

SIZE = 16
TASKS = [
    TaskSpec("seg2", Family.SEGMENTATION, num_classes=2),
    TaskSpec("seg4", Family.SEGMENTATION, num_classes=4),
    TaskSpec("det", Family.DETECTION),
    TaskSpec("cls2", Family.CLASSIFICATION, num_classes=2),
    TaskSpec("cls3", Family.CLASSIFICATION, num_classes=3),
    TaskSpec("reg1", Family.REGRESSION, num_landmarks=1),
    TaskSpec("reg3", Family.REGRESSION, num_landmarks=3),
]


def tiny(seed=0, width=8, hidden=32):
    enc = EncoderConfig(image_size=SIZE, patch_size=4, width=16, depth=4, heads=2, hook_depths=(0, 1, 2, 3))
    return UnifiedModel(TASKS, enc, BridgeConfig(width=width), HeadConfig(hidden=hidden, det_tower_blocks=1), seed=seed)


def image(seed=0, b=1):
    return Tensor(np.random.default_rng(seed).random((b, 3, SIZE, SIZE)))


def fit(model, task_id, x, loss_fn, steps, lr=3e-3):
    cfg = OptimConfig(lr_heads=lr, lr_backbone=lr, weight_decay=0.0)
    state = {}
    params = list(model.named_parameters())
    for _ in range(steps):
        model.zero_grad()
        T.backward(loss_fn(model(x, task_id)).total)
        adamw_step(params, cfg, state, lr)
    return model(x, task_id)


# ------------------------------------------------------------- shapes and slicing


def test_output_shapes():
    m = tiny().eval()
    x = image(b=2)
    assert m(x, "seg4").shape == (2, 4, SIZE, SIZE)
    boxes, obj = m(x, "det")
    assert boxes.shape == (2, 4, 4, 4) and obj.shape == (2, 1, 4, 4)
    assert m(x, "cls3").shape == (2, 3)
    assert m(x, "reg3").shape == (2, 6)


@pytest.mark.parametrize("small,big,fam", [("seg2", "seg4", "seg"), ("cls2", "cls3", "cls"), ("reg1", "reg3", "reg")])
def test_slicing_bit_exact(small, big, fam):
    m = tiny(1).eval()
    x = image(1)
    a, b = m(x, small).data, m(x, big).data
    if fam == "reg":
        assert a.tobytes() == b[:, :2].copy().tobytes()
    else:
        assert a.tobytes() == b[:, : a.shape[1]].copy().tobytes()


def test_wrong_family_and_arity_rejected():
    head = ClassificationHead(3, np.random.default_rng(0), hidden=4)
    with pytest.raises(ValueError, match="exceeds"):
        head(Tensor(np.zeros((1, 8))), TaskSpec("c", Family.CLASSIFICATION, num_classes=5))
    with pytest.raises(ValueError, match="expected classification"):
        head(Tensor(np.zeros((1, 8))), TaskSpec("r", Family.REGRESSION, num_landmarks=1))


def test_taskspec_validation_and_alias():
    with pytest.raises(ValueError):
        TaskSpec("s", "seg", num_classes=1)
    with pytest.raises(ValueError):
        TaskSpec("r", "reg")
    assert TaskSpec("d", "det").arity == 1
    spec = TaskSpec("r", "regression", num_landmarks=2, meta={"a": 1})
    assert TaskSpec.from_dict(spec.to_dict()) == spec


def test_unknown_task():
    with pytest.raises(KeyError, match="nope"):
        tiny()(image(), "nope")


def test_seg_eval_deterministic_train_stochastic():
    m = tiny(2).eval()
    x = image(2)
    assert m(x, "seg2").data.tobytes() == m(x, "seg2").data.tobytes()
    m.train()
    assert m(x, "seg2").data.tobytes() != m(x, "seg2").data.tobytes()


# ------------------------------------------------------------- det


def test_coord_channels_values():
    cx, cy = coord_channels(2, 3, 4)
    assert cx.shape == (2, 1, 3, 4)
    assert cx[0, 0, 0, 0] == 0.125
    np.testing.assert_allclose(cx[1, 0, 2], [0.125, 0.375, 0.625, 0.875])
    np.testing.assert_allclose(cy[0, 0, :, 1], [1 / 6, 0.5, 5 / 6])


def test_box_ordering():
    raw = np.random.default_rng(3).normal(scale=3, size=(2, 4, 5, 5))
    b = order_box_channels(Tensor(raw)).data
    assert np.all(b[:, 0] <= b[:, 2]) and np.all(b[:, 1] <= b[:, 3])
    assert np.all((b > 0) & (b < 1))


def test_det_infer_tie_break_and_argmax():
    boxes = np.random.default_rng(4).random((2, 4, 3, 3))
    obj = np.zeros((2, 1, 3, 3))
    obj[1, 0, 2, 1] = 5.0
    obj[1, 0, 0, 2] = 5.0  # earlier in row-major order wins
    out = det_infer(boxes, obj)
    np.testing.assert_array_equal(out[0], boxes[0, :, 0, 0])
    np.testing.assert_array_equal(out[1], boxes[1, :, 0, 2])


def test_det_infer_one_hot():
    boxes = np.random.default_rng(5).random((1, 4, 4, 4))
    obj = np.full((1, 1, 4, 4), -3.0)
    obj[0, 0, 3, 1] = 1.0
    np.testing.assert_array_equal(det_infer(boxes, obj)[0], boxes[0, :, 3, 1])


# ------------------------------------------------------------- global heads


def test_gate_forced_zero_is_identity():
    blk = GatedMLPBlock(6, np.random.default_rng(6))
    blk.force_gate = 0.0
    x = np.random.default_rng(7).normal(size=(3, 6))
    np.testing.assert_array_equal(blk(Tensor(x)).data, x)


def test_regression_zero_final_layer():
    head = RegressionHeadV1(3, np.random.default_rng(8), hidden=8).eval()
    head(Tensor(np.ones((2, 12))), TaskSpec("r", Family.REGRESSION, num_landmarks=3))
    head.regressor.weight.data[:] = 0.0
    head.regressor.bias.data[:] = 0.0
    out = head(Tensor(np.random.default_rng(9).normal(size=(2, 12))), TaskSpec("r", Family.REGRESSION, num_landmarks=3))
    np.testing.assert_array_equal(out.data, 0.5)


def test_regression_in_unit_interval():
    m = tiny(3).eval()
    out = m(image(3, b=3), "reg3").data
    assert np.all((out > 0) & (out < 1))


# ------------------------------------------------------------- routing


@pytest.mark.parametrize("task_id,silent", [
    ("seg2", ["bridge.fpn.", "det_head.", "cls_head.", "reg_head."]),
    ("reg1", ["bridge.fpn.", "det_head.", "cls_head.", "seg_head."]),
    ("det", ["seg_head.", "cls_head.", "reg_head."]),
    ("cls2", ["seg_head.", "det_head.", "reg_head."]),
])
def test_routing_isolation(task_id, silent):
    m = tiny(4).eval()
    x = image(4)
    for t in ("seg2", "det", "cls2", "reg1"):
        m(x, t)  # materialize lazy layers
    m.zero_grad()
    out = m(x, task_id)
    out = T.concat([T.reshape(o, (-1,)) for o in out], axis=0) if isinstance(out, tuple) else out
    T.backward(T.sum_(T.mul(out, np.random.default_rng(5).normal(size=out.shape))))
    touched = []
    for name, p in m.named_parameters():
        if any(name.startswith(s) for s in silent):
            assert p.grad is None or not np.any(p.grad), name
        elif name.startswith(f"{ROUTING_HEAD[task_id]}.") and p.grad is not None and np.any(p.grad):
            touched.append(name)
    assert touched
    enc_grads = [p.grad for n, p in m.named_parameters() if n.startswith("encoder.blocks.0.")]
    assert any(g is not None and np.any(g) for g in enc_grads)


ROUTING_HEAD = {"seg2": "seg_head", "reg1": "reg_head", "det": "det_head", "cls2": "cls_head"}


def test_routing_table():
    assert ROUTING == {Family.SEGMENTATION: "fpn_v1", Family.DETECTION: "fpn",
                       Family.CLASSIFICATION: "global", Family.REGRESSION: "global_v1"}


# ------------------------------------------------------------- overfit oracles


def _disk_sample(seed=0):
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:SIZE, 0:SIZE]
    mask = ((xx - 9.5) ** 2 + (yy - 6.5) ** 2 <= 16).astype(np.int64)
    img = 0.3 + 0.05 * rng.standard_normal((SIZE, SIZE)) + 0.4 * mask
    return Tensor(np.repeat(img[None, None], 3, axis=1)), mask[None]


def test_seg_overfit_single_sample():
    x, mask = _disk_sample()
    m = tiny(10).eval()
    out = fit(m, "seg2", x, lambda o: seg_loss(o, mask), 200)
    acc = np.mean(np.argmax(out.data, axis=1) == mask)
    assert acc >= 0.99


def test_det_overfit_single_sample():
    x, _ = _disk_sample(1)
    gt = np.array([[0.3, 0.15, 0.85, 0.65]])
    m = tiny(11).eval()
    boxes, obj = fit(m, "det", x, lambda o: det_loss(o[0], o[1], gt), 300)
    assert iou_scalar(det_infer(boxes, obj)[0], gt[0]) > 0.7


def test_reg_overfit_single_sample():
    x, _ = _disk_sample(2)
    target = np.array([[0.2, 0.7, 0.55, 0.4, 0.9, 0.1]])
    m = tiny(12).eval()
    out = fit(m, "reg3", x, lambda o: reg_loss(o, target), 300, lr=1e-2)
    assert np.max(np.abs(out.data - target)) < 0.02


def test_cls_separable_reaches_full_accuracy():
    rng = np.random.default_rng(13)
    labels = np.array([0, 1, 0, 1, 1, 0])
    imgs = rng.random((6, 3, SIZE, SIZE)) * 0.2
    imgs[labels == 1, :, :8] += 0.7  # bright top half marks class 1
    x = Tensor(imgs)
    m = tiny(13).eval()
    out = fit(m, "cls2", x, lambda o: cls_loss(o, labels), 60)
    assert np.all(np.argmax(out.data, axis=1) == labels)
