import math

import numpy as np
import pytest

from yolors import data, detector
from yolors.data import AnnotatedImage, LabelRecord, SyntheticSpec
from yolors.detector import ModelConfig
from yolors.metrics import Detection
from yolors.tensor import Tensor

from oracles import brute_nms


@pytest.fixture(scope="module")
def tiny_set():
    ds = data.generate_synthetic(SyntheticSpec(n_train=12, n_val=6, seed=5, imbalance_ratio=3))
    return ds.split("train"), ds.split("val")


def quick_cfg(**kw):
    base = dict(epochs=1, batch_size=4, acmix_multiplier=2)
    base.update(kw)
    return ModelConfig(**base)


# -- shapes -----------------------------------------------------------------

def test_pyramid_sizes():
    cfg = ModelConfig()
    pyr = detector.backbone_forward(np.zeros((1, 3, 64, 64)), cfg)
    assert [lv.data.shape for lv in pyr.levels] == [(1, 16, 16, 16), (1, 16, 8, 8), (1, 16, 4, 4)]
    assert cfg.grid_sizes == (16, 8, 4)


def test_zero_image_zero_pyramid():
    pyr = detector.backbone_forward(np.zeros((2, 3, 64, 64)), ModelConfig())
    assert all(not lv.data.data.any() for lv in pyr.levels)


def test_pyramid_deterministic():
    x = np.random.default_rng(0).normal(size=(1, 3, 64, 64))
    a = detector.backbone_forward(x, ModelConfig(seed=3))
    b = detector.backbone_forward(x, ModelConfig(seed=3))
    assert all(np.array_equal(p.data.data, q.data.data) for p, q in zip(a.levels, b.levels))


def test_backbone_rejects_wrong_size():
    with pytest.raises(ValueError):
        detector.backbone_forward(np.zeros((1, 3, 32, 32)), ModelConfig())


def test_head_shape_and_zero_features():
    cfg = ModelConfig()
    out = detector.head_forward(np.zeros((1, 16, 8, 8)), cfg)
    assert out.shape == (1, 7, 8, 8)
    assert out.data[0].reshape(7, -1).T.shape == (64, 7)
    m = detector.Model(cfg)
    m.params["head.bias"].data[:] = 0.0
    raw = detector.head_forward(np.zeros((1, 16, 8, 8)), cfg, m).data
    assert np.allclose(1 / (1 + np.exp(-raw[0, 0])), 0.5)


def test_forward_all_toggle_combinations():
    x = detector.images_to_tensor([AnnotatedImage(np.full((64, 64, 3), 90, np.uint8))])
    for variant, toggles in detector.ABLATION_VARIANTS.items():
        m = detector.Model(ModelConfig().with_toggles(**toggles))
        out = m.forward(x)
        assert out["raw"].shape == (1, 7, 16, 16), variant
        assert np.isfinite(out["raw"].data).all()


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(levels=2)
    with pytest.raises(ValueError):
        ModelConfig(input_size=60)
    assert ModelConfig.full_scale().batch_size == 50 and ModelConfig.full_scale().epochs == 100
    cfg = ModelConfig(caa=False, seed=4)
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg


# -- decode / encode ------------------------------------------------------

def raw_grid(cfg, G=8, obj=-100.0):
    r = np.zeros((cfg.head_channels, G, G))
    r[0] = obj
    return r


def test_decode_all_cold_empty():
    cfg = ModelConfig()
    assert detector.decode_predictions(raw_grid(cfg, obj=-1e9), 0.01, cfg) == []


def test_decode_hot_cell_centered():
    cfg = ModelConfig()
    r = raw_grid(cfg, G=16)
    r[0, 2, 3] = 10.0
    r[1 + 1, 2, 3] = 10.0
    dets = detector.decode_predictions(r, 0.5, cfg)
    assert len(dets) == 1
    d = dets[0]
    x1, y1, x2, y2 = d.box
    assert ((x1 + x2) / 2, (y1 + y2) / 2) == pytest.approx(((3 + 0.5) * 4, (2 + 0.5) * 4))
    assert (x2 - x1, y2 - y1) == pytest.approx((4.0, 4.0))
    assert d.class_id == 1


def test_decode_threshold_zero_every_cell():
    cfg = ModelConfig()
    assert len(detector.decode_predictions(raw_grid(cfg, G=8, obj=0.0), 0.0, cfg)) == 64
    with pytest.raises(ValueError):
        detector.decode_predictions(raw_grid(cfg), 1.5, cfg)


def test_encode_decode_round_trip():
    cfg = ModelConfig()
    rng = np.random.default_rng(0)
    for _ in range(100):
        w, h = rng.uniform(0.05, 0.4, 2)
        cx, cy = rng.uniform(w / 2, 1 - w / 2), rng.uniform(h / 2, 1 - h / 2)
        lab = LabelRecord(int(rng.integers(2)), cx, cy, w, h)
        row, col, vec = detector.encode_box(lab, cfg)
        r = raw_grid(cfg, G=cfg.grid)
        r[0, row, col] = 20.0
        r[1 + lab.class_id, row, col] = 20.0
        r[3:7, row, col] = vec
        (d,) = detector.decode_predictions(r, 0.5, cfg)
        x1, y1, x2, y2 = d.box
        half_cell = 0.5 * cfg.stride
        assert abs((x1 + x2) / 2 - cx * 64) < half_cell and abs((y1 + y2) / 2 - cy * 64) < half_cell
        assert (x2 - x1) == pytest.approx(w * 64, rel=1e-6) and (y2 - y1) == pytest.approx(h * 64, rel=1e-6)
        assert d.class_id == lab.class_id


def test_build_targets_later_object_wins():
    cfg = ModelConfig()
    a = LabelRecord(0, 0.51, 0.51, 0.1, 0.1)
    b = LabelRecord(1, 0.52, 0.52, 0.2, 0.2)
    t = detector.build_targets([[a, b], []], cfg)
    assert t.obj.sum() == 1 and t.obj.shape == (2, 16, 16)
    assert t.cls.tolist() == [[0.0, 1.0]]


# -- NMS ----------------------------------------------------------------

def test_nms_examples():
    d = Detection(0, 0.9, (0, 0, 10, 10))
    assert detector.nms([d]) == [d]
    dup = [Detection(0, 0.8, (0, 0, 10, 10)), Detection(0, 0.9, (0, 0, 10, 10))]
    assert detector.nms(dup) == [dup[1]]
    for bad in (0.0, 1.0):
        with pytest.raises(ValueError):
            detector.nms([d], bad)


def test_nms_brute_force():
    rng = np.random.default_rng(1)
    for _ in range(100):
        n = 50
        xy = rng.uniform(0, 50, (n, 2))
        wh = rng.uniform(4, 20, (n, 2))
        dets = [Detection(int(rng.integers(2)), float(rng.uniform(0, 1)), (*xy[i], *(xy[i] + wh[i]))) for i in range(n)]
        thr = float(rng.uniform(0.2, 0.8))
        kept = detector.nms(dets, thr)
        ref = brute_nms(np.array([d.box for d in dets]), np.array([d.score for d in dets]), np.array([d.class_id for d in dets]), thr)
        assert {id(d) for d in kept} == {id(dets[i]) for i in ref}


# -- training ------------------------------------------------------------

def test_zero_lr_leaves_parameters(tiny_set):
    train, _ = tiny_set
    cfg = quick_cfg(learning_rate=0.0, min_learning_rate=0.0)
    before = detector.Model(cfg).state()
    after = detector.train(train, cfg).model.state()
    assert before.keys() == after.keys()
    for k in before:
        assert np.array_equal(before[k], after[k]), k


def test_overfit_one_sample():
    ds = data.generate_synthetic(SyntheticSpec(n_train=1, n_val=0, seed=2))
    sample = ds.split("train")
    cfg = ModelConfig(batch_size=1, acmix=False, geometric_ops=(), learning_rate=0.002, min_learning_rate=0.002)
    init_model = detector.Model(cfg)
    initial = detector.batch_loss(init_model, sample)
    model = detector.train(sample, cfg, steps=200).model
    final = detector.batch_loss(model, sample)
    assert final < initial
    # L_L1 is held at the fusion floor, so judge the detection terms on their own
    assert detection_terms(model, sample) < 0.1 * detection_terms(init_model, sample)


def detection_terms(model, batch):
    out = model.forward(detector.images_to_tensor(batch))
    parts = detector.detection_losses(model, out, detector.build_targets([i.labels for i in batch], model.cfg))
    return parts["L_x"].item() + parts["L_c"].item()


def test_training_deterministic(tiny_set):
    train, _ = tiny_set
    cfg = quick_cfg(epochs=2)
    a = detector.train(train, cfg)
    b = detector.train(train, cfg)
    assert a.log == b.log
    assert all(np.array_equal(a.model.params[k].data, b.model.params[k].data) for k in a.model.params)
    assert all(math.isfinite(v) for e in a.log for v in e.values())


def test_step_count_and_log(tiny_set):
    train, _ = tiny_set
    res = detector.train(train, quick_cfg(epochs=2, acmix=False))
    assert [e["steps"] for e in res.log] == [3, 3]
    assert res.log[0]["lr"] > res.log[1]["lr"]


def test_cosine_schedule():
    assert detector.cosine_lr(0, 10, 1e-3, 1e-5) == pytest.approx(1e-3)
    assert detector.cosine_lr(9, 10, 1e-3, 1e-5) == pytest.approx(1e-5)
    assert detector.cosine_lr(0, 1, 1e-3, 1e-5) == 1e-3


def test_divergence_reported(tiny_set):
    train, _ = tiny_set
    def poison(step, losses):
        holder["model"].params["head.bias"].data[:] = np.nan

    holder = {}
    orig = detector.Model

    def capture(cfg):
        holder["model"] = orig(cfg)
        return holder["model"]

    detector.Model = capture
    try:
        with pytest.raises(detector.TrainingDiverged) as exc:
            detector.train(train, quick_cfg(acmix=False), on_batch=poison)
    finally:
        detector.Model = orig
    assert (exc.value.epoch, exc.value.batch) == (0, 1)


# -- FLOPs --------------------------------------------------------------

def test_analytic_macs():
    assert detector.affine_macs(2, 3) == 6
    assert detector.conv_macs(1, 1, 1, 4, 4) == 16


def test_flops_additive_and_ordered():
    cfg = ModelConfig()
    rep = detector.count_flops(cfg)
    assert rep.total == 2 * sum(rep.modules.values())
    v = rep.variants
    assert v["full"] == rep.total
    assert v["full"] > v["no-bifpn"] > v["no-rfaconv"] > v["no-self-attention"]
    for name, tog in detector.ABLATION_VARIANTS.items():
        if name in ("full", "no-acmix"):
            continue
        assert v[name] < v["full"], name
    assert v["no-rfafpn"] < min(v["no-rfaconv"], v["no-bifpn"])
    assert v["no-acmix"] == v["full"]


# -- checkpoints --------------------------------------------------------

def test_checkpoint_round_trip(tmp_path, tiny_set):
    train, val = tiny_set
    model = detector.train(train, quick_cfg()).model
    path = tmp_path / "m.ckpt"
    detector.save_checkpoint(model, path)
    loaded = detector.load_checkpoint(path)
    assert loaded.cfg == model.cfg
    for k in model.params:
        assert np.array_equal(loaded.params[k].data, model.params[k].data)
    a = detector.evaluate_model(model, val).map50
    b = detector.evaluate_model(loaded, val).map50
    assert round(a, 12) == round(b, 12)


def test_checkpoint_rejects_garbage(tmp_path):
    p = tmp_path / "x.ckpt"
    p.write_bytes(b"not a checkpoint")
    with pytest.raises(ValueError):
        detector.load_checkpoint(p)


def test_load_state_shape_mismatch():
    m = detector.Model(ModelConfig())
    with pytest.raises(KeyError):
        m.load_state({"nope": np.zeros(1)})
    with pytest.raises(ValueError):
        m.load_state({"stem": np.zeros(1)})
