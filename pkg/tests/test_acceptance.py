"""Acceptance suite: one verdict line per criterion.

Criteria 6-8 train real models (roughly an hour on one core in total);
they carry the ``slow`` marker so ``-m "not slow"`` skips them.
Verdicts are printed as they are reached and repeated in the pytest
terminal summary.
"""
import math

import numpy as np
import pytest

from yolors import acmix, caa, data, detector, gradsuite, instrument, metrics, render
from yolors import tensor as T
from yolors.data import LabelRecord, SyntheticSpec
from yolors.detector import ABLATION_VARIANTS, ModelConfig
from yolors.metrics import Detection, GroundTruth

from acceptance_log import record
from oracles import brute_nms, greedy_flags, naive_attention, naive_conv2d, naive_matmul, rank_enum_ap
from reported_tables import ALL_TABLES

DESK_SPEC = SyntheticSpec(n_train=200, n_val=50, imbalance_ratio=3, seed=0)
IMBALANCED_SPEC = SyntheticSpec(n_train=200, n_val=50, imbalance_ratio=10, seed=0)
SEEDS = (0, 1, 2)
SINGLE_MODULE_VARIANTS = ("no-rfaconv", "no-bifpn", "no-self-attention", "no-caa", "no-acmix")
TIME_LIMIT = 15 * 60

_datasets: dict = {}
_runs: dict = {}


def dataset(spec):
    key = (spec.imbalance_ratio, spec.seed)
    if key not in _datasets:
        ds = data.generate_synthetic(spec)
        _datasets[key] = (ds.split("train"), ds.split("val"))
    return _datasets[key]


def trained(spec, variant="full", seed=0, on_batch=None):
    """Train once per (dataset, variant, seed) and cache the outcome."""
    key = (spec.imbalance_ratio, spec.seed, variant, seed)
    if key not in _runs:
        train_set, val_set = dataset(spec)
        cfg = ModelConfig(seed=seed).with_toggles(**ABLATION_VARIANTS[variant])
        res = detector.train(train_set, cfg, on_batch=on_batch)
        _runs[key] = (res, detector.evaluate_model(res.model, val_set))
    return _runs[key]


# ---------------------------------------------------------------------------


def test_criterion_1_gradient_suite():
    rows, secs = gradsuite.main_report(0, 1e-5)
    worst_name, worst = max(rows, key=lambda r: r[1])
    ok = worst < 1e-4 and secs < 60
    record(1, ok, f"{len(rows)} grad checks, max rel err {worst:.2e} ({worst_name}), {secs:.1f}s")
    assert ok


def test_criterion_2_oracle_equivalence():
    rng = T.RandomSource(2024)
    fails = []
    n = 100

    for _ in range(n):
        a, b = rng.normal((4, 5)), rng.normal((5, 3))
        if not np.allclose(T.matmul(T.Tensor(a), T.Tensor(b)).data, naive_matmul(a, b), rtol=1e-12, atol=1e-12):
            fails.append("matmul")

    for i in range(n):
        stride, pad = (1, 1) if i % 2 else (2, 0)
        x, w = rng.normal((2, 7, 7)), rng.normal((3, 2, 3, 3))
        got = T.conv2d(T.Tensor(x), T.Tensor(w), stride, pad).data
        if not np.allclose(got, naive_conv2d(x, w, stride, pad), rtol=1e-12, atol=1e-12):
            fails.append("conv2d")

    for _ in range(n):
        Q, K = rng.normal((5, 3)), rng.normal((5, 3))
        got = caa.attention_weights(T.Tensor(Q), T.Tensor(K)).data
        if not np.allclose(got, naive_attention(Q, K), rtol=0, atol=1e-10):
            fails.append("attention")

    np_rng = np.random.default_rng(7)
    for _ in range(n):
        k = 30
        xy = np_rng.uniform(0, 50, (k, 2))
        boxes = np.concatenate([xy, xy + np_rng.uniform(4, 20, (k, 2))], axis=1)
        scores = np_rng.uniform(0, 1, k)
        classes = np_rng.integers(0, 2, k)
        dets = [Detection(int(classes[i]), float(scores[i]), tuple(boxes[i])) for i in range(k)]
        kept = {id(d) for d in detector.nms(dets, 0.5)}
        if kept != {id(dets[i]) for i in brute_nms(boxes, scores, classes, 0.5)}:
            fails.append("nms")

    for _ in range(n):
        truths = [GroundTruth(0, tuple(np.r_[p, p + 10]), int(np_rng.integers(3))) for p in np_rng.uniform(0, 40, (6, 2))]
        dets = []
        for _ in range(10):
            t = truths[int(np_rng.integers(len(truths)))]
            jitter = np_rng.normal(0, 2, 4)
            b = np.asarray(t.box) + jitter
            if b[2] <= b[0] or b[3] <= b[1]:
                b = np.asarray(t.box)
            dets.append(Detection(0, float(np_rng.uniform(0.01, 1)), tuple(b), t.image_id))
        flags = greedy_flags([(d.score, d.box, d.image_id) for d in dets], [(t.box, t.image_id) for t in truths], 0.5)
        if abs(metrics.average_precision(dets, truths, 0.5) - rank_enum_ap(flags, len(truths))) > 1e-9:
            fails.append("ap")

    ok = not fails
    detail = f"{n} instances each of matmul/conv2d/attention/NMS/AP"
    record(2, ok, detail + ("" if ok else f"; mismatches: {sorted(set(fails))}"))
    assert ok


def test_criterion_3_normalization_invariants():
    train_set, _ = dataset(DESK_SPEC)
    cfg = ModelConfig(epochs=1)
    err = None
    with instrument.watch(atol=1e-6) as watch:
        try:
            detector.train(train_set, cfg)
        except AssertionError as e:
            err = str(e)
    counts = dict(watch.checks)
    ok = err is None and counts.get("softmax", 0) > 0 and counts.get("bifpn_fusion", 0) > 0
    detail = f"one epoch, checks {counts}, max |sum-1| {watch.max_deviation:.1e}"
    record(3, ok, detail + (f"; {err}" if err else ""))
    assert ok


def test_criterion_4_f1_harmonic_mean():
    value = metrics.f1(0.921, 0.890)
    literal = 2 * (0.921 + 0.890) / (0.921 * 0.890)
    bad = []
    cells = 0
    for table, rows in ALL_TABLES.items():
        for name, p, r, reported in rows:
            cells += 1
            got = metrics.f1(p / 100, r / 100)
            if abs(got - reported) > 0.005:
                bad.append(f"{table}:{name} {got:.4f} vs {reported:.2f}")
    ok = abs(value - 0.905) <= 0.001 and abs(literal - 4.42) < 0.005 and not bad
    detail = f"f1(0.921, 0.890) = {value:.4f}, literal form = {literal:.2f}, {cells - len(bad)}/{cells} cells within 0.005"
    record(4, ok, detail + (f"; off: {'; '.join(bad)}" if bad else ""))
    assert ok


def test_criterion_5_flop_accounting():
    cfg = ModelConfig()
    rep = detector.count_flops(cfg)
    v = rep.variants
    additive = rep.total == 2 * sum(rep.modules.values()) and all(
        v[name] == 2 * sum(detector.module_macs(cfg.with_toggles(**tog)).values()) for name, tog in ABLATION_VARIANTS.items()
    )
    # every module that costs compute must strictly lower the count when disabled
    monotone = all(v[name] < v["full"] for name in ABLATION_VARIANTS if name not in ("full", "no-acmix"))
    monotone = monotone and v["no-rfafpn"] < min(v["no-rfaconv"], v["no-bifpn"])
    monotone = monotone and v["no-caa"] < v["no-self-attention"]
    ordered = v["full"] > v["no-bifpn"] > v["no-rfaconv"] > v["no-self-attention"]
    ok = additive and monotone and ordered
    order = " > ".join(f"{k} {v[k] / 1e6:.2f}M" for k in ("full", "no-bifpn", "no-rfaconv", "no-self-attention"))
    record(5, ok, f"additive={additive}, monotone={monotone}, {order}")
    assert ok


class _StopAfter(Exception):
    pass


@pytest.mark.slow
def test_criterion_6_desk_scale_training():
    losses = []
    res, rep = trained(DESK_SPEC, "full", 0, on_batch=lambda step, l: losses.append(dict(l)))
    finite = all(math.isfinite(x) for e in res.log for x in e.values() if isinstance(x, float))

    # replay the first epoch with the same seed and compare bit for bit
    replay = []

    def stop(step, l):
        replay.append(dict(l))
        if step >= res.log[0]["steps"]:
            raise _StopAfter

    train_set, _ = dataset(DESK_SPEC)
    with pytest.raises(_StopAfter):
        detector.train(train_set, ModelConfig(seed=0), on_batch=stop)
    reproducible = bool(losses) and replay == losses[: len(replay)]
    ok = rep.map50 >= 0.90 and res.seconds < TIME_LIMIT and finite and reproducible
    record(
        6,
        ok,
        f"mAP@.5 {rep.map50:.4f} after {len(res.log)} epochs in {res.seconds:.0f}s, finite={finite}, reproducible={reproducible}",
    )
    assert ok


@pytest.mark.slow
def test_criterion_7_directional_ablation():
    wins = {}
    cells = []
    for variant in SINGLE_MODULE_VARIANTS:
        wins[variant] = 0
        for seed in SEEDS:
            full = trained(DESK_SPEC, "full", seed)[1].map50
            other = trained(DESK_SPEC, variant, seed)[1].map50
            wins[variant] += full >= other
            cells.append(f"{variant}/s{seed} {full:.3f}:{other:.3f}")
    ok = all(w >= 2 for w in wins.values())
    summary = ", ".join(f"{k} {w}/3" for k, w in wins.items())
    record(7, ok, f"full >= variant in {summary} [{'; '.join(cells)}]")
    assert ok


@pytest.mark.slow
def test_criterion_8_acmix_minority_ap():
    train_set, _ = dataset(IMBALANCED_SPEC)
    minority = max(acmix.compute_class_frequencies(train_set).minority_classes())
    better = 0
    cells = []
    for seed in SEEDS:
        with_aug = trained(IMBALANCED_SPEC, "full", seed)[1].ap[minority][0.5]
        without = trained(IMBALANCED_SPEC, "no-acmix", seed)[1].ap[minority][0.5]
        better += with_aug > without
        cells.append(f"s{seed} {with_aug:.3f} vs {without:.3f}")
    ok = better >= 2
    record(8, ok, f"minority class {minority} AP@.5 higher with ACmix in {better}/3 seeds ({'; '.join(cells)})")
    assert ok


@pytest.mark.slow
def test_criterion_9_format_round_trips(tmp_path):
    rng = np.random.default_rng(9)
    labels_ok = True
    for i in range(200):
        recs = []
        for _ in range(int(rng.integers(0, 6))):
            w, h = rng.uniform(0.01, 0.5, 2)
            cx, cy = rng.uniform(w / 2, 1 - w / 2), rng.uniform(h / 2, 1 - h / 2)
            recs.append(LabelRecord(int(rng.integers(0, 5)), *(round(v, 6) for v in (cx, cy, w, h))))
        p = tmp_path / f"{i}.txt"
        data.write_yolo_labels(p, recs)
        labels_ok &= data.load_yolo_labels(p) == recs

    res, rep = trained(DESK_SPEC, "full", 0)
    _, val_set = dataset(DESK_SPEC)
    img = val_set[0]
    dets = detector.predict(res.model, [img], res.model.cfg.conf_threshold)[0]
    truths = [r.to_pixels(img.width, img.height) for r in img.labels]
    blob = render.render_detections(img, truths, dets, tmp_path / "overlay.ppm").read_bytes()
    header = f"P6\n{img.width} {img.height}\n255\n".encode()
    p6_ok = blob.startswith(header) and len(blob) == len(header) + 3 * img.width * img.height
    p6_ok = p6_ok and data.decode_ppm(blob).shape == img.pixels.shape

    ckpt = tmp_path / "model.ckpt"
    detector.save_checkpoint(res.model, ckpt)
    again = detector.evaluate_model(detector.load_checkpoint(ckpt), val_set).map50
    ckpt_ok = f"{again:.12f}" == f"{rep.map50:.12f}"

    ok = labels_ok and p6_ok and ckpt_ok
    record(9, ok, f"labels={labels_ok}, P6={p6_ok}, checkpoint mAP {rep.map50:.12f} -> {again:.12f}")
    assert ok


if __name__ == "__main__":
    import sys

    sys.exit(pytest.main([__file__, "-q"]))
