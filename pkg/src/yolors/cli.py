"""Command-line entry point: ``yolors <subcommand> [flags]``.

Default output directory comes from ``YOLORS_OUT`` (falls back to ``./runs``).
Exit codes: 0 success, 1 runtime/data error, 2 usage error.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import ablation, acmix, config, data, detector, gradsuite, render
from .tensor import RandomSource

OUT_ENV = "YOLORS_OUT"
log = logging.getLogger("yolors")


class UsageError(Exception):
    pass


def default_out() -> Path:
    return Path(os.environ.get(OUT_ENV) or "runs")


def _out_dir(args, name: str) -> Path:
    out = Path(args.out) if getattr(args, "out", None) else default_out() / name
    out.mkdir(parents=True, exist_ok=True)
    return out


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="structured-text config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--lr", type=float, dest="learning_rate")
    for t in detector.TOGGLES:
        flag = t.replace("_", "-")
        p.add_argument(f"--no-{flag}", dest=t, action="store_const", const=False, help=f"disable {t}")


def _model_config(args, num_classes: int | None = None) -> detector.ModelConfig:
    file_vals = {}
    if getattr(args, "config", None):
        file_vals, _ = config.load_config(args.config)
    flags = {k: getattr(args, k, None) for k in ("seed", "epochs", "batch_size", "learning_rate", *detector.TOGGLES)}
    vals = config.merge(file_vals, flags)
    if num_classes is not None:
        vals.setdefault("num_classes", num_classes)
    return detector.ModelConfig(**vals)


def _open_data(path) -> data.DatasetManifest:
    root = Path(path)
    if not (root / "manifest.json").is_file():
        raise FileNotFoundError(f"no dataset at {root} (missing manifest.json)")
    return data.DatasetManifest.open(root)


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    file_vals = {}
    if args.config:
        _, file_vals = config.load_config(args.config)
    flags = {
        "seed": args.seed,
        "n_train": args.n_train,
        "n_val": args.n_val,
        "num_classes": args.num_classes,
        "imbalance_ratio": args.imbalance,
        "image_size": args.image_size,
    }
    spec = data.SyntheticSpec(**config.merge(file_vals, flags))
    out = _out_dir(args, "synth")
    ds = data.generate_synthetic(spec, out)
    counts = data.class_counts(ds.split("train"))
    print(json.dumps({"root": str(out), "train": len(ds.splits["train"]), "val": len(ds.splits["val"]), "train_class_counts": counts}))
    return 0


def cmd_train(args) -> int:
    ds = _open_data(args.data)
    cfg = _model_config(args, ds.num_classes)
    out = _out_dir(args, "train")
    res = detector.train(ds.split("train"), cfg, val_set=ds.split("val"), eval_every=args.eval_every)
    with open(out / "train_log.jsonl", "w") as fh:
        for entry in res.log:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")
    detector.save_checkpoint(res.model, out / "model.ckpt")
    (out / "config.ini").write_text(config.format_config(cfg))
    print(json.dumps({"checkpoint": str(out / "model.ckpt"), "seconds": round(res.seconds, 2), "final": res.log[-1]}))
    return 0


def _report_md(rep) -> str:
    lines = ["| Class | P | R | F1 | AP@.5 |", "|---|---|---|---|---|"]
    for c, row in rep.ap.items():
        k = str(c)
        lines.append(f"| {k} | {rep.precision[k]:.3f} | {rep.recall[k]:.3f} | {rep.f1[k]:.3f} | {row[0.5]:.3f} |")
    lines.append("")
    lines.append(f"mAP@.5 = {rep.map50:.4f}, mAP@.5-.95 = {rep.map50_95:.4f}")
    return "\n".join(lines) + "\n"


def cmd_eval(args) -> int:
    ds = _open_data(args.data)
    model = detector.load_checkpoint(args.checkpoint)
    rep = detector.evaluate_model(model, ds.split(args.split))
    out = _out_dir(args, "eval")
    (out / "report.json").write_text(rep.to_json() + "\n")
    (out / "report.md").write_text(_report_md(rep))
    print(json.dumps({"map50": rep.map50, "map50_95": rep.map50_95, "report": str(out / "report.json")}))
    return 0


def cmd_augment(args) -> int:
    ds = _open_data(args.data)
    images = ds.split(args.split)
    table = acmix.compute_class_frequencies(images)
    cfg = acmix.AcmixConfig(args.multiplier, args.strength, args.beta, tuple(args.ops.split(",")) if args.ops else ())
    aug = acmix.build_augmented_set(images, table, cfg, RandomSource(args.seed))
    out = _out_dir(args, "augment")
    manifest = data.DatasetManifest(
        str(out), {args.split: [img.image_id for img in aug]}, ds.class_names, {img.image_id: img for img in aug}, {"augment": aug.manifest}
    )
    manifest.write(out)
    print(json.dumps({"root": str(out), "images": len(aug), "class_counts": data.class_counts(aug)}))
    return 0


def cmd_ablate(args) -> int:
    ds = _open_data(args.data)
    cfg = _model_config(args, ds.num_classes)
    seeds = [int(s) for s in args.seeds.split(",")]
    rows = ablation.run_ablation(cfg, args.variants, ds.split("train"), ds.split("val"), seeds)
    out = _out_dir(args, "ablate")
    (out / "ablation.json").write_text(ablation.to_json(rows) + "\n")
    (out / "ablation.md").write_text(ablation.to_markdown(rows))
    print(ablation.to_markdown(rows), end="")
    return 0


def cmd_render(args) -> int:
    ds = _open_data(args.data)
    if args.image not in ds.splits.get("train", []) + ds.splits.get("val", []):
        raise KeyError(f"image {args.image!r} not in dataset")
    img = ds.load(args.image)
    truths = [r.to_pixels(img.width, img.height) for r in img.labels]
    dets = []
    if args.checkpoint:
        model = detector.load_checkpoint(args.checkpoint)
        dets = detector.predict(model, [img], model.cfg.conf_threshold)[0]
    out = Path(args.out) if args.out else default_out() / "render" / f"{args.image}.ppm"
    out.parent.mkdir(parents=True, exist_ok=True)
    render.render_detections(img, truths, dets, out)
    print(json.dumps({"image": str(out), "truths": len(truths), "detections": len(dets)}))
    return 0


def cmd_gradcheck(args) -> int:
    rows, secs = gradsuite.main_report(args.seed, args.epsilon)
    worst = max(e for _, e in rows)
    for name, err in rows:
        print(f"{name:36s} {err:.3e} {'ok' if err < gradsuite.TOLERANCE else 'FAIL'}")
    print(f"{len(rows)} checks, max relative error {worst:.3e}, {secs:.1f}s")
    return 0 if worst < gradsuite.TOLERANCE else 1


def cmd_flops(args) -> int:
    cfg = _model_config(args)
    print(json.dumps(detector.count_flops(cfg).to_dict(), indent=2, sort_keys=True))
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="yolors", description="Desk-scale small-object detector toolkit.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", metavar="{train,eval,augment,ablate,render,gradcheck,synth,flops}")

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--out")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--n-train", type=int, dest="n_train")
    p.add_argument("--n-val", type=int, dest="n_val")
    p.add_argument("--num-classes", type=int, dest="num_classes")
    p.add_argument("--imbalance", type=float)
    p.add_argument("--image-size", type=int, dest="image_size")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a detector")
    p.add_argument("--data", required=True)
    p.add_argument("--out")
    p.add_argument("--eval-every", type=int, default=0, dest="eval_every")
    _add_model_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="val")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("augment", help="write an ACmix-augmented copy of a split")
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="train")
    p.add_argument("--out")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--multiplier", type=int, default=2)
    p.add_argument("--strength", type=float, default=0.5)
    p.add_argument("--beta", type=float, default=1.0)
    p.add_argument("--ops", default="", help="comma-separated geometric ops")
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("ablate", help="train and evaluate ablation variants")
    p.add_argument("--data", required=True)
    p.add_argument("--out")
    p.add_argument("--variants", default=",".join(ablation.REQUIRED))
    p.add_argument("--seeds", default="0")
    _add_model_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("render", help="draw truths and predictions as a P6 pixmap")
    p.add_argument("--data", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--out")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epsilon", type=float, default=1e-5)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("flops", help="analytic FLOP report")
    _add_model_flags(p)
    p.set_defaults(func=cmd_flops)
    return ap


ERROR_CATEGORIES = (
    (config.ConfigError, "config"),
    (data.LabelFormatError, "data"),
    (FileNotFoundError, "io"),
    (OSError, "io"),
    (detector.TrainingDiverged, "training"),
    (KeyError, "input"),
    (ValueError, "input"),
)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    if not args.command:
        parser.print_usage(sys.stderr)
        print("yolors: error: a subcommand is required", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except Exception as e:
        for cls, cat in ERROR_CATEGORIES:
            if isinstance(e, cls):
                msg = e.args[0] if isinstance(e, KeyError) and e.args else e
                print(f"yolors: {cat} error: {msg}", file=sys.stderr)
                return 1
        raise


if __name__ == "__main__":
    sys.exit(main())
