"""Time the numba kernels against their numpy twins.

    python3 benchmarks/bench_kernels.py [--repeat N] [--json out.json]

Part one times each kernel pair in-process (first numba call excluded,
so compile time is not counted). Part two times a few full training
steps in two subprocesses, one per ``YOLORS_NUMBA`` setting.
"""
import argparse
import json
import os
import subprocess
import sys
import timeit

import numpy as np

STEP_SNIPPET = """
import time
from yolors import data, detector
ds = data.generate_synthetic(data.SyntheticSpec(n_train=16, n_val=0, seed=0))
cfg = detector.ModelConfig(batch_size=8)
detector.train(ds.split("train"), cfg, steps=1)  # warm-up (and numba compile)
t = time.perf_counter()
detector.train(ds.split("train"), cfg, steps={steps})
print((time.perf_counter() - t) / {steps})
"""


def kernel_cases(rng):
    from yolors import kernels as K

    xp = rng.normal(size=(8, 16, 18, 18))
    cols = K.im2col_np(xp, 3, 1)
    pool_in = rng.normal(size=(8, 16, 16, 16))
    _, arg = K.maxpool2_np(pool_in)
    g = rng.normal(size=(8, 16, 8, 8))
    xy = rng.uniform(0, 60, (400, 2))
    boxes = np.concatenate([xy, xy + rng.uniform(2, 12, (400, 2))], axis=1)
    scores = rng.uniform(size=400)
    classes = rng.integers(0, 2, 400)
    return [
        ("im2col 8x16x18x18 k3", K.im2col_np, K.im2col_nb, (xp, 3, 1)),
        ("col2im 8x16x18x18 k3", K.col2im_np, K.col2im_nb, (cols, 18, 18, 1)),
        ("maxpool2 8x16x16x16", K.maxpool2_np, K.maxpool2_nb, (pool_in,)),
        ("maxpool2 backward", K.maxpool2_backward_np, K.maxpool2_backward_nb, (g, arg, 16, 16)),
        ("iou 400x400", K.iou_matrix_np, K.iou_matrix_nb, (boxes, boxes)),
        ("nms 400 boxes", K.nms_np, K.nms_nb, (boxes, scores, classes, 0.5)),
    ]


def bench_kernels(repeat):
    from yolors import _accel

    rows = []
    if not _accel.USE_NUMBA:
        print("numba unavailable or disabled; kernel comparison skipped")
        return rows
    rng = np.random.default_rng(0)
    for name, f_np, f_nb, args in kernel_cases(rng):
        f_nb(*args)  # compile
        t_np = min(timeit.repeat(lambda: f_np(*args), number=1, repeat=repeat))
        t_nb = min(timeit.repeat(lambda: f_nb(*args), number=1, repeat=repeat))
        rows.append({"kernel": name, "numpy_ms": 1e3 * t_np, "numba_ms": 1e3 * t_nb, "speedup": t_np / t_nb})
    return rows


def bench_steps(steps):
    out = {}
    for flag in ("0", "1"):
        env = dict(os.environ, YOLORS_NUMBA=flag)
        res = subprocess.run(
            [sys.executable, "-c", STEP_SNIPPET.format(steps=steps)], env=env, capture_output=True, text=True, check=True
        )
        out["numba" if flag == "1" else "numpy"] = float(res.stdout.strip().splitlines()[-1])
    return out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--steps", type=int, default=3)
    ap.add_argument("--json", help="also write results here")
    args = ap.parse_args(argv)

    rows = bench_kernels(args.repeat)
    if rows:
        print(f"{'kernel':26s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s}")
        for r in rows:
            print(f"{r['kernel']:26s} {r['numpy_ms']:10.3f} {r['numba_ms']:10.3f} {r['speedup']:8.2f}")
    steps = bench_steps(args.steps)
    print(f"\ntrain step (batch 8): numpy {steps['numpy']:.3f}s, numba {steps['numba']:.3f}s")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump({"kernels": rows, "train_step_seconds": steps}, fh, indent=2)


if __name__ == "__main__":
    main()
