"""Finite-difference checks over every differentiable op and composed block.

Each case is ``(name, f, x)`` where ``f`` maps one tensor to a scalar.
Non-scalar outputs are reduced with a fixed random projection so every
output coordinate contributes. Inputs are kept away from the kinks of
relu/abs/clip/norm so central differences are meaningful.
"""
from __future__ import annotations

import dataclasses
import time

import numpy as np

from . import caa, rfafpn
from . import tensor as T
from .tensor import RandomSource, Tensor

TOLERANCE = 1e-4


def _away(rng: RandomSource, shape, lo=0.1, hi=1.0) -> np.ndarray:
    """Random values with ``lo <= |v| <= hi``."""
    mag = rng.uniform(lo, hi, shape)
    sign = np.where(rng.random(shape) < 0.5, -1.0, 1.0)
    return mag * sign


def _project(rng: RandomSource):
    cache = {}

    def proj(y: Tensor) -> Tensor:
        if y.size == 1:
            return T.reshape(y, ())
        if y.shape not in cache:
            cache[y.shape] = rng.normal(y.shape)
        return T.tsum(T.mul(y, Tensor(cache[y.shape])))

    return proj


def build_cases(seed: int = 0) -> list:
    rng = RandomSource(seed)
    proj = _project(rng.derive(99))
    cases = []

    def add(name, f, x):
        cases.append((name, f, np.asarray(x, dtype=np.float64)))

    a = _away(rng, (3, 4))
    b = _away(rng, (3, 4))
    row = _away(rng, (4,))
    pos = rng.uniform(0.2, 2.0, (3, 4))

    # elementwise and broadcasting
    add("add", lambda x: proj(T.add(x, Tensor(b))), a)
    add("add_broadcast", lambda x: proj(T.add(Tensor(a), x)), row)
    add("sub", lambda x: proj(T.sub(Tensor(a), x)), b)
    add("mul", lambda x: proj(T.mul(x, Tensor(b))), a)
    add("mul_broadcast", lambda x: proj(T.mul(Tensor(a), x)), row)
    add("div_num", lambda x: proj(T.div(x, Tensor(pos))), a)
    add("div_den", lambda x: proj(T.div(Tensor(a), x)), pos)
    add("scale", lambda x: proj(T.scale(x, -2.5)), a)
    add("relu", lambda x: proj(T.relu(x)), a)
    add("sigmoid", lambda x: proj(T.sigmoid(x)), 4 * a)
    add("abs", lambda x: proj(T.tabs(x)), a)
    add("exp", lambda x: proj(T.texp(x)), a)
    add("log", lambda x: proj(T.tlog(x)), pos)
    add("clip", lambda x: proj(T.clip(x, -0.5, 0.5)), np.where(np.abs(np.abs(a) - 0.5) < 0.05, a * 0.8, a))
    add("square", lambda x: proj(T.square(x)), a)
    add("norm", lambda x: proj(T.norm(x, axis=-1)), a)
    for kind in ("add", "mul"):
        add(f"elementwise_{kind}", lambda x, k=kind: proj(T.elementwise(k, x, Tensor(b))), a)
    for kind in ("relu", "sigmoid", "abs"):
        add(f"elementwise_{kind}", lambda x, k=kind: proj(T.elementwise(k, x)), a)

    # reductions and shape ops
    add("sum", lambda x: T.tsum(x), a)
    add("sum_axis", lambda x: proj(T.tsum(x, axis=0)), a)
    add("mean", lambda x: proj(T.tmean(x, axis=1, keepdims=True)), a)
    add("reshape", lambda x: proj(T.reshape(x, (2, 6))), a)
    add("transpose", lambda x: proj(T.transpose(x)), a)
    add("index", lambda x: proj(T.index(x, (np.array([0, 2, 0]), np.array([1, 3, 1])))), a)
    add("concat", lambda x: proj(T.concat([x, Tensor(b)], axis=1)), a)
    add("stack", lambda x: proj(T.stack([x, Tensor(b)], axis=0)), a)

    # linear algebra
    m1, m2 = rng.normal((4, 5)), rng.normal((5, 3))
    bat = rng.normal((2, 4, 5))
    add("matmul_lhs", lambda x: proj(T.matmul(x, Tensor(m2))), m1)
    add("matmul_rhs", lambda x: proj(T.matmul(Tensor(m1), x)), m2)
    add("matmul_batched", lambda x: proj(T.matmul(x, Tensor(m2))), bat)
    add("softmax", lambda x: proj(T.softmax(x, axis=-1)), rng.normal((3, 5)))

    # convolution family
    img = rng.normal((2, 3, 6, 6))
    w3 = rng.normal((4, 3, 3, 3))
    wdw = rng.normal((3, 1, 3, 3))
    wg = rng.normal((4, 1, 3, 3))
    bias = rng.normal((4,))
    add("conv2d_x", lambda x: proj(T.conv2d(x, Tensor(w3), 1, 1)), img)
    add("conv2d_w", lambda x: proj(T.conv2d(Tensor(img), x, 1, 1)), w3)
    add("conv2d_bias", lambda x: proj(T.conv2d(Tensor(img), Tensor(w3), 1, 1, bias=x)), bias)
    add("conv2d_stride2", lambda x: proj(T.conv2d(x, Tensor(w3), 2, (1, 0, 1, 0))), img)
    add("conv2d_depthwise_x", lambda x: proj(T.conv2d(x, Tensor(wdw), 1, 1, groups=3)), img)
    add("conv2d_depthwise_w", lambda x: proj(T.conv2d(Tensor(img), x, 1, 1, groups=3)), wdw)
    img4 = rng.normal((1, 4, 5, 5))
    add("conv2d_groups_x", lambda x: proj(T.conv2d(x, Tensor(wg), 1, 1, groups=4)), img4)
    add("global_avg_pool", lambda x: proj(T.global_avg_pool(x)), img)
    # distinct values so the argmax is stable under perturbation
    pool_in = (rng.permutation(2 * 3 * 5 * 5).reshape(2, 3, 5, 5) / 10.0)
    add("maxpool2", lambda x: proj(T.maxpool2(x)), pool_in)
    add("upsample2x", lambda x: proj(T.upsample2x(x, (5, 5))), rng.normal((1, 2, 3, 3)))

    # attention block
    d, H = 6, 4
    cw = caa.CaaWeights.init(d, None, rng)
    cw.gate.data = rng.normal((d,))
    fmap = rng.normal((d, H, H))

    def with_w(field):
        def f(x):
            w = dataclasses.replace(cw, **{field: x})
            return proj(caa.caa_forward(Tensor(fmap), w))

        return f

    add("caa_forward_x", lambda x: proj(caa.caa_forward(x, cw)), fmap)
    for field in ("W_q", "W_k", "W_v", "gate"):
        add(f"caa_forward_{field}", with_w(field), getattr(cw, field).data)
    add("caa_forward_no_self_attention", lambda x: proj(caa.caa_forward(x, cw, False)), fmap)

    # RFAconv
    C = 4
    rp = rfafpn.RFAConvParams.init(C, rng)
    for t in rp.attention:
        t.data = rng.normal(t.shape)
    rmap = rng.normal((C, 5, 5))
    add("rfaconv_forward_x", lambda x: proj(rfafpn.rfaconv_forward(x, rp).data), rmap)

    def rfa_param(group, i):
        def f(x):
            lists = {g: list(getattr(rp, g)) for g in ("depthwise", "pointwise", "attention")}
            lists[group][i] = x
            p = dataclasses.replace(rp, **lists)
            return proj(rfafpn.rfaconv_forward(Tensor(rmap), p).data)

        return f

    for group in ("depthwise", "pointwise", "attention"):
        add(f"rfaconv_forward_{group}", rfa_param(group, 1), getattr(rp, group)[1].data)

    # BiFPN
    bp = rfafpn.BiFPNParams.init(C, 3, rng)
    for t in bp.fusion:
        t.data = rng.uniform(0.3, 1.5, t.shape)
    sizes = (8, 4, 2)
    levels = [rng.normal((C, s, s)) for s in sizes]

    def pyr(first):
        return rfafpn.FeaturePyramid([rfafpn.FeatureMap(first, "rfa")] + [rfafpn.FeatureMap(Tensor(l), "rfa") for l in levels[1:]])

    def fpn_out(p, w):
        out = rfafpn.bifpn_fuse(p, w)
        return T.add(T.add(proj(out[0].data), proj(out[1].data)), proj(out[2].data))

    add("bifpn_fuse_x", lambda x: fpn_out(pyr(x), bp), levels[0])

    def bifpn_param(group, i):
        def f(x):
            lists = {g: list(getattr(bp, g)) for g in ("fusion", "depthwise", "pointwise")}
            lists[group][i] = x
            return fpn_out(pyr(Tensor(levels[0])), dataclasses.replace(bp, **lists))

        return f

    add("bifpn_fuse_fusion", bifpn_param("fusion", 1), bp.fusion[1].data)
    add("bifpn_fuse_depthwise", bifpn_param("depthwise", 0), bp.depthwise[0].data)
    add("normalize_fusion", lambda x: proj(rfafpn.normalize_fusion(x)), rng.uniform(0.2, 1.0, (3,)))

    # GAN terms
    disc = rfafpn.Discriminator.init(C, rng)
    real, fake = rng.normal((2, C, 8, 8)), rng.normal((2, C, 8, 8))
    add("g_loss_fake", lambda x: rfafpn.adversarial_losses(disc, Tensor(real), x)[0], fake)

    def d_param(field):
        def f(x):
            dd = dataclasses.replace(disc, **{field: x})
            return rfafpn.adversarial_losses(dd, Tensor(real), Tensor(fake))[1]

        return f

    for field in ("conv1", "fc_w", "fc_b"):
        add(f"d_loss_{field}", d_param(field), getattr(disc, field).data)

    # loss terms
    V, I, D = 5, 3, 4
    y = np.zeros((V, I))
    y[[0, 2, 4], [0, 1, 2]] = 1.0
    O = rng.normal((V, D))
    Kstar = rng.normal((I, D))
    add("coordinate_loss", lambda x: rfafpn.coordinate_loss(rfafpn.CellAssignment(y, x, O, Kstar)), rng.normal((V, D)))
    add("coordinate_loss_per_element", lambda x: rfafpn.coordinate_loss(rfafpn.CellAssignment(y, x, O, Kstar)), rng.normal((V, I, D)))
    c = rng.uniform(0.05, 0.95, (V, I))
    add("confidence_loss", lambda x: rfafpn.confidence_loss(rfafpn.CellAssignment(y, Tensor(rng.normal((V, D))), O, Kstar, x)), c)
    add("bce_weighted", lambda x: rfafpn.bce(x, y, np.where(y > 0, 3.0, 1.0)), c)
    add("sparsity_loss", lambda x: rfafpn.sparsity_loss(rfafpn.BasisWeights([x, Tensor(row)])), _away(rng, (6,)))
    lw = rfafpn.LossWeights(0.7, 1.3, 0.2)
    add(
        "composite_loss",
        lambda x: rfafpn.composite_loss(T.index(x, 0), T.index(x, 1), T.index(x, 2), lw),
        rng.normal((3,)),
    )
    return cases


def run_suite(seed: int = 0, epsilon: float = 1e-5) -> list:
    """``[(name, max relative error)]`` for every case."""
    return [(name, T.grad_check(f, x, epsilon)) for name, f, x in build_cases(seed)]


def main_report(seed: int = 0, epsilon: float = 1e-5) -> tuple:
    t0 = time.perf_counter()
    rows = run_suite(seed, epsilon)
    return rows, time.perf_counter() - t0
