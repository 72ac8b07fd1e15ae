"""Multi-receptive-field feature pyramid block.

Pipeline per pyramid::

    lateral -> RFAconv (encoder) -> BiFPN (decoder) = F1_GAN
    F1_GAN (finest level) -> CAA = F2_CAA
    F3 = F1_GAN + F2_CAA

An adversarial discriminator scores the decoded finest level against the
lateral ("real") features of the same batch. The training objective is
``lambda_x * L_x + lambda_c * L_c + lambda_l1 * L_l1`` (coordinate,
confidence and sparsity terms) plus the generator loss.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import instrument
from .tensor import (
    RandomSource,
    ShapeError,
    Tensor,
    add,
    as_tensor,
    clip,
    concat,
    conv2d,
    div,
    global_avg_pool,
    he_normal,
    index,
    matmul,
    maxpool2,
    mul,
    norm,
    parameter,
    relu,
    reshape,
    scale,
    sigmoid,
    softmax,
    stack,
    tabs,
    tlog,
    tmean,
    tsum,
    upsample2x,
)

ROLES = ("raw", "rfa", "f1_gan", "f2_caa", "f3")
FUSION_EPS = 1e-4
LOGIT_CLAMP = 30.0
BCE_CLAMP = 1e-7


@dataclass
class FeatureMap:
    data: Tensor
    role: str = "raw"

    def __post_init__(self):
        self.data = as_tensor(self.data)
        if self.role not in ROLES:
            raise ValueError(f"unknown feature role {self.role!r}")
        if self.data.ndim not in (3, 4):
            raise ShapeError(f"feature map must be C x H x W (optionally batched), got {self.data.shape}")

    @property
    def channels(self) -> int:
        return self.data.shape[-3]

    @property
    def height(self) -> int:
        return self.data.shape[-2]

    @property
    def width(self) -> int:
        return self.data.shape[-1]

    @property
    def shape(self) -> tuple:
        return self.data.shape


@dataclass
class FeaturePyramid:
    """Feature maps ordered finest first; each level halves (ceil) the previous."""

    levels: list
    scale_ratio: int = 2

    def __post_init__(self):
        self.levels = [lv if isinstance(lv, FeatureMap) else FeatureMap(lv) for lv in self.levels]
        for fine, coarse in zip(self.levels, self.levels[1:]):
            if coarse.channels != fine.channels:
                raise ShapeError("pyramid levels must share a channel count")
            if (coarse.height, coarse.width) != (-(-fine.height // 2), -(-fine.width // 2)):
                raise ShapeError(
                    f"level {coarse.height}x{coarse.width} is not the ceil-half of {fine.height}x{fine.width}"
                )

    def __len__(self):
        return len(self.levels)

    def __getitem__(self, i) -> FeatureMap:
        return self.levels[i]

    def shapes(self) -> list:
        return [lv.shape for lv in self.levels]

    def with_role(self, role: str) -> "FeaturePyramid":
        return FeaturePyramid([FeatureMap(lv.data, role) for lv in self.levels], self.scale_ratio)


# ---------------------------------------------------------------------------
# RFAconv


RFA_KERNELS = (3, 5, 7)


@dataclass
class RFAConvParams:
    """One depthwise-separable branch per kernel size plus a score vector each."""

    depthwise: list
    pointwise: list
    attention: list
    kernel_sizes: tuple = RFA_KERNELS

    @classmethod
    def init(cls, channels: int, rng: RandomSource, kernel_sizes=RFA_KERNELS, prefix="rfa") -> "RFAConvParams":
        dw, pw, att = [], [], []
        for k in kernel_sizes:
            dw.append(he_normal(rng, (channels, 1, k, k), k * k, f"{prefix}.dw{k}"))
            pw.append(he_normal(rng, (channels, channels, 1, 1), channels, f"{prefix}.pw{k}"))
            att.append(parameter(np.zeros(channels), f"{prefix}.att{k}"))
        return cls(dw, pw, att, tuple(kernel_sizes))

    def parameters(self) -> list:
        return [*self.depthwise, *self.pointwise, *self.attention]


def rfa_branches(x, params: RFAConvParams) -> list:
    """Run every kernel-size branch with size-preserving padding."""
    x = as_tensor(x)
    outs = []
    for k, dw, pw in zip(params.kernel_sizes, params.depthwise, params.pointwise):
        if k % 2 == 0:
            raise ShapeError(f"branch kernel size must be odd, got {k}")
        h = conv2d(x, dw, 1, k // 2, groups=x.shape[-3])
        outs.append(conv2d(h, pw, 1, 0))
    shapes = {o.shape for o in outs}
    if len(shapes) != 1:
        raise ShapeError(f"inconsistent branch output shapes {sorted(shapes)}")
    return outs


def branch_attention(branches: Sequence[Tensor], score_vectors: Sequence[Tensor]) -> Tensor:
    """Softmax over branches of ``<score_vector_b, GAP(branch_b)>``.

    Returns ``(n_branches,)`` or ``(B, n_branches)`` for batched input.
    """
    scores = [tsum(mul(global_avg_pool(b), a), axis=-1) for b, a in zip(branches, score_vectors)]
    logits = stack(scores, axis=-1)
    att = softmax(logits, axis=-1)
    if instrument.active():
        instrument.report("rfa_branch_softmax", att.data)
    return att


def weighted_branch_sum(branches: Sequence[Tensor], att: Tensor) -> Tensor:
    total = None
    for i, b in enumerate(branches):
        if b.ndim == 3:
            w = index(att, i)
        else:
            w = reshape(index(att, (slice(None), i)), (b.shape[0], 1, 1, 1))
        term = mul(b, w)
        total = term if total is None else add(total, term)
    return total


def rfaconv_forward(x, params: RFAConvParams) -> FeatureMap:
    """Attention-weighted sum of multi-kernel branch responses (role ``rfa``)."""
    data = x.data if isinstance(x, FeatureMap) else as_tensor(x)
    if not np.all(np.isfinite(data.data)):
        raise FloatingPointError("rfaconv input is not finite")
    branches = rfa_branches(data, params)
    att = branch_attention(branches, params.attention)
    return FeatureMap(weighted_branch_sum(branches, att), "rfa")


# ---------------------------------------------------------------------------
# BiFPN


def normalize_fusion(raw, eps: float = FUSION_EPS) -> Tensor:
    """``relu(w) / max(sum(relu(w)), eps)``: nonnegative, sums to 1 unless every edge is off."""
    r = relu(as_tensor(raw))
    total = tsum(r)
    w = scale(r, 1.0 / eps) if total.item() < eps else div(r, total)
    if instrument.active():
        instrument.report("bifpn_fusion", w.data)
    return w


def fusion_node(inputs: Sequence[Tensor], raw, eps: float = FUSION_EPS) -> Tensor:
    """Normalised weighted sum of same-shaped inputs (before the node convolution)."""
    raw = as_tensor(raw)
    if raw.shape != (len(inputs),):
        raise ShapeError(f"{len(inputs)} incoming edges but {raw.shape} weights")
    shapes = {t.shape for t in inputs}
    if len(shapes) != 1:
        raise ShapeError(f"mismatched fusion input shapes {sorted(shapes)}")
    w = normalize_fusion(raw, eps)
    total = None
    for i, t in enumerate(inputs):
        term = mul(t, index(w, i))
        total = term if total is None else add(total, term)
    return total


def bifpn_topology(n_levels: int) -> list:
    """Node list ``(name, level, edges)``; edges are ``(source, resample)``.

    Sources are ``("in", l)``, ``("td", l)`` or ``("out", l)``; resample is
    ``"same"``, ``"up"`` (from the coarser neighbour) or ``"down"``.
    """
    if n_levels < 2:
        raise ValueError("BiFPN needs at least two levels")
    top = n_levels - 1
    nodes = []
    for lv in range(top - 1, -1, -1):
        above = ("in", top) if lv + 1 == top else ("td", lv + 1)
        name = "out" if lv == 0 else "td"
        nodes.append((name, lv, [(("in", lv), "same"), (above, "up")]))
    for lv in range(1, n_levels):
        edges = [(("in", lv), "same")]
        if lv < top:
            edges.append((("td", lv), "same"))
        edges.append((("out", lv - 1), "down"))
        nodes.append(("out", lv, edges))
    return nodes


@dataclass
class BiFPNParams:
    fusion: list  # one raw weight vector per node, topology order
    depthwise: list
    pointwise: list
    n_levels: int
    eps: float = FUSION_EPS

    @classmethod
    def init(cls, channels: int, n_levels: int, rng: RandomSource, prefix="bifpn") -> "BiFPNParams":
        fusion, dw, pw = [], [], []
        for i, (_, lv, edges) in enumerate(bifpn_topology(n_levels)):
            fusion.append(parameter(np.ones(len(edges)), f"{prefix}.w{i}"))
            dw.append(he_normal(rng, (channels, 1, 3, 3), 9, f"{prefix}.dw{i}"))
            pw.append(he_normal(rng, (channels, channels, 1, 1), channels, f"{prefix}.pw{i}"))
        return cls(fusion, dw, pw, n_levels)

    def parameters(self) -> list:
        return [*self.fusion, *self.depthwise, *self.pointwise]

    def raw_fusion_weights(self) -> list:
        return list(self.fusion)

    def rescale_fusion(self, floor: float = 1.0) -> None:
        """Scale up any node whose positive mass fell below ``floor``.

        The normalized weights are invariant to scaling the raw vector, so
        this leaves the forward pass unchanged; it stops the L1 term from
        shrinking the raw weights into the ``eps`` regime.
        """
        for t in self.fusion:
            total = float(np.maximum(t.data, 0.0).sum())
            if 0.0 < total < floor:
                t.data = t.data * (floor / total)


def _resample(t: Tensor, how: str, size: tuple) -> Tensor:
    if how == "same":
        return t
    if how == "up":
        return upsample2x(t, size)
    return maxpool2(t)


def node_conv(t: Tensor, dw: Tensor, pw: Tensor) -> Tensor:
    """Separable 3x3 convolution followed by ReLU."""
    h = conv2d(t, dw, 1, 1, groups=t.shape[-3])
    return relu(conv2d(h, pw, 1, 0))


def bifpn_fuse(p: FeaturePyramid, w: BiFPNParams) -> FeaturePyramid:
    """One top-down then one bottom-up weighted fusion pass; shapes preserved."""
    if len(p) < 2:
        raise ValueError("BiFPN needs at least two levels")
    if len(p) != w.n_levels:
        raise ShapeError(f"pyramid has {len(p)} levels, weights built for {w.n_levels}")
    feats = {("in", i): lv.data for i, lv in enumerate(p.levels)}
    for i, (name, lv, edges) in enumerate(bifpn_topology(len(p))):
        size = (p[lv].height, p[lv].width)
        ins = [_resample(feats[src], how, size) for src, how in edges]
        for t in ins:
            if t.shape != p[lv].shape:
                raise ShapeError(f"resampled input {t.shape} does not match level {lv} shape {p[lv].shape}")
        fused = fusion_node(ins, w.fusion[i], w.eps)
        feats[(name, lv)] = node_conv(fused, w.depthwise[i], w.pointwise[i])
    return FeaturePyramid([FeatureMap(feats[("out", lv)], "f1_gan") for lv in range(len(p))], p.scale_ratio)


# ---------------------------------------------------------------------------
# adversarial coupling


@dataclass
class Discriminator:
    """Two stride-2 3x3 convolutions, global pooling, affine, sigmoid."""

    conv1: Tensor
    conv2: Tensor
    fc_w: Tensor
    fc_b: Tensor

    @classmethod
    def init(cls, channels: int, rng: RandomSource, hidden: int = 8) -> "Discriminator":
        return cls(
            conv1=he_normal(rng, (hidden, channels, 3, 3), channels * 9, "disc.conv1"),
            conv2=he_normal(rng, (hidden, hidden, 3, 3), hidden * 9, "disc.conv2"),
            fc_w=he_normal(rng, (hidden, 1), hidden, "disc.fc_w"),
            fc_b=parameter(np.zeros(1), "disc.fc_b"),
        )

    @classmethod
    def zeros(cls, channels: int, hidden: int = 8) -> "Discriminator":
        return cls(
            parameter(np.zeros((hidden, channels, 3, 3))),
            parameter(np.zeros((hidden, hidden, 3, 3))),
            parameter(np.zeros((hidden, 1))),
            parameter(np.zeros(1)),
        )

    def parameters(self) -> list:
        return [self.conv1, self.conv2, self.fc_w, self.fc_b]


def _down_pad(size: int) -> tuple:
    # stride-2 3x3: pad (1, 0) on even sizes, (1, 1) on odd, so output = ceil(size / 2)
    return (1, 0) if size % 2 == 0 else (1, 1)


def discriminator_logit(d: Discriminator, x) -> Tensor:
    x = x.data if isinstance(x, FeatureMap) else as_tensor(x)
    batched = x.ndim == 4
    if not batched:
        x = reshape(x, (1,) + x.shape)
    h = x
    for wconv in (d.conv1, d.conv2):
        ph, pw_ = _down_pad(h.shape[2]), _down_pad(h.shape[3])
        h = relu(conv2d(h, wconv, 2, (ph[0], ph[1], pw_[0], pw_[1])))
    z = add(matmul(global_avg_pool(h), d.fc_w), d.fc_b)  # B x 1
    z = clip(reshape(z, (z.shape[0],)), -LOGIT_CLAMP, LOGIT_CLAMP)
    return z if batched else reshape(z, ())


def discriminator_forward(d: Discriminator, x) -> Tensor:
    """Probability that ``x`` is a reference ("real") feature map; in (0, 1)."""
    return sigmoid(discriminator_logit(d, x))


def adversarial_losses(d: Discriminator, real, fake) -> tuple:
    """``(g_loss, d_loss)`` with the fake detached inside ``d_loss``.

    ``d_loss = -[ln p(real) + ln(1 - p(fake))]``, ``g_loss = -ln p(fake)``,
    both averaged over the batch.
    """
    real = real.data if isinstance(real, FeatureMap) else as_tensor(real)
    fake = fake.data if isinstance(fake, FeatureMap) else as_tensor(fake)
    p_real = discriminator_forward(d, real.detach())
    p_fake_detached = discriminator_forward(d, fake.detach())
    d_loss = scale(
        tmean(add(tlog(p_real), tlog(add(scale(p_fake_detached, -1.0), 1.0)))), -1.0
    )
    g_loss = scale(tmean(tlog(discriminator_forward(d, fake))), -1.0)
    return g_loss, d_loss


def adversarial_step(encoder_out: FeaturePyramid, decoder: BiFPNParams | None, disc: Discriminator, real) -> tuple:
    """Decode the encoder pyramid and score its finest level.

    Returns ``(F1_GAN pyramid, g_loss, d_loss)``. With ``decoder=None`` the
    encoder output passes through unchanged.
    """
    real_t = real.data if isinstance(real, FeatureMap) else as_tensor(real)
    if real_t.shape != encoder_out[0].shape:
        raise ShapeError(f"reference features {real_t.shape} vs encoder output {encoder_out[0].shape}")
    f1 = bifpn_fuse(encoder_out, decoder) if decoder is not None else encoder_out.with_role("f1_gan")
    g_loss, d_loss = adversarial_losses(disc, real_t, f1[0].data)
    return f1, g_loss, d_loss


# ---------------------------------------------------------------------------
# losses


@dataclass
class LossWeights:
    lambda_x: float = 1.0
    lambda_c: float = 1.0
    lambda_l1: float = 1.0

    def __post_init__(self):
        if min(self.lambda_x, self.lambda_c, self.lambda_l1) < 0:
            raise ValueError(f"loss weights must be nonnegative, got {self}")


@dataclass
class CellAssignment:
    """Elements (object centres) assigned to grid cells.

    ``y``: ``V x I`` binary mask; ``K``: ``V x D`` (one prediction per cell)
    or ``V x I x D``; ``O``: ``V x D`` cell offsets; ``K_star``: ``I x D``
    targets; ``c``: optional ``V x I`` confidences.
    """

    y: np.ndarray
    K: Tensor
    O: np.ndarray
    K_star: np.ndarray
    c: Tensor | None = None

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=np.float64)
        self.K = as_tensor(self.K)
        self.O = np.asarray(self.O, dtype=np.float64)
        self.K_star = np.asarray(self.K_star, dtype=np.float64)
        if not np.all((self.y == 0) | (self.y == 1)):
            raise ValueError("assignment mask must be binary")
        V, I = self.y.shape
        if self.O.shape[0] != V or self.K_star.shape[0] != I or self.K.shape[0] != V:
            raise ShapeError("inconsistent cell assignment shapes")
        if self.c is not None:
            self.c = as_tensor(self.c)
            if np.any(self.c.data < 0) or np.any(self.c.data > 1):
                raise ValueError("confidences must lie in [0, 1]")


@dataclass
class BasisWeights:
    """Per-cell coefficient vectors; each entry of ``coefficients`` is a 1-D tensor."""

    coefficients: list = field(default_factory=list)

    def __post_init__(self):
        self.coefficients = [as_tensor(c) for c in self.coefficients]
        for c in self.coefficients:
            if c.size < 1 or not np.all(np.isfinite(c.data)):
                raise ValueError("basis weights must be finite with T >= 1")


def coordinate_loss(a: CellAssignment) -> Tensor:
    """Masked sum of ``||(K_i^v + O_v) - K_i*||_2``."""
    v_idx, i_idx = np.nonzero(a.y)
    if v_idx.size == 0:
        return Tensor(0.0)
    if a.K.ndim == 2:
        pred = index(a.K, v_idx)
    else:
        pred = index(a.K, (v_idx, i_idx))
    resid = add(pred, Tensor(a.O[v_idx] - a.K_star[i_idx]))
    return tsum(norm(resid, axis=-1))


def bce(c, y, weights=None) -> Tensor:
    """Mean binary cross entropy with ``c`` clamped to ``[1e-7, 1 - 1e-7]``."""
    c = clip(as_tensor(c), BCE_CLAMP, 1.0 - BCE_CLAMP)
    y = np.asarray(y, dtype=np.float64)
    if y.shape != c.shape:
        raise ShapeError(f"confidence {c.shape} vs target {y.shape}")
    ll = add(mul(tlog(c), Tensor(y)), mul(tlog(add(scale(c, -1.0), 1.0)), Tensor(1.0 - y)))
    if weights is None:
        return scale(tmean(ll), -1.0)
    weights = np.asarray(weights, dtype=np.float64)
    return scale(tsum(mul(ll, Tensor(weights))), -1.0 / weights.sum())


def confidence_loss(a: CellAssignment) -> Tensor:
    if a.c is None:
        raise ValueError("assignment carries no confidences")
    return bce(a.c, a.y)


def sparsity_loss(b) -> Tensor:
    """Sum of absolute values of every basis coefficient."""
    coeffs = b.coefficients if isinstance(b, BasisWeights) else [as_tensor(t) for t in b]
    if not coeffs:
        return Tensor(0.0)
    flat = concat([reshape(c, (c.size,)) for c in coeffs], axis=0)
    return tsum(tabs(flat))


def composite_loss(lx, lc, ll1, lw: LossWeights | None = None) -> Tensor:
    lw = lw or LossWeights()
    terms = [as_tensor(lx), as_tensor(lc), as_tensor(ll1)]
    for t in terms:
        if not np.all(np.isfinite(t.data)):
            raise FloatingPointError("loss component is not finite")
    return add(add(scale(terms[0], lw.lambda_x), scale(terms[1], lw.lambda_c)), scale(terms[2], lw.lambda_l1))


# ---------------------------------------------------------------------------
# F3


def fuse_f3(f1, f2, align: Tensor | None = None) -> FeatureMap:
    """Elementwise sum of F1_GAN and F2_CAA.

    ``align`` is a ``C1 x C2 x 1 x 1`` kernel mapping ``f2`` onto ``f1``'s
    channels when the counts differ.
    """
    t1 = f1.data if isinstance(f1, FeatureMap) else as_tensor(f1)
    t2 = f2.data if isinstance(f2, FeatureMap) else as_tensor(f2)
    if t1.shape[-2:] != t2.shape[-2:]:
        raise ShapeError(f"cannot combine spatial shapes {t1.shape} and {t2.shape}")
    if t1.shape[-3] != t2.shape[-3]:
        if align is None:
            raise ShapeError(f"channel counts differ ({t1.shape[-3]} vs {t2.shape[-3]}) and no aligner given")
        t2 = conv2d(t2, align, 1, 0)
    return FeatureMap(add(t1, t2), "f3")
