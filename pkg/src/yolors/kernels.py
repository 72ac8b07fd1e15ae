"""Hot numeric kernels.

Every kernel exists twice: a vectorised numpy version (``*_np``) and a
loop version compiled with numba (``*_nb``). The public name binds to the
numba version unless ``YOLORS_NUMBA=0`` is set; see ``benchmarks/`` for a
timing comparison. Both versions must agree bit-for-bit on integer outputs
and to rounding on float outputs.
"""
import numpy as np

from ._accel import USE_NUMBA, njit

# ---------------------------------------------------------------------------
# im2col / col2im


def im2col_np(xp, k, stride):
    """Sliding windows of a padded ``(B, C, Hp, Wp)`` array.

    Returns a contiguous ``(B, C, Ho, Wo, k, k)`` array.
    """
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    return np.ascontiguousarray(win[:, :, ::stride, ::stride])


@njit
def im2col_nb(xp, k, stride):
    B, C, Hp, Wp = xp.shape
    Ho = (Hp - k) // stride + 1
    Wo = (Wp - k) // stride + 1
    out = np.empty((B, C, Ho, Wo, k, k), dtype=xp.dtype)
    for b in range(B):
        for c in range(C):
            for i in range(Ho):
                for j in range(Wo):
                    r0 = i * stride
                    c0 = j * stride
                    for u in range(k):
                        for v in range(k):
                            out[b, c, i, j, u, v] = xp[b, c, r0 + u, c0 + v]
    return out


def col2im_np(cols, Hp, Wp, stride):
    """Scatter-add windows back onto a ``(B, C, Hp, Wp)`` canvas (adjoint of im2col)."""
    B, C, Ho, Wo, k, _ = cols.shape
    out = np.zeros((B, C, Hp, Wp), dtype=cols.dtype)
    for u in range(k):
        for v in range(k):
            out[:, :, u:u + stride * Ho:stride, v:v + stride * Wo:stride] += cols[:, :, :, :, u, v]
    return out


@njit
def col2im_nb(cols, Hp, Wp, stride):
    B, C, Ho, Wo, k, _ = cols.shape
    out = np.zeros((B, C, Hp, Wp), dtype=cols.dtype)
    # same (u, v) outer order as the numpy version so float sums associate identically
    for u in range(k):
        for v in range(k):
            for b in range(B):
                for c in range(C):
                    for i in range(Ho):
                        for j in range(Wo):
                            out[b, c, i * stride + u, j * stride + v] += cols[b, c, i, j, u, v]
    return out


# ---------------------------------------------------------------------------
# 2x2 / stride-2 max pooling (ceil mode)


def maxpool2_np(x):
    """Returns ``(out, argmax)`` where argmax indexes the 2x2 window (0..3)."""
    B, C, H, W = x.shape
    Ho, Wo = (H + 1) // 2, (W + 1) // 2
    xp = np.full((B, C, 2 * Ho, 2 * Wo), -np.inf)
    xp[:, :, :H, :W] = x
    win = xp.reshape(B, C, Ho, 2, Wo, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, Ho, Wo, 4)
    arg = np.argmax(win, axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    return out, arg.astype(np.int64)


@njit
def maxpool2_nb(x):
    B, C, H, W = x.shape
    Ho = (H + 1) // 2
    Wo = (W + 1) // 2
    out = np.empty((B, C, Ho, Wo))
    arg = np.zeros((B, C, Ho, Wo), dtype=np.int64)
    for b in range(B):
        for c in range(C):
            for i in range(Ho):
                for j in range(Wo):
                    best = -np.inf
                    best_k = 0
                    for u in range(2):
                        for v in range(2):
                            r = 2 * i + u
                            s = 2 * j + v
                            if r < H and s < W:
                                val = x[b, c, r, s]
                                if val > best:
                                    best = val
                                    best_k = 2 * u + v
                    out[b, c, i, j] = best
                    arg[b, c, i, j] = best_k
    return out, arg


def maxpool2_backward_np(grad, arg, H, W):
    B, C, Ho, Wo = grad.shape
    onehot = (arg[..., None] == np.arange(4)).astype(grad.dtype) * grad[..., None]
    full = onehot.reshape(B, C, Ho, Wo, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, 2 * Ho, 2 * Wo)
    return np.ascontiguousarray(full[:, :, :H, :W])


@njit
def maxpool2_backward_nb(grad, arg, H, W):
    B, C, Ho, Wo = grad.shape
    out = np.zeros((B, C, H, W))
    for b in range(B):
        for c in range(C):
            for i in range(Ho):
                for j in range(Wo):
                    a = arg[b, c, i, j]
                    out[b, c, 2 * i + a // 2, 2 * j + a % 2] += grad[b, c, i, j]
    return out


# ---------------------------------------------------------------------------
# boxes


def iou_matrix_np(a, b):
    """Pairwise IoU of ``(n, 4)`` and ``(m, 4)`` xyxy boxes."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    ix1 = np.maximum(a[:, None, 0], b[None, :, 0])
    iy1 = np.maximum(a[:, None, 1], b[None, :, 1])
    ix2 = np.minimum(a[:, None, 2], b[None, :, 2])
    iy2 = np.minimum(a[:, None, 3], b[None, :, 3])
    inter = np.clip(ix2 - ix1, 0, None) * np.clip(iy2 - iy1, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return inter / union


@njit
def iou_matrix_nb(a, b):
    n = a.shape[0]
    m = b.shape[0]
    out = np.empty((n, m))
    for i in range(n):
        area_a = (a[i, 2] - a[i, 0]) * (a[i, 3] - a[i, 1])
        for j in range(m):
            iw = min(a[i, 2], b[j, 2]) - max(a[i, 0], b[j, 0])
            ih = min(a[i, 3], b[j, 3]) - max(a[i, 1], b[j, 1])
            inter = 0.0
            if iw > 0 and ih > 0:
                inter = iw * ih
            area_b = (b[j, 2] - b[j, 0]) * (b[j, 3] - b[j, 1])
            out[i, j] = inter / (area_a + area_b - inter)
    return out


def nms_np(boxes, scores, classes, iou_threshold):
    """Greedy per-class NMS. Returns kept indices in descending-score order."""
    order = np.argsort(-scores, kind="stable")
    boxes = boxes[order]
    classes = classes[order]
    iou = iou_matrix_np(boxes, boxes)
    same = classes[:, None] == classes[None, :]
    suppress = (iou > iou_threshold) & same
    alive = np.ones(len(order), dtype=bool)
    for i in range(len(order)):
        if alive[i]:
            alive[i + 1:] &= ~suppress[i, i + 1:]
    return order[alive]


@njit
def nms_nb(boxes, scores, classes, iou_threshold):
    order = np.argsort(-scores, kind="mergesort")
    n = order.shape[0]
    alive = np.ones(n, dtype=np.bool_)
    for ii in range(n):
        i = order[ii]
        if not alive[ii]:
            continue
        area_i = (boxes[i, 2] - boxes[i, 0]) * (boxes[i, 3] - boxes[i, 1])
        for jj in range(ii + 1, n):
            if not alive[jj]:
                continue
            j = order[jj]
            if classes[j] != classes[i]:
                continue
            iw = min(boxes[i, 2], boxes[j, 2]) - max(boxes[i, 0], boxes[j, 0])
            ih = min(boxes[i, 3], boxes[j, 3]) - max(boxes[i, 1], boxes[j, 1])
            inter = 0.0
            if iw > 0 and ih > 0:
                inter = iw * ih
            area_j = (boxes[j, 2] - boxes[j, 0]) * (boxes[j, 3] - boxes[j, 1])
            if inter / (area_i + area_j - inter) > iou_threshold:
                alive[jj] = False
    return order[alive]


if USE_NUMBA:
    im2col, col2im = im2col_np, col2im_nb
    maxpool2, maxpool2_backward = maxpool2_nb, maxpool2_backward_nb
    _iou_impl, _nms_impl = iou_matrix_nb, nms_nb
else:
    im2col, col2im = im2col_np, col2im_np
    maxpool2, maxpool2_backward = maxpool2_np, maxpool2_backward_np
    _iou_impl, _nms_impl = iou_matrix_np, nms_np


def _boxes(a):
    return np.ascontiguousarray(np.asarray(a, dtype=np.float64).reshape(-1, 4))


def iou_matrix(a, b):
    return _iou_impl(_boxes(a), _boxes(b))


def nms(boxes, scores, classes, iou_threshold):
    boxes = _boxes(boxes)
    scores = np.ascontiguousarray(np.asarray(scores, dtype=np.float64))
    classes = np.ascontiguousarray(np.asarray(classes, dtype=np.int64))
    if scores.size == 0:
        return np.zeros(0, dtype=np.int64)
    return _nms_impl(boxes, scores, classes, float(iou_threshold))
