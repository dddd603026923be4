"""Hot numeric kernels: disk-mean filtering, NMS suppression, component labeling, RGB<->LAB.

Each kernel has a numba ``@njit`` fast path and a pure-numpy fallback. The fallback is
selected when numba is unavailable or when ``MITODET_DISABLE_NUMBA=1`` is set in the
environment (read once at import). ``benchmarks/bench_kernels.py`` times both paths.

Filtering and labeling accumulate in integers and divide once, so both paths produce
byte-identical results.
"""

from __future__ import annotations

import os

import numpy as np

try:
    from numba import njit

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    _HAVE_NUMBA = False

USE_NUMBA = _HAVE_NUMBA and os.environ.get("MITODET_DISABLE_NUMBA", "0") != "1"


def reflect_index(i: int, n: int) -> int:
    """Map an out-of-range index onto [0, n) by mirror reflection without edge repeat.

    Index -k maps to k; index n-1+k maps to n-1-k (period 2n-2).
    """
    if n == 1:
        return 0
    period = 2 * n - 2
    i = i % period
    if i >= n:
        i = period - i
    return i


# ---------------------------------------------------------------------------
# Disk-mean filtering (defocus blur)
# ---------------------------------------------------------------------------

def _pad_image(img: np.ndarray, r: int, pad: str, pad_value: int) -> np.ndarray:
    if pad == "reflect":
        return np.pad(img, ((r, r), (r, r), (0, 0)), mode="reflect")
    return np.pad(img, ((r, r), (r, r), (0, 0)), mode="constant", constant_values=pad_value)


def _mean_filter_np(padded: np.ndarray, offsets: np.ndarray, h: int, w: int, r: int) -> np.ndarray:
    c = padded.shape[2]
    acc = np.zeros((h, w, c), dtype=np.int64)
    for dy, dx in offsets:
        acc += padded[r + dy : r + dy + h, r + dx : r + dx + w]
    n = len(offsets)
    # round half up: (2*acc + n) // (2*n), exact in integer arithmetic
    return ((2 * acc + n) // (2 * n)).astype(np.uint8)


if _HAVE_NUMBA:

    @njit(cache=True)
    def _mean_filter_nb(padded, offsets, h, w, r):  # pragma: no cover - jitted
        ph, pw, c = padded.shape
        flat = padded.reshape(ph * pw * c)
        n = offsets.shape[0]
        off_flat = np.empty(n, dtype=np.int64)
        for k in range(n):
            off_flat[k] = (offsets[k, 0] * pw + offsets[k, 1]) * c
        out = np.empty((h, w, c), dtype=np.uint8)
        for y in range(h):
            row = ((y + r) * pw + r) * c
            for x in range(w):
                base = row + x * c
                for ch in range(c):
                    acc = np.int64(0)
                    b = base + ch
                    for k in range(n):
                        acc += flat[b + off_flat[k]]
                    out[y, x, ch] = (2 * acc + n) // (2 * n)
        return out


def mean_filter(img: np.ndarray, offsets: np.ndarray, pad: str = "reflect", pad_value: int = 0) -> np.ndarray:
    """Mean over the given (dy, dx) offsets at every pixel of an (H, W, C) uint8 image.

    Result is rounded half-up to uint8. Borders use mirror reflection (without edge
    repeat) or a constant fill. Reflection requires the largest offset to be smaller
    than both image sides.
    """
    if img.dtype != np.uint8 or img.ndim != 3:
        raise ValueError("expected (H, W, C) uint8 image")
    if pad not in ("reflect", "constant"):
        raise ValueError(f"unknown pad policy {pad!r}")
    offsets = np.ascontiguousarray(offsets, dtype=np.int64)
    r = int(np.abs(offsets).max()) if len(offsets) else 0
    if pad == "reflect" and r > min(img.shape[0], img.shape[1]) - 1:
        raise ValueError("reflect padding requires offsets smaller than the image")
    padded = _pad_image(img, r, pad, pad_value)
    if USE_NUMBA:
        return np.asarray(_mean_filter_nb(padded, offsets, img.shape[0], img.shape[1], r))
    return _mean_filter_np(padded, offsets, img.shape[0], img.shape[1], r)


# ---------------------------------------------------------------------------
# Greedy NMS suppression
# ---------------------------------------------------------------------------

def _nms_keep_np(boxes: np.ndarray, thr: float) -> np.ndarray:
    n = boxes.shape[0]
    keep = np.ones(n, dtype=bool)
    x0, y0, x1, y1 = boxes[:, 0], boxes[:, 1], boxes[:, 2], boxes[:, 3]
    areas = (x1 - x0) * (y1 - y0)
    for i in range(n):
        if not keep[i]:
            continue
        rest = np.nonzero(keep[i + 1 :])[0] + i + 1
        if len(rest) == 0:
            break
        iw = np.minimum(x1[i], x1[rest]) - np.maximum(x0[i], x0[rest])
        ih = np.minimum(y1[i], y1[rest]) - np.maximum(y0[i], y0[rest])
        inter = np.where((iw > 0) & (ih > 0), iw * ih, 0.0)
        iou = inter / (areas[i] + areas[rest] - inter)
        keep[rest[iou > thr]] = False
    return keep


if _HAVE_NUMBA:

    @njit(cache=True)
    def _nms_keep_nb(boxes, thr):  # pragma: no cover - jitted
        n = boxes.shape[0]
        keep = np.ones(n, dtype=np.bool_)
        for i in range(n):
            if not keep[i]:
                continue
            ax0 = boxes[i, 0]
            ay0 = boxes[i, 1]
            ax1 = boxes[i, 2]
            ay1 = boxes[i, 3]
            area_a = (ax1 - ax0) * (ay1 - ay0)
            for j in range(i + 1, n):
                if not keep[j]:
                    continue
                iw = min(ax1, boxes[j, 2]) - max(ax0, boxes[j, 0])
                if iw <= 0:
                    continue
                ih = min(ay1, boxes[j, 3]) - max(ay0, boxes[j, 1])
                if ih <= 0:
                    continue
                inter = iw * ih
                area_b = (boxes[j, 2] - boxes[j, 0]) * (boxes[j, 3] - boxes[j, 1])
                iou = inter / (area_a + area_b - inter)
                if iou > thr:
                    keep[j] = False
        return keep


def nms_keep(boxes: np.ndarray, thr: float) -> np.ndarray:
    """Greedy suppression over boxes already sorted by priority.

    Returns a boolean keep mask aligned with the input order. A box is suppressed when
    its IoU with an earlier kept box is strictly greater than ``thr``.
    """
    boxes = np.ascontiguousarray(boxes, dtype=np.float64)
    if boxes.ndim != 2 or boxes.shape[1] != 4:
        raise ValueError("expected (N, 4) boxes")
    if USE_NUMBA:
        return np.asarray(_nms_keep_nb(boxes, float(thr)))
    return _nms_keep_np(boxes, float(thr))


# ---------------------------------------------------------------------------
# 8-connected component labeling
# ---------------------------------------------------------------------------

if _HAVE_NUMBA:

    @njit(cache=True)
    def _label_components_nb(mask):  # pragma: no cover - jitted
        h, w = mask.shape
        labels = np.zeros((h, w), dtype=np.int32)
        stack = np.empty((h * w, 2), dtype=np.int32)
        n = 0
        for sy in range(h):
            for sx in range(w):
                if mask[sy, sx] == 0 or labels[sy, sx] != 0:
                    continue
                n += 1
                labels[sy, sx] = n
                stack[0, 0] = sy
                stack[0, 1] = sx
                top = 1
                while top > 0:
                    top -= 1
                    cy = stack[top, 0]
                    cx = stack[top, 1]
                    for dy in range(-1, 2):
                        for dx in range(-1, 2):
                            ny = cy + dy
                            nx = cx + dx
                            if 0 <= ny < h and 0 <= nx < w:
                                if mask[ny, nx] != 0 and labels[ny, nx] == 0:
                                    labels[ny, nx] = n
                                    stack[top, 0] = ny
                                    stack[top, 1] = nx
                                    top += 1
        return labels, n


def _label_components_np(mask: np.ndarray) -> tuple[np.ndarray, int]:
    from scipy import ndimage

    labels, n = ndimage.label(mask, structure=np.ones((3, 3), dtype=int))
    return labels.astype(np.int32), int(n)


def label_components(mask: np.ndarray) -> tuple[np.ndarray, int]:
    """Label 8-connected components of a binary mask, in raster order of first pixel."""
    mask = np.ascontiguousarray(mask, dtype=np.uint8)
    if USE_NUMBA:
        labels, n = _label_components_nb(mask)
        return np.asarray(labels), int(n)
    return _label_components_np(mask)


# ---------------------------------------------------------------------------
# RGB <-> CIE L*a*b* (sRGB companding, D65)
# ---------------------------------------------------------------------------

_SRGB_TO_XYZ = np.array(
    [
        [0.4124564, 0.3575761, 0.1804375],
        [0.2126729, 0.7151522, 0.0721750],
        [0.0193339, 0.1191920, 0.9503041],
    ]
)
# White point from the matrix row sums so that pure white maps to exactly (100, 0, 0).
_WHITE = _SRGB_TO_XYZ.sum(axis=1)
_XYZ_TO_SRGB = np.linalg.inv(_SRGB_TO_XYZ)
_LAB_DELTA = 6.0 / 29.0


def _rgb_to_lab_np(rgb: np.ndarray) -> np.ndarray:
    s = rgb.astype(np.float64) / 255.0
    lin = np.where(s <= 0.04045, s / 12.92, ((s + 0.055) / 1.055) ** 2.4)
    xyz = lin @ _SRGB_TO_XYZ.T
    t = xyz / _WHITE
    f = np.where(t > _LAB_DELTA**3, np.cbrt(t), t / (3.0 * _LAB_DELTA**2) + 4.0 / 29.0)
    lab = np.empty_like(f)
    lab[..., 0] = 116.0 * f[..., 1] - 16.0
    lab[..., 1] = 500.0 * (f[..., 0] - f[..., 1])
    lab[..., 2] = 200.0 * (f[..., 1] - f[..., 2])
    return lab


def _lab_to_rgb_np(lab: np.ndarray) -> np.ndarray:
    fy = (lab[..., 0] + 16.0) / 116.0
    fx = fy + lab[..., 1] / 500.0
    fz = fy - lab[..., 2] / 200.0
    f = np.stack([fx, fy, fz], axis=-1)
    t = np.where(f > _LAB_DELTA, f**3, 3.0 * _LAB_DELTA**2 * (f - 4.0 / 29.0))
    xyz = t * _WHITE
    lin = xyz @ _XYZ_TO_SRGB.T
    lin = np.clip(lin, 0.0, 1.0)
    s = np.where(lin <= 0.0031308, 12.92 * lin, 1.055 * lin ** (1.0 / 2.4) - 0.055)
    s = np.clip(s, 0.0, 1.0)
    return np.floor(s * 255.0 + 0.5).astype(np.uint8)


if _HAVE_NUMBA:

    @njit(cache=True)
    def _rgb_to_lab_nb(rgb, m, white, delta):  # pragma: no cover - jitted
        h, w, _ = rgb.shape
        lab = np.empty((h, w, 3), dtype=np.float64)
        for y in range(h):
            for x in range(w):
                lin = np.empty(3)
                for c in range(3):
                    s = rgb[y, x, c] / 255.0
                    if s <= 0.04045:
                        lin[c] = s / 12.92
                    else:
                        lin[c] = ((s + 0.055) / 1.055) ** 2.4
                f = np.empty(3)
                for c in range(3):
                    t = (m[c, 0] * lin[0] + m[c, 1] * lin[1] + m[c, 2] * lin[2]) / white[c]
                    if t > delta**3:
                        f[c] = np.cbrt(t)
                    else:
                        f[c] = t / (3.0 * delta**2) + 4.0 / 29.0
                lab[y, x, 0] = 116.0 * f[1] - 16.0
                lab[y, x, 1] = 500.0 * (f[0] - f[1])
                lab[y, x, 2] = 200.0 * (f[1] - f[2])
        return lab

    @njit(cache=True)
    def _lab_to_rgb_nb(lab, minv, white, delta):  # pragma: no cover - jitted
        h, w, _ = lab.shape
        rgb = np.empty((h, w, 3), dtype=np.uint8)
        for y in range(h):
            for x in range(w):
                fy = (lab[y, x, 0] + 16.0) / 116.0
                fs = np.empty(3)
                fs[0] = fy + lab[y, x, 1] / 500.0
                fs[1] = fy
                fs[2] = fy - lab[y, x, 2] / 200.0
                xyz = np.empty(3)
                for c in range(3):
                    f = fs[c]
                    if f > delta:
                        xyz[c] = f**3 * white[c]
                    else:
                        xyz[c] = 3.0 * delta**2 * (f - 4.0 / 29.0) * white[c]
                for c in range(3):
                    lin = minv[c, 0] * xyz[0] + minv[c, 1] * xyz[1] + minv[c, 2] * xyz[2]
                    if lin < 0.0:
                        lin = 0.0
                    elif lin > 1.0:
                        lin = 1.0
                    if lin <= 0.0031308:
                        s = 12.92 * lin
                    else:
                        s = 1.055 * lin ** (1.0 / 2.4) - 0.055
                    if s < 0.0:
                        s = 0.0
                    elif s > 1.0:
                        s = 1.0
                    rgb[y, x, c] = np.uint8(np.floor(s * 255.0 + 0.5))
        return rgb


def rgb_to_lab(rgb: np.ndarray) -> np.ndarray:
    """Convert an (H, W, 3) uint8 sRGB image to float64 CIE L*a*b* (D65)."""
    if rgb.dtype != np.uint8 or rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError("expected (H, W, 3) uint8 image")
    if USE_NUMBA:
        return np.asarray(_rgb_to_lab_nb(np.ascontiguousarray(rgb), _SRGB_TO_XYZ, _WHITE, _LAB_DELTA))
    return _rgb_to_lab_np(rgb)


def lab_to_rgb(lab: np.ndarray) -> np.ndarray:
    """Convert float64 L*a*b* back to uint8 sRGB, clamping to gamut and rounding half-up."""
    lab = np.ascontiguousarray(lab, dtype=np.float64)
    if lab.ndim != 3 or lab.shape[2] != 3:
        raise ValueError("expected (H, W, 3) LAB array")
    if not np.all(np.isfinite(lab)):
        raise ValueError("LAB values must be finite")
    if USE_NUMBA:
        return np.asarray(_lab_to_rgb_nb(lab, _XYZ_TO_SRGB, _WHITE, _LAB_DELTA))
    return _lab_to_rgb_np(lab)


# ---------------------------------------------------------------------------
# Shared helpers used by both kernel paths
# ---------------------------------------------------------------------------

LUMA_WEIGHTS = (0.299, 0.587, 0.114)


def luma(rgb: np.ndarray) -> np.ndarray:
    """Rec.601 luma of an (H, W, 3) uint8 image, as float64."""
    r = rgb[..., 0].astype(np.float64)
    g = rgb[..., 1].astype(np.float64)
    b = rgb[..., 2].astype(np.float64)
    return LUMA_WEIGHTS[0] * r + LUMA_WEIGHTS[1] * g + LUMA_WEIGHTS[2] * b


def component_stats(labels: np.ndarray, n_labels: int, rgb: np.ndarray) -> dict[str, np.ndarray]:
    """Per-component pixel counts, centroids, channel sums and pixel extents.

    Integer-valued accumulations only, so results do not depend on which labeling
    path produced ``labels``.
    """
    h, w = labels.shape
    ys, xs = np.nonzero(labels)
    lab = labels[ys, xs].astype(np.int64)
    area = np.bincount(lab, minlength=n_labels + 1)[1:]
    sum_x = np.bincount(lab, weights=xs, minlength=n_labels + 1)[1:]
    sum_y = np.bincount(lab, weights=ys, minlength=n_labels + 1)[1:]
    chan = [
        np.bincount(lab, weights=rgb[ys, xs, c].astype(np.float64), minlength=n_labels + 1)[1:]
        for c in range(3)
    ]
    min_x = np.full(n_labels, w, dtype=np.int64)
    max_x = np.full(n_labels, -1, dtype=np.int64)
    min_y = np.full(n_labels, h, dtype=np.int64)
    max_y = np.full(n_labels, -1, dtype=np.int64)
    np.minimum.at(min_x, lab - 1, xs)
    np.maximum.at(max_x, lab - 1, xs)
    np.minimum.at(min_y, lab - 1, ys)
    np.maximum.at(max_y, lab - 1, ys)
    return {
        "area": area,
        "sum_x": sum_x,
        "sum_y": sum_y,
        "sum_r": chan[0],
        "sum_g": chan[1],
        "sum_b": chan[2],
        "min_x": min_x,
        "max_x": max_x,
        "min_y": min_y,
        "max_y": max_y,
    }
