"""Augmentation suite: D4 dihedral transforms, defocus blur, stain statistics and
template-based stain transfer in LAB, and classifier color jitter.

Every stochastic operation is a pure function of (inputs, rng state); drawing orders
are fixed and documented so seeded runs are reproducible byte-for-byte.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from mitodet import kernels
from mitodet.kernels import lab_to_rgb, rgb_to_lab

EPS_STD = 1e-6

LAB_CHANNELS = ("L", "A", "B")


# ---------------------------------------------------------------------------
# D4 dihedral group
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class D4Element:
    """rotation quarter-turns CCW (0..3), then an optional horizontal mirror."""

    rotation: int
    mirrored: bool = False

    def __post_init__(self) -> None:
        if self.rotation not in (0, 1, 2, 3):
            raise ValueError("rotation must be in 0..3")


D4_IDENTITY = D4Element(0, False)
D4_ELEMENTS = tuple(D4Element(r, m) for m in (False, True) for r in range(4))


def d4_apply(patch: np.ndarray, g: D4Element) -> np.ndarray:
    """Rotate CCW by 90 deg * rotation, then mirror horizontally if set. Square input."""
    if patch.shape[0] != patch.shape[1]:
        raise ValueError(f"D4 needs a square patch, got {patch.shape[0]}x{patch.shape[1]}")
    out = np.rot90(patch, k=g.rotation)
    if g.mirrored:
        out = np.fliplr(out)
    return np.ascontiguousarray(out)


def d4_apply_point(p: tuple[float, float], g: D4Element, size: int) -> tuple[float, float]:
    """The coordinate action matching d4_apply: transformed[g(p)] = original[p]."""
    x, y = p
    for _ in range(g.rotation):
        x, y = y, size - 1 - x
    if g.mirrored:
        x = size - 1 - x
    return (x, y)


def d4_compose(g2: D4Element, g1: D4Element) -> D4Element:
    """The element equal to applying g1 first, then g2."""
    # mirror . rot^r identities: rot^a . mirror = mirror . rot^-a
    if g1.mirrored:
        rot = (g1.rotation - g2.rotation) % 4
    else:
        rot = (g1.rotation + g2.rotation) % 4
    return D4Element(rot, g1.mirrored != g2.mirrored)


def d4_inverse(g: D4Element) -> D4Element:
    if g.mirrored:
        return g  # reflections are involutions
    return D4Element((-g.rotation) % 4, False)


# ---------------------------------------------------------------------------
# Defocus blur (normalized binary disk kernel)
# ---------------------------------------------------------------------------

def disk_offsets(radius: int) -> np.ndarray:
    """(dy, dx) offsets with Euclidean distance <= radius from the center."""
    if radius < 1:
        raise ValueError("radius must be >= 1")
    offs = [
        (dy, dx)
        for dy in range(-radius, radius + 1)
        for dx in range(-radius, radius + 1)
        if dy * dy + dx * dx <= radius * radius
    ]
    return np.array(offs, dtype=np.int64)


def disk_kernel(radius: int) -> np.ndarray:
    """Square (2r+1)-sided kernel: 1 inside the disk, 0 outside, normalized to sum 1."""
    offs = disk_offsets(radius)
    side = 2 * radius + 1
    k = np.zeros((side, side), dtype=np.float64)
    k[offs[:, 0] + radius, offs[:, 1] + radius] = 1.0
    return k / k.sum()


def defocus(patch: np.ndarray, radius: int, pad: str = "reflect", pad_value: int = 0) -> np.ndarray:
    """Per-channel convolution with disk_kernel(radius); output rounded half-up uint8."""
    return kernels.mean_filter(patch, disk_offsets(radius), pad=pad, pad_value=pad_value)


# ---------------------------------------------------------------------------
# Stain statistics and Reinhard-style transfer
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ChannelStats:
    """Gaussian fits over per-image statistics of one LAB channel."""

    mean: tuple[float, float]  # (mu, sigma) of the per-image channel means
    std: tuple[float, float]  # (mu, sigma) of the per-image channel stds


@dataclass(frozen=True)
class StainProfile:
    channels: tuple[ChannelStats, ChannelStats, ChannelStats]  # L, A, B
    n_images: int

    def to_json(self) -> str:
        doc = {
            "space": "lab",
            "channels": {
                name: {"mean": list(cs.mean), "std": list(cs.std)}
                for name, cs in zip(LAB_CHANNELS, self.channels)
            },
            "n_images": self.n_images,
        }
        return json.dumps(doc, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "StainProfile":
        doc = json.loads(text)
        if doc.get("space") != "lab":
            raise ValueError(f"unsupported stain profile space {doc.get('space')!r}")
        channels = tuple(
            ChannelStats(
                mean=tuple(float(v) for v in doc["channels"][name]["mean"]),
                std=tuple(float(v) for v in doc["channels"][name]["std"]),
            )
            for name in LAB_CHANNELS
        )
        return cls(channels=channels, n_images=int(doc["n_images"]))


@dataclass(frozen=True)
class TemplateStats:
    """Per-channel LAB targets for one sampled stain style."""

    mean: tuple[float, float, float]
    std: tuple[float, float, float]

    def __post_init__(self) -> None:
        if any(s < EPS_STD for s in self.std):
            raise ValueError(f"template stds must be >= {EPS_STD}")


def fit_stain_profile(images: Iterable[np.ndarray]) -> StainProfile:
    """Fit per-channel Gaussians over each image's LAB pixel mean and population std.

    The spread across images uses the sample std (ddof=1); a single image yields 0.
    """
    means: list[np.ndarray] = []
    stds: list[np.ndarray] = []
    for img in images:
        lab = rgb_to_lab(img)
        flat = lab.reshape(-1, 3)
        means.append(flat.mean(axis=0))
        stds.append(flat.std(axis=0))
    if not means:
        raise ValueError("need at least one image to fit a stain profile")
    m = np.stack(means)
    s = np.stack(stds)
    n = len(means)

    def spread(v: np.ndarray) -> np.ndarray:
        return v.std(axis=0, ddof=1) if n > 1 else np.zeros(3)

    m_sigma = spread(m)
    s_sigma = spread(s)
    channels = tuple(
        ChannelStats(
            mean=(float(m[:, c].mean()), float(m_sigma[c])),
            std=(float(s[:, c].mean()), float(s_sigma[c])),
        )
        for c in range(3)
    )
    return StainProfile(channels=channels, n_images=n)


def sample_stain_template(profile: StainProfile, std_hyper: float, rng) -> TemplateStats:
    """Draw one stain style template from the profile.

    Per channel (L, A, B order), target_mean then target_std are drawn as
    mu + (1 + std_hyper) * sigma * z with z a standard normal from `rng`; target_std
    is clamped below at 1e-6.
    """
    if std_hyper <= -1.0:
        raise ValueError("std_hyper must be > -1")
    scale = 1.0 + std_hyper
    means = []
    stds = []
    for cs in profile.channels:
        means.append(cs.mean[0] + scale * cs.mean[1] * float(rng.normal()))
        stds.append(max(cs.std[0] + scale * cs.std[1] * float(rng.normal()), EPS_STD))
    return TemplateStats(mean=tuple(means), std=tuple(stds))


def reinhard_transfer(patch: np.ndarray, template: TemplateStats) -> np.ndarray:
    """Shift each LAB channel to the template mean/std, then convert back to RGB8."""
    lab = rgb_to_lab(patch)
    flat = lab.reshape(-1, 3)
    mean = flat.mean(axis=0)
    std = flat.std(axis=0)
    out = np.empty_like(lab)
    for c in range(3):
        denom = max(std[c], EPS_STD)
        out[..., c] = (lab[..., c] - mean[c]) * (template.std[c] / denom) + template.mean[c]
    return lab_to_rgb(out)


# ---------------------------------------------------------------------------
# Classifier color jitter
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ColorJitterParams:
    brightness: float = 0.1
    contrast: float = 0.1
    saturation: float = 0.05
    hue: float = 0.03
    grayscale_p: float = 0.05
    blur_p: float = 0.05

    def __post_init__(self) -> None:
        for name in ("brightness", "contrast", "saturation", "hue", "grayscale_p", "blur_p"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1]")


def to_grayscale(patch: np.ndarray) -> np.ndarray:
    """Replace all channels with Rec.601 luma (rounded half-up)."""
    y = np.floor(kernels.luma(patch) + 0.5).astype(np.uint8)
    return np.repeat(y[..., None], 3, axis=2)


def _quantize(x: np.ndarray) -> np.ndarray:
    return np.floor(np.clip(x, 0.0, 255.0) + 0.5).astype(np.uint8)


def adjust_brightness(patch: np.ndarray, factor: float) -> np.ndarray:
    return _quantize(patch.astype(np.float64) * factor)


def adjust_contrast(patch: np.ndarray, factor: float) -> np.ndarray:
    anchor = kernels.luma(patch).mean()
    return _quantize(anchor + (patch.astype(np.float64) - anchor) * factor)


def adjust_saturation(patch: np.ndarray, factor: float) -> np.ndarray:
    gray = kernels.luma(patch)[..., None]
    return _quantize(gray + (patch.astype(np.float64) - gray) * factor)


def adjust_hue(patch: np.ndarray, shift: float) -> np.ndarray:
    """Rotate hue by `shift` of the full hue circle (shift in [-0.5, 0.5])."""
    hsv = _rgb_to_hsv(patch.astype(np.float64) / 255.0)
    hsv[..., 0] = np.mod(hsv[..., 0] + shift, 1.0)
    return _quantize(_hsv_to_rgb(hsv) * 255.0)


def _rgb_to_hsv(rgb: np.ndarray) -> np.ndarray:
    mx = rgb.max(axis=-1)
    mn = rgb.min(axis=-1)
    diff = mx - mn
    h = np.zeros_like(mx)
    safe = diff > 0
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    with np.errstate(invalid="ignore", divide="ignore"):
        rc = np.where(safe, (mx - r) / diff, 0.0)
        gc = np.where(safe, (mx - g) / diff, 0.0)
        bc = np.where(safe, (mx - b) / diff, 0.0)
    h = np.where(mx == r, bc - gc, h)
    h = np.where((mx == g) & (r != mx), 2.0 + rc - bc, h)
    h = np.where((mx == b) & (r != mx) & (g != mx), 4.0 + gc - rc, h)
    h = np.mod(h / 6.0, 1.0)
    h = np.where(safe, h, 0.0)
    s = np.where(mx > 0, diff / np.where(mx > 0, mx, 1.0), 0.0)
    return np.stack([h, s, mx], axis=-1)


def _hsv_to_rgb(hsv: np.ndarray) -> np.ndarray:
    h, s, v = hsv[..., 0], hsv[..., 1], hsv[..., 2]
    i = np.floor(h * 6.0)
    f = h * 6.0 - i
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    i = i.astype(np.int64) % 6
    out = np.empty(hsv.shape)
    choices = [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)]
    for k, (rr, gg, bb) in enumerate(choices):
        m = i == k
        out[..., 0] = np.where(m, rr, out[..., 0])
        out[..., 1] = np.where(m, gg, out[..., 1])
        out[..., 2] = np.where(m, bb, out[..., 2])
    return out


def gaussian_blur(patch: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur with reflect borders; radius = max(1, ceil(2*sigma))."""
    radius = max(1, int(math.ceil(2.0 * sigma)))
    xs = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-(xs**2) / (2.0 * sigma**2))
    k /= k.sum()
    arr = patch.astype(np.float64)
    padded = np.pad(arr, ((radius, radius), (0, 0), (0, 0)), mode="reflect")
    arr = sum(k[j] * padded[j : j + patch.shape[0]] for j in range(len(k)))
    padded = np.pad(arr, ((0, 0), (radius, radius), (0, 0)), mode="reflect")
    arr = sum(k[j] * padded[:, j : j + patch.shape[1]] for j in range(len(k)))
    return _quantize(arr)


def color_jitter(patch: np.ndarray, params: ColorJitterParams, rng) -> np.ndarray:
    """Jitter in fixed order: brightness, contrast, saturation, hue, grayscale?, blur?.

    Factors are uniform in [1-d, 1+d] (hue: additive shift in [-d, +d] of the hue
    circle). All draws happen unconditionally in that order, so the rng stream is
    stable regardless of which steps fire.
    """
    fb = 1.0 + params.brightness * float(rng.uniform(-1.0, 1.0))
    fc = 1.0 + params.contrast * float(rng.uniform(-1.0, 1.0))
    fs = 1.0 + params.saturation * float(rng.uniform(-1.0, 1.0))
    fh = params.hue * float(rng.uniform(-1.0, 1.0))
    u_gray = float(rng.uniform())
    u_blur = float(rng.uniform())
    sigma = float(rng.uniform(0.1, 2.0))

    out = patch
    if params.brightness > 0:
        out = adjust_brightness(out, fb)
    if params.contrast > 0:
        out = adjust_contrast(out, fc)
    if params.saturation > 0:
        out = adjust_saturation(out, fs)
    if params.hue > 0:
        out = adjust_hue(out, fh)
    if u_gray < params.grayscale_p:
        out = to_grayscale(out)
    if u_blur < params.blur_p:
        out = gaussian_blur(out, sigma)
    return out


# ---------------------------------------------------------------------------
# Detector-side augmentation pipeline
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AugmentConfig:
    defocus_p: float = 0.3
    defocus_radii: tuple[int, ...] = (1, 2, 3)
    stain_p: float = 0.3
    std_hyper: float = -0.7

    def __post_init__(self) -> None:
        if not 0.0 <= self.defocus_p <= 1.0 or not 0.0 <= self.stain_p <= 1.0:
            raise ValueError("probabilities must be in [0, 1]")
        if self.std_hyper <= -1.0:
            raise ValueError("std_hyper must be > -1")


@dataclass(frozen=True)
class AugmentPlan:
    d4: D4Element
    defocus_radius: int | None
    template: TemplateStats | None


def augment_plan(config: AugmentConfig, profile: StainProfile | None, rng) -> AugmentPlan:
    """Draw one augmentation plan; draw order: D4 index, defocus u + radius, stain u + template."""
    g = D4_ELEMENTS[int(rng.integers(0, 8))]
    radius = None
    if float(rng.uniform()) < config.defocus_p:
        radius = int(config.defocus_radii[int(rng.integers(0, len(config.defocus_radii)))])
    template = None
    if float(rng.uniform()) < config.stain_p:
        if profile is None:
            raise ValueError("stain_p > 0 requires a stain profile")
        template = sample_stain_template(profile, config.std_hyper, rng)
    return AugmentPlan(d4=g, defocus_radius=radius, template=template)


def augment_apply(patch: np.ndarray, plan: AugmentPlan) -> np.ndarray:
    out = d4_apply(patch, plan.d4)
    if plan.defocus_radius is not None:
        out = defocus(out, plan.defocus_radius)
    if plan.template is not None:
        out = reinhard_transfer(out, plan.template)
    return out


def augment_pipeline(
    patch: np.ndarray,
    config: AugmentConfig,
    profile: StainProfile | None,
    rng,
) -> np.ndarray:
    """Always-applied random D4, then defocus and stain transfer at their probabilities."""
    return augment_apply(patch, augment_plan(config, profile, rng))
