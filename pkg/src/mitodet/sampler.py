"""Training-patch planning and extraction with the 5:1:4 foreground/random/imposter mix.

All randomness flows through numpy's PCG64 keyed by SamplingSpec.seed, so identical
(manifest, spec) pairs always produce identical plan lists.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from mitodet.errors import DataError
from mitodet.ingest import IMPOSTER, MITOTIC, Annotation, DatasetManifest

FOREGROUND = "foreground"
RANDOM = "random"
IMPOSTER_KIND = "imposter"


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


@dataclass(frozen=True)
class SamplingSpec:
    count: int
    ratio: tuple[float, float, float] = (5.0, 1.0, 4.0)
    patch_size: int = 512
    jitter: int | None = None  # default patch_size // 8, resolved at planning time
    seed: int = 0

    def __post_init__(self) -> None:
        if self.count < 0:
            raise ValueError("count must be >= 0")
        if self.patch_size < 1:
            raise ValueError("patch_size must be >= 1")
        if any(w < 0 for w in self.ratio) or not any(w > 0 for w in self.ratio):
            raise ValueError("ratio weights must be >= 0 and not all zero")
        if self.jitter is not None and self.jitter < 0:
            raise ValueError("jitter must be >= 0")

    @property
    def effective_jitter(self) -> int:
        return self.patch_size // 8 if self.jitter is None else self.jitter


@dataclass(frozen=True)
class PatchPlan:
    image_id: str
    x: int
    y: int
    size: int
    kind: str
    anchor: int | None = None  # index into manifest.annotations


def allocate_counts(total: int, ratio: Sequence[float]) -> tuple[int, ...]:
    """Largest-remainder apportionment of `total` over the ratio weights.

    Parts always sum to total; remainder ties break by category order.
    """
    if total < 0:
        raise ValueError("total must be >= 0")
    weights = [float(w) for w in ratio]
    if any(w < 0 for w in weights):
        raise ValueError("weights must be >= 0")
    wsum = sum(weights)
    if wsum == 0:
        raise ValueError("weights must not all be zero")
    shares = [total * w / wsum for w in weights]
    parts = [int(math.floor(s)) for s in shares]
    remainder = total - sum(parts)
    by_fraction = sorted(range(len(weights)), key=lambda i: (-(shares[i] - parts[i]), i))
    for k in range(remainder):
        parts[by_fraction[k % len(parts)]] += 1
    return tuple(parts)


def plan_samples(
    manifest: DatasetManifest,
    spec: SamplingSpec,
    allow_padding: bool = True,
) -> list[PatchPlan]:
    """Plan `spec.count` patches in the allocate_counts proportions.

    Foreground/imposter plans draw an anchor annotation uniformly with replacement and
    place it within `jitter` px (per axis) of the patch center; random plans draw a
    uniform image and a uniform in-bounds origin. Plans are emitted foreground first,
    then random, then imposter.
    """
    n_fg, n_rand, n_imp = allocate_counts(spec.count, spec.ratio)
    mitotic = [(i, a) for i, a in enumerate(manifest.annotations) if a.label == MITOTIC]
    imposter = [(i, a) for i, a in enumerate(manifest.annotations) if a.label == IMPOSTER]
    if n_fg > 0 and not mitotic:
        raise DataError("foreground plans requested but manifest has no mitotic annotations")
    if n_imp > 0 and not imposter:
        raise DataError("imposter plans requested but manifest has no imposter annotations")
    if spec.count > 0 and not manifest.images:
        raise DataError("cannot plan patches over a manifest with no images")
    if not allow_padding and all(
        r.width < spec.patch_size and r.height < spec.patch_size for r in manifest.images
    ):
        raise DataError(f"patch size {spec.patch_size} exceeds every image dimension and padding is disabled")

    rng = np.random.Generator(np.random.PCG64(spec.seed))
    jitter = spec.effective_jitter
    size = spec.patch_size
    half = size // 2
    by_id = {rec.id: rec for rec in manifest.images}

    def anchored(pool: list[tuple[int, Annotation]], count: int, kind: str) -> list[PatchPlan]:
        plans = []
        for _ in range(count):
            idx, ann = pool[int(rng.integers(0, len(pool)))]
            dx = int(rng.integers(-jitter, jitter + 1))
            dy = int(rng.integers(-jitter, jitter + 1))
            ox = round_half_up(ann.x + dx) - half
            oy = round_half_up(ann.y + dy) - half
            if not allow_padding:
                rec = by_id[ann.image_id]
                ox = min(max(ox, 0), max(rec.width - size, 0))
                oy = min(max(oy, 0), max(rec.height - size, 0))
            plans.append(PatchPlan(ann.image_id, ox, oy, size, kind, anchor=idx))
        return plans

    plans = anchored(mitotic, n_fg, FOREGROUND)
    for _ in range(n_rand):
        rec = manifest.images[int(rng.integers(0, len(manifest.images)))]
        ox = int(rng.integers(0, max(rec.width - size, 0) + 1))
        oy = int(rng.integers(0, max(rec.height - size, 0) + 1))
        plans.append(PatchPlan(rec.id, ox, oy, size, RANDOM))
    plans.extend(anchored(imposter, n_imp, IMPOSTER_KIND))
    return plans


def extract_patch(
    raster: np.ndarray,
    origin: tuple[int, int],
    size: int,
    pad: str = "reflect",
    pad_value: int = 0,
) -> np.ndarray:
    """Cut a size x size patch at (x, y), filling out-of-bounds pixels per the pad policy.

    Reflect uses mirror-without-repeat indexing (index -k maps to k). A window that
    misses the raster entirely is an error under reflect padding.
    """
    if size < 1:
        raise ValueError("size must be >= 1")
    if pad not in ("reflect", "constant"):
        raise ValueError(f"unknown pad policy {pad!r}")
    h, w = raster.shape[:2]
    x0, y0 = origin
    if pad == "reflect":
        if x0 >= w or x0 + size <= 0 or y0 >= h or y0 + size <= 0:
            raise ValueError(f"patch at {origin} lies fully outside a {w}x{h} raster")
        xs = _reflect_range(x0, size, w)
        ys = _reflect_range(y0, size, h)
        return raster[ys[:, None], xs[None, :]]
    out = np.full((size, size) + raster.shape[2:], pad_value, dtype=raster.dtype)
    sx0, sx1 = max(x0, 0), min(x0 + size, w)
    sy0, sy1 = max(y0, 0), min(y0 + size, h)
    if sx0 < sx1 and sy0 < sy1:
        out[sy0 - y0 : sy1 - y0, sx0 - x0 : sx1 - x0] = raster[sy0:sy1, sx0:sx1]
    return out


def _reflect_range(start: int, size: int, n: int) -> np.ndarray:
    idx = np.arange(start, start + size)
    if n == 1:
        return np.zeros(size, dtype=np.int64)
    period = 2 * n - 2
    idx = np.mod(idx, period)
    return np.where(idx >= n, period - idx, idx)


def weighted_sample(weights: Sequence[float], n: int, seed: int) -> np.ndarray:
    """Draw n indices with replacement, P(i) proportional to weights[i]."""
    if n < 0:
        raise ValueError("n must be >= 0")
    w = np.asarray(weights, dtype=np.float64)
    if np.any(w < 0):
        raise ValueError("weights must be >= 0")
    total = w.sum()
    if total == 0:
        raise ValueError("weights must not all be zero")
    rng = np.random.Generator(np.random.PCG64(seed))
    return rng.choice(len(w), size=n, replace=True, p=w / total)


# ---------------------------------------------------------------------------
# Plan audit trail (JSON-lines)
# ---------------------------------------------------------------------------

def plans_to_jsonl(plans: Iterable[PatchPlan]) -> str:
    lines = []
    for p in plans:
        rec = {"image_id": p.image_id, "x": p.x, "y": p.y, "size": p.size, "kind": p.kind}
        if p.anchor is not None:
            rec["anchor"] = p.anchor
        lines.append(json.dumps(rec, sort_keys=True))
    return "".join(line + "\n" for line in lines)


def plans_from_jsonl(text: str) -> list[PatchPlan]:
    plans = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            plans.append(
                PatchPlan(
                    image_id=str(rec["image_id"]),
                    x=int(rec["x"]),
                    y=int(rec["y"]),
                    size=int(rec["size"]),
                    kind=str(rec["kind"]),
                    anchor=rec.get("anchor"),
                )
            )
        except (ValueError, KeyError, TypeError) as exc:
            raise DataError(f"bad patch plan on line {lineno}: {exc}") from exc
    return plans
