"""Stage 2: candidate patch extraction, scorer fan-out, probability averaging, filtering.

Scorers are either the in-process mock (mean-intensity rule, used for deterministic
end-to-end runs) or external subprocesses speaking the length-prefixed JSON protocol
over stdin/stdout.
"""

from __future__ import annotations

import base64
import subprocess
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from mitodet import PROTOCOL_VERSION, wire
from mitodet.errors import ProtocolError
from mitodet.postprocess import Detection
from mitodet.sampler import extract_patch, round_half_up

SIMPLEX_TOL = 1e-9
RENORM_TOL = 1e-6

MOCK_INTENSITY = "mock-intensity"
EXTERNAL = "external"


@dataclass(frozen=True)
class ScorerHandle:
    name: str
    kind: str = MOCK_INTENSITY
    argv: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if self.kind not in (MOCK_INTENSITY, EXTERNAL):
            raise ValueError(f"unknown scorer kind {self.kind!r}")
        if self.kind == EXTERNAL and not self.argv:
            raise ValueError("external scorer needs a command line")


@dataclass(frozen=True)
class EnsembleConfig:
    scorers: tuple[ScorerHandle, ...] = (ScorerHandle("mock"),)
    patch_size: int = 128
    decision_threshold: float = 0.5
    batch_size: int = 32

    def __post_init__(self) -> None:
        if not self.scorers:
            raise ValueError("need at least one scorer")
        if not 0.0 < self.decision_threshold < 1.0:
            raise ValueError("decision_threshold must be in (0, 1)")
        if self.patch_size < 1 or self.batch_size < 1:
            raise ValueError("patch_size and batch_size must be >= 1")


def softmax(logits: Sequence[float], temperature: float = 1.0) -> np.ndarray:
    """Stable softmax onto the simplex."""
    if temperature <= 0:
        raise ValueError("temperature must be > 0")
    z = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise ValueError("logits must be finite")
    z = z / temperature
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


def average_probs(probs: Sequence[np.ndarray]) -> np.ndarray:
    """Arithmetic mean of probability vectors; result stays on the simplex."""
    if len(probs) == 0:
        raise ValueError("need at least one probability vector")
    return np.mean(np.stack([np.asarray(p, dtype=np.float64) for p in probs]), axis=0)


def validate_probs(p: Sequence[float], context: str = "scorer") -> np.ndarray:
    """Check a 2-class probability vector; renormalize tiny drift, reject the rest."""
    arr = np.asarray(p, dtype=np.float64)
    if arr.shape != (2,):
        raise ProtocolError(f"{context}: expected 2 probabilities, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)) or np.any(arr < 0):
        raise ProtocolError(f"{context}: invalid probabilities {arr.tolist()}")
    total = arr.sum()
    if abs(total - 1.0) > RENORM_TOL:
        raise ProtocolError(f"{context}: probabilities sum to {total}, outside 1 +/- {RENORM_TOL}")
    if total != 1.0:
        arr = arr / total
    return arr


def extract_candidate_patch(raster: np.ndarray, det: Detection, size: int = 128) -> np.ndarray:
    """size x size patch centered on the box center (rounded half-up), reflect-padded."""
    cx, cy = det.center
    ox = round_half_up(cx) - size // 2
    oy = round_half_up(cy) - size // 2
    return extract_patch(raster, (ox, oy), size, pad="reflect")


def mock_intensity_score(patch: np.ndarray) -> np.ndarray:
    """[m, 1 - m] with m = mean pixel value / 255: darker patches score more mitotic.

    The mean is an exact integer sum divided once, so external reimplementations can
    match it bit-for-bit.
    """
    total = int(patch.sum(dtype=np.int64))
    m = total / (patch.size * 255)
    return np.array([m, 1.0 - m])


class MockIntensityScorer:
    """In-process stand-in scorer; deterministic and dependency-free."""

    def __init__(self, name: str = "mock"):
        self.name = name

    def score_batch(self, patches: Sequence[np.ndarray]) -> list[np.ndarray]:
        if not patches:
            raise ValueError("batch must be non-empty")
        return [validate_probs(mock_intensity_score(p), self.name) for p in patches]

    def close(self) -> None:
        pass


class ExternalScorerClient:
    """Serial request/response channel to a scorer subprocess (stop-and-wait)."""

    def __init__(self, handle: ScorerHandle, patch_size: int = 128):
        self.name = handle.name
        self.patch_size = patch_size
        self._next_id = 0
        try:
            self._proc = subprocess.Popen(
                list(handle.argv),
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
            )
        except OSError as exc:
            raise ProtocolError(f"scorer {self.name!r}: cannot start {handle.argv}: {exc}") from exc
        try:
            wire.write_frame(
                self._proc.stdin,
                {
                    "type": "hello",
                    "protocol": PROTOCOL_VERSION,
                    "patch_size": patch_size,
                    "channels": 3,
                },
            )
            reply = wire.read_frame(self._proc.stdout)
        except (ProtocolError, OSError) as exc:
            self._kill()
            raise ProtocolError(f"scorer {self.name!r}: handshake failed: {exc}") from exc
        if reply.get("type") != "ready" or reply.get("classes") != 2:
            self._kill()
            raise ProtocolError(f"scorer {self.name!r}: bad handshake reply {reply}")
        self.remote_name = str(reply.get("name", ""))

    def score_batch(self, patches: Sequence[np.ndarray]) -> list[np.ndarray]:
        if not patches:
            raise ValueError("batch must be non-empty")
        req_id = self._next_id
        self._next_id += 1
        encoded = []
        for p in patches:
            if p.shape != (self.patch_size, self.patch_size, 3) or p.dtype != np.uint8:
                raise ProtocolError(
                    f"scorer {self.name!r}: patch must be {self.patch_size}x{self.patch_size}x3 uint8"
                )
            encoded.append(base64.b64encode(p.tobytes()).decode("ascii"))
        try:
            wire.write_frame(self._proc.stdin, {"type": "score", "id": req_id, "patches": encoded})
            reply = wire.read_frame(self._proc.stdout)
        except (ProtocolError, OSError) as exc:
            raise ProtocolError(f"scorer {self.name!r}: batch {req_id} failed: {exc}") from exc
        if reply.get("type") == "error":
            raise ProtocolError(f"scorer {self.name!r}: batch {req_id}: {reply.get('message')}")
        if reply.get("type") != "probs" or reply.get("id") != req_id:
            raise ProtocolError(f"scorer {self.name!r}: batch {req_id}: unexpected reply {reply}")
        probs = reply.get("probs")
        if not isinstance(probs, list) or len(probs) != len(patches):
            got = len(probs) if isinstance(probs, list) else "none"
            raise ProtocolError(
                f"scorer {self.name!r}: batch {req_id}: got {got} probs for {len(patches)} patches"
            )
        return [validate_probs(p, f"scorer {self.name!r} batch {req_id}") for p in probs]

    def close(self) -> None:
        if self._proc.poll() is None:
            try:
                wire.write_frame(self._proc.stdin, {"type": "bye"})
                self._proc.stdin.close()
                self._proc.wait(timeout=10)
            except (ProtocolError, OSError, subprocess.TimeoutExpired):
                self._kill()

    def _kill(self) -> None:
        if self._proc.poll() is None:
            self._proc.kill()
            self._proc.wait()


def open_scorer(handle: ScorerHandle, patch_size: int = 128):
    if handle.kind == MOCK_INTENSITY:
        return MockIntensityScorer(handle.name)
    return ExternalScorerClient(handle, patch_size)


def score_batch(scorer, patches: Sequence[np.ndarray]) -> list[np.ndarray]:
    """One validated ClassProbs per patch, in order."""
    return scorer.score_batch(patches)


def score_candidates(
    raster: np.ndarray,
    dets: Sequence[Detection],
    cfg: EnsembleConfig,
    scorers: Sequence | None = None,
) -> np.ndarray:
    """Mean class probabilities over all scorers for each detection's candidate patch.

    Returns an (n, 2) array aligned with the input detections.
    """
    if not dets:
        return np.zeros((0, 2))
    opened = scorers
    own = False
    if opened is None:
        opened = [open_scorer(h, cfg.patch_size) for h in cfg.scorers]
        own = True
    try:
        patches = [extract_candidate_patch(raster, d, cfg.patch_size) for d in dets]
        per_scorer = []
        for scorer in opened:
            probs: list[np.ndarray] = []
            for start in range(0, len(patches), cfg.batch_size):
                probs.extend(score_batch(scorer, patches[start : start + cfg.batch_size]))
            per_scorer.append(np.stack(probs))
        return np.mean(np.stack(per_scorer), axis=0)
    finally:
        if own:
            for scorer in opened:
                scorer.close()


def classify_candidates(
    raster: np.ndarray,
    dets: Sequence[Detection],
    cfg: EnsembleConfig,
    scorers: Sequence | None = None,
) -> list[Detection]:
    """Keep detections whose mean mitotic probability reaches the decision threshold.

    Kept detections carry the mean mitotic probability as their new score; input order
    is preserved.
    """
    probs = score_candidates(raster, dets, cfg, scorers)
    kept = []
    for det, p in zip(dets, probs):
        if p[1] >= cfg.decision_threshold:
            kept.append(Detection(det.x0, det.y0, det.x1, det.y1, float(p[1]), det.label))
    return kept
