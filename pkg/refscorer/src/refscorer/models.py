"""Scoring models: the deterministic intensity rule, an echo fixture table, and an
optional JSON-serialized linear model."""

from __future__ import annotations

import hashlib
import json
import math
from pathlib import Path


class IntensityRuleModel:
    """[m, 1 - m] with m = byte mean / 255.

    The mean is an exact integer sum divided once, matching the harness's in-process
    mock scorer bit for bit.
    """

    name = "intensity-rule"

    def score(self, raw: bytes) -> list[float]:
        m = sum(raw) / (len(raw) * 255)
        return [m, 1.0 - m]


class EchoModel:
    """Looks patches up by sha256 in a fixture table; unknown patches get the default.

    Fixture format: {"default": [p0, p1], "entries": {"<sha256 hex>": [p0, p1], ...}}.
    """

    name = "echo"

    def __init__(self, fixture_path: str | Path):
        doc = json.loads(Path(fixture_path).read_text(encoding="utf-8"))
        self.default = [float(v) for v in doc.get("default", [0.5, 0.5])]
        self.entries = {k: [float(v) for v in p] for k, p in doc.get("entries", {}).items()}

    def score(self, raw: bytes) -> list[float]:
        return self.entries.get(hashlib.sha256(raw).hexdigest(), self.default)


class LoadedModel:
    """Optional logistic rule on mean intensity, loaded from a JSON file.

    Model format: {"kind": "linear-intensity", "weight": w, "bias": b}; the mitotic
    probability is sigmoid(w * m + b) with m = byte mean / 255.
    """

    def __init__(self, path: str | Path):
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        if doc.get("kind") != "linear-intensity":
            raise ValueError(f"unsupported model kind {doc.get('kind')!r}")
        self.weight = float(doc["weight"])
        self.bias = float(doc["bias"])
        self.name = str(doc.get("name", "loaded-linear"))

    def score(self, raw: bytes) -> list[float]:
        m = sum(raw) / (len(raw) * 255)
        p = 1.0 / (1.0 + math.exp(-(self.weight * m + self.bias)))
        return [1.0 - p, p]
