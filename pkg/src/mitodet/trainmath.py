"""Training-side numerics as pure functions: losses, distillation, EMA, schedulers.

Everything here is stateless or an explicit state transition, so each piece can be
unit-tested against closed forms and finite differences without a training loop.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np


def log_softmax(logits: np.ndarray) -> np.ndarray:
    """Numerically stable log-softmax (max subtraction)."""
    z = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise ValueError("logits must be finite")
    shifted = z - z.max()
    return shifted - math.log(np.exp(shifted).sum())


def softmax(logits: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    """Stable softmax with optional temperature."""
    if temperature <= 0:
        raise ValueError("temperature must be > 0")
    z = np.asarray(logits, dtype=np.float64) / temperature
    return np.exp(log_softmax(z))


def _check_label(logits: np.ndarray, label: int) -> None:
    if not 0 <= label < len(logits):
        raise ValueError(f"label {label} out of range for {len(logits)} logits")


def cross_entropy(logits: np.ndarray, label: int) -> float:
    """-log softmax(logits)[label], computed stably."""
    z = np.asarray(logits, dtype=np.float64)
    _check_label(z, label)
    return float(-log_softmax(z)[label])


def cross_entropy_grad(logits: np.ndarray, label: int) -> np.ndarray:
    """d cross_entropy / d logits = softmax(logits) - onehot(label)."""
    z = np.asarray(logits, dtype=np.float64)
    _check_label(z, label)
    g = softmax(z)
    g[label] -= 1.0
    return g


def focal_loss(logits: np.ndarray, label: int, gamma: float = 2.0, alpha: float = 1.0) -> float:
    """alpha * (1 - p_label)^gamma * (-log p_label)."""
    if gamma < 0:
        raise ValueError("gamma must be >= 0")
    if alpha <= 0:
        raise ValueError("alpha must be > 0")
    z = np.asarray(logits, dtype=np.float64)
    _check_label(z, label)
    logp = log_softmax(z)[label]
    p = math.exp(logp)
    return float(alpha * (1.0 - p) ** gamma * -logp)


def focal_loss_grad(logits: np.ndarray, label: int, gamma: float = 2.0, alpha: float = 1.0) -> np.ndarray:
    """Gradient of focal_loss w.r.t. the logits.

    With u = p_label: dL/du = alpha * (gamma (1-u)^(gamma-1) log u - (1-u)^gamma / u)
    and du/dz_i = u (onehot_i - p_i).
    """
    if gamma < 0:
        raise ValueError("gamma must be >= 0")
    z = np.asarray(logits, dtype=np.float64)
    _check_label(z, label)
    p = softmax(z)
    u = p[label]
    logu = math.log(u)
    if gamma == 0.0:
        dl_du = -alpha / u
    else:
        dl_du = alpha * (gamma * (1.0 - u) ** (gamma - 1.0) * logu - (1.0 - u) ** gamma / u)
    du_dz = -u * p
    du_dz[label] += u
    return dl_du * du_dz


def kd_loss(
    student_logits: np.ndarray,
    teacher_logits: np.ndarray,
    label: int,
    temperature: float = 4.0,
    ratio: float = 0.5,
) -> float:
    """Hard-label CE blended with temperature-softened teacher KL.

    ratio * CE(student, label)
    + (1 - ratio) * T^2 * KL(softmax(teacher/T) || softmax(student/T)).
    """
    s = np.asarray(student_logits, dtype=np.float64)
    t = np.asarray(teacher_logits, dtype=np.float64)
    if s.shape != t.shape:
        raise ValueError(f"logit shape mismatch: {s.shape} vs {t.shape}")
    if temperature <= 0:
        raise ValueError("temperature must be > 0")
    if not 0.0 <= ratio <= 1.0:
        raise ValueError("ratio must be in [0, 1]")
    ce = cross_entropy(s, label)
    log_q = log_softmax(t / temperature)
    log_p = log_softmax(s / temperature)
    q = np.exp(log_q)
    kl = float(np.sum(q * (log_q - log_p)))
    return ratio * ce + (1.0 - ratio) * temperature**2 * kl


def kd_loss_grad(
    student_logits: np.ndarray,
    teacher_logits: np.ndarray,
    label: int,
    temperature: float = 4.0,
    ratio: float = 0.5,
) -> np.ndarray:
    """Gradient of kd_loss w.r.t. the student logits."""
    s = np.asarray(student_logits, dtype=np.float64)
    t = np.asarray(teacher_logits, dtype=np.float64)
    if s.shape != t.shape:
        raise ValueError(f"logit shape mismatch: {s.shape} vs {t.shape}")
    g = ratio * cross_entropy_grad(s, label)
    p_soft = softmax(s / temperature)
    q_soft = softmax(t / temperature)
    return g + (1.0 - ratio) * temperature * (p_soft - q_soft)


def ema_update(ema: np.ndarray, params: np.ndarray, decay: float = 0.9998) -> np.ndarray:
    """Elementwise decay * ema + (1 - decay) * params."""
    if not 0.0 <= decay <= 1.0:
        raise ValueError("decay must be in [0, 1]")
    e = np.asarray(ema, dtype=np.float64)
    p = np.asarray(params, dtype=np.float64)
    if e.shape != p.shape:
        raise ValueError(f"length mismatch: {e.shape} vs {p.shape}")
    return decay * e + (1.0 - decay) * p


@dataclass(frozen=True)
class PlateauState:
    """ReduceLROnPlateau bookkeeping: lr drops by `factor` after `patience` bad epochs."""

    lr: float
    best_metric: float
    epochs_since_improve: int = 0
    patience: int = 5
    factor: float = 0.1
    mode: str = "min"
    min_delta: float = 1e-4

    @classmethod
    def initial(
        cls,
        lr: float,
        patience: int = 5,
        factor: float = 0.1,
        mode: str = "min",
        min_delta: float = 1e-4,
    ) -> "PlateauState":
        if lr <= 0:
            raise ValueError("lr must be > 0")
        if not 0.0 < factor < 1.0:
            raise ValueError("factor must be in (0, 1)")
        if patience < 1:
            raise ValueError("patience must be >= 1")
        if mode not in ("min", "max"):
            raise ValueError("mode must be 'min' or 'max'")
        best = math.inf if mode == "min" else -math.inf
        return cls(lr=lr, best_metric=best, patience=patience, factor=factor, mode=mode, min_delta=min_delta)


def plateau_step(state: PlateauState, metric: float) -> PlateauState:
    """One scheduler step; a pure state transition."""
    if not math.isfinite(metric):
        raise ValueError("metric must be finite")
    if state.mode == "min":
        improved = metric < state.best_metric - state.min_delta
    else:
        improved = metric > state.best_metric + state.min_delta
    if improved:
        return replace(state, best_metric=metric, epochs_since_improve=0)
    count = state.epochs_since_improve + 1
    if count > state.patience:
        return replace(state, lr=state.lr * state.factor, epochs_since_improve=0)
    return replace(state, epochs_since_improve=count)


@dataclass(frozen=True)
class CosineWarmupSpec:
    base_lr: float
    warmup_epochs: int = 5
    total_epochs: int = 50

    def __post_init__(self) -> None:
        if self.base_lr <= 0:
            raise ValueError("base_lr must be > 0")
        if not 0 <= self.warmup_epochs < self.total_epochs:
            raise ValueError("need 0 <= warmup_epochs < total_epochs")


def cosine_warmup_lr(epoch: int, spec: CosineWarmupSpec) -> float:
    """Linear warmup to base_lr, then half-cosine decay reaching 0 at the last epoch.

    Warmup: lr = base_lr * (epoch + 1) / warmup_epochs.
    Decay:  lr = base_lr * (1 + cos(pi * t)) / 2 with
    t = (epoch - warmup) / (total - warmup - 1), so t spans [0, 1] over the
    post-warmup epochs inclusive of the last.
    """
    if not 0 <= epoch < spec.total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {spec.total_epochs})")
    if epoch < spec.warmup_epochs:
        return spec.base_lr * (epoch + 1) / spec.warmup_epochs
    denom = spec.total_epochs - spec.warmup_epochs - 1
    t = (epoch - spec.warmup_epochs) / denom if denom > 0 else 0.0
    return spec.base_lr * 0.5 * (1.0 + math.cos(math.pi * t))


def schedule_table(spec: CosineWarmupSpec) -> list[tuple[int, float]]:
    """Full (epoch, lr) table, for CSV dumps and golden-file tests."""
    return [(epoch, cosine_warmup_lr(epoch, spec)) for epoch in range(spec.total_epochs)]


@dataclass(frozen=True)
class EarlyStopState:
    """Early stopping on validation F1; stopping is monotone."""

    best_f1: float = 0.0
    epochs_since_improve: int = 0
    patience: int = 3
    stopped: bool = False

    @classmethod
    def initial(cls, patience: int = 3) -> "EarlyStopState":
        if patience < 1:
            raise ValueError("patience must be >= 1")
        return cls(patience=patience)


def early_stop_step(state: EarlyStopState, f1: float) -> EarlyStopState:
    """One early-stopping step; once stopped, further steps are absorbed."""
    if not 0.0 <= f1 <= 1.0:
        raise ValueError("f1 must be in [0, 1]")
    if state.stopped:
        return state
    if f1 > state.best_f1:
        return replace(state, best_f1=f1, epochs_since_improve=0)
    count = state.epochs_since_improve + 1
    return replace(state, epochs_since_improve=count, stopped=count > state.patience)
