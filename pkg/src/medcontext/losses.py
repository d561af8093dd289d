"""Training objectives: Dice-CE, the normalized consistency loss, and their sum.

Dice-CE is read as ``mean_c(1 - softdice_c) + CE``, the usual convention,
with the soft dice of class ``c`` in sample ``b``::

    (2 * sum_v Y*P + eps) / (sum_v Y^2 + sum_v P^2 + eps),   P = softmax(logits)

averaged over samples and classes, and CE the per-voxel cross-entropy
averaged over samples and voxels.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from .autodiff import Tensor, log_softmax_channel, mul, softmax_channel
from .autodiff import ops
from .errors import ConfigError, ContractError, ShapeError


@dataclass(frozen=True)
class LossConfig:
    beta: float = 1.0
    eps_dice: float = 1e-5
    eps_cl: float = 1e-8
    class_weights: Optional[tuple[float, ...]] = None
    include_background: bool = True
    include_msl: bool = True
    include_cl: bool = True
    cl_space: str = "logits"  # "logits" or "probs"

    def __post_init__(self):
        if self.eps_dice <= 0 or self.eps_cl <= 0:
            raise ConfigError("eps_dice and eps_cl must be positive")
        if self.beta < 0:
            raise ConfigError("beta must be non-negative")
        if self.cl_space not in ("logits", "probs"):
            raise ConfigError(f"cl_space must be 'logits' or 'probs', got {self.cl_space!r}")
        if self.class_weights is not None:
            object.__setattr__(self, "class_weights", tuple(float(w) for w in self.class_weights))

    def to_dict(self) -> dict:
        d = asdict(self)
        if d["class_weights"] is not None:
            d["class_weights"] = list(d["class_weights"])
        return d


def one_hot(labels: np.ndarray, num_classes: int, dtype=np.float32) -> np.ndarray:
    """Integer labels ``[B, D, H, W]`` -> one-hot ``[B, C, D, H, W]``."""
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ContractError(f"labels must lie in [0, {num_classes})")
    eye = np.eye(num_classes, dtype=dtype)
    return np.ascontiguousarray(np.moveaxis(eye[labels], -1, 1))


def _as_onehot(Y, like: Tensor) -> np.ndarray:
    y = Y.data if isinstance(Y, Tensor) else np.asarray(Y)
    if y.shape != like.shape:
        raise ShapeError(f"label shape {y.shape} != logits shape {like.shape}")
    if not (np.all((y == 0) | (y == 1)) and np.all(y.sum(axis=1) == 1)):
        raise ContractError("Y must be one-hot over the channel axis")
    return y.astype(like.dtype, copy=False)


def dice_ce(Y, logits: Tensor, cfg: LossConfig = LossConfig()) -> Tensor:
    y = _as_onehot(Y, logits)
    B, C = logits.shape[:2]
    spatial = tuple(range(2, logits.ndim))
    probs = softmax_channel(logits)

    inter = ops.sum(mul(probs, y), spatial)                                 # [B, C]
    denom = ops.add(ops.sum(ops.square(probs), spatial), (y * y).sum(axis=spatial) + cfg.eps_dice)
    dice = ops.div(ops.add(mul(inter, 2.0), cfg.eps_dice), denom)           # [B, C]

    wc = np.ones(C) if cfg.class_weights is None else np.asarray(cfg.class_weights, dtype=np.float64)
    if wc.shape != (C,):
        raise ShapeError(f"class_weights has {wc.size} entries for {C} classes")
    dice_w = wc.copy()
    if not cfg.include_background:
        dice_w[0] = 0.0
    dice_w = np.broadcast_to(dice_w / dice_w.sum() / B, (B, C)).astype(logits.dtype)
    dice_loss = 1.0 - ops.sum(mul(dice, dice_w))

    logp = log_softmax_channel(logits)
    wy = y * wc.reshape((1, C) + (1,) * len(spatial)).astype(y.dtype)
    ce = mul(ops.sum(mul(logp, wy)), -1.0 / float(wy.sum(dtype=np.float64)))
    return ops.add(dice_loss, ce)


def consistency(F_s_masked: Tensor, F_t, cfg: LossConfig = LossConfig()) -> Tensor:
    """``||F_s^M - F_t||^2 / (||F_t||^2 + eps)``; the teacher side is a constant."""
    t = F_t.data if isinstance(F_t, Tensor) else np.asarray(F_t)
    if t.shape != F_s_masked.shape:
        raise ShapeError(f"consistency: shapes {F_s_masked.shape} and {t.shape} differ")
    s = F_s_masked
    if cfg.cl_space == "probs":
        s = softmax_channel(s)
        e = np.exp(t - t.max(axis=1, keepdims=True))
        t = e / e.sum(axis=1, keepdims=True)
    t = t.astype(s.dtype, copy=False)
    diff = ops.sub(s, t)
    return ops.div(ops.sum(ops.square(diff)), float((t.astype(np.float64) ** 2).sum()) + cfg.eps_cl)


def total_loss(Y, F_s: Tensor, F_s_masked: Optional[Tensor], F_t, cfg: LossConfig = LossConfig()):
    """Supervised Dice-CE plus the enabled masked-student and consistency terms.

    Returns ``(loss, breakdown)`` where ``breakdown`` maps ``sup``, ``msl`` and
    ``cl`` to plain floats (zero for disabled terms).
    """
    sup = dice_ce(Y, F_s, cfg)
    loss = sup
    breakdown = {"sup": float(sup.data), "msl": 0.0, "cl": 0.0}
    if cfg.include_msl:
        if F_s_masked is None:
            raise ContractError("masked student loss enabled but no masked logits given")
        msl = dice_ce(Y, F_s_masked, cfg)
        loss = ops.add(loss, msl)
        breakdown["msl"] = float(msl.data)
    if cfg.include_cl:
        if F_s_masked is None or F_t is None:
            raise ContractError("consistency loss enabled but masked or teacher logits missing")
        cl = consistency(F_s_masked, F_t, cfg)
        breakdown["cl"] = float(cl.data)
        if cfg.beta != 0:
            loss = ops.add(loss, mul(cl, cfg.beta))
    breakdown["total"] = float(loss.data)
    return loss, breakdown
