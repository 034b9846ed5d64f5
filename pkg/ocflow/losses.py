"""
Training objectives: the gamma-decayed sequence loss, zero forcing, mask match,
gated transformation consistency, and their weighted total.
Every loss takes per-iteration predictions (first to last) and returns a scalar Tensor.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, fields
from typing import Sequence

import numpy as np

from ocflow.flow import FlowField, GeoTransform, IdentifierMask, OcclusionMask, restore_flow
from ocflow.tensor import Tensor, as_tensor

COMPONENTS = ("base", "zero_forcing", "mask_match", "transformation")


@dataclass(frozen=True)
class LossConfig:
    iterations: int = 4
    gamma: float = 0.8
    lambda1: float = 0.1
    lambda2: float = 0.01
    # 0 leaves zero forcing out: mask match alone
    zero_forcing_weight: float = 1.0
    epsilon: float = 25.0
    zero_star: bool = False
    mask_match_bce: bool = False

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError(f"iterations must be >= 1, got {self.iterations}")
        if not 0 < self.gamma < 1:
            raise ValueError(f"gamma must lie in (0, 1), got {self.gamma}")
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be > 0, got {self.epsilon}")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError(f"lambdas must be >= 0, got ({self.lambda1}, {self.lambda2})")
        if self.zero_forcing_weight < 0:
            raise ValueError(f"zero_forcing_weight must be >= 0, got {self.zero_forcing_weight}")


def sequence_weights(n: int, gamma: float) -> np.ndarray:
    """gamma^(N - i) for i = 1..N."""
    return gamma ** np.arange(n - 1, -1, -1, dtype=np.float64)


def _check_count(n: int, cfg: LossConfig) -> None:
    if n == 0:
        raise ValueError("need at least one iteration of predictions")
    if n != cfg.iterations:
        raise ValueError(f"got {n} iterations of predictions, config expects {cfg.iterations}")


def _flow(f):
    if isinstance(f, FlowField):
        return Tensor(f.uv)
    return as_tensor(f)


def _gamma_sum(terms: Sequence[Tensor], cfg: LossConfig) -> Tensor:
    total = None
    for w, term in zip(sequence_weights(len(terms), cfg.gamma), terms):
        total = term * float(w) if total is None else total + term * float(w)
    return total


# ── Supervised and zero-forcing ──────────────────────────────────────────

def sequence_loss(preds: Sequence, gt, valid=None, cfg: LossConfig = LossConfig()) -> Tensor:
    """Sum_i gamma^(N-i) * mean over valid pixels of |du| + |dv|."""
    _check_count(len(preds), cfg)
    target = gt.uv if isinstance(gt, FlowField) else np.asarray(gt.data if isinstance(gt, Tensor) else gt)
    extent = target.shape[-2:]
    if valid is None:
        weight = np.ones(extent, dtype=np.float32)
    else:
        weight = (valid.values if isinstance(valid, OcclusionMask) else np.asarray(valid)).astype(np.float32)
    if weight.shape != extent:
        raise ValueError(f"valid mask shape {weight.shape} != flow extent {extent}")
    terms = []
    for p in preds:
        p = _flow(p)
        if p.shape[-3:] != target.shape[-3:]:
            raise ValueError(f"prediction shape {p.shape} != target shape {target.shape}")
        count = float(weight.sum()) * (p.size // (2 * weight.size))
        if count == 0:
            raise ValueError("valid set is empty")
        l1 = (p - target).abs().sum(axis=-3)
        terms.append((l1 * weight).sum() * (1.0 / count))
    return _gamma_sum(terms, cfg)


def zero_forcing_loss(preds: Sequence, cfg: LossConfig = LossConfig()) -> Tensor:
    """Sequence loss against the all-zero field: a pair with occlusion but no motion."""
    _check_count(len(preds), cfg)
    shape = _flow(preds[0]).shape
    return sequence_loss(preds, np.zeros(shape, dtype=np.float32), None, cfg)


# ── Mask match ───────────────────────────────────────────────────────────

def mask_match_loss(pred_masks: Sequence, gt_mask, cfg: LossConfig = LossConfig()) -> Tensor:
    """
    Sum_i gamma^(N-i) * (-1/wh) Sum_p O(p) log O~_i(p).
    With cfg.mask_match_bce the (1 - O) log(1 - O~) term is added.
    """
    _check_count(len(pred_masks), cfg)
    target = gt_mask.values if isinstance(gt_mask, OcclusionMask) else np.asarray(gt_mask, dtype=np.float32)
    terms = []
    for m in pred_masks:
        m = Tensor(m.values) if isinstance(m, OcclusionMask) else as_tensor(m)
        if m.shape[-2:] != target.shape[-2:]:
            raise ValueError(f"predicted mask shape {m.shape} != ground-truth shape {target.shape}")
        if not ((m.data > 0) & (m.data < 1)).all():
            raise ValueError("predicted mask values must lie strictly inside (0, 1)")
        ce = m.log() * target
        if cfg.mask_match_bce:
            ce = ce + (1.0 - m).log() * (1.0 - target)
        terms.append(-ce.mean())
    return _gamma_sum(terms, cfg)


# ── Transformation consistency ───────────────────────────────────────────

def consistency_errors(pred_orig, pred_trans, t: GeoTransform) -> Tensor:
    """Per-pixel squared distance between a prediction and the restored transformed prediction."""
    o = _flow(pred_orig)
    r = restore_flow(_flow(pred_trans), t)
    if o.shape != r.shape:
        raise ValueError(f"restored prediction shape {r.shape} != original prediction shape {o.shape}")
    return (o - r).square().sum(axis=-3)


def transformation_consistency_loss(
    pred_orig: Sequence, pred_trans: Sequence, t: GeoTransform, cfg: LossConfig = LossConfig()
) -> tuple[Tensor, list[IdentifierMask]]:
    """
    Sum_i gamma^(N-i) * mean of e_i over pixels with alpha_i = 1, alpha_i(p) = e_i(p) < epsilon.
    alpha is a constant gate; an iteration whose gate is empty contributes exactly 0.
    """
    _check_count(len(pred_orig), cfg)
    if len(pred_trans) != len(pred_orig):
        raise ValueError(f"{len(pred_orig)} original vs {len(pred_trans)} transformed iterations")
    terms, masks = [], []
    for o, tr in zip(pred_orig, pred_trans):
        err = consistency_errors(o, tr, t)
        alpha = err.data < cfg.epsilon if math.isfinite(cfg.epsilon) else np.ones(err.shape, dtype=bool)
        masks.append(IdentifierMask(alpha))
        count = int(alpha.sum())
        terms.append((err * alpha.astype(err.data.dtype)).sum() * (1.0 / max(count, 1)))
    return _gamma_sum(terms, cfg), masks


# ── Total ────────────────────────────────────────────────────────────────

@dataclass
class LossComponents:
    """Per-batch loss terms; None marks a component that does not apply."""

    base: Tensor | float | None = None
    zero_forcing: Tensor | float | None = None
    mask_match: Tensor | float | None = None
    transformation: Tensor | float | None = None

    def present(self) -> list[str]:
        return [f.name for f in fields(self) if getattr(self, f.name) is not None]

    def breakdown(self) -> dict[str, float]:
        out = {}
        for name in self.present():
            value = getattr(self, name)
            out[name] = value.item() if isinstance(value, Tensor) else float(value)
        return out


def total_loss(components: LossComponents, cfg: LossConfig = LossConfig()) -> Tensor:
    """L_base + w_ZF L_ZF + lambda1 L_MM + lambda2 L_TR; absent terms count as 0."""
    weights = {"base": 1.0, "zero_forcing": cfg.zero_forcing_weight, "mask_match": cfg.lambda1, "transformation": cfg.lambda2}
    total = None
    for name in components.present():
        term = as_tensor(getattr(components, name)) * weights[name]
        total = term if total is None else total + term
    return Tensor(0.0) if total is None else total
