"""Region-focused losses for multi-task sCT regression, with analytic gradients.

All functions work in float64 on numpy arrays. Gradients are taken with
respect to the prediction argument; the subgradient of ``|e|`` at ``e == 0``
is 0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError
from .imaging import check_same_shape
from .variants import TERMS, Variant

DEFAULT_SMOOTH = 1.0


@dataclass(frozen=True)
class LossWeights:
    w1: float = 1.0
    w2: float = 1.5
    w3: float = 1.3

    def __post_init__(self):
        for name in ("w1", "w2", "w3"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ContractError(f"loss weight {name} must be finite and >= 0, got {v}")

    def scaled(self, f1: float = 1.0, f2: float = 1.0, f3: float = 1.0) -> "LossWeights":
        return LossWeights(self.w1 * f1, self.w2 * f2, self.w3 * f3)

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.w1, self.w2, self.w3)


@dataclass(frozen=True)
class LossBreakdown:
    body_reg: float = 0.0
    bone_class: float = 0.0
    bone_reg: float = 0.0
    total: float = 0.0
    terms: tuple[str, ...] = field(default=TERMS, compare=False)

    @classmethod
    def combine(cls, body_reg, bone_class, bone_reg, w: LossWeights, terms=TERMS):
        total = w.w1 * body_reg + w.w2 * bone_class + w.w3 * bone_reg
        return cls(float(body_reg), float(bone_class), float(bone_reg), float(total), tuple(terms))

    def to_dict(self) -> dict[str, float]:
        out = {t: getattr(self, t) for t in self.terms}
        out["total"] = self.total
        return out

    @classmethod
    def mean(cls, items, weights=None) -> "LossBreakdown":
        items = list(items)
        if not items:
            raise ContractError("cannot average an empty list of loss breakdowns")
        wts = np.ones(len(items)) if weights is None else np.asarray(weights, dtype=np.float64)
        wts = wts / wts.sum()
        vals = {
            name: float(sum(wi * getattr(it, name) for wi, it in zip(wts, items)))
            for name in ("body_reg", "bone_class", "bone_reg", "total")
        }
        return cls(**vals, terms=items[0].terms)


def _pair(y, yhat):
    y = np.asarray(y, dtype=np.float64)
    yhat = np.asarray(yhat, dtype=np.float64)
    check_same_shape(y, yhat, names=("y", "yhat"))
    return y, yhat


def _region(region, like) -> np.ndarray:
    region = np.asarray(region)
    check_same_shape(like, region, names=("image", "region"))
    if region.dtype != bool:
        if not np.all((region == 0) | (region == 1)):
            raise ContractError("region mask must be binary")
        region = region.astype(bool)
    return region


def regional_mae(y, yhat, region) -> float:
    y, yhat = _pair(y, yhat)
    region = _region(region, y)
    n = int(region.sum())
    if n == 0:
        return 0.0
    return float(np.abs(y - yhat)[region].sum() / n)


def regional_mae_grad(y, yhat, region) -> np.ndarray:
    y, yhat = _pair(y, yhat)
    region = _region(region, y)
    n = int(region.sum())
    grad = np.zeros_like(yhat)
    if n:
        grad[region] = np.sign(yhat - y)[region] / n
    return grad


def _wmae_coefficients(region_k: np.ndarray) -> tuple[float, float]:
    """Per-pixel factors for region k and its complement k'."""
    n = region_k.size
    n_k = int(region_k.sum())
    n_kc = n - n_k
    c_k = n_kc / (n * n_k) if n_k else 0.0
    c_kc = n_k / (n * n_kc) if n_kc else 0.0
    return c_k, c_kc


def weighted_mae(y, yhat, region_k) -> float:
    """Two-region MAE where each region is weighted by the other's volume."""
    y, yhat = _pair(y, yhat)
    region_k = _region(region_k, y)
    c_k, c_kc = _wmae_coefficients(region_k)
    err = np.abs(y - yhat)
    return float(c_k * err[region_k].sum() + c_kc * err[~region_k].sum())


def weighted_mae_grad(y, yhat, region_k) -> np.ndarray:
    y, yhat = _pair(y, yhat)
    region_k = _region(region_k, y)
    c_k, c_kc = _wmae_coefficients(region_k)
    return np.sign(yhat - y) * np.where(region_k, c_k, c_kc)


def _dice_sums(x, xhat, smooth):
    if smooth < 0:
        raise ContractError(f"smooth must be >= 0, got {smooth}")
    x, xhat = _pair(x, xhat)
    num = 2.0 * float(np.sum(x * xhat)) + smooth
    den = float(np.sum(x * x)) + float(np.sum(xhat * xhat)) + smooth
    return x, xhat, num, den


def dice_loss(x, xhat, smooth: float = DEFAULT_SMOOTH) -> float:
    """1 - smoothed Dice between a target map ``x`` and a predicted map ``xhat``.

    With ``smooth == 0`` and both maps empty the quotient is 0/0; that case is
    treated as perfect agreement (loss 0).
    """
    _, _, num, den = _dice_sums(x, xhat, smooth)
    if den == 0.0:
        return 0.0
    return 1.0 - num / den


def dice_loss_grad(x, xhat, smooth: float = DEFAULT_SMOOTH) -> np.ndarray:
    x, xhat, num, den = _dice_sums(x, xhat, smooth)
    if den == 0.0:
        return np.zeros_like(xhat)
    return -(2.0 * x * den - num * 2.0 * xhat) / (den * den)


def _plane(outputs, name):
    if isinstance(outputs, dict):
        value = outputs.get(name)
    else:
        value = getattr(outputs, name, None)
    return None if value is None else np.asarray(value, dtype=np.float64)


def _required(outputs, name, variant):
    plane = _plane(outputs, name)
    if plane is None:
        raise ContractError(f"variant {variant.value} needs the {name!r} head output")
    return plane


def _composite(outputs, ct, body, bone_target, w, variant, smooth, want_grads):
    variant = Variant.parse(variant)
    ct = np.asarray(ct, dtype=np.float64)
    body = _region(body, ct)
    bone_target = _region(bone_target, ct)
    grads = {}

    sct = _required(outputs, "sct", variant)
    check_same_shape(ct, sct, names=("ct", "sct"))
    if variant.global_loss:
        everywhere = np.ones(ct.shape, dtype=bool)
        body_reg = regional_mae(ct, sct, everywhere)
        if want_grads:
            grads["sct"] = w.w1 * regional_mae_grad(ct, sct, everywhere)
    else:
        body_reg = weighted_mae(ct, sct, body)
        if want_grads:
            grads["sct"] = w.w1 * weighted_mae_grad(ct, sct, body)

    bone_class = 0.0
    if "bone_class" in variant.terms:
        mask = _required(outputs, "mask", variant)
        bone_class = dice_loss(bone_target, mask, smooth)
        if want_grads:
            grads["mask"] = w.w2 * dice_loss_grad(bone_target, mask, smooth)

    bone_reg = 0.0
    if "bone_reg" in variant.terms:
        bone = _required(outputs, "bone", variant)
        bone_reg = regional_mae(ct, bone, bone_target)
        if want_grads:
            grads["bone"] = w.w3 * regional_mae_grad(ct, bone, bone_target)

    breakdown = LossBreakdown.combine(body_reg, bone_class, bone_reg, w, variant.terms)
    return breakdown, grads


def composite_loss(outputs, ct, body, bone_target, w: LossWeights | None = None,
                   variant=Variant.THREE_TASK, smooth: float = DEFAULT_SMOOTH) -> LossBreakdown:
    """Weighted sum of the per-task losses active in ``variant``.

    ``outputs`` is any object (or dict) exposing ``sct``, ``bone`` and ``mask``
    planes; regression planes must be in the same value space as ``ct``.
    """
    w = w or LossWeights()
    breakdown, _ = _composite(outputs, ct, body, bone_target, w, variant, smooth, False)
    return breakdown


def loss_gradients(outputs, ct, body, bone_target, w: LossWeights | None = None,
                   variant=Variant.THREE_TASK, smooth: float = DEFAULT_SMOOTH):
    """Return ``(breakdown, grads)``; ``grads`` maps head name to d(total)/d(head)."""
    w = w or LossWeights()
    return _composite(outputs, ct, body, bone_target, w, variant, smooth, True)
