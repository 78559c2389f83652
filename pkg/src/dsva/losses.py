"""Mask losses, dynamic mask fusion and triple supervision."""

import math
from dataclasses import dataclass
from enum import Enum
from typing import Dict, Optional, Tuple, Union

import numpy as np

from . import diffcore as dc
from .diffcore import Module, Parameter, Tensor
from .errors import ContractError, NumericError, ShapeError
from .types import LossBreakdown

BCE_CLAMP = 1e-7

Scalar = Union[Tensor, float]


class CEVariant(str, Enum):
    BCE = "bce"
    SQUARED_ERROR = "squared_error"


@dataclass
class LossWeights:
    """Weights of the auxiliary terms and mask-loss settings."""
    lambda_adv: float = 0.1
    lambda_club: float = 0.1
    lambda_ortho: float = 0.01
    ce_variant: CEVariant = CEVariant.BCE
    epsilon_dice: float = 1e-6

    def __post_init__(self) -> None:
        self.ce_variant = CEVariant(self.ce_variant)
        for name in ("lambda_adv", "lambda_club", "lambda_ortho"):
            if getattr(self, name) < 0:
                raise ContractError(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.epsilon_dice <= 0:
            raise ContractError(f"epsilon_dice must be > 0, got {self.epsilon_dice}")


def _pair(
    pred: Union[Tensor, np.ndarray], target: Union[Tensor, np.ndarray], what: str
) -> Tuple[Tensor, Tensor]:
    p = pred if isinstance(pred, Tensor) else Tensor(pred)
    t = target if isinstance(target, Tensor) else Tensor(target)
    if p.shape != t.shape:
        raise ShapeError(f"{what}: prediction shape {p.shape} != target shape {t.shape}")
    if p.ndim == 0:
        raise ShapeError(f"{what}: needs at least one axis")
    return p, t


def ce_loss(
    pred: Union[Tensor, np.ndarray],
    target: Union[Tensor, np.ndarray],
    variant: Union[CEVariant, str] = CEVariant.BCE,
) -> Tensor:
    """
    Pixel-wise loss between probabilities and a 0/1 target over the last axis.

    bce: mean -[y log p + (1 - y) log(1 - p)], p clamped to [1e-7, 1 - 1e-7].
    squared_error: mean (p - y)^2.
    Leading axes are averaged.
    """
    p, t = _pair(pred, target, "ce_loss")
    if CEVariant(variant) is CEVariant.SQUARED_ERROR:
        return dc.square(p - t).mean()
    clipped = dc.clamp(p, BCE_CLAMP, 1.0 - BCE_CLAMP)
    per_pixel = t * dc.log(clipped) + (1.0 - t) * dc.log(1.0 - clipped)
    return -per_pixel.mean()


def dice_loss(
    pred: Union[Tensor, np.ndarray],
    target: Union[Tensor, np.ndarray],
    epsilon: float = 1e-6,
) -> Tensor:
    """
    1 - (2 sum(y p) + eps) / (sum(y) + sum(p) + eps) over the last axis, averaged over the rest.
    """
    p, t = _pair(pred, target, "dice_loss")
    overlap = (p * t).sum(axis=-1)
    total = t.sum(axis=-1) + p.sum(axis=-1)
    return (1.0 - (overlap * 2.0 + epsilon) / (total + epsilon)).mean()


def mask_loss(logits: Tensor, target: Union[Tensor, np.ndarray], weights: LossWeights) -> Tensor:
    """CE + Dice of sigmoid(logits) against a 0/1 target; spatial axes are flattened."""
    batch_shape = logits.shape[:-2] if logits.ndim >= 2 else ()
    flat = logits.reshape(batch_shape + (-1,)) if logits.ndim >= 2 else logits
    target_array = target.data if isinstance(target, Tensor) else np.asarray(target, np.float64)
    if target_array.shape != logits.shape:
        raise ShapeError(f"mask_loss: logits {logits.shape} vs target {target_array.shape}")
    flat_target = target_array.reshape(flat.shape)
    prob = dc.sigmoid(flat)
    return ce_loss(prob, flat_target, weights.ce_variant) + dice_loss(
        prob, flat_target, weights.epsilon_dice
    )


class GateMode(str, Enum):
    LEARNED = "learned"
    FIXED = "fixed"


class FusionGate(Module):
    """
    Per-pixel gate g = sigmoid(w_text * text + w_visual * visual + b) over two logit maps,
    or a constant g in fixed mode.
    """

    def __init__(self, mode: Union[GateMode, str] = GateMode.LEARNED, value: float = 0.5):
        self.mode = GateMode(mode)
        if self.mode is GateMode.FIXED and not 0.0 <= value <= 1.0:
            raise ContractError(f"fixed gate value must be in [0, 1], got {value}")
        self.value = value
        if self.mode is GateMode.LEARNED:
            self.weight = Parameter(np.zeros(2))
            self.bias = Parameter(np.zeros(1))

    def __call__(self, text_logits: Tensor, visual_logits: Tensor) -> Union[Tensor, float]:
        if self.mode is GateMode.FIXED:
            return self.value
        mixed = text_logits * self.weight[0] + visual_logits * self.weight[1] + self.bias
        return dc.sigmoid(mixed)


def fuse_masks(text_logits: Tensor, visual_logits: Tensor, gate: FusionGate) -> Tensor:
    """
    fused = g * text + (1 - g) * visual, written as visual + g * (text - visual)
    so that agreeing branches pass through unchanged.

    Raises:
        ShapeError: If the two logit maps differ in shape
    """
    if text_logits.shape != visual_logits.shape:
        raise ShapeError(
            f"fuse_masks: text {text_logits.shape} vs visual {visual_logits.shape}"
        )
    g = gate(text_logits, visual_logits)
    if isinstance(g, float) and g == 1.0:
        return text_logits + 0.0
    return visual_logits + g * (text_logits - visual_logits)


def _value(term: Scalar) -> float:
    return term.item() if isinstance(term, Tensor) else float(term)


def triple_supervision(
    text_logits: Tensor,
    visual_logits: Tensor,
    fused_logits: Tensor,
    label_mask: Union[Tensor, np.ndarray],
    gt_mask: Union[Tensor, np.ndarray],
    aux: Dict[str, Scalar],
    weights: LossWeights,
    text_loss: Scalar = 0.0,
    reprompt_logits: Optional[Tensor] = None,
) -> Tuple[Tensor, LossBreakdown]:
    """
    Combine the three mask losses and the weighted auxiliary terms.

    total = [CE+Dice](visual, gt) + [CE+Dice](text, label) + [CE+Dice](fused, gt)
            + lambda_adv * adv + lambda_club * club + lambda_ortho * ortho + text
            (+ [CE+Dice](reprompt, gt) when reprompt logits are given)

    Args:
        text_logits: Text-path logits
        visual_logits: Visual-path logits
        fused_logits: Fused logits
        label_mask: Target for the text path
        gt_mask: Target for the visual and fused paths
        aux: Scalars under "adv", "club", "ortho" (missing keys count as 0)
        weights: Loss weights
        text_loss: Externally supplied language-model loss
        reprompt_logits: Fused logits of a dense-reprompt pass

    Returns:
        (total loss, breakdown of weighted contributions)

    Raises:
        NumericError: If any term is non-finite; the message names the term
    """
    unknown = set(aux) - {"adv", "club", "ortho"}
    if unknown:
        raise ContractError(f"unknown auxiliary terms {sorted(unknown)}")

    terms: Dict[str, Scalar] = {
        "mask_visual": mask_loss(visual_logits, gt_mask, weights),
        "mask_text": mask_loss(text_logits, label_mask, weights),
        "mask_fused": mask_loss(fused_logits, gt_mask, weights),
        "mask_reprompt": (
            mask_loss(reprompt_logits, gt_mask, weights) if reprompt_logits is not None else 0.0
        ),
        "adv": _weighted(aux.get("adv", 0.0), weights.lambda_adv),
        "club": _weighted(aux.get("club", 0.0), weights.lambda_club),
        "ortho": _weighted(aux.get("ortho", 0.0), weights.lambda_ortho),
        "text": text_loss,
    }
    for name, term in terms.items():
        if not math.isfinite(_value(term)):
            raise NumericError(f"loss term {name!r} is not finite")

    total: Scalar = 0.0
    for term in terms.values():
        total = total + term
    if not isinstance(total, Tensor):
        total = Tensor(total)

    breakdown = LossBreakdown(
        mask_visual=_value(terms["mask_visual"]),
        mask_text=_value(terms["mask_text"]),
        mask_fused=_value(terms["mask_fused"]),
        mask_reprompt=_value(terms["mask_reprompt"]),
        adv=_value(terms["adv"]),
        club=_value(terms["club"]),
        ortho=_value(terms["ortho"]),
        text=_value(terms["text"]),
        total=total.item(),
    )
    return total, breakdown


def _weighted(term: Scalar, weight: float) -> Scalar:
    if weight == 0.0:
        return 0.0
    return term * weight
