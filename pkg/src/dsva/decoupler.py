"""Linear modality heads over the fused hidden state, plus the orthogonality loss."""

from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from . import diffcore as dc
from .diffcore import Module, Parameter, Tensor, xavier_uniform
from .errors import ShapeError


@dataclass
class DecoupledState:
    """Text and vision features split from one fused state (or a batch of them)."""
    h_text: Tensor
    h_vision: Tensor
    source_id: Optional[int] = None


class Decoupler(Module):
    """
    Three affine heads sharing the output width H.

    w_text / w_vision read the fused state (2D wide); w_real_text reads a real-text
    label embedding (D wide) and is only driven by ground-truth labels.
    """

    def __init__(self, fused_dim: int, hidden_dim: int, text_dim: int, rng: np.random.Generator):
        self.fused_dim = fused_dim
        self.hidden_dim = hidden_dim
        self.text_dim = text_dim
        self.w_text = Parameter(xavier_uniform(rng, fused_dim, hidden_dim))
        self.b_text = Parameter(np.zeros(hidden_dim))
        self.w_vision = Parameter(xavier_uniform(rng, fused_dim, hidden_dim))
        self.b_vision = Parameter(np.zeros(hidden_dim))
        self.w_real_text = Parameter(xavier_uniform(rng, text_dim, hidden_dim))
        self.b_real_text = Parameter(np.zeros(hidden_dim))


def _as_input(x: Union[Tensor, np.ndarray], width: int, what: str) -> Tensor:
    tensor = x if isinstance(x, Tensor) else Tensor(x)
    if tensor.ndim not in (1, 2) or tensor.shape[-1] != width:
        raise ShapeError(f"{what}: expected last dimension {width}, got shape {tensor.shape}")
    return tensor


def decouple(
    x_fused: Union[Tensor, np.ndarray],
    params: Decoupler,
    source_id: Optional[int] = None,
) -> DecoupledState:
    """
    Project fused state(s) into text and vision subspaces.

    Args:
        x_fused: (2D,) or (B, 2D)
        params: Decoupler heads
        source_id: Provenance tag carried on the result

    Returns:
        DecoupledState with h_text = x W_text + b_text and h_vision = x W_vision + b_vision

    Raises:
        ShapeError: If the input width differs from the heads' input width
    """
    x = _as_input(x_fused, params.fused_dim, "decouple")
    h_text = x @ params.w_text + params.b_text
    h_vision = x @ params.w_vision + params.b_vision
    return DecoupledState(h_text=h_text, h_vision=h_vision, source_id=source_id)


def encode_real_text(label_embedding: Union[Tensor, np.ndarray], params: Decoupler) -> Tensor:
    """Affine map of a real-text label embedding through the third head."""
    e = _as_input(label_embedding, params.text_dim, "encode_real_text")
    return e @ params.w_real_text + params.b_real_text


def ortho_loss(h_label_mask: Tensor, h_gt_mask: Tensor) -> Tensor:
    """
    Squared Frobenius norm of H_label^T H_gt.

    Args:
        h_label_mask: (B, H) features on the text-mask side
        h_gt_mask: (B, H) features on the visual-mask side

    Raises:
        ShapeError: If the matrices are not both (B, H) with B >= 1
    """
    if h_label_mask.ndim != 2 or h_label_mask.shape != h_gt_mask.shape or h_label_mask.shape[0] < 1:
        raise ShapeError(
            f"ortho_loss: need two equal (B, H) matrices, got {h_label_mask.shape} "
            f"and {h_gt_mask.shape}"
        )
    cross = dc.transpose(h_label_mask) @ h_gt_mask
    return dc.square(cross).sum()
