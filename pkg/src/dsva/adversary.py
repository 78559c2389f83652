"""Modality discriminators, the adversarial objective with gradient reversal, and a JSD monitor."""

import logging
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Union

import numpy as np

from . import diffcore as dc
from .diffcore import Module, Parameter, Tensor, xavier_uniform
from .errors import ContractError, ShapeError

logger = logging.getLogger(__name__)

DEFAULT_CLAMP_EPS = 1e-6
MIN_JSD_SAMPLES = 50


class DiscriminatorRole(str, Enum):
    TEXT = "D_phi_t"
    VISION = "D_phi_v"


class AdvWiring(str, Enum):
    """How discriminators are paired with features."""
    CROSS = "cross"
    CONFUSION = "confusion"


class Discriminator(Module):
    """MLP H -> hidden -> 1 with LeakyReLU and a clamped sigmoid output."""

    def __init__(
        self,
        input_dim: int,
        rng: np.random.Generator,
        role: Union[DiscriminatorRole, str] = DiscriminatorRole.TEXT,
        hidden_dim: int = 64,
        slope: float = dc.DEFAULT_LEAKY_SLOPE,
        clamp_eps: float = DEFAULT_CLAMP_EPS,
    ):
        self.role = DiscriminatorRole(role)
        self.slope = slope
        self.clamp_eps = clamp_eps
        self.w1 = Parameter(xavier_uniform(rng, input_dim, hidden_dim))
        self.b1 = Parameter(np.zeros(hidden_dim))
        self.w2 = Parameter(xavier_uniform(rng, hidden_dim, 1))
        self.b2 = Parameter(np.zeros(1))

    def logits(self, h: Tensor) -> Tensor:
        hidden = dc.leaky_relu(h @ self.w1 + self.b1, self.slope)
        return (hidden @ self.w2 + self.b2).reshape(h.shape[:-1])

    def __call__(self, h: Tensor) -> Tensor:
        """Probabilities in [eps, 1 - eps], one per row of h."""
        return dc.clamp(dc.sigmoid(self.logits(h)), self.clamp_eps, 1.0 - self.clamp_eps)


@dataclass
class AdvBatchLoss:
    """Adversarial game values for one batch; both losses share one graph."""
    discriminator_loss: Tensor
    generator_loss: Tensor
    mean_dv_on_text: float
    mean_dt_on_vision: float

    @property
    def objective(self) -> float:
        return self.generator_loss.item()


def adv_objective(
    h_t: Tensor,
    h_v: Tensor,
    d_t: Discriminator,
    d_v: Discriminator,
    grl_lambda: float = 0.1,
    wiring: Union[AdvWiring, str] = AdvWiring.CROSS,
) -> AdvBatchLoss:
    """
    Compute J = mean[log D_v(h_t) + log(1 - D_t(h_v))] on gradient-reversed features.

    Minimizing discriminator_loss (= -J) in one backward pass moves the discriminators
    up the gradient of J and, through the reversal, the feature producer down it with
    weight grl_lambda. The "confusion" wiring instead asks each discriminator to tell
    its own modality from the other one.

    Args:
        h_t: (B, H) text features
        h_v: (B, H) vision features
        d_t: Text-modality discriminator
        d_v: Vision-modality discriminator
        grl_lambda: Gradient reversal coefficient (>= 0)
        wiring: "cross" or "confusion"

    Returns:
        AdvBatchLoss

    Raises:
        ContractError: On an empty batch
        ShapeError: If the batches differ in shape
    """
    if h_t.shape[0] == 0 or h_v.shape[0] == 0:
        raise ContractError("adv_objective: empty batch")
    if h_t.ndim != 2 or h_t.shape[1:] != h_v.shape[1:]:
        raise ShapeError(f"adv_objective: feature shapes {h_t.shape} and {h_v.shape} differ")

    rt = dc.gradient_reversal(h_t, grl_lambda)
    rv = dc.gradient_reversal(h_v, grl_lambda)
    dv_on_text = d_v(rt)
    dt_on_vision = d_t(rv)
    objective = dc.log(dv_on_text).mean() + dc.log(1.0 - dt_on_vision).mean()
    if AdvWiring(wiring) is AdvWiring.CONFUSION:
        objective = (
            dc.log(d_t(rt)).mean()
            + dc.log(1.0 - dt_on_vision).mean()
            + dc.log(d_v(rv)).mean()
            + dc.log(1.0 - dv_on_text).mean()
        )

    return AdvBatchLoss(
        discriminator_loss=-objective,
        generator_loss=objective,
        mean_dv_on_text=float(dv_on_text.data.mean()),
        mean_dt_on_vision=float(dt_on_vision.data.mean()),
    )


@dataclass
class JSDEstimate:
    value: float
    degenerate: bool = False
    direction: Optional[np.ndarray] = None


def _projection(p: np.ndarray, q: np.ndarray) -> Optional[np.ndarray]:
    """Fisher discriminant direction between p and q, or the top principal axis."""
    pooled = np.concatenate([p, q])
    if np.ptp(pooled, axis=0).max() == 0:
        return None
    dim = p.shape[1]
    scatter = np.cov(p, rowvar=False).reshape(dim, dim) + np.cov(q, rowvar=False).reshape(dim, dim)
    scatter += 1e-6 * np.eye(dim) * max(np.trace(scatter) / dim, 1e-12)
    gap = p.mean(axis=0) - q.mean(axis=0)
    direction = np.linalg.solve(scatter, gap)
    if np.linalg.norm(direction) < 1e-12:
        centered = pooled - pooled.mean(axis=0)
        _, _, vt = np.linalg.svd(centered, full_matrices=False)
        direction = vt[0]
    return direction / np.linalg.norm(direction)


def jsd_diagnostic(
    samples_p: Union[Tensor, np.ndarray],
    samples_q: Union[Tensor, np.ndarray],
    bins: int = 32,
    discriminator: Optional[Discriminator] = None,
) -> JSDEstimate:
    """
    Histogram Jensen-Shannon divergence (nats) along a 1-D projection.

    The projection is the discriminator's logit when one is given, otherwise the Fisher
    discriminant direction of the two samples. No gradients flow.

    Args:
        samples_p: (B, H) or (B,) samples
        samples_q: (B', H) or (B',) samples
        bins: Histogram bins over the pooled projected range
        discriminator: Trained discriminator whose logit defines the projection

    Returns:
        JSDEstimate; value is 0 with degenerate=True when all samples coincide

    Raises:
        ContractError: If either side has fewer than 50 samples
    """
    p = np.asarray(samples_p.data if isinstance(samples_p, Tensor) else samples_p, dtype=np.float64)
    q = np.asarray(samples_q.data if isinstance(samples_q, Tensor) else samples_q, dtype=np.float64)
    p = p.reshape(len(p), -1)
    q = q.reshape(len(q), -1)
    if len(p) < MIN_JSD_SAMPLES or len(q) < MIN_JSD_SAMPLES:
        raise ContractError(
            f"jsd_diagnostic needs >= {MIN_JSD_SAMPLES} samples per side, got {len(p)} and {len(q)}"
        )
    if p.shape[1] != q.shape[1]:
        raise ShapeError(f"jsd_diagnostic: dimensions {p.shape[1]} and {q.shape[1]} differ")

    direction: Optional[np.ndarray] = None
    if discriminator is not None:
        with dc.no_grad():
            zp = discriminator.logits(Tensor(p, copy=False)).data.reshape(-1)
            zq = discriminator.logits(Tensor(q, copy=False)).data.reshape(-1)
    else:
        direction = _projection(p, q)
        if direction is None:
            logger.warning("jsd_diagnostic: all samples identical, reporting 0")
            return JSDEstimate(value=0.0, degenerate=True)
        zp, zq = p @ direction, q @ direction
    low = min(zp.min(), zq.min())
    high = max(zp.max(), zq.max())
    if high - low < 1e-12:
        logger.warning("jsd_diagnostic: projected samples collapse to a point, reporting 0")
        return JSDEstimate(value=0.0, degenerate=True, direction=direction)

    hp, _ = np.histogram(zp, bins=bins, range=(low, high))
    hq, _ = np.histogram(zq, bins=bins, range=(low, high))
    pp = hp / hp.sum()
    pq = hq / hq.sum()
    mid = 0.5 * (pp + pq)

    def kl(a: np.ndarray) -> float:
        support = a > 0
        return float(np.sum(a[support] * np.log(a[support] / mid[support])))

    value = 0.5 * kl(pp) + 0.5 * kl(pq)
    return JSDEstimate(value=max(value, 0.0), direction=direction)
