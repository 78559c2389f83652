"""Variational conditional q(h_t | h_v), the CLUB upper bound and its alternating schedule."""

import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from . import diffcore as dc
from .diffcore import Module, Parameter, Tensor, xavier_uniform
from .errors import ContractError, ShapeError
from .optim import Adam, Optimizer
from .types import ClubBenchRow

logger = logging.getLogger(__name__)

LOGVAR_MIN = -8.0
LOGVAR_MAX = 8.0
LOG_2PI = math.log(2.0 * math.pi)


class VariationalQ(Module):
    """
    Diagonal-Gaussian (or Gaussian-mixture) conditional density q(h_t | h_v).

    With hidden_dim None the mean and log-variance heads are affine in h_v;
    otherwise each head is a one-hidden-layer LeakyReLU MLP.
    """

    def __init__(
        self,
        dim: int,
        rng: np.random.Generator,
        hidden_dim: Optional[int] = 64,
        components: int = 1,
        slope: float = dc.DEFAULT_LEAKY_SLOPE,
    ):
        if components < 1:
            raise ContractError(f"mixture components must be >= 1, got {components}")
        self.dim = dim
        self.components = components
        self.hidden_dim = hidden_dim
        self.slope = slope
        width = components * dim
        source = dim if hidden_dim is None else hidden_dim
        if hidden_dim is not None:
            self.mu_hidden_w = Parameter(xavier_uniform(rng, dim, hidden_dim))
            self.mu_hidden_b = Parameter(np.zeros(hidden_dim))
            self.logvar_hidden_w = Parameter(xavier_uniform(rng, dim, hidden_dim))
            self.logvar_hidden_b = Parameter(np.zeros(hidden_dim))
        self.mu_w = Parameter(xavier_uniform(rng, source, width))
        self.mu_b = Parameter(np.zeros(width))
        self.logvar_w = Parameter(xavier_uniform(rng, source, width))
        self.logvar_b = Parameter(np.zeros(width))
        if components > 1:
            self.mix_w = Parameter(xavier_uniform(rng, source, components))
            self.mix_b = Parameter(np.zeros(components))
        self._clamp_warned = False

    def _features(self, h_v: Tensor, head: str) -> Tensor:
        if self.hidden_dim is None:
            return h_v
        w = getattr(self, f"{head}_hidden_w")
        b = getattr(self, f"{head}_hidden_b")
        return dc.leaky_relu(h_v @ w + b, self.slope)

    def conditional(self, h_v: Tensor) -> Tuple[Tensor, Tensor, Optional[Tensor]]:
        """
        Parameters of q(. | h_v) for a (B, H) batch.

        Returns:
            (mu (B, M, H), logvar (B, M, H) clamped to [-8, 8], log mixture weights (B, M) or None)
        """
        batch = h_v.shape[0]
        shape = (batch, self.components, self.dim)
        mu = (self._features(h_v, "mu") @ self.mu_w + self.mu_b).reshape(shape)
        raw = (self._features(h_v, "logvar") @ self.logvar_w + self.logvar_b).reshape(shape)
        if not self._clamp_warned and (raw.data.min() < LOGVAR_MIN or raw.data.max() > LOGVAR_MAX):
            logger.warning("q log-variance saturated at the [%g, %g] clamp", LOGVAR_MIN, LOGVAR_MAX)
            self._clamp_warned = True
        logvar = dc.clamp(raw, LOGVAR_MIN, LOGVAR_MAX)
        log_weights = None
        if self.components > 1:
            logits = self._features(h_v, "mu") @ self.mix_w + self.mix_b
            log_weights = logits - dc.logsumexp(logits, axis=-1, keepdims=True)
        return mu, logvar, log_weights


def _log_density(
    h_t: Tensor, mu: Tensor, logvar: Tensor, log_weights: Optional[Tensor]
) -> Tensor:
    batch, components, dim = mu.shape
    target = h_t.reshape(batch, 1, dim)
    sq = dc.square(target - mu) / dc.exp(logvar)
    per_component = (logvar + sq + LOG_2PI).sum(axis=-1) * -0.5
    if log_weights is None:
        return per_component.reshape(batch)
    return dc.logsumexp(per_component + log_weights, axis=-1)


def _as_batch(x: Union[Tensor, np.ndarray]) -> Tuple[Tensor, bool]:
    tensor = x if isinstance(x, Tensor) else Tensor(x)
    if tensor.ndim == 1:
        return tensor.reshape(1, tensor.shape[0]), True
    return tensor, False


def q_log_prob(
    q: VariationalQ, h_t: Union[Tensor, np.ndarray], h_v: Union[Tensor, np.ndarray]
) -> Tensor:
    """
    log q(h_t | h_v).

    Args:
        q: Conditional density
        h_t: (H,) or (B, H)
        h_v: (H,) or (B, H)

    Returns:
        Scalar for vector inputs, (B,) per-sample log densities for batches
    """
    t, single = _as_batch(h_t)
    v, _ = _as_batch(h_v)
    if t.shape != v.shape or t.shape[1] != q.dim:
        raise ShapeError(f"q_log_prob: shapes {t.shape} and {v.shape} do not match q dim {q.dim}")
    values = _log_density(t, *q.conditional(v))
    return values.reshape(()) if single else values


def _roll(x: Tensor) -> Tensor:
    """Shift by one along the batch axis: row i becomes row i + 1 (mod B)."""
    return dc.concat([x[1:], x[:1]], axis=0)


def club_estimate(q: VariationalQ, h_t_batch: Tensor, h_v_batch: Tensor) -> Tensor:
    """
    CLUB upper bound: mean log q on aligned pairs minus mean log q on shifted pairs.

    Negative pairs match h_t[i] with h_v[(i + 1) mod B].

    Args:
        q: Conditional density
        h_t_batch: (B, H)
        h_v_batch: (B, H)

    Returns:
        Scalar estimate, differentiable in q's parameters and both inputs

    Raises:
        ContractError: If B < 2
    """
    if h_t_batch.ndim != 2 or h_t_batch.shape[0] < 2:
        raise ContractError(f"club_estimate needs a batch of at least 2, got {h_t_batch.shape}")
    if h_t_batch.shape != h_v_batch.shape:
        raise ShapeError(f"club_estimate: shapes {h_t_batch.shape} and {h_v_batch.shape} differ")
    mu, logvar, log_weights = q.conditional(h_v_batch)
    positive = _log_density(h_t_batch, mu, logvar, log_weights).mean()
    negative = _log_density(
        h_t_batch,
        _roll(mu),
        _roll(logvar),
        None if log_weights is None else _roll(log_weights),
    ).mean()
    return positive - negative


def fit_q_step(q: VariationalQ, h_t_batch: Tensor, h_v_batch: Tensor, opt: Optimizer) -> float:
    """
    One maximum-likelihood step for q on aligned pairs.

    The feature batches are detached, so nothing upstream of them receives gradient.

    Returns:
        Negative mean log-likelihood before the step
    """
    h_t = h_t_batch.detach() if isinstance(h_t_batch, Tensor) else Tensor(h_t_batch)
    h_v = h_v_batch.detach() if isinstance(h_v_batch, Tensor) else Tensor(h_v_batch)
    with dc.Tape():
        nll = -q_log_prob(q, h_t, h_v).mean()
        dc.backward(nll)
    opt.step()
    return nll.item()


@dataclass
class ClubSchedule:
    """Alternation between q fitting and main-model updates."""
    k: int = 5
    q_steps_per_update: int = 5
    lambda_club: float = 0.1

    def __post_init__(self) -> None:
        if self.k < 1:
            raise ContractError(f"club schedule k must be >= 1, got {self.k}")
        if self.q_steps_per_update < 0 or self.lambda_club < 0:
            raise ContractError("q_steps_per_update and lambda_club must be >= 0")


class Phase(str, Enum):
    UPDATE_Q = "update_q"
    UPDATE_MAIN = "update_main"


def alternate(schedule: ClubSchedule, global_step: int) -> Phase:
    """
    Phase of a global step: q is refit on steps divisible by k.

    On UPDATE_Q steps the caller runs q_steps_per_update q fits with the main model
    frozen and then the regular main step with q frozen.
    """
    if global_step < 0:
        raise ContractError(f"global_step must be >= 0, got {global_step}")
    return Phase.UPDATE_Q if global_step % schedule.k == 0 else Phase.UPDATE_MAIN


def infonce_diagnostic(
    q: VariationalQ, h_t: Union[Tensor, np.ndarray], h_v: Union[Tensor, np.ndarray]
) -> float:
    """
    InfoNCE lower bound using log q(h_t[i] | h_v[j]) as the critic.

    Returns:
        mean_i(S_ii - logsumexp_j S_ij) + log B, in nats
    """
    with dc.no_grad():
        t, _ = _as_batch(h_t if isinstance(h_t, Tensor) else Tensor(h_t))
        v, _ = _as_batch(h_v if isinstance(h_v, Tensor) else Tensor(h_v))
        mu, logvar, log_weights = (
            x.data if x is not None else None for x in q.conditional(v)
        )
    batch = t.shape[0]
    diff = t.data[:, None, None, :] - mu[None, :, :, :]
    scaled = diff * diff / np.exp(logvar[None])
    per_component = -0.5 * (logvar[None] + scaled + LOG_2PI).sum(axis=-1)
    if log_weights is None:
        scores = per_component[..., 0]
    else:
        stacked = per_component + log_weights[None]
        peak = stacked.max(axis=-1, keepdims=True)
        scores = (peak + np.log(np.exp(stacked - peak).sum(axis=-1, keepdims=True)))[..., 0]
    row_peak = scores.max(axis=1, keepdims=True)
    row_lse = (row_peak + np.log(np.exp(scores - row_peak).sum(axis=1, keepdims=True)))[:, 0]
    return float(np.mean(np.diag(scores) - row_lse) + math.log(batch))


def correlated_gaussian(
    rho: float, samples: int, rng: np.random.Generator, dim: int = 1
) -> Tuple[np.ndarray, np.ndarray]:
    """Pairs (h_t, h_v) with unit variances and per-coordinate correlation rho."""
    h_v = rng.standard_normal((samples, dim))
    noise = rng.standard_normal((samples, dim))
    h_t = rho * h_v + math.sqrt(1.0 - rho * rho) * noise
    return h_t, h_v


def true_gaussian_mi(rho: float, dim: int = 1) -> float:
    return -0.5 * dim * math.log(1.0 - rho * rho)


def analytic_club(rho: float, dim: int = 1) -> float:
    """CLUB value under the exact conditional for a unit-variance Gaussian pair."""
    return dim * rho * rho / (1.0 - rho * rho)


def club_bench(
    rhos: Sequence[float] = (0.0, 0.5, 0.9),
    samples: int = 10_000,
    steps: int = 1000,
    learning_rate: float = 0.02,
    seed: int = 0,
) -> List[ClubBenchRow]:
    """
    Fit an affine q on correlated Gaussian pairs and compare the CLUB estimate with
    the true MI and the analytic CLUB value.

    Args:
        rhos: Correlations to test
        samples: Pairs per correlation
        steps: Full-batch Adam steps for q
        learning_rate: Adam learning rate
        seed: Seed for data and q initialization

    Returns:
        One ClubBenchRow per correlation
    """
    rows: List[ClubBenchRow] = []
    for index, rho in enumerate(rhos):
        rng = np.random.default_rng([seed, index])
        h_t, h_v = correlated_gaussian(rho, samples, rng)
        q = VariationalQ(1, rng, hidden_dim=None)
        opt = Adam(q.parameters(), lr=learning_rate)
        t, v = Tensor(h_t), Tensor(h_v)
        nll = float("nan")
        for _ in range(steps):
            nll = fit_q_step(q, t, v, opt)
        with dc.no_grad():
            estimate = club_estimate(q, t, v).item()
        rows.append(
            ClubBenchRow(
                rho=float(rho),
                true_mi=true_gaussian_mi(rho),
                analytic_club=analytic_club(rho),
                estimate=estimate,
                final_nll=nll,
            )
        )
        logger.info(
            "club-bench rho=%.2f true_mi=%.4f analytic=%.4f estimate=%.4f",
            rho,
            rows[-1]["true_mi"],
            rows[-1]["analytic_club"],
            estimate,
        )
    return rows
