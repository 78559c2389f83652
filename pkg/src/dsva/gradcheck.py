"""Central finite-difference checks of backward() and the built-in case suite."""

import logging
import time
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Mapping, NamedTuple, Optional, Tuple

import numpy as np

from . import diffcore as dc
from .adversary import Discriminator, adv_objective
from .club import VariationalQ, club_estimate, q_log_prob
from .decoupler import Decoupler, decouple, ortho_loss
from .diffcore import Parameter, Tensor
from .losses import CEVariant, FusionGate, LossWeights, ce_loss, dice_loss, fuse_masks
from .losses import triple_supervision
from .segcore import DecoderPath, ImageEncoder, MaskDecoder, PointLift, PromptSet, PromptTag
from .segcore import decode_mask, encode_image
from .types import GradCheckRow

logger = logging.getLogger(__name__)

ABS_FLOOR = 1e-8

LossFn = Callable[[], Tensor]


class Case(NamedTuple):
    loss_fn: LossFn
    params: Dict[str, Parameter]
    scale: Dict[str, float] = {}


CaseSpec = Tuple[Any, ...]


@dataclass
class GradCheckReport:
    """Per-parameter maximum relative error of one case."""
    name: str
    tolerance: float
    rows: List[GradCheckRow] = field(default_factory=list)

    @property
    def max_error(self) -> float:
        return max((row["max_rel_error"] for row in self.rows), default=0.0)

    @property
    def passed(self) -> bool:
        return all(row["passed"] for row in self.rows)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    """|a - n| / max(|a|, |n|), and 0 wherever |a - n| <= 1e-8."""
    diff = np.abs(analytic - numeric)
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    with np.errstate(divide="ignore", invalid="ignore"):
        rel = np.where(diff <= ABS_FLOOR, 0.0, diff / np.where(scale > 0, scale, 1.0))
    return rel


def _analytic(loss_fn: LossFn, params: Mapping[str, Parameter]) -> Dict[str, np.ndarray]:
    for p in params.values():
        p.grad = None
    with dc.Tape():
        loss = loss_fn()
        dc.backward(loss)
    grads = {
        name: (np.zeros_like(p.data) if p.grad is None else p.grad.copy())
        for name, p in params.items()
    }
    for p in params.values():
        p.grad = None
    return grads


def _value(loss_fn: LossFn) -> float:
    with dc.no_grad():
        return loss_fn().item()


def grad_check(
    loss_fn: LossFn,
    params: Mapping[str, Parameter],
    tolerance: float = 1e-4,
    step: float = 1e-5,
    max_coords: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
    name: str = "case",
    expected_scale: Optional[Mapping[str, float]] = None,
) -> GradCheckReport:
    """
    Compare backward() with central differences (f(x+h) - f(x-h)) / 2h.

    Args:
        loss_fn: Builds a scalar loss from the current parameter values
        params: Parameters to check, by name
        tolerance: Maximum allowed relative error
        step: Finite-difference step h
        max_coords: Check at most this many random coordinates per parameter
        rng: Coordinate sampler (default seeded with 0)
        name: Case name in the report
        expected_scale: Per-parameter factor s with analytic == s * numeric, for inputs
            that reach the loss through gradient_reversal (s = -lambda)

    Returns:
        GradCheckReport; failures are reported, never raised
    """
    rng = rng or np.random.default_rng(0)
    analytic = _analytic(loss_fn, params)
    report = GradCheckReport(name=name, tolerance=tolerance)
    for pname, p in params.items():
        flat = p.data.flat
        coords = np.arange(p.size)
        if max_coords is not None and p.size > max_coords:
            coords = np.sort(rng.choice(p.size, size=max_coords, replace=False))
        numeric = np.empty(len(coords))
        for i, coord in enumerate(coords):
            original = flat[coord]
            flat[coord] = original + step
            plus = _value(loss_fn)
            flat[coord] = original - step
            minus = _value(loss_fn)
            flat[coord] = original
            numeric[i] = (plus - minus) / (2.0 * step)
        scale = (expected_scale or {}).get(pname, 1.0)
        errors = relative_error(analytic[pname].reshape(-1)[coords], scale * numeric)
        worst = float(errors.max()) if errors.size else 0.0
        report.rows.append(
            GradCheckRow(
                case=name,
                parameter=pname,
                max_rel_error=worst,
                coordinates=int(len(coords)),
                passed=worst < tolerance,
            )
        )
    return report


def grl_consistency(lam: float, seed: int = 0) -> float:
    """
    Max relative deviation between the gradient through gradient_reversal and
    -lam times the gradient of the same loss without it.
    """
    rng = np.random.default_rng(seed)
    x = Parameter(rng.normal(size=(4, 3)))
    w = rng.normal(size=(3, 2))

    def loss(reverse: bool) -> LossFn:
        def build() -> Tensor:
            h = dc.gradient_reversal(x, lam) if reverse else x
            return dc.square(dc.sigmoid(h @ w)).sum()
        return build

    plain = _analytic(loss(False), {"x": x})["x"]
    reversed_ = _analytic(loss(True), {"x": x})["x"]
    return float(relative_error(reversed_, -lam * plain).max())


# --- built-in cases ---------------------------------------------------------


def _param(
    rng: np.random.Generator, *shape: int, low: float = -1.0, high: float = 1.0
) -> Parameter:
    return Parameter(rng.uniform(low, high, size=shape))


def _op_cases(rng: np.random.Generator) -> Dict[str, CaseSpec]:
    a = _param(rng, 3, 4)
    b = _param(rng, 4, 2)
    c = _param(rng, 3, 4)
    row = _param(rng, 1, 4)
    pos = _param(rng, 3, 4, low=0.5, high=2.0)
    far = Parameter(rng.choice([-1.0, 1.0], size=(3, 4)) * rng.uniform(0.2, 1.0, size=(3, 4)))
    upstream = rng.normal(size=(3, 4))
    batched = _param(rng, 2, 3, 4)

    def weighted(t: Tensor) -> Tensor:
        return (t * upstream).sum()

    return {
        "matmul": (lambda: dc.square(a @ b).sum(), {"a": a, "b": b}),
        "matmul_batched": (lambda: dc.square(batched @ b).sum(), {"x": batched, "b": b}),
        "add_broadcast": (lambda: weighted(a + row), {"a": a, "row": row}),
        "subtract": (lambda: weighted(a - c), {"a": a, "c": c}),
        "multiply": (lambda: weighted(a * c), {"a": a, "c": c}),
        "divide": (lambda: weighted(a / pos), {"a": a, "pos": pos}),
        "negate": (lambda: weighted(-a), {"a": a}),
        "sum_axis": (lambda: dc.square(a.sum(axis=1)).sum(), {"a": a}),
        "mean_keepdims": (lambda: weighted(a * a.mean(axis=0, keepdims=True)), {"a": a}),
        "sigmoid": (lambda: weighted(dc.sigmoid(a)), {"a": a}),
        "leaky_relu": (lambda: weighted(dc.leaky_relu(far, 0.2)), {"x": far}),
        "log": (lambda: weighted(dc.log(pos)), {"pos": pos}),
        "exp": (lambda: weighted(dc.exp(a)), {"a": a}),
        "square": (lambda: weighted(dc.square(a)), {"a": a}),
        "concat": (
            lambda: dc.square(dc.concat([a, c], axis=1)).sum() + weighted(a), {"a": a, "c": c}
        ),
        "slice": (lambda: dc.square(a[1:, ::2]).sum() + dc.square(a[[0, 0, 2]]).sum(), {"a": a}),
        "broadcast": (lambda: weighted(dc.broadcast_to(row, (3, 4))), {"row": row}),
        "reshape_transpose": (
            lambda: dc.square(a.reshape(4, 3).transpose() @ b).sum(),
            {"a": a, "b": b},
        ),
        "softmax": (lambda: weighted(dc.softmax(a, axis=-1)), {"a": a}),
        "logsumexp": (lambda: dc.square(dc.logsumexp(a, axis=0)).sum(), {"a": a}),
        "clamp": (lambda: weighted(dc.clamp(far, -0.1, 0.1) + far), {"x": far}),
    }


def _model_cases(rng: np.random.Generator) -> Dict[str, CaseSpec]:
    batch, hidden, fused_dim = 6, 4, 8
    x = rng.normal(size=(batch, fused_dim))
    decoupler = Decoupler(fused_dim, hidden, fused_dim // 2, rng)
    h_t = _param(rng, batch, hidden)
    h_v = _param(rng, batch, hidden)
    d_t = Discriminator(hidden, rng, hidden_dim=5)
    d_v = Discriminator(hidden, rng, hidden_dim=5)
    q = VariationalQ(hidden, rng, hidden_dim=5)
    q_mix = VariationalQ(hidden, rng, hidden_dim=5, components=2)

    size = 16
    pred = _param(rng, 2, 10, low=0.05, high=0.95)
    target = (rng.uniform(size=(2, 10)) > 0.5).astype(np.float64)
    text_logits = _param(rng, 2, size, size)
    visual_logits = _param(rng, 2, size, size)
    gate = FusionGate()
    gate.weight.data = rng.normal(0.0, 0.3, size=2)
    label_mask = (rng.uniform(size=(2, size, size)) > 0.6).astype(np.float64)
    gt_mask = (rng.uniform(size=(2, size, size)) > 0.6).astype(np.float64)
    weights = LossWeights()

    def triple() -> Tensor:
        fused = fuse_masks(text_logits, visual_logits, gate)
        aux = {"club": club_estimate(q, h_t, h_v), "ortho": ortho_loss(h_t, h_v)}
        total, _ = triple_supervision(
            text_logits, visual_logits, fused, label_mask, gt_mask, aux, weights,
            reprompt_logits=visual_logits * 0.5,
        )
        return total

    encoder = ImageEncoder(8, rng, patch_size=8)
    decoder = MaskDecoder(DecoderPath.VISUAL, 8, 2, rng, blocks=1, heads=2)
    decoder.dense_lift.data = rng.normal(0.0, 0.1, size=(1, 8))
    lift = PointLift(hidden, 8, 2, rng)
    images = rng.uniform(size=(2, size, size, 3))
    dense = rng.uniform(size=(2, size, size))
    mask_target = (rng.uniform(size=(2, size, size)) > 0.5).astype(np.float64)
    h_prompt = _param(rng, 2, hidden)

    def decode() -> Tensor:
        prompts = PromptSet(
            sparse=lift(h_prompt), tags=(PromptTag.DECOUPLED_VISUAL,) * 2, dense=dense
        )
        logits = decode_mask(encode_image(images, encoder), prompts, decoder).logits
        return dc.square(logits - mask_target).mean()

    decode_params = {"h": h_prompt}
    decode_params.update({f"lift.{k}": v for k, v in lift.named_parameters().items()})
    decode_params.update({f"encoder.{k}": v for k, v in encoder.named_parameters().items()})
    decode_params.update({f"decoder.{k}": v for k, v in decoder.named_parameters().items()})

    def projections() -> Tensor:
        state = decouple(x, decoupler)
        return dc.square(state.h_text).sum() + (state.h_vision * state.h_text).sum()

    adv_params = {"h_t": h_t, "h_v": h_v}
    adv_params.update({f"d_t.{k}": v for k, v in d_t.named_parameters().items()})
    adv_params.update({f"d_v.{k}": v for k, v in d_v.named_parameters().items()})
    reversed_features = {"h_t": -0.3, "h_v": -0.3}
    q_params = {f"q.{k}": v for k, v in q.named_parameters().items()}

    return {
        "projections": (
            projections,
            {
                "w_text": decoupler.w_text, "b_text": decoupler.b_text,
                "w_vision": decoupler.w_vision, "b_vision": decoupler.b_vision,
            },
        ),
        "adv_objective": (
            lambda: adv_objective(h_t, h_v, d_t, d_v, grl_lambda=0.3).discriminator_loss,
            adv_params,
            reversed_features,
        ),
        "adv_objective_confusion": (
            lambda: adv_objective(h_t, h_v, d_t, d_v, 0.3, "confusion").discriminator_loss,
            adv_params,
            reversed_features,
        ),
        "q_log_prob": (lambda: q_log_prob(q, h_t, h_v).mean(), dict(q_params, h_t=h_t, h_v=h_v)),
        "q_log_prob_mixture": (
            lambda: q_log_prob(q_mix, h_t, h_v).mean(),
            {f"q.{k}": v for k, v in q_mix.named_parameters().items()},
        ),
        "club_estimate": (lambda: club_estimate(q, h_t, h_v), dict(q_params, h_t=h_t, h_v=h_v)),
        "ortho": (lambda: ortho_loss(h_t, h_v), {"h_t": h_t, "h_v": h_v}),
        "ce_bce": (lambda: ce_loss(pred, target), {"pred": pred}),
        "ce_squared_error": (
            lambda: ce_loss(pred, target, CEVariant.SQUARED_ERROR), {"pred": pred}
        ),
        "dice": (lambda: dice_loss(pred, target), {"pred": pred}),
        "fuse_masks": (
            lambda: dc.square(fuse_masks(text_logits, visual_logits, gate)).mean(),
            {"text": text_logits, "visual": visual_logits, "gate.weight": gate.weight,
             "gate.bias": gate.bias},
        ),
        "triple_supervision": (
            triple,
            {"text": text_logits, "visual": visual_logits, "gate.weight": gate.weight,
             "h_t": h_t, "h_v": h_v},
        ),
        "decode_mask_16px": (decode, decode_params),
    }


def suite_cases(seed: int = 0) -> Dict[str, Case]:
    rng = np.random.default_rng(seed)
    specs = _op_cases(rng)
    specs.update(_model_cases(rng))
    return {name: Case(*spec) for name, spec in specs.items()}


def run_suite(
    seed: int = 0, tolerance: float = 1e-4, max_coords: Optional[int] = 24
) -> List[GradCheckReport]:
    """
    Check every built-in case plus the reversal identity.

    Returns:
        One report per case; the last one compares reversed and plain gradients
    """
    start = time.perf_counter()
    rng = np.random.default_rng([seed, 1])
    reports = [
        grad_check(
            case.loss_fn, case.params, tolerance, max_coords=max_coords, rng=rng, name=name,
            expected_scale=case.scale,
        )
        for name, case in suite_cases(seed).items()
    ]
    grl = GradCheckReport(name="grl_identity", tolerance=tolerance)
    for lam in (0.0, 0.5, 1.0):
        error = grl_consistency(lam, seed)
        grl.rows.append(
            GradCheckRow(
                case="grl_identity", parameter=f"lambda={lam}", max_rel_error=error,
                coordinates=12, passed=error < tolerance,
            )
        )
    reports.append(grl)
    failed = [r.name for r in reports if not r.passed]
    logger.info(
        "grad-check: %d cases, %d failed, %.1fs", len(reports), len(failed),
        time.perf_counter() - start,
    )
    return reports


def format_report(reports: List[GradCheckReport]) -> str:
    lines = [f"{'case':<26} {'parameter':<32} {'max rel err':>12}  status"]
    for report in reports:
        for row in report.rows:
            status = "ok" if row["passed"] else "FAIL"
            lines.append(
                f"{row['case']:<26} {row['parameter']:<32} {row['max_rel_error']:>12.3e}  {status}"
            )
    return "\n".join(lines)
