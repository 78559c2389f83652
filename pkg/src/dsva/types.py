"""Type definitions for dsva."""

from typing import Optional, TypedDict


class LossBreakdown(TypedDict):
    """Weighted contribution of every supervision term."""
    mask_visual: float
    mask_text: float
    mask_fused: float
    mask_reprompt: float
    adv: float
    club: float
    ortho: float
    text: float
    total: float


class EvalReport(TypedDict, total=False):
    """Evaluation summary for one checkpoint on one dataset."""
    mode: str
    scenes: int
    iterations: int
    miou: float
    ciou: float
    dice: float
    text_miou: float
    visual_miou: Optional[float]
    fused_miou: Optional[float]
    probe_text_to_text: Optional[float]
    probe_text_to_vis: Optional[float]
    probe_vis_to_vis: Optional[float]
    probe_vis_to_text: Optional[float]
    club: Optional[float]
    infonce: Optional[float]
    jsd: Optional[float]
    jsd_text_disc: Optional[float]


class ClubBenchRow(TypedDict):
    """One line of the Gaussian CLUB oracle table."""
    rho: float
    true_mi: float
    analytic_club: float
    estimate: float
    final_nll: float


class MetricRow(TypedDict, total=False):
    """One line of the metrics stream."""
    phase: str
    step: int
    wall_time: float
    loss: float
    mask_visual: float
    mask_text: float
    mask_fused: float
    mask_reprompt: float
    adv: float
    club: float
    ortho: float
    text: float
    total: float
    adv_objective: float
    mean_dv_on_text: float
    mean_dt_on_vision: float
    q_nll: Optional[float]
    eval_miou: float


class GradCheckRow(TypedDict):
    """Finite-difference comparison for one parameter of one case."""
    case: str
    parameter: str
    max_rel_error: float
    coordinates: int
    passed: bool
