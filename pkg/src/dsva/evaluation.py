"""Segmentation metrics, least-squares disentanglement probes and checkpoint evaluation."""

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import diffcore as dc
from .adversary import MIN_JSD_SAMPLES, jsd_diagnostic
from .club import club_estimate, infonce_diagnostic
from .decoupler import decouple
from .errors import ContractError, ShapeError
from .model import DSVAModel
from .segcore import dense_from_logits, write_pgm
from .synthdata import Dataset, make_batch
from .types import EvalReport

logger = logging.getLogger(__name__)

PROBE_SPLIT = 0.7


def _binary(mask: np.ndarray) -> np.ndarray:
    return np.asarray(mask) > 0.5


def iou(pred: np.ndarray, target: np.ndarray) -> float:
    """Intersection over union of two binary masks; two empty masks score 1."""
    p, t = _binary(pred), _binary(target)
    if p.shape != t.shape:
        raise ShapeError(f"iou: shapes {p.shape} and {t.shape} differ")
    union = np.logical_or(p, t).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(p, t).sum() / union)


def miou(preds: Sequence[np.ndarray], targets: Sequence[np.ndarray]) -> float:
    """Mean per-scene IoU."""
    if len(preds) == 0 or len(preds) != len(targets):
        raise ContractError(f"miou needs equal non-empty lists, got {len(preds)}/{len(targets)}")
    return float(np.mean([iou(p, t) for p, t in zip(preds, targets)]))


def ciou(preds: Sequence[np.ndarray], targets: Sequence[np.ndarray]) -> float:
    """Cumulative IoU: total intersection over total union."""
    if len(preds) == 0 or len(preds) != len(targets):
        raise ContractError(f"ciou needs equal non-empty lists, got {len(preds)}/{len(targets)}")
    inter = sum(int(np.logical_and(_binary(p), _binary(t)).sum()) for p, t in zip(preds, targets))
    union = sum(int(np.logical_or(_binary(p), _binary(t)).sum()) for p, t in zip(preds, targets))
    return 1.0 if union == 0 else inter / union


def dice_score(pred: np.ndarray, target: np.ndarray) -> float:
    p, t = _binary(pred), _binary(target)
    total = p.sum() + t.sum()
    if total == 0:
        return 1.0
    return float(2.0 * np.logical_and(p, t).sum() / total)


@dataclass
class LinearProbe:
    """Affine least-squares map features -> targets."""
    weights: np.ndarray
    intercept: np.ndarray

    @classmethod
    def fit(cls, features: np.ndarray, targets: np.ndarray) -> "LinearProbe":
        design = np.hstack([features, np.ones((len(features), 1))])
        solution, *_ = np.linalg.lstsq(design, targets, rcond=None)
        return cls(weights=solution[:-1], intercept=solution[-1])

    def predict(self, features: np.ndarray) -> np.ndarray:
        return features @ self.weights + self.intercept

    def r2(self, features: np.ndarray, targets: np.ndarray) -> float:
        """R^2 pooled over output dimensions."""
        residual = np.sum((targets - self.predict(features)) ** 2)
        spread = np.sum((targets - targets.mean(axis=0)) ** 2)
        if spread == 0:
            return 0.0
        return float(1.0 - residual / spread)


def probe_r2(
    features: np.ndarray,
    targets: np.ndarray,
    probe_features: Optional[np.ndarray] = None,
    probe_targets: Optional[np.ndarray] = None,
) -> float:
    """
    Fit a probe and score it on held-out data.

    Without a separate probe set, the first 70% of rows fit the probe and the rest score it.
    """
    if probe_features is None or probe_targets is None:
        cut = int(len(features) * PROBE_SPLIT)
        if cut < 2 or len(features) - cut < 2:
            raise ContractError(f"probe needs at least 4 samples, got {len(features)}")
        probe_features, probe_targets = features[:cut], targets[:cut]
        features, targets = features[cut:], targets[cut:]
    return LinearProbe.fit(probe_features, probe_targets).r2(features, targets)


def eval_threads() -> int:
    """Worker count from DSVA_THREADS (default: CPU count, capped at 8)."""
    raw = os.getenv("DSVA_THREADS")
    if raw:
        try:
            return max(1, int(raw))
        except ValueError:
            logger.warning("ignoring non-integer DSVA_THREADS=%r", raw)
    return min(8, os.cpu_count() or 1)


def _features(model: DSVAModel, dataset: Dataset) -> Tuple[np.ndarray, np.ndarray]:
    x = np.stack([s.x_fused for s in dataset.states]).astype(np.float64)
    with dc.no_grad():
        state = decouple(x, model.decoupler)
    return state.h_text.data, state.h_vision.data


def _factors(dataset: Dataset) -> Tuple[np.ndarray, np.ndarray]:
    e_text = np.stack([s.e_text for s in dataset.states]).astype(np.float64)
    e_vis = np.stack([s.e_vis for s in dataset.states]).astype(np.float64)
    return e_text, e_vis


def evaluate(
    model: DSVAModel,
    dataset: Dataset,
    iterations: int = 1,
    hard: bool = False,
    text_only: bool = False,
    probe_dataset: Optional[Dataset] = None,
    dump_dir: Optional[Union[str, Path]] = None,
    batch_size: int = 50,
) -> EvalReport:
    """
    Score a model on a dataset.

    Args:
        model: Model with loaded parameters
        dataset: Evaluation scenes
        iterations: Self-feedback rounds T
        hard: Threshold fed-back masks at 0.5
        text_only: Evaluate the real-label text path only (no decoupling stage yet)
        probe_dataset: Scenes to fit the probes on (default: 70/30 split of dataset)
        dump_dir: Write text/visual/fused PGM masks per scene here
        batch_size: Scenes per forward pass

    Returns:
        EvalReport

    Raises:
        ContractError: If the dataset is empty
    """
    if len(dataset) == 0:
        raise ContractError("cannot evaluate on an empty dataset")
    chunks = [
        list(range(start, min(start + batch_size, len(dataset))))
        for start in range(0, len(dataset), batch_size)
    ]

    def run_chunk(indices: List[int]) -> Dict[str, np.ndarray]:
        # grad mode is per thread
        with dc.no_grad():
            batch = make_batch(dataset, indices)
            if text_only:
                pred = model.predict_text_only(batch, iterations, hard)
            else:
                pred = model.predict(batch, iterations, hard)
        out = {
            "text": pred.text.probabilities(),
            "fused": dense_from_logits(pred.fused),
        }
        if pred.visual is not None:
            out["visual"] = pred.visual.probabilities()
        return out

    with ThreadPoolExecutor(max_workers=eval_threads()) as pool:
        results = list(pool.map(run_chunk, chunks))

    gt = [scene.gt_mask for scene in dataset.scenes]
    branches = {key: np.concatenate([r[key] for r in results]) for key in results[0]}
    fused = list(branches["fused"])
    report = EvalReport(
        mode="text_only" if text_only else "decoupled",
        scenes=len(dataset),
        iterations=iterations,
        miou=miou(fused, gt),
        ciou=ciou(fused, gt),
        dice=float(np.mean([dice_score(p, t) for p, t in zip(fused, gt)])),
        text_miou=miou(list(branches["text"]), gt),
    )

    if not text_only:
        report["visual_miou"] = miou(list(branches["visual"]), gt)
        report["fused_miou"] = report["miou"]
        report.update(_disentanglement(model, dataset, probe_dataset))

    if dump_dir is not None:
        _dump_masks(Path(dump_dir), branches)
    logger.info(
        "eval %s T=%d scenes=%d mIoU=%.4f cIoU=%.4f",
        report["mode"], iterations, len(dataset), report["miou"], report["ciou"],
    )
    return report


def _disentanglement(
    model: DSVAModel, dataset: Dataset, probe_dataset: Optional[Dataset]
) -> Dict[str, Optional[float]]:
    h_text, h_vision = _features(model, dataset)
    e_text, e_vis = _factors(dataset)
    if probe_dataset is not None and len(probe_dataset) > 0:
        ph_text, ph_vision = _features(model, probe_dataset)
        pe_text, pe_vis = _factors(probe_dataset)
    else:
        ph_text = ph_vision = pe_text = pe_vis = None

    metrics: Dict[str, Optional[float]] = dict.fromkeys(
        ["probe_text_to_text", "probe_text_to_vis", "probe_vis_to_vis", "probe_vis_to_text",
         "club", "infonce", "jsd", "jsd_text_disc"]
    )
    if ph_text is not None or len(dataset) >= 4:
        metrics["probe_text_to_text"] = probe_r2(h_text, e_text, ph_text, pe_text)
        metrics["probe_text_to_vis"] = probe_r2(h_text, e_vis, ph_text, pe_vis)
        metrics["probe_vis_to_vis"] = probe_r2(h_vision, e_vis, ph_vision, pe_vis)
        metrics["probe_vis_to_text"] = probe_r2(h_vision, e_text, ph_vision, pe_text)
    if len(dataset) >= 2:
        with dc.no_grad():
            metrics["club"] = club_estimate(model.q, dc.Tensor(h_text), dc.Tensor(h_vision)).item()
        metrics["infonce"] = infonce_diagnostic(model.q, h_text, h_vision)
    if len(dataset) >= MIN_JSD_SAMPLES:
        # projected on the logits the trained discriminators actually use
        metrics["jsd"] = jsd_diagnostic(h_text, h_vision, discriminator=model.disc_vision).value
        metrics["jsd_text_disc"] = jsd_diagnostic(
            h_text, h_vision, discriminator=model.disc_text
        ).value
    return metrics


def _dump_masks(directory: Path, branches: Dict[str, np.ndarray]) -> None:
    for name, maps in branches.items():
        for index, probs in enumerate(maps):
            write_pgm(directory / f"scene{index:05d}_{name}.pgm", probs)
    logger.info("wrote %d mask maps to %s", sum(len(m) for m in branches.values()), directory)
