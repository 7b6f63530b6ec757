"""
Pose evaluation protocols: MPJPE, Procrustes-aligned P-MPJPE, PCK/AUC and MPJVE.

All inputs are T x N x 3 arrays in millimetres. Alignment always maps the
prediction onto the ground truth, never the reverse.
"""

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np

from .exceptions import ConfigurationError, ShapeMismatchError

logger = logging.getLogger(__name__)

PCK_THRESHOLD = 150.0
AUC_SWEEP = tuple(float(t) for t in np.arange(0.0, 151.0, 5.0))
DEGENERATE_RTOL = 1e-10


def _pair(pred, gt) -> Tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.ndim != 3 or pred.shape[-1] != 3:
        raise ShapeMismatchError("metric: prediction and ground truth must both be T x N x 3", pred.shape, gt.shape)
    return pred, gt


def joint_errors(pred, gt) -> np.ndarray:
    """Euclidean distance per frame and joint, T x N."""
    pred, gt = _pair(pred, gt)
    return np.linalg.norm(pred - gt, axis=-1)


def mpjpe(pred, gt) -> float:
    return float(np.mean(joint_errors(pred, gt)))


class Alignment(NamedTuple):
    aligned: np.ndarray
    rotation: np.ndarray
    scale: float
    translation: np.ndarray
    degenerate: bool


def similarity_transform(pred_frame, gt_frame, allow_reflection: bool = False) -> Alignment:
    """
    Least-squares similarity transform taking `pred_frame` onto `gt_frame`
    (Kabsch-Umeyama).

    With fewer than three points, or when either point set is collinear, only
    the translation is fitted and the result is flagged as degenerate.
    """
    pred_frame = np.asarray(pred_frame, dtype=np.float64)
    gt_frame = np.asarray(gt_frame, dtype=np.float64)
    if pred_frame.shape != gt_frame.shape or pred_frame.ndim != 2 or pred_frame.shape[1] != 3:
        raise ShapeMismatchError("procrustes: expected two N x 3 point sets", pred_frame.shape, gt_frame.shape)
    count = pred_frame.shape[0]
    mu_pred = pred_frame.mean(axis=0)
    mu_gt = gt_frame.mean(axis=0)
    centered_pred = pred_frame - mu_pred
    centered_gt = gt_frame - mu_gt

    degenerate = count < 3
    if not degenerate:
        for centered in (centered_pred, centered_gt):
            spread = np.linalg.svd(centered, compute_uv=False)
            if spread[0] == 0.0 or spread[1] <= DEGENERATE_RTOL * spread[0]:
                degenerate = True
    if degenerate:
        translation = mu_gt - mu_pred
        return Alignment(pred_frame + translation, np.eye(3), 1.0, translation, True)

    covariance = centered_gt.T @ centered_pred / count
    u, singular, vt = np.linalg.svd(covariance)
    signs = np.ones(3)
    if not allow_reflection and np.linalg.det(u) * np.linalg.det(vt) < 0:
        signs[-1] = -1.0
    rotation = u @ np.diag(signs) @ vt
    variance = np.mean(np.sum(centered_pred ** 2, axis=1))
    scale = float(np.sum(singular * signs) / variance)
    translation = mu_gt - scale * rotation @ mu_pred
    aligned = scale * centered_pred @ rotation.T + mu_gt
    return Alignment(aligned, rotation, scale, translation, False)


def procrustes_align(pred_frame, gt_frame, allow_reflection: bool = False) -> np.ndarray:
    return similarity_transform(pred_frame, gt_frame, allow_reflection).aligned


def align_sequence(pred, gt, allow_reflection: bool = False) -> Tuple[np.ndarray, int]:
    """Per-frame alignment; returns the aligned sequence and the number of degenerate frames."""
    pred, gt = _pair(pred, gt)
    aligned = np.empty_like(pred)
    degenerate = 0
    for t in range(pred.shape[0]):
        result = similarity_transform(pred[t], gt[t], allow_reflection)
        aligned[t] = result.aligned
        degenerate += result.degenerate
    if degenerate:
        logger.warning("translation-only alignment used", extra={'degenerate_frames': degenerate})
    return aligned, degenerate


def p_mpjpe(pred, gt, allow_reflection: bool = False) -> float:
    aligned, _ = align_sequence(pred, gt, allow_reflection)
    return mpjpe(aligned, gt)


def pck_auc(pred, gt, threshold: float = PCK_THRESHOLD,
            sweep: Optional[Sequence[float]] = AUC_SWEEP) -> Tuple[float, float]:
    """
    Percentage of joints within `threshold` mm, and the mean of that percentage
    over the threshold sweep. A joint exactly at the threshold counts as correct.
    """
    if threshold <= 0:
        raise ConfigurationError(f"PCK threshold must be positive, got {threshold}")
    if sweep is None or len(sweep) == 0:
        raise ConfigurationError("AUC threshold sweep must not be empty")
    errors = joint_errors(pred, gt)
    pck = 100.0 * float(np.mean(errors <= threshold))
    auc = float(np.mean([100.0 * np.mean(errors <= t) for t in sweep]))
    return pck, auc


def mpjve_metric(pred, gt) -> float:
    """Mean norm of the per-frame velocity difference, mm/frame."""
    pred, gt = _pair(pred, gt)
    if pred.shape[0] < 2:
        raise ConfigurationError("velocity error needs at least two frames")
    return float(np.mean(np.linalg.norm(np.diff(pred, axis=0) - np.diff(gt, axis=0), axis=-1)))


@dataclass
class MetricReport:
    mpjpe: float
    p_mpjpe: float
    mpjve: Optional[float]
    pck: float
    auc: float
    per_joint: np.ndarray
    per_frame: np.ndarray
    degenerate_frames: int = 0
    threshold: float = PCK_THRESHOLD

    def to_rows(self) -> List[Tuple[str, float]]:
        rows = [('mpjpe', self.mpjpe), ('p_mpjpe', self.p_mpjpe)]
        if self.mpjve is not None:
            rows.append(('mpjve', self.mpjve))
        rows += [('pck', self.pck), ('auc', self.auc), ('pck_threshold', self.threshold),
                 ('degenerate_frames', float(self.degenerate_frames))]
        return rows


def evaluate(pred, gt, threshold: float = PCK_THRESHOLD, sweep: Sequence[float] = AUC_SWEEP,
             allow_reflection: bool = False) -> MetricReport:
    errors = joint_errors(pred, gt)
    aligned, degenerate = align_sequence(pred, gt, allow_reflection)
    pck, auc = pck_auc(pred, gt, threshold, sweep)
    return MetricReport(
        mpjpe=float(errors.mean()),
        p_mpjpe=mpjpe(aligned, gt),
        mpjve=mpjve_metric(pred, gt) if errors.shape[0] >= 2 else None,
        pck=pck, auc=auc,
        per_joint=errors.mean(axis=0),
        per_frame=errors.mean(axis=1),
        degenerate_frames=degenerate,
        threshold=threshold,
    )


@dataclass
class SequenceEvaluation:
    overall: MetricReport
    per_clip: Dict[str, MetricReport] = field(default_factory=dict)


def evaluate_sequences(pairs: Iterable[Tuple[str, np.ndarray, np.ndarray]],
                       threshold: float = PCK_THRESHOLD, sweep: Sequence[float] = AUC_SWEEP,
                       allow_reflection: bool = False) -> SequenceEvaluation:
    """
    Evaluate (name, pred, gt) clips and pool them.

    Pooled position metrics weight every clip by its frame count; the
    velocity error weights by frame transitions.
    """
    per_clip: Dict[str, MetricReport] = {}
    for name, pred, gt in pairs:
        per_clip[name] = evaluate(pred, gt, threshold, sweep, allow_reflection)
    if not per_clip:
        raise ConfigurationError("no clips to evaluate")
    reports = list(per_clip.values())
    frames = np.array([len(r.per_frame) for r in reports], dtype=np.float64)

    def pooled(attr: str) -> float:
        return float(np.average([getattr(r, attr) for r in reports], weights=frames))

    velocity = [(r.mpjve, n - 1) for r, n in zip(reports, frames) if r.mpjve is not None]
    overall = MetricReport(
        mpjpe=pooled('mpjpe'), p_mpjpe=pooled('p_mpjpe'),
        mpjve=float(np.average([v for v, _ in velocity], weights=[w for _, w in velocity])) if velocity else None,
        pck=pooled('pck'), auc=pooled('auc'),
        per_joint=np.average(np.stack([r.per_joint for r in reports]), axis=0, weights=frames),
        per_frame=np.concatenate([r.per_frame for r in reports]),
        degenerate_frames=sum(r.degenerate_frames for r in reports),
        threshold=threshold,
    )
    return SequenceEvaluation(overall, per_clip)


def write_metric_csv(report: MetricReport, path: Union[str, Path]) -> None:
    with open(path, 'w', newline='') as handle:
        writer = csv.writer(handle, lineterminator='\n')
        writer.writerow(['metric', 'value'])
        for metric, value in report.to_rows():
            writer.writerow([metric, repr(float(value))])


def write_per_joint_csv(report: MetricReport, path: Union[str, Path],
                        joint_names: Optional[Sequence[str]] = None) -> None:
    with open(path, 'w', newline='') as handle:
        writer = csv.writer(handle, lineterminator='\n')
        writer.writerow(['joint', 'name', 'mpjpe'])
        for index, value in enumerate(report.per_joint):
            name = joint_names[index] if joint_names else f'joint_{index}'
            writer.writerow([index, name, repr(float(value))])
