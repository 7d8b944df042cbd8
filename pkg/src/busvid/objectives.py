"""Training objective and evaluation metrics.

The alignment loss is the squared difference of the two branches' scalar
feature means (a linear-kernel discrepancy), batch-averaged. Classification
uses the binary focal loss on a single sigmoid logit. Evaluation reports AUC
(trapezoidal ROC with tie handling, equal to the rank formulation), accuracy,
sensitivity and specificity from thresholded confusion counts, with
stratified k-fold splitting for cross-validation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ParameterError, ShapeError, UndefinedMetricError

DEFAULT_MMD_WEIGHT = 0.83
DEFAULT_FOCAL_ALPHA = 0.2
DEFAULT_FOCAL_GAMMA = 4.0


@dataclass(frozen=True)
class LossConfig:
    mmd_weight: float = DEFAULT_MMD_WEIGHT
    focal_alpha: float = DEFAULT_FOCAL_ALPHA
    focal_gamma: float = DEFAULT_FOCAL_GAMMA

    def __post_init__(self):
        if self.mmd_weight < 0:
            raise ParameterError("mmd_weight must be >= 0")
        if not 0.0 < self.focal_alpha <= 1.0:
            raise ParameterError("focal_alpha must be in (0, 1]")
        if self.focal_gamma < 0:
            raise ParameterError("focal_gamma must be >= 0")


def mmd_loss(z_tic: torch.Tensor, z_bus: torch.Tensor) -> torch.Tensor:
    """Squared difference of per-sample feature means, averaged over the batch."""
    if z_tic.dim() == 1:
        z_tic = z_tic.unsqueeze(0)
    if z_bus.dim() == 1:
        z_bus = z_bus.unsqueeze(0)
    if z_tic.shape != z_bus.shape:
        raise ShapeError(
            f"feature shapes differ: {tuple(z_tic.shape)} vs {tuple(z_bus.shape)}")
    return (z_tic.mean(dim=1) - z_bus.mean(dim=1)).pow(2).mean()


def focal_loss(logits: torch.Tensor, labels: torch.Tensor,
               alpha: float = DEFAULT_FOCAL_ALPHA,
               gamma: float = DEFAULT_FOCAL_GAMMA) -> torch.Tensor:
    """Binary focal loss on sigmoid logits, numerically stable.

    With p_t the probability of the true class: -alpha_t (1 - p_t)^gamma
    log(p_t), where alpha weights the positive class. Mean over the batch.
    """
    logits = logits.reshape(-1)
    labels = labels.reshape(-1).to(logits.dtype)
    if logits.shape != labels.shape:
        raise ShapeError("logits and labels must have equal lengths")
    # sign-folded logit: s = logit for label 1, -logit for label 0
    s = torch.where(labels > 0.5, logits, -logits)
    log_pt = -F.softplus(-s)
    one_minus_pt = torch.sigmoid(-s)
    alpha_t = torch.where(labels > 0.5,
                          torch.full_like(logits, alpha),
                          torch.full_like(logits, 1.0 - alpha))
    return (-alpha_t * one_minus_pt.pow(gamma) * log_pt).mean()


def total_loss(mmd: torch.Tensor, focal: torch.Tensor,
               mmd_weight: float = DEFAULT_MMD_WEIGHT) -> torch.Tensor:
    return mmd_weight * mmd + focal


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def roc_points(scores, labels):
    """Empirical ROC points from (1,1) down to (0,0), grouping tied scores."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    y = labels[order]
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs both classes present")
    points = [(0.0, 0.0)]
    tp = fp = 0
    i = 0
    while i < len(s):
        j = i
        while j < len(s) and s[j] == s[i]:
            tp += int(y[j] == 1)
            fp += int(y[j] == 0)
            j += 1
        points.append((fp / n_neg, tp / n_pos))
        i = j
    return points


def roc_auc(scores, labels) -> float:
    """Trapezoidal area under the empirical ROC; ties contribute diagonal
    segments, which makes this equal to the pairwise-ranking value."""
    points = roc_points(scores, labels)
    auc = 0.0
    for (x0, y0), (x1, y1) in zip(points[:-1], points[1:]):
        auc += (x1 - x0) * (y1 + y0) / 2.0
    return float(auc)


@dataclass
class MetricsReport:
    auc: float | None
    acc: float | None
    sens: float | None
    spec: float | None
    tp: int
    tn: int
    fp: int
    fn: int
    threshold: float = 0.5

    def as_dict(self) -> dict:
        return {"auc": self.auc, "acc": self.acc, "sens": self.sens,
                "spec": self.spec, "tp": self.tp, "tn": self.tn,
                "fp": self.fp, "fn": self.fn, "threshold": self.threshold}


def compute_metrics(scores, labels, threshold: float = 0.5) -> MetricsReport:
    """Confusion metrics at a threshold plus AUC (None on one-class input).

    A sample is predicted positive when its score is >= the threshold.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1 or scores.size == 0:
        raise ShapeError("scores and labels must be equal-length 1-D sequences")
    if not np.isin(labels, (0, 1)).all():
        raise ParameterError("labels must be 0 or 1")
    pred = scores >= threshold
    tp = int((pred & (labels == 1)).sum())
    tn = int((~pred & (labels == 0)).sum())
    fp = int((pred & (labels == 0)).sum())
    fn = int((~pred & (labels == 1)).sum())
    try:
        auc = roc_auc(scores, labels)
    except UndefinedMetricError:
        auc = None
    acc = (tp + tn) / labels.size
    sens = tp / (tp + fn) if tp + fn else None
    spec = tn / (tn + fp) if tn + fp else None
    return MetricsReport(auc=auc, acc=acc, sens=sens, spec=spec,
                         tp=tp, tn=tn, fp=fp, fn=fn, threshold=threshold)


@dataclass
class CvReport:
    folds: list
    mean_auc: float | None
    mean_acc: float | None
    mean_sens: float | None
    mean_spec: float | None

    def as_dict(self) -> dict:
        return {"folds": [f.as_dict() for f in self.folds],
                "mean_auc": self.mean_auc, "mean_acc": self.mean_acc,
                "mean_sens": self.mean_sens, "mean_spec": self.mean_spec}


def aggregate_folds(folds) -> CvReport:
    def mean_of(attr):
        vals = [getattr(f, attr) for f in folds]
        if any(v is None for v in vals) or not vals:
            return None
        return float(np.mean(vals))

    return CvReport(folds=list(folds), mean_auc=mean_of("auc"),
                    mean_acc=mean_of("acc"), mean_sens=mean_of("sens"),
                    mean_spec=mean_of("spec"))


def kfold_split(case_ids, labels, k: int = 5, seed: int = 0) -> list:
    """Stratified k folds: disjoint, covering, sizes differing by at most one.

    Deterministic for a seed and invariant to the order of the input pairs.
    """
    if len(case_ids) != len(labels):
        raise ShapeError("case_ids and labels must have equal lengths")
    if len(case_ids) < k:
        raise ParameterError(f"need at least {k} cases, got {len(case_ids)}")
    if k < 2:
        raise ParameterError("k must be >= 2")
    pairs = sorted(zip(case_ids, labels), key=lambda p: str(p[0]))
    rng = np.random.default_rng(seed)
    folds = [[] for _ in range(k)]
    cursor = 0
    for cls in sorted({lab for _, lab in pairs}):
        members = [cid for cid, lab in pairs if lab == cls]
        order = rng.permutation(len(members))
        for idx in order:
            folds[cursor % k].append(members[idx])
            cursor += 1
    return folds
