"""Evaluation metrics: hard Dice, vertical cup-to-disc ratio, ROC/AUC,
sensitivity/specificity, the Youden-optimal operating point, and the
aggregated per-dataset report.
"""

import json
from dataclasses import dataclass, field, asdict

import numpy as np

from .errors import EmptyDisc, IdMismatch, ShapeMismatch, SingleClass


def hard_dice(a, b):
    """Set-overlap Dice 2|A∩B|/(|A|+|B|) of two binary masks.

    Two empty masks score 1 (a correct empty prediction is perfect).
    """
    a = np.asarray(a).astype(bool)
    b = np.asarray(b).astype(bool)
    if a.shape != b.shape:
        raise ShapeMismatch(f"shapes differ: {a.shape} vs {b.shape}")
    denom = a.sum() + b.sum()
    if denom == 0:
        return 1.0
    return 2.0 * np.logical_and(a, b).sum() / denom


def _vertical_extent(mask):
    rows = np.flatnonzero(np.asarray(mask).astype(bool).any(axis=1))
    if rows.size == 0:
        return 0
    return int(rows[-1] - rows[0] + 1)


def vertical_cdr(od_mask, oc_mask):
    """Vertical extent of the cup divided by that of the disc.

    Extents use the inclusive row span (a one-row structure has extent 1).
    An empty cup gives 0; an empty disc is an error.
    """
    disc_h = _vertical_extent(od_mask)
    if disc_h == 0:
        raise EmptyDisc("disc mask has no foreground pixels")
    return _vertical_extent(oc_mask) / disc_h


def _check_two_classes(labels):
    labels = np.asarray(labels).astype(int)
    if labels.size == 0 or labels.min() == labels.max():
        raise SingleClass("need at least one positive and one negative label")
    return labels


@dataclass
class RocCurve:
    """ROC swept over all distinct score thresholds, from (0,0) to (1,1)."""

    thresholds: list
    fpr: list
    tpr: list
    auc: float


def roc_auc(scores, labels):
    """ROC curve and trapezoidal AUC with the >= prediction rule.

    Ties in the scores collapse into single curve points, so the
    trapezoidal area equals the tie-adjusted Mann-Whitney statistic.
    """
    scores = np.asarray(scores, dtype=float)
    labels = _check_two_classes(labels)
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())

    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    y = labels[order]
    # indices where a run of tied scores ends
    distinct = np.flatnonzero(np.diff(s) != 0)
    last = np.concatenate([distinct, [s.size - 1]])
    tp = np.cumsum(y == 1)[last]
    fp = np.cumsum(y == 0)[last]

    thresholds = np.concatenate([[np.inf], s[last]])
    tpr = np.concatenate([[0.0], tp / n_pos])
    fpr = np.concatenate([[0.0], fp / n_neg])
    auc = float(np.trapezoid(tpr, fpr))
    return RocCurve(thresholds.tolist(), fpr.tolist(), tpr.tolist(), auc)


def mann_whitney_auc(scores, labels):
    """Rank-based AUC: P(score+ > score-) with ties counted one half."""
    scores = np.asarray(scores, dtype=float)
    labels = _check_two_classes(labels)
    order = np.argsort(scores, kind="stable")
    s = scores[order]
    # midranks, 1-based
    ranks = np.empty(s.size, dtype=float)
    i = 0
    while i < s.size:
        j = i
        while j + 1 < s.size and s[j + 1] == s[i]:
            j += 1
        ranks[i : j + 1] = 0.5 * (i + j) + 1.0
        i = j + 1
    rank_by_sample = np.empty(s.size, dtype=float)
    rank_by_sample[order] = ranks
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    r_pos = rank_by_sample[labels == 1].sum()
    u = r_pos - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def sens_spec(scores, labels, cutoff):
    """Sensitivity and specificity when predicting positive at score >= cutoff."""
    scores = np.asarray(scores, dtype=float)
    labels = _check_two_classes(labels)
    pred = scores >= cutoff
    pos = labels == 1
    sensitivity = float(np.logical_and(pred, pos).sum() / pos.sum())
    specificity = float(np.logical_and(~pred, ~pos).sum() / (~pos).sum())
    return sensitivity, specificity


def youden_cutoff(scores, labels):
    """Cutoff maximizing sensitivity + specificity - 1.

    Candidates are the midpoints between consecutive distinct scores plus
    the two all-positive / all-negative extremes; the equal-score interval
    is represented by its midpoint and ties break toward the larger cutoff.
    """
    scores = np.asarray(scores, dtype=float)
    labels = _check_two_classes(labels)
    distinct = np.unique(scores)
    candidates = [float(distinct[0])]  # everything predicted positive
    candidates.extend(0.5 * (distinct[:-1] + distinct[1:]))
    candidates.append(float(distinct[-1] + 1.0))  # everything negative

    best_j = -np.inf
    best_cut = candidates[0]
    for cut in candidates:
        sens, spec = sens_spec(scores, labels, cut)
        j = sens + spec - 1.0
        if j > best_j or (j == best_j and cut > best_cut):
            best_j = j
            best_cut = float(cut)
    return best_cut


@dataclass
class SegScores:
    """Per-image segmentation scores plus mean / population-std aggregates."""

    ids: list
    dice_od: list
    dice_oc: list
    cdr_pred: list
    cdr_gt: list
    cdr_error: list
    summary: dict = field(default_factory=dict)

    def aggregate(self):
        self.summary = {}
        for name in ("dice_od", "dice_oc", "cdr_pred", "cdr_gt", "cdr_error"):
            vals = np.asarray(getattr(self, name), dtype=float)
            self.summary[name] = {
                "mean": float(vals.mean()) if vals.size else float("nan"),
                "std": float(vals.std()) if vals.size else float("nan"),
            }
        return self


@dataclass
class EvalReport:
    """Everything reported for one evaluation run."""

    seg: SegScores
    roc: RocCurve
    sensitivity: float
    specificity: float
    cutoff: float
    metadata: dict = field(default_factory=dict)
    seg_source: SegScores = None  # full-resolution scores when ROI mapping applies
    warnings: list = field(default_factory=list)

    def to_dict(self):
        return asdict(self)

    def to_json(self, indent=2):
        return json.dumps(self.to_dict(), indent=indent, sort_keys=True)

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_json())

    @classmethod
    def from_dict(cls, d):
        seg = SegScores(**d["seg"])
        seg_source = SegScores(**d["seg_source"]) if d.get("seg_source") else None
        roc = RocCurve(**d["roc"])
        return cls(
            seg=seg,
            roc=roc,
            sensitivity=d["sensitivity"],
            specificity=d["specificity"],
            cutoff=d["cutoff"],
            metadata=d.get("metadata", {}),
            seg_source=seg_source,
            warnings=d.get("warnings", []),
        )

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def _safe_cdr(od_mask, oc_mask, warnings, sample_id):
    try:
        return vertical_cdr(od_mask, oc_mask)
    except EmptyDisc:
        warnings.append(f"{sample_id}: empty disc prediction, cdr set to 0")
        return 0.0


def segmentation_scores(pred_masks, gt_samples, warnings=None):
    """SegScores of predicted (od, oc) mask pairs against ground truth."""
    warnings = [] if warnings is None else warnings
    scores = SegScores([], [], [], [], [], [])
    for sample in gt_samples:
        od_p, oc_p = pred_masks[sample.id]
        scores.ids.append(sample.id)
        scores.dice_od.append(hard_dice(od_p, sample.od_mask))
        scores.dice_oc.append(hard_dice(oc_p, sample.oc_mask))
        cdr_p = _safe_cdr(od_p, oc_p, warnings, sample.id)
        cdr_g = vertical_cdr(sample.od_mask, sample.oc_mask)
        scores.cdr_pred.append(cdr_p)
        scores.cdr_gt.append(cdr_g)
        scores.cdr_error.append(abs(cdr_p - cdr_g))
    return scores.aggregate()


def evaluate_dataset(pred_masks, pred_scores, gt_samples, cutoff=None, metadata=None):
    """Aggregate Dice/CDR scores, the ROC, and the operating point.

    ``pred_masks`` maps id -> (od, oc) binary masks; ``pred_scores`` maps
    id -> glaucoma probability; ``gt_samples`` carry masks and labels.
    The cutoff defaults to the Youden optimum of the supplied scores.
    """
    gt_ids = sorted(s.id for s in gt_samples)
    if sorted(pred_masks) != gt_ids or sorted(pred_scores) != gt_ids:
        raise IdMismatch("prediction ids do not match ground-truth ids")

    warnings = []
    seg = segmentation_scores(pred_masks, gt_samples, warnings)

    ordered = sorted(gt_samples, key=lambda s: s.id)
    scores = np.array([pred_scores[s.id] for s in ordered], dtype=float)
    labels = np.array([s.label for s in ordered], dtype=int)
    roc = roc_auc(scores, labels)
    if cutoff is None:
        cutoff = youden_cutoff(scores, labels)
    sens, spec = sens_spec(scores, labels, cutoff)

    return EvalReport(
        seg=seg,
        roc=roc,
        sensitivity=sens,
        specificity=spec,
        cutoff=float(cutoff),
        metadata=metadata or {},
        warnings=warnings,
    )
