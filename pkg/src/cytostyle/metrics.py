"""Instance-segmentation scoring: SEG, DET, and their mean OP.

Matching follows the strict majority rule: a ground-truth object R matches
a predicted region S iff |R intersect S| > 0.5 * |R|. At most one S can
satisfy this for a given R (pigeonhole), which the implementation asserts
rather than assumes. A predicted region may majority-cover several GT
objects; each match beyond the first counts as one split event.

SEG is the mean Jaccard index over GT objects (unmatched ones score 0), so
spurious predictions are not penalized by SEG, only by DET. DET is derived
from weighted counts of missed, spurious, and split detections, normalized
against the cost of building the ground truth from scratch; scores are
clamped to [0, 1]. OP is the arithmetic mean of SEG and DET and is the
headline number, since it is sensitive to both failure modes.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, NoCellsError
from .imaging import InstanceMask, load_mask

__all__ = [
    "Matching",
    "PenaltyWeights",
    "FrameScore",
    "MetricReport",
    "match_objects",
    "seg_score",
    "det_score",
    "op_csb",
    "evaluate_dataset",
]

_MASK_SUFFIXES = (".png", ".tif", ".tiff")


@dataclass
class Matching:
    """Majority-rule matching between GT and predicted instances."""

    pairs: list[tuple[int, int]]
    unmatched_gt: list[int]
    unmatched_pred: list[int]
    split_events: int


@dataclass(frozen=True)
class PenaltyWeights:
    """Event costs for the detection score (split, missed, spurious)."""

    w_split: float = 5.0
    w_fn: float = 10.0
    w_fp: float = 1.0

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.w_split, self.w_fn, self.w_fp)


def _overlap_counts(gt: InstanceMask, pred: InstanceMask):
    """Pixel counts for every co-occurring (gt_label, pred_label) pair."""
    g = gt.labels.ravel().astype(np.int64)
    p = pred.labels.ravel().astype(np.int64)
    combined = g * (int(p.max()) + 1) + p
    values, counts = np.unique(combined, return_counts=True)
    gt_of = values // (int(p.max()) + 1)
    pred_of = values % (int(p.max()) + 1)
    return gt_of, pred_of, counts


def match_objects(gt: InstanceMask, pred: InstanceMask) -> Matching:
    """Match each GT object to the prediction covering a strict majority of it."""
    if gt.shape != pred.shape:
        raise ValueError(f"mask shape mismatch: {gt.shape} vs {pred.shape}")
    gt_labels = gt.labels_present()
    pred_labels = pred.labels_present()
    gt_areas = np.bincount(gt.labels.ravel())

    gt_of, pred_of, counts = _overlap_counts(gt, pred)
    pairs: list[tuple[int, int]] = []
    matched_gt: set[int] = set()
    match_counts: dict[int, int] = {}
    for g, p, n in zip(gt_of, pred_of, counts):
        if g == 0 or p == 0:
            continue
        # Strict majority in integer arithmetic: no float edge cases.
        if 2 * n > gt_areas[g]:
            assert g not in matched_gt, "majority rule admits at most one match per GT object"
            matched_gt.add(int(g))
            pairs.append((int(g), int(p)))
            match_counts[int(p)] = match_counts.get(int(p), 0) + 1
    pairs.sort()
    split_events = sum(m - 1 for m in match_counts.values() if m > 1)
    unmatched_gt = [int(g) for g in gt_labels if int(g) not in matched_gt]
    unmatched_pred = [int(p) for p in pred_labels if int(p) not in match_counts]
    return Matching(
        pairs=pairs,
        unmatched_gt=unmatched_gt,
        unmatched_pred=unmatched_pred,
        split_events=split_events,
    )


def seg_score(gt: InstanceMask, pred: InstanceMask) -> float:
    """Mean Jaccard over GT objects; unmatched objects contribute 0."""
    gt_labels = gt.labels_present()
    if gt_labels.size == 0:
        raise NoCellsError("no GT instances: SEG undefined")
    matching = match_objects(gt, pred)
    gt_areas = np.bincount(gt.labels.ravel())
    pred_areas = np.bincount(pred.labels.ravel())
    overlap = {}
    gt_of, pred_of, counts = _overlap_counts(gt, pred)
    for g, p, n in zip(gt_of, pred_of, counts):
        overlap[(int(g), int(p))] = int(n)
    total = 0.0
    for g, p in matching.pairs:
        inter = overlap[(g, p)]
        union = int(gt_areas[g]) + int(pred_areas[p]) - inter
        total += inter / union
    return total / gt_labels.size


def det_score(
    gt: InstanceMask, pred: InstanceMask, weights: PenaltyWeights = PenaltyWeights()
) -> float:
    """Detection accuracy from penalized event counts, clamped to [0, 1]."""
    gt_labels = gt.labels_present()
    if gt_labels.size == 0:
        raise NoCellsError("no GT instances: DET undefined")
    matching = match_objects(gt, pred)
    cost = (
        weights.w_fn * len(matching.unmatched_gt)
        + weights.w_fp * len(matching.unmatched_pred)
        + weights.w_split * matching.split_events
    )
    cost_from_scratch = weights.w_fn * gt_labels.size
    return 1.0 - min(cost, cost_from_scratch) / cost_from_scratch


def op_csb(seg: float, det: float) -> float:
    """Arithmetic mean of SEG and DET."""
    for name, value in (("seg", seg), ("det", det)):
        if not 0.0 <= value <= 1.0:
            raise ValueError(f"{name} must lie in [0, 1], got {value}")
    return 0.5 * (seg + det)


@dataclass
class FrameScore:
    frame_id: str
    seg: float
    det: float


@dataclass
class MetricReport:
    """Per-frame scores plus unweighted mean aggregates."""

    per_frame: list[FrameScore]
    seg: float
    det: float
    op: float
    weights: PenaltyWeights
    excluded_frames: list[str] = field(default_factory=list)

    def summary_line(self) -> str:
        return f"SEG={self.seg:.3f} DET={self.det:.3f} OP={self.op:.3f}"

    def to_text(self) -> str:
        lines = [f"penalty weights: w_split={self.weights.w_split} "
                 f"w_fn={self.weights.w_fn} w_fp={self.weights.w_fp}"]
        for fs in self.per_frame:
            lines.append(f"frame {fs.frame_id}: SEG={fs.seg:.4f} DET={fs.det:.4f}")
        if self.excluded_frames:
            lines.append(f"excluded frames ({len(self.excluded_frames)}): "
                         + ", ".join(self.excluded_frames))
        lines.append(f"aggregate: {self.summary_line()}")
        return "\n".join(lines)

    def to_tsv(self) -> str:
        rows = ["frame\tSEG\tDET"]
        for fs in self.per_frame:
            rows.append(f"{fs.frame_id}\t{fs.seg:.6f}\t{fs.det:.6f}")
        rows.append(f"aggregate\t{self.seg:.6f}\t{self.det:.6f}")
        rows.append(f"OP\t{self.op:.6f}\t")
        return "\n".join(rows)


def _mask_files(directory: Path) -> dict[str, Path]:
    return {
        p.stem: p
        for p in sorted(directory.iterdir())
        if p.suffix.lower() in _MASK_SUFFIXES and p.is_file()
    }


def evaluate_dataset(
    gt_dir, pred_dir, weights: PenaltyWeights = PenaltyWeights()
) -> MetricReport:
    """Score every GT frame against the prediction sharing its file stem.

    Frames with no counterpart on the other side are excluded and listed in
    the report. At least one aligned frame is required.
    """
    gt_dir, pred_dir = Path(gt_dir), Path(pred_dir)
    for d in (gt_dir, pred_dir):
        if not d.is_dir():
            raise ConfigError(f"not a directory: {d}")
    gt_files = _mask_files(gt_dir)
    pred_files = _mask_files(pred_dir)
    shared = sorted(gt_files.keys() & pred_files.keys())
    excluded = sorted((gt_files.keys() | pred_files.keys()) - set(shared))
    if not shared:
        raise ConfigError(f"no frame stems shared between {gt_dir} and {pred_dir}")
    per_frame = []
    for stem in shared:
        gt = load_mask(gt_files[stem])
        pred = load_mask(pred_files[stem])
        per_frame.append(
            FrameScore(stem, seg_score(gt, pred), det_score(gt, pred, weights))
        )
    seg = float(np.mean([f.seg for f in per_frame]))
    det = float(np.mean([f.det for f in per_frame]))
    return MetricReport(
        per_frame=per_frame,
        seg=seg,
        det=det,
        op=op_csb(seg, det),
        weights=weights,
        excluded_frames=excluded,
    )
