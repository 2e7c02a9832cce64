"""Detection and proposal metrics: AP/mAP at tIoU thresholds, average
recall at a proposal budget.

Matching is one-to-one and greedy by descending score with each ground
truth usable once; AP integrates the precision envelope over exact recall
steps.  Classes without any ground truth are excluded from mAP averaging.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .anchorkit import Segment, tiou
from .errors import ConfigError, ContractError

DETECTION_DISPLAY_THRESHOLDS = (0.5, 0.75, 0.95)
THUMOS_THRESHOLDS = (0.1, 0.2, 0.3, 0.4, 0.5)


def average_map_grid() -> tuple:
    """tIoU thresholds 0.5:0.05:0.95 used for the averaged mAP and AR."""
    return tuple(round(0.5 + 0.05 * i, 2) for i in range(10))


@dataclass(frozen=True)
class EvalConfig:
    tiou_thresholds: tuple = DETECTION_DISPLAY_THRESHOLDS
    average_grid: tuple = field(default_factory=average_map_grid)
    proposal_budget: int = 100
    ar_tiou_grid: tuple = field(default_factory=average_map_grid)

    def __post_init__(self):
        for grid in (self.tiou_thresholds, self.average_grid, self.ar_tiou_grid):
            if any(not 0.0 < t <= 1.0 for t in grid):
                raise ConfigError(f"tIoU thresholds must lie in (0, 1], got {grid}")
            if any(b <= a for a, b in zip(grid, grid[1:])):
                raise ConfigError(f"tIoU thresholds must be strictly increasing, got {grid}")
        if self.proposal_budget < 1:
            raise ConfigError(f"proposal_budget must be positive, got {self.proposal_budget}")


@dataclass
class EvalReport:
    per_class_ap: dict  # label -> {threshold -> ap}
    map_per_threshold: dict  # threshold -> map
    average_map: float
    ar_at_budget: float | None
    counts: dict

    def to_json_dict(self) -> dict:
        return {
            "per_class_ap": {
                str(label): {f"{t:.2f}": ap for t, ap in sorted(by_t.items())}
                for label, by_t in sorted(self.per_class_ap.items())
            },
            "map_per_threshold": {f"{t:.2f}": v for t, v in sorted(self.map_per_threshold.items())},
            "average_map": self.average_map,
            "ar_at_budget": self.ar_at_budget,
            "counts": self.counts,
        }

    def format_table(self, display_thresholds=None) -> str:
        ts = sorted(display_thresholds or self.map_per_threshold)
        head = "metric    " + "".join(f"{t:>8.2f}" for t in ts) + f"{'Average':>10}"
        row = "mAP       " + "".join(f"{self.map_per_threshold.get(t, float('nan')):>8.4f}" for t in ts)
        row += f"{self.average_map:>10.4f}"
        lines = [head, row]
        if self.ar_at_budget is not None:
            lines.append(f"AR@{self.counts.get('proposal_budget', 0):<7d}{self.ar_at_budget:>8.4f}")
        return "\n".join(lines)


def _sorted_dets(dets) -> list:
    # descending score; ties by earlier start, then video id for determinism
    return sorted(dets, key=lambda d: (-d.score, d.segment.start, d.video_id))


def average_precision(dets, gts_by_video: dict, thresh: float) -> float | None:
    """AP of one class.  ``gts_by_video`` maps video id to Segment lists;
    returns None when the class has no ground truth anywhere."""
    npos = sum(len(v) for v in gts_by_video.values())
    if npos == 0:
        return None
    if not dets:
        return 0.0
    used = {vid: np.zeros(len(v), dtype=bool) for vid, v in gts_by_video.items()}
    order = _sorted_dets(dets)
    tp = np.zeros(len(order))
    fp = np.zeros(len(order))
    for i, d in enumerate(order):
        gts = gts_by_video.get(d.video_id, [])
        best_j, best_t = -1, -1.0
        for j, g in enumerate(gts):
            if used[d.video_id][j]:
                continue
            t = tiou(d.segment, g)
            if t >= thresh and t > best_t:
                best_j, best_t = j, t
        if best_j >= 0:
            used[d.video_id][best_j] = True
            tp[i] = 1.0
        else:
            fp[i] = 1.0
    recall = np.cumsum(tp) / npos
    precision = np.cumsum(tp) / (np.cumsum(tp) + np.cumsum(fp))
    # precision-envelope monotonization, then exact step integration
    mprec = np.concatenate([[0.0], precision, [0.0]])
    mrec = np.concatenate([[0.0], recall, [1.0]])
    for i in range(len(mprec) - 2, -1, -1):
        mprec[i] = max(mprec[i], mprec[i + 1])
    steps = np.nonzero(mrec[1:] != mrec[:-1])[0] + 1
    return float(np.sum((mrec[steps] - mrec[steps - 1]) * mprec[steps]))


def evaluate_detections(dets, gts_by_video: dict, cfg: EvalConfig) -> EvalReport:
    """AP per (class, threshold), mAP per threshold, averaged mAP.

    ``gts_by_video`` maps video id to a list of (Segment, label) pairs;
    ``dets`` is a flat detection list (attributes segment/label/score/
    video_id).
    """
    total_gt = sum(len(v) for v in gts_by_video.values())
    if total_gt == 0:
        raise ContractError("evaluate_detections needs at least one ground-truth instance")
    classes = sorted({label for v in gts_by_video.values() for _, label in v})
    thresholds = sorted(set(cfg.tiou_thresholds) | set(cfg.average_grid))
    dets_by_class = {c: [d for d in dets if d.label == c] for c in classes}
    gts_by_class = {
        c: {vid: [seg for seg, label in v if label == c] for vid, v in gts_by_video.items()}
        for c in classes
    }
    per_class = {c: {} for c in classes}
    for c in classes:
        for t in thresholds:
            ap = average_precision(dets_by_class[c], gts_by_class[c], t)
            if ap is not None:
                per_class[c][t] = ap
    map_per_t = {
        t: float(np.mean([per_class[c][t] for c in classes if t in per_class[c]]))
        for t in thresholds
    }
    avg = float(np.mean([map_per_t[t] for t in cfg.average_grid]))
    return EvalReport(
        per_class_ap=per_class,
        map_per_threshold=map_per_t,
        average_map=avg,
        ar_at_budget=None,
        counts={
            "ground_truth": total_gt,
            "detections": len(list(dets)),
            "classes": len(classes),
            "proposal_budget": cfg.proposal_budget,
        },
    )


def average_recall(proposals_by_video: dict, gts_by_video: dict, budget: int, grid) -> float:
    """Mean over the tIoU grid of the recall of the top-``budget``
    proposals per video, matched one-to-one greedily by objectness."""
    total_gt = sum(len(v) for v in gts_by_video.values())
    if total_gt == 0:
        return 0.0
    top = {}
    for vid, props in proposals_by_video.items():
        ranked = sorted(props, key=lambda p: (-p.objectness, p.segment.start))
        top[vid] = ranked[:budget]
    recalls = []
    for t in grid:
        matched = 0
        for vid, gts in gts_by_video.items():
            used = np.zeros(len(gts), dtype=bool)
            for p in top.get(vid, []):
                best_j, best_v = -1, -1.0
                for j, g in enumerate(gts):
                    if used[j]:
                        continue
                    v = tiou(p.segment, g)
                    if v >= t and v > best_v:
                        best_j, best_v = j, v
                if best_j >= 0:
                    used[best_j] = True
                    matched += 1
        recalls.append(matched / total_gt)
    return float(np.mean(recalls))
