"""Segment geometry: anchor grids, tIoU, coordinate transforms, matching.

All segments are half-open temporal intervals in frame units.  Anchors are
laid out per pyramid level on a regular grid of cell centers and are left
unclipped at generation; clipping happens only when proposals are decoded.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError

# Per-level anchor layout: stride of each pyramid level and the anchor
# lengths on it expressed as multiples of that stride.
DEFAULT_STRIDES = (8, 16, 32)
DEFAULT_SCALES = (
    tuple(range(1, 8)),
    tuple(range(4, 11)),
    tuple(range(6, 17)),
)
# Single-resolution layout used by the ablation baseline: the same 25
# anchor lengths, all expressed against the stride-8 grid.
SINGLE_SCALE_SCALES = (
    tuple(range(1, 8)) + tuple(range(8, 21, 2)) + tuple(range(24, 65, 4)),
)


@dataclass(frozen=True)
class Segment:
    """Half-open interval [start, end) in frames; end must exceed start."""

    start: float
    end: float

    def __post_init__(self):
        if not self.end > self.start:
            raise ContractError(f"segment needs end > start, got [{self.start}, {self.end}]")

    @property
    def length(self) -> float:
        return self.end - self.start

    @property
    def center(self) -> float:
        return 0.5 * (self.start + self.end)


@dataclass(frozen=True)
class Anchor:
    """A reference window at (level, position, scale_index) on the grid."""

    segment: Segment
    level: int
    position: int
    scale_index: int


class AnchorGrid:
    """All anchors of all levels with vectorized views for matching.

    Anchor order is level-major, then position, then scale index; the flat
    index in that order is the tie-break key everywhere.
    """

    def __init__(self, levels: list[list[Anchor]], strides, buffer_len: int):
        self.levels = levels
        self.strides = tuple(strides)
        self.buffer_len = int(buffer_len)
        flat = [a for lv in levels for a in lv]
        self.anchors = flat
        self.starts = np.array([a.segment.start for a in flat])
        self.ends = np.array([a.segment.end for a in flat])
        self.level_of = np.array([a.level for a in flat], dtype=np.int64)
        self.position_of = np.array([a.position for a in flat], dtype=np.int64)
        self.scale_index_of = np.array([a.scale_index for a in flat], dtype=np.int64)
        offs = np.cumsum([0] + [len(lv) for lv in levels])
        self.level_offsets = offs  # level k occupies [offs[k], offs[k+1])

    def __len__(self) -> int:
        return len(self.anchors)

    def level_indices(self, k: int) -> np.ndarray:
        return np.arange(self.level_offsets[k], self.level_offsets[k + 1])


def build_anchor_grid(buffer_len: int, strides=DEFAULT_STRIDES, scales=DEFAULT_SCALES) -> AnchorGrid:
    """Enumerate anchors: at (k, p, j), centered at (p+0.5)*stride_k with
    length scales[k][j]*stride_k.  Anchors may extend beyond [0, buffer_len].
    """
    if len(strides) != len(scales):
        raise ConfigError(f"{len(strides)} strides but {len(scales)} scale lists")
    levels = []
    for k, (s_k, level_scales) in enumerate(zip(strides, scales)):
        if buffer_len % s_k != 0:
            raise ConfigError(f"buffer_len {buffer_len} not divisible by stride {s_k}")
        level = []
        for p in range(buffer_len // s_k):
            c = (p + 0.5) * s_k
            for j, sc in enumerate(level_scales):
                half = 0.5 * sc * s_k
                level.append(Anchor(Segment(c - half, c + half), k, p, j))
        levels.append(level)
    return AnchorGrid(levels, strides, buffer_len)


def tiou(a: Segment, b: Segment) -> float:
    """Temporal intersection-over-union of two segments, in [0, 1]."""
    inter = min(a.end, b.end) - max(a.start, b.start)
    if inter <= 0.0:
        return 0.0
    return inter / (a.length + b.length - inter)


def encode(anchor: Segment, gt: Segment) -> tuple[float, float]:
    """Segment -> (center offset in anchor lengths, log length ratio)."""
    return (
        (gt.center - anchor.center) / anchor.length,
        math.log(gt.length / anchor.length),
    )


def decode(anchor: Segment, center_offset: float, log_length: float, clip_to=None):
    """Invert ``encode``; optionally clip to [lo, hi].

    When clipping is requested, a result shorter than one frame is
    degenerate and ``None`` is returned for the caller to drop.
    """
    c = anchor.center + center_offset * anchor.length
    half = 0.5 * anchor.length * math.exp(log_length)
    s, e = c - half, c + half
    if clip_to is not None:
        s = max(s, clip_to[0])
        e = min(e, clip_to[1])
        if e - s < 1.0:
            return None
    return Segment(s, e)


def _tiou_matrix(starts: np.ndarray, ends: np.ndarray, gts: list[Segment]) -> np.ndarray:
    gs = np.array([g.start for g in gts])
    ge = np.array([g.end for g in gts])
    inter = np.clip(np.minimum(ends[:, None], ge[None, :]) - np.maximum(starts[:, None], gs[None, :]), 0.0, None)
    union = (ends - starts)[:, None] + (ge - gs)[None, :] - inter
    return inter / union


@dataclass
class MatchResult:
    """Per-anchor matching outcome: labels in {+1 pos, -1 neg, 0 ignore},
    the matched ground-truth index for positives (-1 elsewhere), and the
    regression target (center offset, log length ratio) for positives.
    """

    labels: np.ndarray
    matched_gt: np.ndarray
    reg_targets: np.ndarray


def match_anchors_apn(grid: AnchorGrid, gts: list[Segment], pos_tiou: float = 0.7, neg_tiou: float = 0.3) -> MatchResult:
    """Label anchors against ground truth, jointly across all levels.

    An anchor is positive if its tIoU against some ground truth is strictly
    above ``pos_tiou``, or if it is the best-tIoU anchor for a ground truth
    (ties broken by lowest anchor index).  It is negative if its tIoU is
    strictly below ``neg_tiou`` for every ground truth; everything else is
    ignored.  Positives regress toward their own highest-tIoU ground truth.
    """
    n = len(grid)
    if not gts:
        return MatchResult(
            labels=np.full(n, -1, dtype=np.int8),
            matched_gt=np.full(n, -1, dtype=np.int64),
            reg_targets=np.zeros((n, 2)),
        )
    m = _tiou_matrix(grid.starts, grid.ends, gts)
    best_gt = m.argmax(axis=1)
    best_tiou = m[np.arange(n), best_gt]
    labels = np.zeros(n, dtype=np.int8)
    labels[best_tiou < neg_tiou] = -1
    labels[best_tiou > pos_tiou] = 1
    labels[m.argmax(axis=0)] = 1  # best anchor per ground truth; argmax takes lowest index
    matched = np.where(labels == 1, best_gt, -1)
    lengths = grid.ends - grid.starts
    centers = 0.5 * (grid.starts + grid.ends)
    gc = np.array([g.center for g in gts])[best_gt]
    gl = np.array([g.length for g in gts])[best_gt]
    reg = np.stack([(gc - centers) / lengths, np.log(gl / lengths)], axis=1)
    reg[labels != 1] = 0.0
    return MatchResult(labels=labels, matched_gt=matched, reg_targets=reg)


@dataclass
class ProposalMatch:
    """Per-proposal class assignment: 0 is background, >=1 an activity
    class; positives carry the matched ground-truth index and regression
    target toward it.
    """

    class_labels: np.ndarray
    matched_gt: np.ndarray
    reg_targets: np.ndarray


def match_proposals_acn(proposals: list[Segment], gts: list[Segment], gt_labels, fg_tiou: float = 0.5) -> ProposalMatch:
    """Assign class labels to proposals: the argmax ground truth's label when
    the maximum tIoU is strictly above ``fg_tiou``, background otherwise.
    """
    n = len(proposals)
    labels = np.zeros(n, dtype=np.int64)
    matched = np.full(n, -1, dtype=np.int64)
    reg = np.zeros((n, 2))
    if n == 0 or not gts:
        return ProposalMatch(labels, matched, reg)
    starts = np.array([p.start for p in proposals])
    ends = np.array([p.end for p in proposals])
    m = _tiou_matrix(starts, ends, gts)
    best_gt = m.argmax(axis=1)
    best_tiou = m[np.arange(n), best_gt]
    fg = best_tiou > fg_tiou
    gt_labels = np.asarray(gt_labels, dtype=np.int64)
    labels[fg] = gt_labels[best_gt[fg]]
    matched[fg] = best_gt[fg]
    for i in np.nonzero(fg)[0]:
        reg[i] = encode(proposals[i], gts[best_gt[i]])
    return ProposalMatch(labels, matched, reg)


def sample_pos_neg(pos_idx: np.ndarray, neg_idx: np.ndarray, batch: int, pos_fraction: float, rng: np.random.Generator) -> np.ndarray:
    """Core sampler: up to batch*pos_fraction positives, negatives fill the
    remainder; without replacement, never more than available.
    """
    pos_idx = np.asarray(pos_idx, dtype=np.int64)
    neg_idx = np.asarray(neg_idx, dtype=np.int64)
    if batch < 1:
        raise ContractError(f"batch must be positive, got {batch}")
    if pos_idx.size == 0 and neg_idx.size == 0:
        raise ContractError("cannot sample a minibatch: no positives and no negatives")
    n_pos = min(pos_idx.size, int(round(batch * pos_fraction)))
    n_neg = min(neg_idx.size, batch - n_pos)
    pos_sel = rng.choice(pos_idx, size=n_pos, replace=False) if n_pos else pos_idx[:0]
    neg_sel = rng.choice(neg_idx, size=n_neg, replace=False) if n_neg else neg_idx[:0]
    return np.concatenate([pos_sel, neg_sel])


def sample_minibatch(match: MatchResult, batch: int, pos_fraction: float, rng: np.random.Generator, candidate_idx=None) -> np.ndarray:
    """Sample anchor indices from a match result, positives first.

    ``candidate_idx`` restricts the pool (used for per-level batches);
    ignored anchors are never sampled.
    """
    labels = match.labels
    if candidate_idx is not None:
        candidate_idx = np.asarray(candidate_idx, dtype=np.int64)
        pos = candidate_idx[labels[candidate_idx] == 1]
        neg = candidate_idx[labels[candidate_idx] == -1]
    else:
        pos = np.nonzero(labels == 1)[0]
        neg = np.nonzero(labels == -1)[0]
    return sample_pos_neg(pos, neg, batch, pos_fraction, rng)
