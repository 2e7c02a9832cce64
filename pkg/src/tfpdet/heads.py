"""Detection heads: proposal network, RoI pooling, context fusion, classifier.

The proposal network runs per pyramid level: a shared conv followed by two
sibling 1x1 heads predicting, per anchor and position, (background,
foreground) logits and (center offset, log length) regression.  Proposals
are pooled over all levels, suppressed at tIoU 0.7 and classified by
per-level classifiers over RoI-pooled (optionally context-fused) features;
final detections are suppressed class-wise at tIoU 0.4.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .anchorkit import AnchorGrid, Segment, decode
from .errors import ConfigError, ContractError
from .pyramid import HEAD_BIAS, HEAD_WEIGHT_STD, PyramidFeatures

STRATEGIES = ("s1", "s2", "s3")


@dataclass(frozen=True)
class ApnConfig:
    """Proposal-network settings: anchor scales per level plus the matching
    and suppression thresholds."""

    scales: tuple
    pos_tiou: float = 0.7
    neg_tiou: float = 0.3
    nms_tiou: float = 0.7
    top_k: int = 100

    def __post_init__(self):
        if not self.scales or any(len(s) < 1 for s in self.scales):
            raise ConfigError("apn needs at least one anchor scale per level")
        if self.top_k < 1:
            raise ConfigError(f"top_k must be positive, got {self.top_k}")


@dataclass(frozen=True)
class AcnConfig:
    """Classifier settings: proposal-to-level assignment strategy, context
    toggle, RoI bins, classifier width and class count."""

    num_classes: int
    strategy: str = "s3"
    use_context: bool = True
    roi_bins: int = 4
    fc_dim: int = 256
    fg_tiou: float = 0.5
    nms_tiou: float = 0.4
    score_thresh: float = 0.05

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if self.num_classes < 1 or self.roi_bins < 1 or self.fc_dim < 1:
            raise ConfigError("num_classes, roi_bins and fc_dim must be positive")


@dataclass(frozen=True)
class Proposal:
    """A decoded, clipped candidate segment with its objectness score."""

    segment: Segment
    objectness: float
    source_level: int


@dataclass(frozen=True)
class Detection:
    """A scored, class-labeled, boundary-refined segment in video frames."""

    segment: Segment
    label: int
    score: float
    video_id: str

    def __post_init__(self):
        if self.label < 1:
            raise ContractError("detections never carry the background label")


# ---------------------------------------------------------------------------
# parameter construction


def init_apn_params(hidden_dim: int, cfg: ApnConfig, rng: np.random.Generator) -> dict:
    params = {}
    for k, level_scales in enumerate(cfg.scales):
        two_a = 2 * len(level_scales)
        for name, shape in (
            (f"apn.level{k}.shared.w", (hidden_dim, hidden_dim, 3)),
            (f"apn.level{k}.cls.w", (two_a, hidden_dim, 1)),
            (f"apn.level{k}.reg.w", (two_a, hidden_dim, 1)),
        ):
            params[name] = nc.Parameter.create(name, shape, ("gaussian", 0.0, HEAD_WEIGHT_STD), rng)
        for name, shape in (
            (f"apn.level{k}.shared.b", (hidden_dim,)),
            (f"apn.level{k}.cls.b", (two_a,)),
            (f"apn.level{k}.reg.b", (two_a,)),
        ):
            params[name] = nc.Parameter.create(name, shape, ("constant", HEAD_BIAS), rng)
    return params


def init_acn_params(hidden_dim: int, cfg: AcnConfig, num_levels: int, rng: np.random.Generator) -> dict:
    if cfg.use_context and hidden_dim % 2 != 0:
        raise ConfigError(f"context fusion needs an even feature dim, got {hidden_dim}")
    params = {}
    in_dim = hidden_dim * cfg.roi_bins
    half = hidden_dim // 2
    for k in range(num_levels):
        shapes = []
        if cfg.use_context:
            shapes += [
                (f"acn.level{k}.roi_reduce.w", (half, hidden_dim, 3)),
                (f"acn.level{k}.ctx_reduce.w", (half, hidden_dim, 3)),
            ]
        shapes += [
            (f"acn.level{k}.fc6.w", (in_dim, cfg.fc_dim)),
            (f"acn.level{k}.fc7.w", (cfg.fc_dim, cfg.fc_dim)),
            (f"acn.level{k}.cls.w", (cfg.fc_dim, cfg.num_classes + 1)),
            (f"acn.level{k}.reg.w", (cfg.fc_dim, 2 * cfg.num_classes)),
        ]
        for name, shape in shapes:
            params[name] = nc.Parameter.create(name, shape, ("gaussian", 0.0, HEAD_WEIGHT_STD), rng)
        biases = []
        if cfg.use_context:
            biases += [
                (f"acn.level{k}.roi_reduce.b", (half,)),
                (f"acn.level{k}.ctx_reduce.b", (half,)),
            ]
        biases += [
            (f"acn.level{k}.fc6.b", (cfg.fc_dim,)),
            (f"acn.level{k}.fc7.b", (cfg.fc_dim,)),
            (f"acn.level{k}.cls.b", (cfg.num_classes + 1,)),
            (f"acn.level{k}.reg.b", (2 * cfg.num_classes,)),
        ]
        for name, shape in biases:
            params[name] = nc.Parameter.create(name, shape, ("constant", HEAD_BIAS), rng)
    return params


# ---------------------------------------------------------------------------
# proposal network


def apn_forward(pyr: PyramidFeatures, params: dict) -> list:
    """Per level: shared conv(k=3, pad=1)+relu, then the two sibling 1x1
    heads.  Rows (2j, 2j+1) of the cls map are the (background, foreground)
    logits of anchor j; the same rows of the reg map are its (center
    offset, log length) predictions.
    """
    out = []
    for k, feat in enumerate(pyr.levels):
        h = nc.relu(nc.temporal_conv(feat, params[f"apn.level{k}.shared.w"], params[f"apn.level{k}.shared.b"], 1, 1))
        cls = nc.temporal_conv(h, params[f"apn.level{k}.cls.w"], params[f"apn.level{k}.cls.b"], 1, 0)
        reg = nc.temporal_conv(h, params[f"apn.level{k}.reg.w"], params[f"apn.level{k}.reg.b"], 1, 0)
        out.append((cls, reg))
    return out


def nms_indices(starts: np.ndarray, ends: np.ndarray, scores: np.ndarray, thresh: float, top_k: int | None = None) -> list[int]:
    """Greedy NMS: keep by descending score, suppress overlaps >= thresh.

    Score ties break on the lower index, which callers keep deterministic.
    """
    n = len(scores)
    order = np.lexsort((np.arange(n), -np.asarray(scores)))
    lengths = ends - starts
    alive = np.ones(n, dtype=bool)
    kept: list[int] = []
    for i in order:
        if not alive[i]:
            continue
        kept.append(int(i))
        if top_k is not None and len(kept) >= top_k:
            break
        inter = np.clip(np.minimum(ends, ends[i]) - np.maximum(starts, starts[i]), 0.0, None)
        overlap = inter / (lengths + lengths[i] - inter)
        alive &= overlap < thresh
        alive[i] = False
    return kept


def generate_proposals(apn_out, grid: AnchorGrid, nms_tiou: float = 0.7, top_k: int = 100) -> list[Proposal]:
    """Score and decode every anchor, then pool all levels through NMS."""
    starts, ends, scores, levels = [], [], [], []
    hi = float(grid.buffer_len)
    for k, (cls, reg) in enumerate(apn_out):
        c = cls.data
        bg, fg = c[0::2], c[1::2]
        m = np.maximum(bg, fg)
        obj = np.exp(fg - m) / (np.exp(bg - m) + np.exp(fg - m))
        idx = grid.level_indices(k)
        j, p = grid.scale_index_of[idx], grid.position_of[idx]
        a_len = grid.ends[idx] - grid.starts[idx]
        a_ctr = 0.5 * (grid.starts[idx] + grid.ends[idx])
        ctr = a_ctr + reg.data[0::2][j, p] * a_len
        half = 0.5 * a_len * np.exp(reg.data[1::2][j, p])
        s = np.maximum(ctr - half, 0.0)
        e = np.minimum(ctr + half, hi)
        keep = e - s >= 1.0
        starts.append(s[keep])
        ends.append(e[keep])
        scores.append(obj[j, p][keep])
        levels.append(np.full(int(keep.sum()), k))
    starts = np.concatenate(starts)
    ends = np.concatenate(ends)
    scores = np.concatenate(scores)
    levels = np.concatenate(levels)
    if not scores.size:
        return []
    kept = nms_indices(starts, ends, scores, nms_tiou, top_k)
    return [Proposal(Segment(starts[i], ends[i]), float(scores[i]), int(levels[i])) for i in kept]


# ---------------------------------------------------------------------------
# RoI pooling and context fusion


def _roi_cell_selection(feat_data: np.ndarray, segment: Segment, stride: float, num_bins: int) -> np.ndarray:
    """Flat take-indices [D, P] implementing max-pooled temporal bins.

    The segment is mapped to feature coordinates and clamped; each of the P
    equal sub-intervals pools the cells whose centers fall inside it, and an
    empty sub-interval borrows the covered cell nearest its center.
    """
    d, t = feat_data.shape
    lo = min(max(segment.start / stride, 0.0), float(t))
    hi = min(max(segment.end / stride, 0.0), float(t))
    if hi <= lo:
        raise ContractError(f"segment [{segment.start}, {segment.end}] lies outside the feature extent")
    # first/last cell whose center lies in [lo, hi)
    first = max(0, int(np.ceil(lo - 0.5)))
    last = min(t, int(np.ceil(hi - 0.5)))
    if last <= first:
        first = int(np.clip(np.floor(0.5 * (lo + hi)), 0, t - 1))
        last = first + 1
    cov_centers = np.arange(first, last) + 0.5
    sub = feat_data[:, first:last]
    edges = lo + (hi - lo) * np.arange(num_bins + 1) / num_bins
    bounds = np.searchsorted(cov_centers, edges, side="left")
    flat = np.empty((d, num_bins), dtype=np.int64)
    rows = np.arange(d) * t
    for p in range(num_bins):
        blo, bhi = bounds[p], bounds[p + 1]
        if bhi > blo:
            arg = sub[:, blo:bhi].argmax(axis=1)
            flat[:, p] = rows + first + blo + arg
        else:
            mid = 0.5 * (edges[p] + edges[p + 1])
            flat[:, p] = rows + first + int(np.argmin(np.abs(cov_centers - mid)))
    return flat


def roi_pool(level_feat, segment: Segment, stride: float, num_bins: int) -> nc.Tensor:
    """Fixed-size [D, P] max-pooled features for an arbitrary segment."""
    feat = level_feat if isinstance(level_feat, nc.Tensor) else nc.Tensor(level_feat)
    flat = _roi_cell_selection(feat.data, segment, stride, num_bins)
    return nc.take(feat, flat)


def context_window(segment: Segment, buffer_len: float) -> Segment:
    """The segment dilated to twice its length about its center, clipped."""
    c, half = segment.center, segment.length
    return Segment(max(0.0, c - half), min(float(buffer_len), c + half))


def context_features(level_feat, segment: Segment, stride: float, num_bins: int, params: dict, level: int, buffer_len: float) -> nc.Tensor:
    """Fuse RoI features with pooled context: both are channel-reduced to
    D/2 by separate conv layers and concatenated back to [D, P]."""
    pooled = roi_pool(level_feat, segment, stride, num_bins)
    ctx = roi_pool(level_feat, context_window(segment, buffer_len), stride, num_bins)
    r = nc.relu(nc.temporal_conv(pooled, params[f"acn.level{level}.roi_reduce.w"], params[f"acn.level{level}.roi_reduce.b"], 1, 1))
    c = nc.relu(nc.temporal_conv(ctx, params[f"acn.level{level}.ctx_reduce.w"], params[f"acn.level{level}.ctx_reduce.b"], 1, 1))
    return nc.concat_channels(r, c)


# ---------------------------------------------------------------------------
# classification network


def assign_proposals(proposals: list[Proposal], cfg: AcnConfig, num_levels: int) -> list[list[int]]:
    """Proposal indices per level under the assignment strategy: s1 sends
    everything to level 0, s2 to the source level, s3 to every level."""
    assignment = [[] for _ in range(num_levels)]
    for i, p in enumerate(proposals):
        if cfg.strategy == "s1":
            assignment[0].append(i)
        elif cfg.strategy == "s2":
            assignment[p.source_level].append(i)
        else:
            for k in range(num_levels):
                assignment[k].append(i)
    return assignment


def acn_forward(pyr: PyramidFeatures, proposals: list[Proposal], cfg: AcnConfig, params: dict, buffer_len: float, assignment: list[list[int]] | None = None) -> list:
    """Per level: pooled (and optionally context-fused) features through
    that level's classifier.  Returns, per level, (proposal indices,
    [n, C+1] class logits, [n, 2C] class-specific regression) with Nones
    for levels that received nothing.
    """
    if not proposals:
        raise ContractError("acn_forward needs at least one proposal")
    if assignment is None:
        assignment = assign_proposals(proposals, cfg, len(pyr.levels))
    out = []
    for k, idx in enumerate(assignment):
        if not idx:
            out.append((idx, None, None))
            continue
        feat, stride = pyr.levels[k], pyr.strides[k]
        rows = []
        for i in idx:
            seg = proposals[i].segment
            if cfg.use_context:
                f = context_features(feat, seg, stride, cfg.roi_bins, params, k, buffer_len)
            else:
                f = roi_pool(feat, seg, stride, cfg.roi_bins)
            rows.append(nc.reshape(f, (-1,)))
        x = nc.stack_rows(rows)
        h = nc.relu(nc.linear(x, params[f"acn.level{k}.fc6.w"], params[f"acn.level{k}.fc6.b"]))
        h = nc.relu(nc.linear(h, params[f"acn.level{k}.fc7.w"], params[f"acn.level{k}.fc7.b"]))
        cls = nc.linear(h, params[f"acn.level{k}.cls.w"], params[f"acn.level{k}.cls.b"])
        reg = nc.linear(h, params[f"acn.level{k}.reg.w"], params[f"acn.level{k}.reg.b"])
        out.append((idx, cls, reg))
    return out


def _softmax(rows: np.ndarray) -> np.ndarray:
    z = rows - rows.max(axis=1, keepdims=True)
    ez = np.exp(z)
    return ez / ez.sum(axis=1, keepdims=True)


def finalize_detections(acn_out, proposals: list[Proposal], cfg: AcnConfig, buffer, nms_tiou: float = 0.4, score_thresh: float = 0.05) -> list[Detection]:
    """Turn classifier outputs into video-coordinate detections.

    Every (proposal, level) output contributes one candidate per
    non-background class whose posterior clears ``score_thresh``; its
    segment is the class-specific refinement of the proposal, clipped to
    the buffer's valid content.  Candidates then pass class-wise NMS and
    are shifted into video coordinates.
    """
    cands = {c: ([], [], []) for c in range(1, cfg.num_classes + 1)}  # starts, ends, scores
    valid_end = float(buffer.num_valid)
    for idx, cls, reg in acn_out:
        if cls is None:
            continue
        post = _softmax(cls.data)
        regs = reg.data
        for row, i in enumerate(idx):
            seg = proposals[i].segment
            for c in range(1, cfg.num_classes + 1):
                s = float(post[row, c])
                if s < score_thresh:
                    continue
                refined = decode(seg, regs[row, 2 * (c - 1)], regs[row, 2 * (c - 1) + 1], clip_to=(0.0, valid_end))
                if refined is None:
                    continue
                st, en, sc = cands[c]
                st.append(refined.start)
                en.append(refined.end)
                sc.append(s)
    detections = []
    off = float(buffer.frame_offset)
    for c, (st, en, sc) in cands.items():
        if not sc:
            continue
        st, en, sc = np.array(st), np.array(en), np.array(sc)
        for i in nms_indices(st, en, sc, nms_tiou):
            detections.append(Detection(Segment(st[i] + off, en[i] + off), c, float(sc[i]), buffer.video_id))
    detections.sort(key=lambda d: (-d.score, d.label, d.segment.start))
    return detections


def nms_detections(dets: list[Detection], thresh: float) -> list[Detection]:
    """Class-wise greedy NMS over a flat detection list (same video)."""
    kept: list[Detection] = []
    labels = sorted({d.label for d in dets})
    for c in labels:
        group = [d for d in dets if d.label == c]
        st = np.array([d.segment.start for d in group])
        en = np.array([d.segment.end for d in group])
        sc = np.array([d.score for d in group])
        kept.extend(group[i] for i in nms_indices(st, en, sc, thresh))
    kept.sort(key=lambda d: (-d.score, d.label, d.segment.start))
    return kept
