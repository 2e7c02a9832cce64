"""Video/annotation data model, file ingestion, buffering, synthesis.

Annotations travel on disk in seconds (with a per-video fps) and live in
frames everywhere inside the package; the conversion happens exactly once
at ingestion.  Feature matrices are stored in the TFPV binary layout and
widened from f32 to f64 on load.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .anchorkit import Segment
from .errors import ConfigError, ContractError, DataError
from .numcore import Tensor

TFPV_MAGIC = b"TFPV"
TFPV_VERSION = 1
MAX_PYRAMID_STRIDE = 32
MIN_INSTANCE_GAP = 8
CLIP_KEEP_FRACTION = 0.5  # windowed annotations keeping less are dropped


@dataclass(frozen=True)
class Activity:
    """One annotated activity instance, in frame units."""

    t_start: float
    t_end: float
    label: int

    def __post_init__(self):
        if not self.t_end > self.t_start:
            raise ContractError(f"activity needs t_end > t_start, got [{self.t_start}, {self.t_end}]")
        if self.t_start < 0:
            raise ContractError(f"activity starts before frame 0: {self.t_start}")
        if self.label < 1:
            raise ContractError(f"activity label must be >= 1, got {self.label}")

    @property
    def length(self) -> float:
        return self.t_end - self.t_start

    def segment(self) -> Segment:
        return Segment(self.t_start, self.t_end)


@dataclass
class VideoRecord:
    """Per-video feature matrix plus its annotation set."""

    video_id: str
    num_frames: int
    annotations: list[Activity]
    features: Tensor | None = None
    fps: float = 1.0
    subset: str = "train"

    def __post_init__(self):
        for a in self.annotations:
            if a.t_end > self.num_frames + 1e-6:
                raise DataError(
                    f"video {self.video_id!r}: annotation [{a.t_start}, {a.t_end}] exceeds {self.num_frames} frames"
                )
        if self.features is not None and self.features.shape[1] != self.num_frames:
            raise DataError(
                f"video {self.video_id!r}: feature length {self.features.shape[1]} != num_frames {self.num_frames}"
            )


@dataclass
class Buffer:
    """A fixed-length training/inference window sliced from a video.

    ``features`` is zero-padded past ``num_valid`` when the window runs off
    the end of the source; annotations are already in buffer coordinates.
    """

    video_id: str
    frame_offset: int
    direction: str
    features: Tensor
    annotations: list[Activity]
    num_valid: int


# ---------------------------------------------------------------------------
# annotation JSON


def _reject_duplicate_keys(pairs):
    d = {}
    for k, v in pairs:
        if k in d:
            raise DataError(f"duplicate key {k!r} in annotation JSON")
        d[k] = v
    return d


def load_annotations(path, label_index: list[str] | None = None) -> tuple[dict[str, VideoRecord], list[str]]:
    """Read an annotation JSON file into metadata-only VideoRecords.

    Returns (records keyed by video id, label index).  When ``label_index``
    is given (evaluation against a fixed label set), unknown labels are a
    schema error; otherwise the index is the sorted set of labels seen.
    Class ids are 1-based positions in the index (0 is background).
    """
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"), object_pairs_hook=_reject_duplicate_keys)
    except json.JSONDecodeError as e:
        raise DataError(f"{path}: not valid JSON: {e}") from e
    if not isinstance(doc, dict) or doc.get("version") != 1 or "database" not in doc:
        raise DataError(f"{path}: expected {{'version': 1, 'database': ...}}")
    database = doc["database"]
    if label_index is None:
        seen = set()
        for vid, entry in database.items():
            for ann in entry.get("annotations", []):
                if "label" in ann:
                    seen.add(str(ann["label"]))
        label_index = sorted(seen)
    label_to_id = {name: i + 1 for i, name in enumerate(label_index)}

    records: dict[str, VideoRecord] = {}
    for vid, entry in database.items():
        where = f"{path}: video {vid!r}"
        for fieldname in ("fps", "num_frames", "subset", "annotations"):
            if fieldname not in entry:
                raise DataError(f"{where}: missing field {fieldname!r}")
        fps = float(entry["fps"])
        if fps <= 0:
            raise DataError(f"{where}: fps must be positive")
        num_frames = int(entry["num_frames"])
        subset = entry["subset"]
        if subset not in ("train", "val", "test"):
            raise DataError(f"{where}: unknown subset {subset!r}")
        activities = []
        for i, ann in enumerate(entry["annotations"]):
            if "segment" not in ann or "label" not in ann:
                raise DataError(f"{where}: annotation {i}: missing 'segment' or 'label'")
            seg = ann["segment"]
            if len(seg) != 2 or not seg[1] > seg[0]:
                raise DataError(f"{where}: annotation {i}: non-increasing segment {seg}")
            name = str(ann["label"])
            if name not in label_to_id:
                raise DataError(f"{where}: annotation {i}: unknown label {name!r}")
            start = float(seg[0]) * fps
            end = min(float(seg[1]) * fps, float(num_frames))
            if not end > start:
                raise DataError(f"{where}: annotation {i}: segment collapses after frame conversion")
            activities.append(Activity(start, end, label_to_id[name]))
        records[vid] = VideoRecord(
            video_id=vid, num_frames=num_frames, annotations=activities, fps=fps, subset=subset
        )
    return records, list(label_index)


def save_annotations(records: dict[str, VideoRecord], path, label_index: list[str]) -> None:
    """Write records back to the annotation JSON schema (seconds on disk)."""
    database = {}
    for vid in sorted(records):
        r = records[vid]
        database[vid] = {
            "fps": r.fps,
            "num_frames": r.num_frames,
            "subset": r.subset,
            "annotations": [
                {
                    "segment": [a.t_start / r.fps, a.t_end / r.fps],
                    "label": label_index[a.label - 1],
                }
                for a in r.annotations
            ],
        }
    Path(path).write_text(
        json.dumps({"version": 1, "database": database}, indent=2, sort_keys=True) + "\n",
        encoding="utf-8",
    )


def load_label_index(path) -> list[str]:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    labels = doc.get("labels")
    if not isinstance(labels, list) or labels != sorted(labels) or len(set(labels)) != len(labels):
        raise DataError(f"{path}: 'labels' must be a sorted list of unique names")
    return [str(x) for x in labels]


def save_label_index(labels: list[str], path) -> None:
    Path(path).write_text(json.dumps({"labels": sorted(labels)}, indent=2) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# TFPV feature binary


def load_features(path) -> Tensor:
    """Read a TFPV file into a [D, L] float64 tensor."""
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:4] != TFPV_MAGIC:
        raise DataError(f"{path}: bad TFPV magic")
    version, d, l = struct.unpack_from("<III", raw, 4)
    if version != TFPV_VERSION:
        raise DataError(f"{path}: unsupported TFPV version {version}")
    if d < 1 or l < 1:
        raise DataError(f"{path}: degenerate dimensions D={d}, L={l}")
    expected = 16 + 4 * d * l
    if len(raw) != expected:
        raise DataError(f"{path}: payload is {len(raw)} bytes, expected {expected}")
    flat = np.frombuffer(raw, dtype="<f4", offset=16)
    return Tensor(flat.reshape(l, d).T.astype(np.float64))


def save_features(features, path) -> None:
    """Write a [D, L] feature matrix as TFPV (frame-major f32 payload)."""
    arr = features.data if isinstance(features, Tensor) else np.asarray(features)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise DataError(f"features must be a non-empty [D, L] matrix, got shape {arr.shape}")
    d, l = arr.shape
    payload = np.ascontiguousarray(arr.T, dtype="<f4").tobytes()
    Path(path).write_bytes(TFPV_MAGIC + struct.pack("<III", TFPV_VERSION, d, l) + payload)


# ---------------------------------------------------------------------------
# buffer windowing


def make_buffers(record: VideoRecord, buf_len: int, directions: str = "both") -> list[Buffer]:
    """Window a video into fixed-length buffers.

    Forward windows start at offsets 0, buf_len, 2*buf_len, ...; backward
    windows end at L, L-buf_len, ... (offsets clamped at 0).  Short windows
    are zero-padded at the tail.  Annotations are clipped to the window and
    shifted; a clipped instance keeping less than half its original length
    is dropped.
    """
    if buf_len % MAX_PYRAMID_STRIDE != 0:
        raise ConfigError(f"buf_len {buf_len} must be a multiple of {MAX_PYRAMID_STRIDE}")
    if record.features is None:
        raise ContractError(f"video {record.video_id!r} has no features loaded")
    if directions not in ("both", "forward"):
        raise ConfigError(f"directions must be 'both' or 'forward', got {directions!r}")
    L = record.num_frames
    feats = record.features.data

    def window(offset: int, direction: str) -> Buffer:
        valid = max(0, min(buf_len, L - offset))
        block = np.zeros((feats.shape[0], buf_len))
        if valid:
            block[:, :valid] = feats[:, offset : offset + valid]
        kept = []
        for a in record.annotations:
            cs = max(a.t_start, float(offset))
            ce = min(a.t_end, float(offset + valid))
            if ce > cs and (ce - cs) >= CLIP_KEEP_FRACTION * a.length:
                kept.append(Activity(cs - offset, ce - offset, a.label))
        return Buffer(record.video_id, offset, direction, Tensor(block), kept, valid)

    buffers = []
    if L == 0:
        buffers.append(window(0, "forward"))
    else:
        off = 0
        while off < L:
            buffers.append(window(off, "forward"))
            off += buf_len
        if directions == "both":
            end = L
            while end > 0:
                buffers.append(window(max(0, end - buf_len), "backward"))
                end -= buf_len
    return buffers


# ---------------------------------------------------------------------------
# synthetic untrimmed sequences


@dataclass(frozen=True)
class SynthConfig:
    """Generator settings for synthetic untrimmed feature sequences.

    Each class gets a fixed random unit signature in feature space;
    background frames are isotropic Gaussian noise and instance frames add
    ``signal_amplitude`` times the class signature over a sharp rectangular
    envelope, so ground-truth boundaries are unambiguous.
    """

    num_videos: int = 80
    video_length: int = 768
    feature_dim: int = 16
    num_classes: int = 3
    noise_sigma: float = 0.25
    signal_amplitude: float = 1.0
    duration_bands: tuple = ((8, 56, 0.5), (64, 160, 0.3), (192, 512, 0.2))
    instances_per_video: tuple = (1, 4)
    val_fraction: float = 0.25
    fps: float = 4.0
    seed: int = 0

    def __post_init__(self):
        if self.num_videos < 1 or self.video_length < 1 or self.feature_dim < 1 or self.num_classes < 1:
            raise ConfigError("num_videos, video_length, feature_dim, num_classes must be positive")
        if self.noise_sigma < 0 or self.fps <= 0:
            raise ConfigError("noise_sigma must be >= 0 and fps > 0")
        if not 0 <= self.val_fraction < 1:
            raise ConfigError(f"val_fraction must be in [0,1), got {self.val_fraction}")
        lo, hi = self.instances_per_video
        if lo < 0 or hi < lo:
            raise ConfigError(f"bad instances_per_video {self.instances_per_video}")
        prev_max = -1
        for b in self.duration_bands:
            if len(b) != 3 or b[0] < 1 or b[1] < b[0] or b[2] <= 0:
                raise ConfigError(f"bad duration band {b}")
            if b[0] <= prev_max:
                raise ConfigError("duration bands must be disjoint and ascending")
            prev_max = b[1]


def sample_instance_length(rng: np.random.Generator, bands) -> tuple[int, int]:
    """Draw (length, band index): band by weight, length uniform within."""
    weights = np.array([b[2] for b in bands], dtype=np.float64)
    band = int(rng.choice(len(bands), p=weights / weights.sum()))
    lo, hi, _ = bands[band]
    return int(rng.integers(lo, hi + 1)), band


def _place_instances(rng, cfg: SynthConfig, video_id: str):
    """Rejection-sample non-overlapping instances with >= 8-frame gaps."""
    n = int(rng.integers(cfg.instances_per_video[0], cfg.instances_per_video[1] + 1))
    placed = []  # (start, end, label, band)
    rejections = 0
    for _ in range(n):
        while True:
            length, band = sample_instance_length(rng, cfg.duration_bands)
            if length > cfg.video_length:
                rejections += 1
            else:
                start = int(rng.integers(0, cfg.video_length - length + 1))
                end = start + length
                ok = all(start >= e + MIN_INSTANCE_GAP or end <= s - MIN_INSTANCE_GAP for s, e, _, _ in placed)
                if ok:
                    label = int(rng.integers(1, cfg.num_classes + 1))
                    placed.append((start, end, label, band))
                    break
                rejections += 1
            if rejections > 1000:
                raise ConfigError(
                    f"video {video_id!r}: could not place {n} instances after 1000 rejections; "
                    "reduce instances_per_video or band lengths"
                )
    placed.sort()
    return placed


def class_signatures(cfg: SynthConfig) -> np.ndarray:
    """The fixed per-class unit signature vectors (seeded, drawn first)."""
    rng = np.random.default_rng([cfg.seed, 0])
    sigs = rng.standard_normal((cfg.num_classes, cfg.feature_dim))
    return sigs / np.linalg.norm(sigs, axis=1, keepdims=True)


def generate_synthetic(cfg: SynthConfig, out_dir) -> dict:
    """Write a full synthetic dataset (TFPV features, annotations, labels).

    Returns a summary dict: videos per subset, instance counts per band.
    """
    out_dir = Path(out_dir)
    (out_dir / "features").mkdir(parents=True, exist_ok=True)
    labels = [f"activity_{i:02d}" for i in range(cfg.num_classes)]
    sigs = class_signatures(cfg)
    n_val = int(round(cfg.num_videos * cfg.val_fraction))
    n_train = cfg.num_videos - n_val
    records: dict[str, VideoRecord] = {}
    band_counts = [0] * len(cfg.duration_bands)
    for v in range(cfg.num_videos):
        vid = f"video_{v:04d}"
        rng = np.random.default_rng([cfg.seed, 1, v])
        placed = _place_instances(rng, cfg, vid)
        feats = rng.standard_normal((cfg.feature_dim, cfg.video_length)) * cfg.noise_sigma
        anns = []
        for start, end, label, band in placed:
            feats[:, start:end] += cfg.signal_amplitude * sigs[label - 1][:, None]
            anns.append(Activity(float(start), float(end), label))
            band_counts[band] += 1
        feats = feats.astype(np.float32).astype(np.float64)  # dataset truth is the f32 file
        save_features(feats, out_dir / "features" / f"{vid}.tfpv")
        records[vid] = VideoRecord(
            video_id=vid,
            num_frames=cfg.video_length,
            annotations=anns,
            fps=cfg.fps,
            subset="train" if v < n_train else "val",
        )
    save_annotations(records, out_dir / "annotations.json", labels)
    save_label_index(labels, out_dir / "labels.json")
    return {
        "videos": cfg.num_videos,
        "train_videos": n_train,
        "val_videos": n_val,
        "instances_per_band": band_counts,
        "classes": labels,
    }


def load_dataset(data_dir) -> tuple[dict[str, VideoRecord], list[str]]:
    """Load a dataset directory (annotations + labels + features) eagerly."""
    data_dir = Path(data_dir)
    labels = load_label_index(data_dir / "labels.json")
    records, _ = load_annotations(data_dir / "annotations.json", label_index=labels)
    for vid, rec in records.items():
        feats = load_features(data_dir / "features" / f"{vid}.tfpv")
        if feats.shape[1] != rec.num_frames:
            raise DataError(
                f"video {vid!r}: feature file has {feats.shape[1]} frames, annotations say {rec.num_frames}"
            )
        rec.features = feats
    return records, labels
