"""File formats, temporal rescaling, and the synthetic feature corpus.

All segments are normalized to [0, 1] at ingest; everything downstream is
unit-free. Feature maps are stored as float32 (the on-disk payload width);
the model promotes to float64 at its boundary.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ContractError, FormatError, GenerationError, IngestError

FEATURE_MAGIC = b"RAPF"
FEATURE_VERSION = 1
SUBSETS = ("training", "validation", "testing")


@dataclass(frozen=True)
class TemporalSegment:
    """Normalized [start, end) interval inside a video."""

    start: float
    end: float

    def __post_init__(self):
        if not (0.0 <= self.start < self.end <= 1.0):
            raise ContractError(
                f"segment must satisfy 0 <= start < end <= 1, got ({self.start}, {self.end})"
            )

    @property
    def width(self) -> float:
        return self.end - self.start


@dataclass
class VideoAnnotation:
    video_id: str
    duration_seconds: float
    subset: str
    segments: list[TemporalSegment] = field(default_factory=list)

    def __post_init__(self):
        if self.duration_seconds <= 0:
            raise IngestError(f"video {self.video_id!r}: non-positive duration")
        if self.subset not in SUBSETS:
            raise IngestError(f"video {self.video_id!r}: unknown subset {self.subset!r}")


class AnnotationDb(dict):
    """video_id -> VideoAnnotation, plus the clamp-warning tally from ingest."""

    clamp_warnings: int = 0


@dataclass
class FeatureMap:
    video_id: str
    values: np.ndarray  # [T', D] float32

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=np.float32)
        if self.values.ndim != 2 or 0 in self.values.shape:
            raise ContractError(f"feature map must be a non-empty matrix, got {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ContractError(f"feature map for {self.video_id!r} contains non-finite values")

    @property
    def t_prime(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[1]


@dataclass
class ActionnessCurve:
    """Per-snippet probability of lying inside an action instance."""

    video_id: str
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 1:
            raise ContractError("actionness curve must be one-dimensional")
        if np.any(self.values < 0) or np.any(self.values > 1):
            raise ContractError(f"actionness for {self.video_id!r} leaves [0, 1]")


@dataclass
class ProposalRecord:
    video_id: str
    segment: TemporalSegment
    score: float
    stage_scores: dict[str, float] = field(default_factory=dict)
    source: str = "model"

    def with_stage(self, stage: str, value: float) -> "ProposalRecord":
        """Return a copy whose score is the newly populated stage value."""
        stages = dict(self.stage_scores)
        stages[stage] = float(value)
        return replace(self, score=float(value), stage_scores=stages)

    def with_segment(self, segment: TemporalSegment) -> "ProposalRecord":
        return replace(self, segment=segment)


@dataclass
class SyntheticSpec:
    num_videos: int
    feature_dim: int = 256
    mean_instances_per_video: float = 2.0
    duration_range: tuple[float, float] = (0.08, 0.3)
    actionness_noise_sigma: float = 0.0
    seed: int = 0
    temporal_length: int = 128
    validation_fraction: float = 0.2

    def __post_init__(self):
        lo, hi = self.duration_range
        if not (0.0 < lo < hi <= 1.0):
            raise ContractError(f"duration_range must satisfy 0 < low < high <= 1, got {self.duration_range}")
        if self.num_videos < 1 or self.feature_dim < 1 or self.temporal_length < 2:
            raise ContractError("num_videos, feature_dim and temporal_length must be positive")
        if self.mean_instances_per_video <= 0 or self.actionness_noise_sigma < 0:
            raise ContractError("instance mean must be positive, noise sigma nonnegative")
        if not (0.0 <= self.validation_fraction < 1.0):
            raise ContractError("validation_fraction must lie in [0, 1)")


@dataclass
class SyntheticCorpus:
    annotations: AnnotationDb
    features: dict[str, FeatureMap]
    actionness: dict[str, ActionnessCurve]

    def subset_ids(self, subset: str) -> list[str]:
        return [vid for vid, ann in self.annotations.items() if ann.subset == subset]


# ------------------------------------------------------------------ ingest


def load_annotations(path) -> AnnotationDb:
    """Read an ActivityNet-style annotation JSON into normalized segments.

    Segments given in seconds are divided by the video duration; anything
    poking outside [0, duration] is clamped and counted in the returned
    database's ``clamp_warnings``.
    """
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError:
        raise IngestError(f"annotation file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise IngestError(f"malformed JSON in {path}: {exc}") from None
    if not isinstance(raw, dict) or "database" not in raw:
        raise IngestError(f"{path}: missing top-level 'database' key")

    db = AnnotationDb()
    clamped = 0
    for video_id, entry in raw["database"].items():
        try:
            duration = float(entry["duration"])
            subset = entry["subset"]
            annotations = entry.get("annotations", [])
        except (KeyError, TypeError, ValueError) as exc:
            raise IngestError(f"{path}: bad entry for video {video_id!r}: {exc}") from None
        if duration <= 0:
            raise IngestError(f"{path}: video {video_id!r} has non-positive duration {duration}")
        segments = []
        for ann in annotations:
            s_sec, e_sec = float(ann["segment"][0]), float(ann["segment"][1])
            s, e = s_sec / duration, e_sec / duration
            cs, ce = max(0.0, s), min(1.0, e)
            if (cs, ce) != (s, e):
                clamped += 1
            if cs < ce:
                segments.append(TemporalSegment(cs, ce))
        db[video_id] = VideoAnnotation(video_id, duration, subset, segments)
    db.clamp_warnings = clamped
    return db


def save_annotations(path, annotations: dict[str, VideoAnnotation]) -> None:
    """Write annotations back to the ActivityNet-style JSON schema (seconds)."""
    database = {}
    for video_id in sorted(annotations):
        ann = annotations[video_id]
        database[video_id] = {
            "duration": round(ann.duration_seconds, 6),
            "subset": ann.subset,
            "annotations": [
                {
                    "segment": [
                        round(seg.start * ann.duration_seconds, 6),
                        round(seg.end * ann.duration_seconds, 6),
                    ],
                    "label": "synthetic",
                }
                for seg in ann.segments
            ],
        }
    Path(path).write_text(json.dumps({"database": database}, indent=1, sort_keys=True))


# --------------------------------------------------------------- rescaling


def rescale_features(f: FeatureMap, target_t: int = 128) -> FeatureMap:
    """Linearly resample the time axis to ``target_t`` snippets.

    Identity when the lengths already match; constant columns stay constant
    bit-for-bit because interpolation uses the a + w*(b-a) form.
    """
    if target_t < 1:
        raise ContractError(f"target temporal length must be >= 1, got {target_t}")
    v = f.values
    if f.t_prime == target_t:
        return FeatureMap(f.video_id, v.copy())
    if f.t_prime == 1:
        return FeatureMap(f.video_id, np.repeat(v, target_t, axis=0))
    src = v.astype(np.float64)
    pos = np.linspace(0.0, f.t_prime - 1, num=target_t)
    j0 = np.minimum(pos.astype(np.int64), f.t_prime - 2)
    w = (pos - j0)[:, None]
    out = src[j0] + w * (src[j0 + 1] - src[j0])
    return FeatureMap(f.video_id, out.astype(np.float32))


# --------------------------------------------------------- synthetic corpus

# feature layout: the first block of dimensions carries the inside/outside
# signal, the second block carries boundary bumps, the rest is noise only
_SIGNAL_FRACTION = 8


def triangular_blur(values: np.ndarray, base_snippets: float = 1.0) -> np.ndarray:
    """Convolve with a triangular kernel of the given base width (in snippets).

    A base of one snippet samples to the identity on the snippet grid, so
    binary curves keep their exact threshold crossings.
    """
    radius = base_snippets / 2.0
    offsets = np.arange(-int(np.ceil(radius)), int(np.ceil(radius)) + 1)
    weights = np.maximum(0.0, 1.0 - np.abs(offsets) / radius)
    weights = weights[weights > 0]
    if weights.size <= 1:
        return values.astype(np.float64).copy()
    weights = weights / weights.sum()
    half = (weights.size - 1) // 2
    padded = np.pad(values.astype(np.float64), half)
    return np.convolve(padded, weights, mode="valid")


def instance_snippet_range(segment: TemporalSegment, t: int) -> tuple[int, int]:
    """Inclusive snippet index range covered by a segment at resolution t."""
    first = int(np.floor(segment.start * t))
    last = int(np.ceil(segment.end * t)) - 1
    return first, last


def generate_synthetic_corpus(spec: SyntheticSpec) -> SyntheticCorpus:
    """Deterministically build annotations, features and oracle actionness.

    Instance boundaries are snapped to the snippet grid and kept at least one
    snippet away from the video edges, with a fixed minimum gap between
    instances, so watershed grouping can recover them exactly.
    """
    t = spec.temporal_length
    d = spec.feature_dim
    block = max(1, d // _SIGNAL_FRACTION)
    min_gap = 4  # snippets between instances
    n_val = int(round(spec.num_videos * spec.validation_fraction))
    n_train = spec.num_videos - n_val

    annotations = AnnotationDb()
    features: dict[str, FeatureMap] = {}
    actionness: dict[str, ActionnessCurve] = {}

    children = np.random.SeedSequence(spec.seed).spawn(spec.num_videos)
    for idx, child in enumerate(children):
        rng = np.random.default_rng(child)
        video_id = f"v{idx:05d}"
        duration = float(rng.uniform(60.0, 180.0))
        count = int(np.clip(rng.poisson(spec.mean_instances_per_video), 1, 4))

        segments = _place_instances(rng, spec, count, t, min_gap, idx)
        mask = np.zeros(t)
        bumps = np.zeros(t)
        for seg in segments:
            first, last = instance_snippet_range(seg, t)
            mask[first : last + 1] = 1.0
            for edge in (first, last):
                for off in (-1, 0, 1):
                    if 0 <= edge + off < t:
                        bumps[edge + off] = max(bumps[edge + off], 1.0 - 0.5 * abs(off))

        curve = triangular_blur(mask, base_snippets=1.0)
        values = np.zeros((t, d))
        values[:, :block] = np.where(mask[:, None] > 0.5, 1.0, -1.0)
        values[:, block : 2 * block] = bumps[:, None]
        if spec.actionness_noise_sigma > 0:
            values += rng.normal(0.0, spec.actionness_noise_sigma, size=(t, d))

        subset = "training" if idx < n_train else "validation"
        annotations[video_id] = VideoAnnotation(video_id, duration, subset, segments)
        features[video_id] = FeatureMap(video_id, values)
        actionness[video_id] = ActionnessCurve(video_id, np.clip(curve, 0.0, 1.0))

    return SyntheticCorpus(annotations, features, actionness)


def _place_instances(rng, spec, count, t, min_gap, video_index):
    lo, hi = spec.duration_range
    usable = t - 2  # one-snippet margin at each edge
    for _ in range(100):
        widths = [max(1, int(round(rng.uniform(lo, hi) * t))) for _ in range(count)]
        slack = usable - sum(widths) - (count - 1) * min_gap
        if slack < 0:
            continue
        offsets = np.sort(rng.integers(0, slack + 1, size=count))
        segments = []
        cursor = 1
        for i, w in enumerate(widths):
            start = cursor + int(offsets[i]) - (int(offsets[i - 1]) if i else 0)
            segments.append(TemporalSegment(start / t, (start + w) / t))
            cursor = start + w + min_gap
        return segments
    raise GenerationError(f"could not place {count} instances for video {video_index}")


# ------------------------------------------------------------ feature files


def write_feature_file(path, f: FeatureMap) -> None:
    header = FEATURE_MAGIC + struct.pack("<III", FEATURE_VERSION, f.t_prime, f.dim)
    payload = f.values.astype("<f4").tobytes()
    Path(path).write_bytes(header + payload)


def read_feature_file(path, video_id: str | None = None) -> FeatureMap:
    try:
        blob = Path(path).read_bytes()
    except FileNotFoundError:
        raise IngestError(f"feature file not found: {path}") from None
    if blob[:4] != FEATURE_MAGIC:
        raise FormatError(f"{path}: bad magic at byte 0: {blob[:4]!r}")
    if len(blob) < 16:
        raise FormatError(f"{path}: truncated header at byte {len(blob)}")
    version, t, d = struct.unpack("<III", blob[4:16])
    if version != FEATURE_VERSION:
        raise FormatError(f"{path}: unsupported version {version} at byte 4")
    expected = 16 + t * d * 4
    if len(blob) != expected:
        raise FormatError(f"{path}: payload ends at byte {len(blob)}, expected {expected}")
    values = np.frombuffer(blob, dtype="<f4", offset=16).reshape(t, d)
    if video_id is None:
        video_id = Path(path).stem
    return FeatureMap(video_id, values.copy())


# ------------------------------------------------------------ proposal files


def _round6(x: float) -> float:
    return round(float(x), 6)


def sort_proposals(records: list[ProposalRecord]) -> list[ProposalRecord]:
    """Descending score, ties broken by (start, end) ascending."""
    return sorted(records, key=lambda r: (-r.score, r.segment.start, r.segment.end))


def write_proposals(path, records: list[ProposalRecord]) -> None:
    """Write the challenge-style results JSON, scores quantized to 6 decimals."""
    by_video: dict[str, list[ProposalRecord]] = {}
    for rec in records:
        by_video.setdefault(rec.video_id, []).append(rec)
    results = {}
    for video_id in sorted(by_video):
        results[video_id] = [
            {
                "segment": [_round6(r.segment.start), _round6(r.segment.end)],
                "score": _round6(r.score),
                "stage_scores": {k: _round6(v) for k, v in r.stage_scores.items()},
                "source": r.source,
            }
            for r in sort_proposals(by_video[video_id])
        ]
    doc = {"version": "1.0", "results": results}
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True))


def read_proposals(path) -> dict[str, list[ProposalRecord]]:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError:
        raise IngestError(f"proposal file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise IngestError(f"malformed JSON in {path}: {exc}") from None
    if "results" not in raw:
        raise IngestError(f"{path}: missing 'results' key")
    out: dict[str, list[ProposalRecord]] = {}
    for video_id, items in raw["results"].items():
        records = []
        for item in items:
            seg = TemporalSegment(float(item["segment"][0]), float(item["segment"][1]))
            records.append(
                ProposalRecord(
                    video_id=video_id,
                    segment=seg,
                    score=float(item["score"]),
                    stage_scores={k: float(v) for k, v in item.get("stage_scores", {}).items()},
                    source=item.get("source", "external"),
                )
            )
        out[video_id] = records
    return out


# ---------------------------------------------------------- actionness files


def write_actionness(path, curves: dict[str, ActionnessCurve]) -> None:
    doc = {vid: [_round6(v) for v in curves[vid].values] for vid in sorted(curves)}
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True))


def read_actionness(path) -> dict[str, ActionnessCurve]:
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise IngestError(f"actionness file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise IngestError(f"malformed JSON in {path}: {exc}") from None
    return {vid: ActionnessCurve(vid, np.asarray(vals)) for vid, vals in raw.items()}
