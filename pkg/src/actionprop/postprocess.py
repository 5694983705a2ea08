"""Two-stage boundary adjustment and ensemble fusion.

Inference-time order: PEM re-ranking, then Gaussian soft-NMS, then watershed
(TAG) region snapping. Every operation is a per-video pure function.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .data import ActionnessCurve, ProposalRecord, TemporalSegment
from .errors import ContractError
from .losses import segment_iou
from .util import from_mapping


@dataclass
class NmsConfig:
    sigma: float = 0.5
    score_floor: float = 1e-3
    max_kept: int = 100

    def __post_init__(self):
        if self.sigma <= 0 or self.max_kept < 1:
            raise ContractError("sigma must be positive and max_kept >= 1")

    @classmethod
    def from_dict(cls, doc):
        return from_mapping(cls, doc, "nms config")


@dataclass
class TagConfig:
    thresholds: tuple[float, ...] = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9)
    merge_gap_ratio: float = 0.3
    snap_window: float = 0.05

    def __post_init__(self):
        self.thresholds = tuple(float(t) for t in self.thresholds)
        if not self.thresholds or any(
            not (0.0 < t < 1.0) for t in self.thresholds
        ) or any(b <= a for a, b in zip(self.thresholds, self.thresholds[1:])):
            raise ContractError("thresholds must be strictly ascending in (0, 1)")
        if not (0.0 < self.snap_window < 1.0):
            raise ContractError("snap_window must lie in (0, 1)")

    @classmethod
    def from_dict(cls, doc):
        return from_mapping(cls, doc, "tag config")


# ------------------------------------------------------------------ soft-NMS


def soft_nms(proposals: list[ProposalRecord], cfg: NmsConfig) -> list[ProposalRecord]:
    """Gaussian soft suppression: decay overlapping scores by exp(-iou^2 / sigma).

    Scores never increase, segment geometry is untouched, and at most
    ``max_kept`` proposals survive the ``score_floor``.
    """
    if not proposals:
        return []
    starts = np.array([p.segment.start for p in proposals])
    ends = np.array([p.segment.end for p in proposals])
    scores = np.array([float(p.score) for p in proposals])
    alive = np.ones(len(proposals), dtype=bool)
    picked: list[tuple[int, float]] = []
    while alive.any() and len(picked) < cfg.max_kept:
        candidates = np.flatnonzero(alive)
        order = np.lexsort((ends[candidates], starts[candidates], -scores[candidates]))
        best = candidates[order[0]]
        picked.append((best, float(scores[best])))
        alive[best] = False
        rest = np.flatnonzero(alive)
        if rest.size == 0:
            break
        inter = np.minimum(ends[rest], ends[best]) - np.maximum(starts[rest], starts[best])
        inter = np.maximum(inter, 0.0)
        union = (ends[rest] - starts[rest]) + (ends[best] - starts[best]) - inter
        iou = np.where(inter > 0, inter / union, 0.0)
        scores[rest] = scores[rest] * np.exp(-(iou * iou) / cfg.sigma)
        alive[rest] = scores[rest] >= cfg.score_floor
    out = [proposals[i].with_stage("post_nms", s) for i, s in picked]
    return sorted(out, key=lambda r: (-r.score, r.segment.start, r.segment.end))


# ----------------------------------------------------------------------- PEM


@dataclass
class PemConfig:
    n_inner: int = 16
    n_boundary: int = 8
    hidden: int = 64
    epochs: int = 80
    learning_rate: float = 1e-2
    seed: int = 0

    @property
    def feature_length(self) -> int:
        return self.n_inner + 2 * self.n_boundary

    @classmethod
    def from_dict(cls, doc):
        return from_mapping(cls, doc, "pem config")


class PemModel:
    """Two-layer perceptron scoring proposals from sampled actionness.

    ``oracle_mode`` bypasses the network and returns the true IoU against
    ground truth; it exists so the re-ranking logic is testable independently
    of PEM training quality.
    """

    def __init__(self, cfg: PemConfig, oracle_mode: bool = False):
        self.cfg = cfg
        self.oracle_mode = oracle_mode
        rng = np.random.default_rng(cfg.seed)
        f, h = cfg.feature_length, cfg.hidden
        self.params = {
            "pem/w1": ad.Parameter("pem/w1", rng.uniform(-1, 1, size=(f, h)) / np.sqrt(f)),
            "pem/b1": ad.Parameter("pem/b1", np.zeros(h)),
            "pem/w2": ad.Parameter("pem/w2", rng.uniform(-1, 1, size=(h, 1)) / np.sqrt(h)),
            "pem/b2": ad.Parameter("pem/b2", np.zeros(1)),
        }

    def forward(self, x: ad.Tensor) -> ad.Tensor:
        p = self.params
        h = ad.relu(ad.add(ad.matmul(x, p["pem/w1"]), p["pem/b1"].data))
        out = ad.add(ad.matmul(h, p["pem/w2"]), p["pem/b2"].data)
        return ad.sigmoid(out)

    def predict(self, features: np.ndarray) -> np.ndarray:
        """Scores in (0, 1) for a [n, feature_length] matrix."""
        return self.forward(ad.Tensor(features)).data[:, 0]

    def parameters(self):
        return list(self.params.values())

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.params.items()}

    def load_state(self, arrays) -> None:
        for k, p in self.params.items():
            arr = np.asarray(arrays[k], dtype=np.float64)
            if arr.shape != p.data.shape:
                raise ContractError(f"{k}: shape {arr.shape} != {p.data.shape}")
            p.data = arr.copy()


def pem_features(actionness: ActionnessCurve, segment: TemporalSegment,
                 n_inner: int = 16, n_boundary: int = 8) -> np.ndarray:
    """Sampled-actionness proposal descriptor: inner span plus both boundaries."""
    v = actionness.values
    t = v.size
    centers = (np.arange(t) + 0.5) / t
    d = segment.width
    points = np.concatenate([
        np.linspace(segment.start, segment.end, n_inner),
        np.linspace(segment.start - d / 5.0, segment.start + d / 5.0, n_boundary),
        np.linspace(segment.end - d / 5.0, segment.end + d / 5.0, n_boundary),
    ])
    points = np.clip(points, 0.0, 1.0)
    return np.interp(points, centers, v)


def pem_training_matrix(proposals, actionness, gts, cfg: PemConfig):
    """Feature matrix and true-IoU targets for fitting the scorer."""
    rows, targets = [], []
    for rec in proposals:
        curve = actionness[rec.video_id]
        rows.append(pem_features(curve, rec.segment, cfg.n_inner, cfg.n_boundary))
        gt_list = gts.get(rec.video_id, [])
        best = max((segment_iou(rec.segment, g) for g in gt_list), default=0.0)
        targets.append(best)
    return np.asarray(rows), np.asarray(targets)


def train_pem(cfg: PemConfig, proposals, actionness, gts) -> PemModel:
    """Fit the scorer by smooth-L1 regression onto true IoU."""
    from .training import Adam  # local import to avoid a module cycle

    pem = PemModel(cfg)
    x, y = pem_training_matrix(proposals, actionness, gts, cfg)
    if x.size == 0:
        raise ContractError("no proposals to train the PEM scorer on")
    optimizer = Adam(pem.parameters(), cfg.learning_rate)
    for _ in range(cfg.epochs):
        for p in pem.parameters():
            p.grad = None
        tape = ad.Tape()
        out = pem.forward(ad.Tensor(x, tape))
        loss = ad.mean(ad.smooth_l1(out, y[:, None]))
        ad.backward(loss, params=pem.parameters())
        optimizer.step()
    return pem


def pem_rerank(
    pem: PemModel,
    proposals_by_video: dict[str, list[ProposalRecord]],
    actionness: dict[str, ActionnessCurve],
    gts: dict[str, list[TemporalSegment]] | None = None,
) -> tuple[dict[str, list[ProposalRecord]], dict[str, str]]:
    """Multiply raw confidence by the PEM score and re-sort.

    Videos lacking an actionness curve are skipped and reported in the second
    return value; other videos are unaffected. ``gts`` is required only in
    oracle mode.
    """
    if pem.oracle_mode and gts is None:
        raise ContractError("oracle-mode re-ranking needs ground-truth segments")
    out: dict[str, list[ProposalRecord]] = {}
    failures: dict[str, str] = {}
    for video_id, records in proposals_by_video.items():
        if not records:
            out[video_id] = []
            continue
        if video_id not in actionness and not pem.oracle_mode:
            failures[video_id] = "missing actionness curve"
            continue
        if pem.oracle_mode:
            gt_list = gts.get(video_id, [])
            scores = np.array([
                max((segment_iou(r.segment, g) for g in gt_list), default=0.0)
                for r in records
            ])
        else:
            rows = np.stack([
                pem_features(actionness[video_id], r.segment, pem.cfg.n_inner, pem.cfg.n_boundary)
                for r in records
            ])
            scores = pem.predict(rows)
        reranked = []
        for rec, s in zip(records, scores):
            raw = rec.stage_scores.get("raw_conf", rec.score)
            reranked.append(rec.with_stage("pem", raw * float(s)))
        out[video_id] = sorted(reranked, key=lambda r: (-r.score, r.segment.start, r.segment.end))
    return out, failures


# ------------------------------------------------------------- TAG watershed


def tag_regions(actionness: ActionnessCurve, cfg: TagConfig) -> list[TemporalSegment]:
    """Multi-threshold grouping of high-actionness runs into candidate regions.

    For each threshold, maximal runs of snippets at or above it become
    fragments. Every fragment is a candidate region, and adjacent fragments
    whose gap/(merged span) stays within ``merge_gap_ratio`` additionally
    contribute their merged span as a candidate (chained left to right), so
    a dip inside one action and a true inter-action gap both keep their
    boundary hypotheses. Candidates from all thresholds are pooled,
    deduplicated, and emitted snippet-aligned.
    """
    v = actionness.values
    t = v.size
    seen: set[tuple[int, int]] = set()
    for tau in cfg.thresholds:
        runs = _runs(v >= tau)
        seen.update(runs)
        if len(runs) < 2:
            continue
        chain_start, chain_end = runs[0]
        for a, b in runs[1:]:
            gap = a - chain_end - 1
            span = b - chain_start + 1
            if gap / span <= cfg.merge_gap_ratio:
                chain_end = b
                seen.add((chain_start, chain_end))
            else:
                chain_start, chain_end = a, b
    return [
        TemporalSegment(a / t, (b + 1) / t)
        for a, b in sorted(seen)
    ]


def _runs(mask: np.ndarray) -> list[tuple[int, int]]:
    if not mask.any():
        return []
    padded = np.concatenate([[False], mask, [False]])
    edges = np.flatnonzero(padded[1:] != padded[:-1])
    return [(int(edges[i]), int(edges[i + 1]) - 1) for i in range(0, edges.size, 2)]


def snap_boundaries(
    proposals: list[ProposalRecord],
    regions: list[TemporalSegment],
    cfg: TagConfig,
) -> list[ProposalRecord]:
    """Move each proposal boundary to the nearest same-kind region boundary.

    Only boundaries within ``snap_window`` move; distance ties go to the
    region with the higher IoU against the proposal. An adjustment that would
    invert the segment is discarded. Scores are untouched.
    """
    if not regions:
        return list(proposals)
    out = []
    for rec in proposals:
        new_start = _snap_one(rec.segment.start, rec.segment, regions, cfg, kind="start")
        new_end = _snap_one(rec.segment.end, rec.segment, regions, cfg, kind="end")
        if new_start < new_end:
            out.append(rec.with_segment(TemporalSegment(new_start, new_end)))
        else:
            out.append(rec)
    return out


def _snap_one(value, proposal_segment, regions, cfg, kind):
    best = None
    for region in regions:
        boundary = region.start if kind == "start" else region.end
        distance = abs(boundary - value)
        if distance > cfg.snap_window:
            continue
        iou = segment_iou(region, proposal_segment)
        key = (distance, -iou, boundary)
        if best is None or key < best[0]:
            best = (key, boundary)
    return value if best is None else best[1]


# ------------------------------------------------------------------ ensemble


@dataclass
class EnsembleResult:
    fused: dict[str, list[ProposalRecord]]
    missing_warnings: int = 0
    sources: list[str] = field(default_factory=list)


def ensemble_fuse(
    lists: list[dict[str, list[ProposalRecord]]],
    cfg: NmsConfig,
    source_names: list[str] | None = None,
) -> EnsembleResult:
    """Min-max normalize each source per video, pool, then soft-NMS.

    A constant-score source normalizes to zero everywhere (so an all-zero
    source can never displace scored proposals). Videos present in only some
    sources are fused from what is available and counted as warnings.
    """
    if len(lists) < 1:
        raise ContractError("ensemble needs at least one proposal list")
    names = source_names or [f"src{i}" for i in range(len(lists))]
    all_videos = sorted({vid for lst in lists for vid in lst})
    fused: dict[str, list[ProposalRecord]] = {}
    warnings = 0
    for vid in all_videos:
        present = [(name, lst[vid]) for name, lst in zip(names, lists) if vid in lst]
        if len(present) < len(lists):
            warnings += 1
        pooled: list[ProposalRecord] = []
        for name, records in present:
            if not records:
                continue
            scores = np.array([r.score for r in records])
            lo, hi = scores.min(), scores.max()
            normed = (scores - lo) / (hi - lo) if hi > lo else np.zeros_like(scores)
            for r, s in zip(records, normed):
                pooled.append(
                    ProposalRecord(
                        video_id=r.video_id,
                        segment=r.segment,
                        score=float(s),
                        stage_scores={**r.stage_scores, "ensemble": float(s)},
                        source=f"{name}:{r.source}",
                    )
                )
        fused[vid] = soft_nms(pooled, cfg)
    return EnsembleResult(fused=fused, missing_warnings=warnings, sources=names)
