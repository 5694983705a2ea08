"""Challenge-style proposal evaluation: recall@AN, the AR-AN curve, and AUC.

Metrics depend only on score ranks. Ties are broken by (start, end)
ascending before truncating to the top AN, so results are deterministic for
any input order. Report emission is byte-stable given identical inputs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import matplotlib
import numpy as np

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be pinned first)

from .data import ProposalRecord, TemporalSegment  # noqa: E402
from .errors import ContractError, EvaluationError  # noqa: E402

DEFAULT_TIOU_GRID = (0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95)
DEFAULT_AN_MAX = 100
REPORT_AR_POINTS = (1, 5, 10, 100)

# deterministic SVG output: fixed id salt, no creation date
plt.rcParams["svg.hashsalt"] = "actionprop"


@dataclass
class RecallCurve:
    an_values: list[int]
    ar_values: list[float]
    tiou_grid: tuple[float, ...]

    def __post_init__(self):
        if len(self.an_values) != len(self.ar_values):
            raise ContractError("AN and AR lengths differ")

    def ar_at(self, an: int) -> float:
        return self.ar_values[self.an_values.index(an)]


@dataclass
class EvalReport:
    metrics: dict[str, float]
    curve: RecallCurve
    per_video: dict[str, dict] = field(default_factory=dict)
    config: dict = field(default_factory=dict)


def _ranked(records: list[ProposalRecord]) -> list[TemporalSegment]:
    ordered = sorted(records, key=lambda r: (-r.score, r.segment.start, r.segment.end))
    return [r.segment for r in ordered]


def recall_at(
    proposals_by_video: dict[str, list[ProposalRecord]],
    gts_by_video: dict[str, list[TemporalSegment]],
    tiou: float,
    an: int,
) -> float:
    """Fraction of ground truths recovered by any top-``an`` proposal.

    A gt counts as recovered when some top-an proposal of its video reaches
    at least ``tiou`` overlap; videos without gts contribute nothing.
    """
    if an < 1:
        raise ContractError(f"an must be >= 1, got {an}")
    recovered = 0
    total = 0
    for video_id, gts in gts_by_video.items():
        if not gts:
            continue
        total += len(gts)
        segments = _ranked(proposals_by_video.get(video_id, []))[:an]
        for gt in gts:
            for seg in segments:
                inter = min(seg.end, gt.end) - max(seg.start, gt.start)
                if inter > 0:
                    union = seg.width + gt.width - inter
                    if inter / union >= tiou:
                        recovered += 1
                        break
    if total == 0:
        raise EvaluationError("corpus has no ground-truth instances")
    return recovered / total


def average_recall_curve(
    proposals_by_video: dict[str, list[ProposalRecord]],
    gts_by_video: dict[str, list[TemporalSegment]],
    tiou_grid: tuple[float, ...] = DEFAULT_TIOU_GRID,
    an_max: int = DEFAULT_AN_MAX,
) -> RecallCurve:
    """AR(an) = mean recall over the tIoU grid, for an = 1..an_max."""
    if not gts_by_video or all(not g for g in gts_by_video.values()):
        raise EvaluationError("cannot evaluate an empty corpus")
    total = sum(len(g) for g in gts_by_video.values())

    # per video: best-so-far IoU of each gt after the top-p proposals
    cummax_per_video = []
    for video_id, gts in gts_by_video.items():
        if not gts:
            continue
        segments = _ranked(proposals_by_video.get(video_id, []))[:an_max]
        g = len(gts)
        gt_start = np.array([x.start for x in gts])
        gt_end = np.array([x.end for x in gts])
        if segments:
            ps = np.array([s.start for s in segments])[:, None]
            pe = np.array([s.end for s in segments])[:, None]
            inter = np.maximum(np.minimum(pe, gt_end) - np.maximum(ps, gt_start), 0.0)
            union = (pe - ps) + (gt_end - gt_start) - inter
            iou = np.where(inter > 0, inter / union, 0.0)
            best = np.maximum.accumulate(iou, axis=0)
        else:
            best = np.zeros((0, g))
        cummax_per_video.append(best)

    an_values = list(range(1, an_max + 1))
    ar_values = []
    for an in an_values:
        recalls = []
        for tiou in tiou_grid:
            recovered = 0
            for best in cummax_per_video:
                if best.shape[0]:
                    row = best[min(an, best.shape[0]) - 1]
                    recovered += int((row >= tiou).sum())
            recalls.append(recovered / total)
        ar_values.append(sum(recalls) / len(recalls))
    return RecallCurve(an_values, ar_values, tuple(tiou_grid))


def auc(curve: RecallCurve) -> float:
    """Trapezoidal area under AR over the AN span, as a percentage."""
    an, ar = curve.an_values, curve.ar_values
    if len(an) < 2:
        return float(ar[0]) * 100.0 if ar else 0.0
    acc = 0.0
    for i in range(len(an) - 1):
        acc += (ar[i] + ar[i + 1]) / 2.0 * (an[i + 1] - an[i])
    return acc / (an[-1] - an[0]) * 100.0


def build_report(
    proposals_by_video,
    gts_by_video,
    tiou_grid=DEFAULT_TIOU_GRID,
    an_max=DEFAULT_AN_MAX,
    config: dict | None = None,
) -> EvalReport:
    curve = average_recall_curve(proposals_by_video, gts_by_video, tiou_grid, an_max)
    metrics = {f"AR@{k}": curve.ar_at(k) for k in REPORT_AR_POINTS if k <= an_max}
    metrics["AUC"] = auc(curve)
    per_video = {}
    for video_id, gts in gts_by_video.items():
        if not gts:
            per_video[video_id] = {"gts": 0, "recall_at_max_an": None}
            continue
        segments = _ranked(proposals_by_video.get(video_id, []))[:an_max]
        hits = []
        for tiou in tiou_grid:
            recovered = 0
            for gt in gts:
                if any(
                    _pair_iou(seg, gt) >= tiou for seg in segments
                ):
                    recovered += 1
            hits.append(recovered / len(gts))
        per_video[video_id] = {
            "gts": len(gts),
            "recall_at_max_an": sum(hits) / len(hits),
        }
    return EvalReport(metrics=metrics, curve=curve, per_video=per_video, config=config or {})


def _pair_iou(a: TemporalSegment, b: TemporalSegment) -> float:
    inter = min(a.end, b.end) - max(a.start, b.start)
    if inter <= 0:
        return 0.0
    return inter / (a.width + b.width - inter)


def emit_report(report: EvalReport, out_dir) -> list[Path]:
    """Write metrics.json, ar_curve.csv and an SVG plot of the AR-AN curve."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        paths = []

        metrics_path = out / "metrics.json"
        doc = {
            "metrics": report.metrics,
            "tiou_grid": list(report.curve.tiou_grid),
            "per_video": report.per_video,
            "config": report.config,
        }
        metrics_path.write_text(json.dumps(doc, indent=1, sort_keys=True))
        paths.append(metrics_path)

        csv_path = out / "ar_curve.csv"
        lines = ["an,ar"]
        for an, ar in zip(report.curve.an_values, report.curve.ar_values):
            lines.append(f"{an},{ar:.6f}")
        csv_path.write_text("\n".join(lines) + "\n")
        paths.append(csv_path)

        svg_path = out / "ar_curve.svg"
        fig, ax = plt.subplots(figsize=(6.0, 4.0))
        ax.plot(report.curve.an_values, report.curve.ar_values, lw=1.5, color="#1f6fb2")
        ax.set_xlabel("average number of proposals")
        ax.set_ylabel("average recall")
        ax.set_ylim(0.0, 1.02)
        ax.set_title(f"AR-AN (AUC {report.metrics.get('AUC', 0.0):.2f}%)")
        ax.grid(True, alpha=0.3)
        fig.tight_layout()
        fig.savefig(svg_path, format="svg", metadata={"Date": None})
        plt.close(fig)
        paths.append(svg_path)
        return paths
    except OSError as exc:
        raise EvaluationError(f"cannot write report under {out}: {exc}") from exc
