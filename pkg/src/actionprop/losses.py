"""Segment IoU, label assignment with negative screening, and the composite loss.

Positives are matched greedily against static anchor priors (cell-centered,
anchor-width) so assignments stay stable across training steps; the
negative-screening step uses the decoded predictions, which move with the
model. Confidence trains with BCE-with-logits, center offsets with the
excess BCE over its soft-target minimum (a Bernoulli KL divergence; same
gradients, zero at the optimum), widths with smooth-L1 in log space, and
decoded geometry with a 1 - IoU penalty.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .anchors import AnchorSet
from .data import TemporalSegment
from .errors import ContractError, NumericError
from .model import DecodedProposals, LevelPredictions


def segment_iou(a: TemporalSegment, b: TemporalSegment) -> float:
    """Intersection over union of two normalized segments."""
    inter = min(a.end, b.end) - max(a.start, b.start)
    if inter <= 0.0:
        return 0.0
    union = (a.end - a.start) + (b.end - b.start) - inter
    return inter / union


def _interval_iou(starts, ends, gt_start, gt_end):
    inter = np.minimum(ends, gt_end) - np.maximum(starts, gt_start)
    inter = np.maximum(inter, 0.0)
    union = (ends - starts) + (gt_end - gt_start) - inter
    return np.where(inter > 0, inter / np.where(union > 0, union, 1.0), 0.0)


@dataclass
class AssignmentResult:
    """Positive matches plus the negative / ignored partition of the anchor grid."""

    positives: list[tuple[int, int, int, int]]  # (level, position, anchor, gt index)
    negative_mask: list[np.ndarray]             # per level, [M, T_i] bool
    ignored_mask: list[np.ndarray]

    @property
    def n_pos(self) -> int:
        return len(self.positives)

    @property
    def n_neg(self) -> int:
        return int(sum(m.sum() for m in self.negative_mask))

    @property
    def n_ignored(self) -> int:
        return int(sum(m.sum() for m in self.ignored_mask))


def anchor_priors(anchor_set: AnchorSet, input_t: int):
    """Static prior geometry per level: (starts, ends) arrays shaped [M, T_i]."""
    priors = []
    for i, widths in enumerate(anchor_set.levels):
        stride = (2 ** i) / input_t
        t_i = input_t // (2 ** i)
        centers = (np.arange(t_i) + 0.5) * stride
        w = np.asarray(widths)[:, None]
        priors.append((centers[None, :] - w / 2.0, centers[None, :] + w / 2.0))
    return priors


def assign_labels(
    decoded: DecodedProposals,
    gts: list[TemporalSegment],
    anchor_set: AnchorSet,
    input_t: int,
    theta_iou: float = 0.5,
) -> AssignmentResult:
    """Greedy one-positive-per-ground-truth matching plus negative screening.

    Matching ranks all (gt, cell) pairs by descending IoU of the gt against
    the cell's prior, tie-broken lexicographically; each gt and each cell is
    used at most once. Unmatched cells whose decoded prediction overlaps some
    gt above ``theta_iou`` are ignored; everything else is negative.
    """
    n_levels = anchor_set.num_levels
    lengths = [input_t // (2 ** i) for i in range(n_levels)]
    m = anchor_set.anchors_per_level
    priors = anchor_priors(anchor_set, input_t)

    positives: list[tuple[int, int, int, int]] = []
    pos_cells: set[tuple[int, int, int]] = set()
    if gts:
        ious, gg, ii, jj, kk = [], [], [], [], []
        for i in range(n_levels):
            starts, ends = priors[i]
            grid_k, grid_j = np.indices((m, lengths[i]))
            for g, gt in enumerate(gts):
                ious.append(_interval_iou(starts, ends, gt.start, gt.end).ravel())
                gg.append(np.full(m * lengths[i], g))
                ii.append(np.full(m * lengths[i], i))
                jj.append(grid_j.ravel())
                kk.append(grid_k.ravel())
        ious, gg, ii, jj, kk = (np.concatenate(a) for a in (ious, gg, ii, jj, kk))
        # best-first greedy: descending IoU, ties broken lexicographically
        order = np.lexsort((kk, jj, ii, gg, -ious))
        matched_gts: set[int] = set()
        for idx in order:
            g, cell = int(gg[idx]), (int(ii[idx]), int(jj[idx]), int(kk[idx]))
            if g in matched_gts or cell in pos_cells:
                continue
            matched_gts.add(g)
            pos_cells.add(cell)
            positives.append((*cell, g))
            if len(matched_gts) == len(gts):
                break
        positives.sort()

    negative_mask = [np.ones((m, t_i), dtype=bool) for t_i in lengths]
    ignored_mask = [np.zeros((m, t_i), dtype=bool) for t_i in lengths]
    for i, j, k, _ in positives:
        negative_mask[i][k, j] = False

    if gts and len(decoded):
        best = np.zeros(len(decoded))
        for gt in gts:
            best = np.maximum(best, _interval_iou(decoded.start, decoded.end, gt.start, gt.end))
        for idx in np.flatnonzero(best > theta_iou):
            cell = (int(decoded.level[idx]), int(decoded.position[idx]), int(decoded.anchor[idx]))
            if cell not in pos_cells:
                i, j, k = cell
                ignored_mask[i][k, j] = True
                negative_mask[i][k, j] = False

    return AssignmentResult(positives, negative_mask, ignored_mask)


@dataclass
class LossBreakdown:
    conf_pos: float
    conf_neg: float
    center: float
    width: float
    iou: float
    total: float

    def to_dict(self) -> dict:
        return {
            "conf_pos": self.conf_pos,
            "conf_neg": self.conf_neg,
            "center": self.center,
            "width": self.width,
            "iou": self.iou,
            "total": self.total,
        }


def compute_loss(
    preds: LevelPredictions,
    assignment: AssignmentResult,
    gts: list[TemporalSegment],
    anchor_set: AnchorSet,
    input_t: int,
    lambda_conf: float = 0.2,
    lambda_c: float = 1.0,
    lambda_w: float = 1.0,
    lambda_iou: float = 1.0,
) -> tuple[LossBreakdown, ad.Tensor]:
    """Evaluate the composite training loss; returns (breakdown, tracked scalar).

    With no positives every positive-normalized term is zero and only the
    screened negatives contribute, so background-only clips stay trainable.
    """
    n_pos = assignment.n_pos
    n_neg = assignment.n_neg
    zero = ad.Tensor(0.0, _any_tape(preds))

    conf_neg = zero
    if n_neg > 0:
        pieces = []
        for i, mask in enumerate(assignment.negative_mask):
            if mask.any():
                bce = ad.bce_with_logits(preds.conf_logits[i], 0.0)
                pieces.append(ad.tsum(ad.mul(bce, mask.astype(np.float64))))
        conf_neg = ad.scale(_accumulate(pieces), 1.0 / n_neg)

    conf_pos = center = width = iou = zero
    if n_pos > 0:
        by_level: dict[int, list[tuple[int, int, int]]] = {}
        for i, j, k, g in assignment.positives:
            by_level.setdefault(i, []).append((j, k, g))
        conf_terms, center_terms, width_terms, iou_terms = [], [], [], []
        for i, triplets in sorted(by_level.items()):
            js = np.array([t[0] for t in triplets])
            ks = np.array([t[1] for t in triplets])
            gs = [gts[t[2]] for t in triplets]
            stride = (2 ** i) / input_t
            anchor_w = np.asarray(anchor_set.levels[i])[ks]
            gt_start = np.array([g.start for g in gs])
            gt_end = np.array([g.end for g in gs])
            gt_center = (gt_start + gt_end) / 2.0
            gt_width = gt_end - gt_start

            conf_terms.append(ad.tsum(ad.bce_with_logits(preds.conf_logits[i][(ks, js)], 1.0)))

            # offset target can leave (0,1) when one-to-one matching pushes a
            # gt outside its cell; clamp keeps the BCE target valid
            t_center = np.clip(gt_center / stride - js, 0.0, 1.0)
            # excess BCE over its analytic minimum (the target entropy): same
            # gradients, but the term reaches 0 at the optimum instead of
            # carrying a soft-target entropy floor
            bce = ad.bce_with_logits(preds.center_logits[i][(ks, js)], t_center)
            center_terms.append(ad.tsum(ad.sub(bce, _bernoulli_entropy(t_center))))

            wlog = preds.width_logs[i][(ks, js)]
            width_terms.append(ad.tsum(ad.smooth_l1(wlog, np.log(gt_width / anchor_w))))

            dec_center = ad.mul(ad.add(ad.sigmoid(preds.center_logits[i][(ks, js)]), js.astype(np.float64)), stride)
            dec_width = ad.mul(ad.exp(wlog), anchor_w)
            half = ad.scale(dec_width, 0.5)
            dec_start = ad.clip(ad.sub(dec_center, half), 0.0, 1.0)
            dec_end = ad.clip(ad.add(dec_center, half), 0.0, 1.0)
            inter = ad.relu(ad.sub(ad.minimum(dec_end, gt_end), ad.maximum(dec_start, gt_start)))
            union = ad.sub(ad.add(ad.sub(dec_end, dec_start), gt_width), inter)
            iou_terms.append(ad.tsum(ad.sub(1.0, ad.div(inter, union))))

        conf_pos = ad.scale(_accumulate(conf_terms), 1.0 / n_pos)
        center = ad.scale(_accumulate(center_terms), 1.0 / n_pos)
        width = ad.scale(_accumulate(width_terms), 1.0 / n_pos)
        iou = ad.scale(_accumulate(iou_terms), 1.0 / n_pos)

    # left-fold so the breakdown recomposes to the same bits
    total = ad.scale(ad.add(conf_pos, conf_neg), lambda_conf)
    total = ad.add(total, ad.scale(center, lambda_c))
    total = ad.add(total, ad.scale(width, lambda_w))
    total = ad.add(total, ad.scale(iou, lambda_iou))
    breakdown = LossBreakdown(
        conf_pos=conf_pos.item(),
        conf_neg=conf_neg.item(),
        center=center.item(),
        width=width.item(),
        iou=iou.item(),
        total=total.item(),
    )
    for name, value in breakdown.to_dict().items():
        if not np.isfinite(value):
            raise NumericError(f"loss term {name!r} is non-finite")
    return breakdown, total


def _bernoulli_entropy(t: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        h = -np.where(t > 0, t * np.log(t), 0.0) - np.where(t < 1, (1 - t) * np.log(1 - t), 0.0)
    return h


def _any_tape(preds: LevelPredictions):
    for t in preds.conf_logits:
        if t.tape is not None:
            return t.tape
    return None


def _accumulate(terms: list[ad.Tensor]) -> ad.Tensor:
    if not terms:
        raise ContractError("cannot accumulate an empty term list")
    acc = terms[0]
    for t in terms[1:]:
        acc = ad.add(acc, t)
    return acc
