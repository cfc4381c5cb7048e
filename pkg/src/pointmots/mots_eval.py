"""CLEAR-MOTS evaluation: MOTSA, soft MOTSA and identity switches.

A hypothesis mask matches a ground-truth mask when their IoU exceeds 0.5.
Because masks within a frame may not overlap, such a match is unique.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Iterable, Sequence

from .errors import DimensionMismatch, EmptyGroundTruth, OverlappingMasks
from .mask_geometry import InstanceObservation, group_by_frame, intersection_area, mask_iou

MATCH_IOU = 0.5


@dataclass
class EvalCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    ids: int = 0
    soft_tp: float = 0.0
    gt_total: int = 0

    def __add__(self, other: "EvalCounts") -> "EvalCounts":
        return EvalCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn,
                          self.ids + other.ids, self.soft_tp + other.soft_tp,
                          self.gt_total + other.gt_total)


@dataclass
class FrameMatch:
    pairs: list  # (gt index, hyp index, iou)
    unmatched_gt: list
    unmatched_hyp: list


def _check_disjoint(instances: Sequence[InstanceObservation], what: str) -> None:
    for i in range(len(instances)):
        for j in range(i + 1, len(instances)):
            if intersection_area(instances[i].mask, instances[j].mask) > 0:
                raise OverlappingMasks(f"{what} masks {i} and {j} overlap")


def match_frame(gt: Sequence[InstanceObservation], hyp: Sequence[InstanceObservation]) -> FrameMatch:
    _check_disjoint(gt, "ground-truth")
    _check_disjoint(hyp, "hypothesis")
    dims = {(o.mask.height, o.mask.width) for o in list(gt) + list(hyp)}
    if len(dims) > 1:
        raise DimensionMismatch(f"mixed mask sizes {sorted(dims)}")
    pairs = []
    hyp_used = set()
    gt_used = set()
    for gi, g in enumerate(gt):
        for hi, h in enumerate(hyp):
            if hi in hyp_used:
                continue
            iou = mask_iou(g.mask, h.mask)
            if iou > MATCH_IOU:
                pairs.append((gi, hi, iou))
                gt_used.add(gi)
                hyp_used.add(hi)
                break
    return FrameMatch(
        pairs=pairs,
        unmatched_gt=[i for i in range(len(gt)) if i not in gt_used],
        unmatched_hyp=[i for i in range(len(hyp)) if i not in hyp_used],
    )


def accumulate(frames: Iterable) -> EvalCounts:
    """``frames``: ordered ``(gt_instances, hyp_instances, FrameMatch)`` triples.

    An identity switch is counted when a ground-truth track is matched to a
    hypothesis id different from the one of its most recent earlier match.
    """
    c = EvalCounts()
    last_hyp: dict = {}
    for gt, hyp, fm in frames:
        c.gt_total += len(gt)
        c.tp += len(fm.pairs)
        c.fn += len(fm.unmatched_gt)
        c.fp += len(fm.unmatched_hyp)
        for gi, hi, iou in fm.pairs:
            c.soft_tp += iou
            gid = gt[gi].track_id
            hid = hyp[hi].track_id
            if gid in last_hyp and last_hyp[gid] != hid:
                c.ids += 1
            last_hyp[gid] = hid
    return c


def motsa(c: EvalCounts) -> float:
    if c.gt_total <= 0:
        raise EmptyGroundTruth("no ground-truth instances")
    return (c.tp - c.fp - c.ids) / c.gt_total


def smotsa(c: EvalCounts) -> float:
    if c.gt_total <= 0:
        raise EmptyGroundTruth("no ground-truth instances")
    return (c.soft_tp - c.fp - c.ids) / c.gt_total


def evaluate_sequence(gt: Sequence[InstanceObservation], hyp: Sequence[InstanceObservation]) -> EvalCounts:
    gt_frames = group_by_frame(gt)
    hyp_frames = group_by_frame(hyp)
    triples = []
    for f in sorted(set(gt_frames) | set(hyp_frames)):
        g = gt_frames.get(f, [])
        h = hyp_frames.get(f, [])
        triples.append((g, h, match_frame(g, h)))
    return accumulate(triples)


REPORT_COLUMNS = ["sequence", "sMOTSA", "MOTSA", "IDS", "TP", "FP", "FN"]


def report_row(name: str, c: EvalCounts) -> list:
    return [name, repr(smotsa(c)), repr(motsa(c)), c.ids, c.tp, c.fp, c.fn]


def write_report(path, rows: Sequence) -> None:
    """``rows``: ``(sequence name, EvalCounts)`` pairs."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for name, c in rows:
            w.writerow(report_row(name, c))
