"""Keypoint and part localization metrics.

PCP, AE, FVR and FIR follow the bird keypoint protocol: PCP counts a
ground-truth-visible keypoint as correct when the prediction is visible and
within 1.5 annotator standard deviations; AE is the capped mean error over
pairs where both a prediction and a ground truth exist; FVR/FIR are the
false visibility and false invisibility rates. Part boxes count as
localized when their IOU with the reference box is strictly above 0.5.

Every ratio is backed by an integer tally so it can be recomputed exactly.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Mapping, Optional, Sequence

import numpy as np

from kpconsensus.consensus import ConsensusResult
from kpconsensus.geometry import Rect, iou
from kpconsensus.records import KEYPOINT_NAMES, ImageAnnotation

PCP_FACTOR = 1.5
AE_CAP = 5.0
PART_IOU = 0.5


class EmptyEvaluationError(ValueError):
    pass


@dataclass
class Tally:
    num: int = 0
    den: int = 0

    @property
    def value(self) -> Optional[float]:
        return self.num / self.den if self.den else None

    @property
    def exact(self) -> Optional[Fraction]:
        return Fraction(self.num, self.den) if self.den else None

    def add(self, hit: bool) -> None:
        self.num += int(hit)
        self.den += 1

    def __iadd__(self, other: "Tally") -> "Tally":
        self.num += other.num
        self.den += other.den
        return self


@dataclass
class ErrorTally:
    total: float = 0.0
    count: int = 0

    @property
    def value(self) -> Optional[float]:
        return self.total / self.count if self.count else None


@dataclass(frozen=True)
class AnnotatorStd:
    """Per-keypoint annotator standard deviation in pixels."""

    sigma: tuple[float, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "sigma", tuple(float(s) for s in self.sigma))
        if not all(s > 0 and math.isfinite(s) for s in self.sigma):
            raise ValueError("annotator standard deviations must be positive and finite")

    def __len__(self) -> int:
        return len(self.sigma)

    def for_keypoint(self, k: int) -> float:
        if k >= len(self.sigma):
            raise ValueError(f"no annotator std for keypoint {k}")
        return self.sigma[k]


def merged_name(name: str) -> str:
    """``left eye`` and ``right eye`` both report as ``eye``; other names pass through."""
    for side in ("left ", "right "):
        if name.startswith(side):
            return name[len(side):]
    return name


def _check_aligned(preds, gts) -> None:
    if len(preds) != len(gts):
        raise ValueError(f"{len(preds)} prediction images but {len(gts)} annotations")
    for i, (p, g) in enumerate(zip(preds, gts)):
        if len(p) != g.num_keypoints:
            raise ValueError(f"image {g.image_id}: {len(p)} predicted keypoints, {g.num_keypoints} annotated")


def _distance(res: ConsensusResult, gt) -> float:
    return math.hypot(res.location[0] - gt.x, res.location[1] - gt.y)


@dataclass
class PCPResult:
    per_keypoint: list[Tally]
    per_part: dict[str, Tally]
    total: Tally


def pcp(
    preds: Sequence[Sequence[ConsensusResult]],
    gts: Sequence[ImageAnnotation],
    std: AnnotatorStd,
    factor: float = PCP_FACTOR,
    names: Sequence[str] = KEYPOINT_NAMES,
) -> PCPResult:
    """Percent correct parts over every ground-truth-visible keypoint.

    A keypoint predicted invisible while visible in the ground truth counts
    as incorrect. ``per_part`` pools left/right keypoints under one name.
    """
    _check_aligned(preds, gts)
    n = gts[0].num_keypoints if gts else len(names)
    for k in range(n):
        std.for_keypoint(k)
    per_kp = [Tally() for _ in range(n)]
    for res, ann in zip(preds, gts):
        for k, gt in enumerate(ann.keypoints):
            if not gt.visible:
                continue
            r = res[k]
            per_kp[k].add(r.visible and _distance(r, gt) <= factor * std.sigma[k])
    per_part: dict[str, Tally] = {}
    total = Tally()
    for k, t in enumerate(per_kp):
        name = merged_name(names[k]) if k < len(names) else str(k)
        per_part.setdefault(name, Tally())
        per_part[name] += t
        total += t
    return PCPResult(per_kp, per_part, total)


def average_error_tally(preds, gts, std: Optional[AnnotatorStd], cap: float = AE_CAP, units: str = "std") -> ErrorTally:
    _check_aligned(preds, gts)
    if units not in ("std", "pixels"):
        raise ValueError(f"unknown AE units {units!r}")
    out = ErrorTally()
    for res, ann in zip(preds, gts):
        for k, gt in enumerate(ann.keypoints):
            r = res[k]
            if not (gt.visible and r.visible):
                continue
            d = _distance(r, gt)
            if units == "std":
                d /= std.for_keypoint(k)
            out.total += min(cap, d)
            out.count += 1
    return out


def average_error(preds, gts, std: Optional[AnnotatorStd], cap: float = AE_CAP, units: str = "std") -> float:
    """Mean capped localization error over pairs with both a prediction and a visible GT.

    ``units="std"`` measures each error in annotator standard deviations of
    its keypoint; ``units="pixels"`` uses raw pixels (``std`` may then be None).

    Raises:
        EmptyEvaluationError: no pair qualifies.
    """
    t = average_error_tally(preds, gts, std, cap, units)
    if t.count == 0:
        raise EmptyEvaluationError("empty evaluation set")
    return t.value


def visibility_tallies(preds, gts) -> tuple[Tally, Tally]:
    _check_aligned(preds, gts)
    fv, fi = Tally(), Tally()
    for res, ann in zip(preds, gts):
        for k, gt in enumerate(ann.keypoints):
            if gt.visible:
                fi.add(not res[k].visible)
            else:
                fv.add(res[k].visible)
    return fv, fi


def visibility_rates(preds, gts) -> tuple[Optional[float], Optional[float]]:
    """``(fvr, fir)``; a rate with a zero denominator is ``None``."""
    fv, fi = visibility_tallies(preds, gts)
    return fv.value, fi.value


def part_localization_tally(
    pred_boxes: Sequence[Optional[Rect]], gt_boxes: Sequence[Optional[Rect]], threshold: float = PART_IOU
) -> Tally:
    if len(pred_boxes) != len(gt_boxes):
        raise ValueError(f"{len(pred_boxes)} predicted boxes but {len(gt_boxes)} reference boxes")
    t = Tally()
    for p, g in zip(pred_boxes, gt_boxes):
        if g is None:
            continue
        t.add(p is not None and iou(p, g) > threshold)
    return t


def part_localization_accuracy(
    pred_boxes: Mapping[str, Sequence[Optional[Rect]]],
    gt_boxes: Mapping[str, Sequence[Optional[Rect]]],
    threshold: float = PART_IOU,
) -> dict[str, Optional[float]]:
    """Fraction of reference part boxes matched with IOU strictly above ``threshold``, per part."""
    return {name: part_localization_tally(pred_boxes.get(name, [None] * len(g)), g, threshold).value
            for name, g in gt_boxes.items()}


@dataclass
class EvalReport:
    pcp_per_keypoint: dict[str, Tally]
    pcp_per_part: dict[str, Tally]
    pcp_total: Tally
    ae: ErrorTally
    fvr: Tally
    fir: Tally
    part_acc: dict[str, Tally] = field(default_factory=dict)
    ae_units: str = "std"

    def summary(self) -> dict[str, Optional[float]]:
        out = {"pcp": self.pcp_total.value, "ae": self.ae.value, "fvr": self.fvr.value, "fir": self.fir.value}
        for name, t in self.part_acc.items():
            out[f"part_acc.{name}"] = t.value
        return out


def evaluate(
    preds: Sequence[Sequence[ConsensusResult]],
    gts: Sequence[ImageAnnotation],
    std: AnnotatorStd,
    part_boxes: Optional[Sequence[Mapping[str, Optional[Rect]]]] = None,
    gt_boxes: Optional[Sequence[Mapping[str, Optional[Rect]]]] = None,
    ae_units: str = "std",
    ae_cap: float = AE_CAP,
    names: Sequence[str] = KEYPOINT_NAMES,
) -> EvalReport:
    """Full keypoint report, plus part accuracy when predicted and reference part boxes are given."""
    p = pcp(preds, gts, std, names=names)
    ae = average_error_tally(preds, gts, std, ae_cap, ae_units)
    fv, fi = visibility_tallies(preds, gts)
    part_acc: dict[str, Tally] = {}
    if part_boxes is not None and gt_boxes is not None:
        parts = list(gt_boxes[0]) if gt_boxes else []
        for name in parts:
            part_acc[name] = part_localization_tally(
                [pb.get(name) for pb in part_boxes], [gb.get(name) for gb in gt_boxes]
            )
    per_kp = {names[k] if k < len(names) else str(k): t for k, t in enumerate(p.per_keypoint)}
    return EvalReport(per_kp, p.per_part, p.total, ae, fv, fi, part_acc, ae_units)


def errors_px(preds: Sequence[ConsensusResult], gt_points: np.ndarray) -> np.ndarray:
    """Pixel error per keypoint; ``nan`` where the prediction is invisible."""
    out = np.full(len(preds), np.nan)
    for k, r in enumerate(preds):
        if r.visible:
            out[k] = math.hypot(r.location[0] - gt_points[k, 0], r.location[1] - gt_points[k, 1])
    return out
