"""Head, torso and whole-body boxes built from consensus keypoints."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

from kpconsensus.consensus import ConsensusResult, KeypointObservation
from kpconsensus.geometry import Rect, containment_fraction, iou, tightest_box, union_box
from kpconsensus.records import KEYPOINT_NAMES, ImageAnnotation


@dataclass(frozen=True)
class PartDefinition:
    name: str
    members: frozenset[int]

    def __post_init__(self) -> None:
        object.__setattr__(self, "members", frozenset(self.members))
        if not self.members:
            raise ValueError(f"part {self.name!r} has no member keypoints")
        if min(self.members) < 0:
            raise ValueError(f"part {self.name!r} has a negative keypoint index")

    @classmethod
    def from_names(cls, name: str, keypoint_names: Iterable[str], table: Sequence[str] = KEYPOINT_NAMES):
        """Build a part from keypoint names; ``eyes``/``wings``/``legs`` expand to both sides."""
        idx = set()
        for kp in keypoint_names:
            kp = kp.strip().lower()
            if kp in ("eyes", "wings", "legs"):
                side = kp[:-1]
                idx.update(table.index(f"{s} {side}") for s in ("left", "right"))
            elif kp in table:
                idx.add(table.index(kp))
            else:
                raise ValueError(f"unknown keypoint name {kp!r}")
        return cls(name, frozenset(idx))

    def validate(self, num_keypoints: int) -> None:
        if max(self.members) >= num_keypoints:
            raise ValueError(f"part {self.name!r} references keypoint {max(self.members)} >= {num_keypoints}")


HEAD = PartDefinition.from_names("head", ["beak", "crown", "forehead", "eyes", "nape", "throat"])
TORSO = PartDefinition.from_names("torso", ["back", "breast", "wings", "tail", "throat", "belly", "legs"])
DEFAULT_PARTS: tuple[PartDefinition, ...] = (HEAD, TORSO)


@dataclass(frozen=True)
class ScoredBox:
    rect: Rect
    score: float


def part_box(results: Sequence[ConsensusResult], part: PartDefinition) -> Optional[Rect]:
    """Tightest box around the inliers of every visible member keypoint.

    With medoid-only consensus each keypoint's inlier set is just its
    reported location, so this reduces to the box around the locations.
    Returns ``None`` when no member keypoint is visible.
    """
    part.validate(len(results))
    pts = [o.location for k in sorted(part.members) if results[k].visible for o in results[k].inliers]
    if not pts:
        return None
    return tightest_box(pts)


def whole_body_box(
    head: Optional[Rect],
    torso: Optional[Rect],
    candidates: Sequence[ScoredBox] = (),
    containment_min: float = 0.9,
    iou_min: float = 0.5,
) -> Rect:
    """Expand the head+torso box to the best-scoring proposal that agrees with it.

    The seed is the tightest box around whichever of ``head``/``torso``
    exist. A candidate qualifies if the seed is at least ``containment_min``
    contained in it and their IOU is at least ``iou_min``; the highest
    scoring qualifier wins (first one on equal scores). Without qualifiers
    the seed itself is returned.
    """
    present = [b for b in (head, torso) if b is not None]
    if not present:
        raise ValueError("whole-body box needs a head or torso box")
    seed = union_box(present)
    best: Optional[ScoredBox] = None
    for c in candidates:
        if containment_fraction(seed, c.rect) >= containment_min and iou(seed, c.rect) >= iou_min:
            if best is None or c.score > best.score:
                best = c
    return seed if best is None else best.rect


def results_from_annotation(ann: ImageAnnotation) -> list[ConsensusResult]:
    """Treat ground-truth keypoints as a perfect consensus, for building reference part boxes."""
    out = []
    for k, kp in enumerate(ann.keypoints):
        if kp.visible:
            obs = KeypointObservation(kp.point, 1.0, "gt")
            out.append(ConsensusResult(True, kp.point, (obs,), (obs,)))
        else:
            out.append(ConsensusResult.invisible())
    return out


def gt_part_boxes(ann: ImageAnnotation, parts: Sequence[PartDefinition] = DEFAULT_PARTS) -> dict[str, Optional[Rect]]:
    """Reference part boxes: keypoint parts from GT keypoints, ``body`` from the object box."""
    results = results_from_annotation(ann)
    boxes = {p.name: part_box(results, p) for p in parts}
    boxes["body"] = ann.object_box
    return boxes


def predicted_part_boxes(
    results: Sequence[ConsensusResult],
    candidates: Sequence[ScoredBox] = (),
    parts: Sequence[PartDefinition] = DEFAULT_PARTS,
    containment_min: float = 0.9,
    iou_min: float = 0.5,
) -> dict[str, Optional[Rect]]:
    boxes = {p.name: part_box(results, p) for p in parts}
    head, torso = boxes.get("head"), boxes.get("torso")
    if head is None and torso is None:
        boxes["body"] = None
    else:
        boxes["body"] = whole_body_box(head, torso, candidates, containment_min, iou_min)
    return boxes

