"""Training crops, regression targets, flip augmentation and reference losses.

Targets are defined on the un-padded proposal box: a keypoint is a
positive target only if it is annotated visible and falls inside that box.
Location targets are box-normalized; entries for absent keypoints hold
``nan`` and are masked out of every loss.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from kpconsensus.geometry import Rect, containment_fraction, intersection_area, iou, pad_box
from kpconsensus.records import KEYPOINT_NAMES, ImageAnnotation

MIN_CONTAINMENT = 0.5
MIN_IOU = 0.2
MAX_BACKGROUND = 50


@dataclass(frozen=True, eq=False)
class TrainingExample:
    box: Rect
    padded_box: Rect
    targets_v: np.ndarray
    targets_l: np.ndarray
    is_background: bool = False
    flipped: bool = False
    image_id: str = ""

    def __post_init__(self) -> None:
        v = np.asarray(self.targets_v, dtype=np.int8).reshape(-1)
        l = np.asarray(self.targets_l, dtype=float).reshape(-1, 2).copy()
        if len(v) != len(l):
            raise ValueError("targets_v and targets_l differ in length")
        l[v == 0] = np.nan
        if self.is_background and v.any():
            raise ValueError("background examples cannot have visible keypoints")
        object.__setattr__(self, "targets_v", v)
        object.__setattr__(self, "targets_l", l)


@dataclass(frozen=True)
class FlipMap:
    """Involutive permutation pairing left/right keypoints."""

    perm: tuple[int, ...]

    def __post_init__(self) -> None:
        perm = tuple(int(i) for i in self.perm)
        if sorted(perm) != list(range(len(perm))):
            raise ValueError("flip map is not a permutation")
        if any(perm[perm[i]] != i for i in range(len(perm))):
            raise ValueError("flip map is not an involution")
        object.__setattr__(self, "perm", perm)

    @classmethod
    def from_names(cls, names: Sequence[str]) -> "FlipMap":
        perm = []
        for i, n in enumerate(names):
            if n.startswith("left "):
                perm.append(names.index("right " + n[5:]))
            elif n.startswith("right "):
                perm.append(names.index("left " + n[6:]))
            else:
                perm.append(i)
        return cls(tuple(perm))


CUB_FLIP = FlipMap.from_names(KEYPOINT_NAMES)


def select_training_boxes(
    proposals: Sequence[Rect],
    gt_box: Rect,
    rng_seed=0,
    max_bg: int = MAX_BACKGROUND,
    min_containment: float = MIN_CONTAINMENT,
    min_iou: float = MIN_IOU,
) -> list[tuple[Rect, bool]]:
    """Split proposals into object crops and background crops.

    Positives keep proposal order. Background boxes are proposals with no
    overlap with ``gt_box``; up to ``max_bg`` of them are drawn without
    replacement using ``rng_seed`` and returned in proposal order after the
    positives.
    """
    positives = [
        (p, False)
        for p in proposals
        if containment_fraction(p, gt_box) >= min_containment and iou(p, gt_box) >= min_iou
    ]
    eligible = [i for i, p in enumerate(proposals) if intersection_area(p, gt_box) == 0.0]
    if len(eligible) > max_bg:
        rng = np.random.default_rng(rng_seed)
        eligible = sorted(rng.choice(eligible, size=max_bg, replace=False).tolist())
    return positives + [(proposals[i], True) for i in eligible]


def make_targets(box: Rect, annotation: ImageAnnotation, is_background: bool = False) -> TrainingExample:
    n = annotation.num_keypoints
    v = np.zeros(n, dtype=np.int8)
    l = np.full((n, 2), np.nan)
    if not is_background:
        for i, kp in enumerate(annotation.keypoints):
            if kp.visible and box.contains_point(kp.point):
                v[i] = 1
                l[i] = ((kp.x - box.x) / box.w, (kp.y - box.y) / box.h)
    return TrainingExample(box, pad_box(box), v, l, is_background, False, annotation.image_id)


def flip_example(ex: TrainingExample, image_width: float, fm: FlipMap = CUB_FLIP) -> TrainingExample:
    """Mirror an example about the image's vertical axis and swap left/right targets."""
    if len(fm.perm) != len(ex.targets_v):
        raise ValueError("flip map size does not match the example")
    perm = np.asarray(fm.perm)
    box = Rect(image_width - ex.box.x - ex.box.w, ex.box.y, ex.box.w, ex.box.h)
    padded = Rect(image_width - ex.padded_box.x - ex.padded_box.w, ex.padded_box.y, ex.padded_box.w, ex.padded_box.h)
    v = ex.targets_v[perm]
    l = ex.targets_l[perm].copy()
    l[:, 0] = 1.0 - l[:, 0]
    return TrainingExample(box, padded, v, l, ex.is_background, not ex.flipped, ex.image_id)


def _check(v, v_hat, l=None, l_hat=None):
    v = np.asarray(v, dtype=float).reshape(-1)
    v_hat = np.asarray(v_hat, dtype=float).reshape(-1)
    if v.shape != v_hat.shape:
        raise ValueError(f"visibility vectors differ in length: {v.shape[0]} vs {v_hat.shape[0]}")
    if l is None:
        return v, v_hat
    l = np.asarray(l, dtype=float).reshape(-1, 2)
    l_hat = np.asarray(l_hat, dtype=float).reshape(-1, 2)
    if l.shape != l_hat.shape or len(l) != len(v):
        raise ValueError("location vectors must hold one (x, y) pair per keypoint")
    return v, v_hat, l, l_hat


def loss_vis(v, v_hat) -> float:
    v, v_hat = _check(v, v_hat)
    return float(np.sum((v - v_hat) ** 2))


def loss_loc(v, l, l_hat) -> float:
    """Squared location error summed over keypoints with ``v == 1``; masked entries may be nan."""
    v, _, l, l_hat = _check(v, v, l, l_hat)
    mask = v > 0
    diff = l[mask] - l_hat[mask]
    return float(np.sum(v[mask][:, None] * diff**2))


def loss_net(v, v_hat, l, l_hat) -> float:
    _check(v, v_hat, l, l_hat)
    return loss_vis(v, v_hat) + loss_loc(v, l, l_hat)


def loss_gradients(v, v_hat, l, l_hat) -> tuple[np.ndarray, np.ndarray]:
    """Analytic gradients of ``loss_net`` w.r.t. ``v_hat`` (shape N) and ``l_hat`` (shape N x 2)."""
    v, v_hat, l, l_hat = _check(v, v_hat, l, l_hat)
    g_v = -2.0 * (v - v_hat)
    g_l = np.zeros_like(l_hat)
    mask = v > 0
    g_l[mask] = -2.0 * v[mask][:, None] * (l[mask] - l_hat[mask])
    return g_v, g_l


def prepare_image(
    annotation: ImageAnnotation,
    proposals: Sequence[Rect],
    seed=0,
    max_bg: int = MAX_BACKGROUND,
    flip: bool = True,
    fm: FlipMap = CUB_FLIP,
) -> list[TrainingExample]:
    """All training examples for one image: positives, their flips, then background crops."""
    chosen = select_training_boxes(proposals, annotation.object_box, seed, max_bg)
    pos = [make_targets(b, annotation) for b, bg in chosen if not bg]
    bg = [make_targets(b, annotation, is_background=True) for b, is_bg in chosen if is_bg]
    flips = []
    if flip and pos:
        if annotation.width is None:
            raise ValueError(f"image {annotation.image_id}: width unknown, cannot flip")
        flips = [flip_example(e, annotation.width, fm) for e in pos]
    return pos + flips + bg
