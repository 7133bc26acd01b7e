"""Synthetic keypoint predictor for desk-scale verification.

Nothing here models a real network: predictions are ground truth plus
Gaussian jitter, with a fraction replaced by confident uniform outliers.
All randomness is derived from ``(seed, image id)`` (or ``(seed, trial
index)``), never from processing order, so threaded runs reproduce serial
ones bit for bit.
"""
from __future__ import annotations

import math
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from kpconsensus.consensus import (
    GT_BOX,
    ConsensusConfig,
    KeypointObservation,
    Method,
    consensus_image,
    consensus_keypoint,
    medoid,
)
from kpconsensus.geometry import Point, Rect, iou
from kpconsensus.metrics import part_localization_tally
from kpconsensus.partbox import DEFAULT_PARTS, PartDefinition, ScoredBox, gt_part_boxes, predicted_part_boxes
from kpconsensus.records import ImageAnnotation, Keypoint, PredictionSet

DEFAULT_BOX_COUNTS = (600, 300, 100, 50)

# Side-view bird, facing left, in object-box coordinates (CUB part order).
BIRD_TEMPLATE = np.array(
    [
        [0.55, 0.28],  # back
        [0.08, 0.26],  # beak
        [0.48, 0.70],  # belly
        [0.32, 0.52],  # breast
        [0.22, 0.10],  # crown
        [0.14, 0.16],  # forehead
        [0.19, 0.19],  # left eye
        [0.46, 0.92],  # left leg
        [0.58, 0.45],  # left wing
        [0.30, 0.17],  # nape
        [0.20, 0.19],  # right eye
        [0.52, 0.92],  # right leg
        [0.60, 0.42],  # right wing
        [0.93, 0.62],  # tail
        [0.22, 0.34],  # throat
    ]
)
# Keypoints on the far side of a left-facing bird (right eye/leg/wing).
FAR_SIDE = (10, 11, 12)


@dataclass(frozen=True)
class NoiseModel:
    """Parametric error model of the synthetic predictor.

    ``conf_visible`` and ``conf_invisible`` are Beta ``(a, b)`` parameters;
    ``b == 0`` makes the draw constant 1 and ``a == 0`` constant 0. With
    ``relative_sigma`` set, ``loc_sigma`` is a fraction of the box diagonal
    instead of pixels.
    """

    loc_sigma: float = 3.0
    outlier_rate: float = 0.1
    outlier_conf: float = 0.95
    false_vis_rate: float = 0.0
    conf_visible: tuple[float, float] = (20.0, 1.0)
    conf_invisible: tuple[float, float] = (1.0, 20.0)
    relative_sigma: bool = False
    seed: int = 0

    def __post_init__(self) -> None:
        for name in ("outlier_rate", "outlier_conf", "false_vis_rate"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.loc_sigma < 0:
            raise ValueError("loc_sigma must be non-negative")
        for name in ("conf_visible", "conf_invisible"):
            a, b = getattr(self, name)
            if a < 0 or b < 0 or a == b == 0:
                raise ValueError(f"{name} needs non-negative Beta parameters, not both zero")
        object.__setattr__(self, "conf_visible", tuple(float(x) for x in self.conf_visible))
        object.__setattr__(self, "conf_invisible", tuple(float(x) for x in self.conf_invisible))


def _beta(rng: np.random.Generator, params: tuple[float, float], n: int) -> np.ndarray:
    a, b = params
    if b == 0:
        rng.random(n)
        return np.ones(n)
    if a == 0:
        rng.random(n)
        return np.zeros(n)
    return rng.beta(a, b, size=n)


def stable_id(image_id: str) -> int:
    return zlib.crc32(str(image_id).encode("utf-8"))


def simulate_predictions(annotation: ImageAnnotation, boxes: Sequence[Rect], nm: NoiseModel,
                         scores: Optional[Sequence[float]] = None) -> list[PredictionSet]:
    """One synthetic prediction set per box; deterministic given ``nm.seed`` and the image id.

    A keypoint that is annotated visible and inside the box is predicted at
    its true location plus Gaussian noise with a confidence drawn from
    ``conf_visible``, except with probability ``outlier_rate`` where it is
    replaced by a uniform location in the box with confidence
    ``outlier_conf``. Any other keypoint gets a uniform location and a
    ``conf_invisible`` confidence, or ``outlier_conf`` with probability
    ``false_vis_rate``.
    """
    nb, n = len(boxes), annotation.num_keypoints
    scores = [0.0] * nb if scores is None else scores
    if nb == 0:
        return []
    rng = np.random.default_rng([nm.seed, stable_id(annotation.image_id)])
    branch = rng.random((nb, n))
    jitter = rng.normal(size=(nb, n, 2))
    loc = rng.random((nb, n, 2))
    c_vis = _beta(rng, nm.conf_visible, nb * n).reshape(nb, n)
    vis = _beta(rng, nm.conf_invisible, nb * n).reshape(nb, n)

    bx = np.array([b.as_list() for b in boxes])
    gt = annotation.locations()
    gt_vis = annotation.visible_mask()
    x, y = gt[None, :, 0], gt[None, :, 1]
    inside = (
        gt_vis[None, :]
        & (bx[:, 0:1] <= x) & (x <= bx[:, 0:1] + bx[:, 2:3])
        & (bx[:, 1:2] <= y) & (y <= bx[:, 1:2] + bx[:, 3:4])
    )
    sigma = nm.loc_sigma * np.hypot(bx[:, 2], bx[:, 3]) if nm.relative_sigma else np.full(nb, nm.loc_sigma)
    noisy = gt[None] + sigma[:, None, None] * jitter
    norm = (noisy - bx[:, None, 0:2]) / bx[:, None, 2:4]

    good = inside & (branch >= nm.outlier_rate)
    loc[good] = norm[good]
    vis[good] = c_vis[good]
    vis[inside & ~good] = nm.outlier_conf
    vis[~inside & (branch < nm.false_vis_rate)] = nm.outlier_conf
    vis = np.clip(vis, 0.0, 1.0)
    return [PredictionSet(annotation.image_id, boxes[i], float(scores[i]), loc[i], vis[i]) for i in range(nb)]


# -- synthetic scenes ---------------------------------------------------------

def covering_boxes(point: Point, n: int, rng: np.random.Generator, side=(60.0, 200.0)) -> list[Rect]:
    """Random boxes that all contain ``point``."""
    w = rng.uniform(*side, size=n)
    h = rng.uniform(*side, size=n)
    fx = rng.uniform(0.05, 0.95, size=n)
    fy = rng.uniform(0.05, 0.95, size=n)
    return [Rect(point[0] - fx[i] * w[i], point[1] - fy[i] * h[i], w[i], h[i]) for i in range(n)]


def single_keypoint_annotation(image_id: str, point: Point) -> ImageAnnotation:
    return ImageAnnotation(image_id, (Keypoint(point[0], point[1], True),), Rect(point[0] - 50, point[1] - 50, 100, 100))


def synthetic_annotation(image_id: str, rng: np.random.Generator, width: float = 500.0, height: float = 400.0,
                         occlusion: float = 0.05, far_side_hidden: float = 0.7) -> ImageAnnotation:
    """A bird-like object with 15 keypoints laid out from :data:`BIRD_TEMPLATE`."""
    bw = rng.uniform(80, 320)
    bh = bw * rng.uniform(0.6, 0.95)
    bh = min(bh, height - 20)
    bx = rng.uniform(10, width - bw - 10)
    by = rng.uniform(10, height - bh - 10)
    tmpl = BIRD_TEMPLATE + rng.normal(0.0, 0.025, size=BIRD_TEMPLATE.shape)
    tmpl = np.clip(tmpl, 0.0, 1.0)
    facing_right = rng.random() < 0.5
    if facing_right:
        tmpl[:, 0] = 1.0 - tmpl[:, 0]
    hidden = rng.random(len(tmpl)) < occlusion
    far = rng.random() < far_side_hidden
    kps = []
    for k, (u, v) in enumerate(tmpl):
        visible = not hidden[k] and not (far and k in FAR_SIDE)
        if visible:
            kps.append(Keypoint(float(bx + u * bw), float(by + v * bh), True))
        else:
            kps.append(Keypoint(0.0, 0.0, False))
    if not any(k.visible for k in kps):
        kps[1] = Keypoint(float(bx + tmpl[1, 0] * bw), float(by + tmpl[1, 1] * bh), True)
    return ImageAnnotation(image_id, tuple(kps), Rect(bx, by, bw, bh), width, height, "synthetic", True,
                           f"synthetic/{image_id}.jpg")


def synthetic_proposals(annotation: ImageAnnotation, n: int, rng: np.random.Generator,
                        object_fraction: float = 0.3, score_noise: float = 0.05) -> list[ScoredBox]:
    """Edge-Box-like proposals sorted by descending score.

    A fraction are jittered copies of the object box (random shift and
    per-axis log-normal rescaling, so many are sub-crops); the rest are
    uniform clutter. Scores are IOU with the object box plus Gaussian noise.
    """
    W, H = annotation.width or 500.0, annotation.height or 400.0
    gt = annotation.object_box
    n_obj = int(round(n * object_fraction))
    out = []
    for i in range(n):
        if i < n_obj:
            w = gt.w * math.exp(rng.normal(0.0, 0.35))
            h = gt.h * math.exp(rng.normal(0.0, 0.35))
            cx = gt.center.x + rng.normal(0.0, 0.2 * gt.w)
            cy = gt.center.y + rng.normal(0.0, 0.2 * gt.h)
        else:
            w = rng.uniform(30.0, 0.8 * W)
            h = rng.uniform(30.0, 0.8 * H)
            cx = rng.uniform(0.0, W)
            cy = rng.uniform(0.0, H)
        x1, y1 = max(0.0, cx - w / 2), max(0.0, cy - h / 2)
        x2, y2 = min(W, cx + w / 2), min(H, cy + h / 2)
        if x2 - x1 < 8.0 or y2 - y1 < 8.0:
            x1, y1 = min(max(0.0, cx - 4.0), W - 8.0), min(max(0.0, cy - 4.0), H - 8.0)
            x2, y2 = x1 + 8.0, y1 + 8.0
        r = Rect.from_corners(x1, y1, x2, y2)
        out.append(ScoredBox(r, iou(r, gt) + rng.normal(0.0, score_noise)))
    out.sort(key=lambda s: -s.score)
    return out


@dataclass
class SyntheticImage:
    annotation: ImageAnnotation
    proposals: list[ScoredBox] = field(default_factory=list)


def synthetic_dataset(n_images: int = 40, n_proposals: int = 1000, seed: int = 0) -> list[SyntheticImage]:
    """The packaged synthetic dataset: ``n_images`` birds, each with ranked proposals."""
    out = []
    for i in range(n_images):
        rng = np.random.default_rng([seed, i])
        ann = synthetic_annotation(str(i + 1), rng)
        out.append(SyntheticImage(ann, synthetic_proposals(ann, n_proposals, rng)))
    return out


# -- experiments ----------------------------------------------------------------

@dataclass(frozen=True)
class SweepRow:
    box_count: int
    head_acc: Optional[float]
    torso_acc: Optional[float]
    body_acc: Optional[float]


def _sweep_image(img: SyntheticImage, nm: NoiseModel, box_counts: Sequence[int], cfg: ConsensusConfig,
                 parts: Sequence[PartDefinition]):
    top = img.proposals[: box_counts[0]]
    preds = simulate_predictions(img.annotation, [p.rect for p in top], nm, [p.score for p in top])
    gt = gt_part_boxes(img.annotation, parts)
    rows = []
    for count in box_counts:
        results = consensus_image(preds[:count], cfg=cfg, num_keypoints=img.annotation.num_keypoints)
        rows.append((predicted_part_boxes(results, top[:count], parts), gt))
    return rows


def run_sweep(dataset: Sequence[SyntheticImage], nm: NoiseModel, box_counts: Sequence[int] = DEFAULT_BOX_COUNTS,
              cfg: ConsensusConfig = GT_BOX, parts: Sequence[PartDefinition] = DEFAULT_PARTS,
              threads: int = 1) -> list[SweepRow]:
    """Part localization accuracy as the proposal list is truncated to each count.

    Proposals are taken in score order. Each image's predictions are
    simulated once for the largest count and sliced, so a smaller count sees
    exactly a prefix of the larger count's predictions.
    """
    box_counts = [int(c) for c in box_counts]
    if any(a < b for a, b in zip(box_counts, box_counts[1:])):
        raise ValueError("box_counts must be sorted in descending order")
    if not box_counts:
        return []
    work = lambda img: _sweep_image(img, nm, box_counts, cfg, parts)
    if threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            per_image = list(ex.map(work, dataset))
    else:
        per_image = [work(img) for img in dataset]

    names = [p.name for p in parts] + ["body"]
    table = []
    for ci, count in enumerate(box_counts):
        acc = {}
        for name in names:
            t = part_localization_tally([im[ci][0][name] for im in per_image], [im[ci][1][name] for im in per_image])
            acc[name] = t.value
        table.append(SweepRow(count, acc.get("head"), acc.get("torso"), acc.get("body")))
    return table


def format_sweep(rows: Sequence[SweepRow]) -> str:
    """Comma-separated sweep table with a header line."""
    def f(x):
        return "" if x is None else f"{x:.6f}"

    lines = ["box_count,head_acc,torso_acc,body_acc"]
    lines += [f"{r.box_count},{f(r.head_acc)},{f(r.torso_acc)},{f(r.body_acc)}" for r in rows]
    return "\n".join(lines) + "\n"


def keypoint_trial(trial: int, nm: NoiseModel, n_boxes: int = 100, threshold: float = 0.6,
                   seed: int = 0) -> tuple[Point, list[KeypointObservation]]:
    """One keypoint seen by ``n_boxes`` covering boxes; returns the truth and filtered observations."""
    rng = np.random.default_rng([seed, trial])
    g = Point(float(rng.uniform(150, 350)), float(rng.uniform(150, 350)))
    boxes = covering_boxes(g, n_boxes, rng)
    ann = single_keypoint_annotation(f"trial-{trial}", g)
    preds = simulate_predictions(ann, boxes, replace(nm, seed=nm.seed + seed))
    obs = [
        KeypointObservation(Point(*p.image_locations()[0]), float(p.vis[0]), b)
        for b, p in enumerate(preds)
        if p.vis[0] >= threshold
    ]
    return g, obs


def robustness_trials(n_trials: int = 1000, nm: NoiseModel = NoiseModel(), n_boxes: int = 100,
                      threshold: float = 0.6, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Per-trial pixel error of the medoid and of the plain mean of the filtered observations."""
    med_err = np.full(n_trials, np.nan)
    mean_err = np.full(n_trials, np.nan)
    for t in range(n_trials):
        g, obs = keypoint_trial(t, nm, n_boxes, threshold, seed)
        if not obs:
            continue
        pts = np.array([o.location for o in obs])
        _, m = medoid(pts)
        med_err[t] = math.hypot(m.x - g.x, m.y - g.y)
        c = pts.mean(axis=0)
        mean_err[t] = math.hypot(c[0] - g.x, c[1] - g.y)
    return med_err, mean_err


def bimodal_trials(n_trials: int = 1000, nm: NoiseModel = NoiseModel(), n_boxes: int = 100,
                   contamination: float = 0.3, separation: float = 40.0, spread: float = 3.0,
                   threshold: float = 0.6, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Pixel errors of medoid-shift and plain-medoid consensus with a planted false-positive cluster.

    Each trial simulates one keypoint under ``nm``, then overwrites
    ``round(contamination * M)`` of the ``M`` visibility-filtered
    observations with confident predictions scattered (std ``spread``)
    around a point ``separation`` pixels from the truth.

    Returns:
        ``(medoid_shift_errors, medoid_errors)``; ``nan`` where nothing passed the threshold.
    """
    ms_err = np.full(n_trials, np.nan)
    md_err = np.full(n_trials, np.nan)
    cfg = replace(GT_BOX, visibility_threshold=threshold)
    for t in range(n_trials):
        g, obs = keypoint_trial(t, nm, n_boxes, threshold, seed)
        if not obs:
            continue
        rng = np.random.default_rng([seed, t, 1])
        n_bad = int(round(contamination * len(obs)))
        angle = rng.uniform(0.0, 2.0 * math.pi)
        fake = np.array(g) + separation * np.array([math.cos(angle), math.sin(angle)])
        for i in rng.choice(len(obs), n_bad, replace=False):
            p = fake + spread * rng.normal(size=2)
            obs[i] = KeypointObservation(Point(float(p[0]), float(p[1])), nm.outlier_conf, obs[i].source_box_id)
        for out, method in ((ms_err, Method.MEDOID_SHIFT), (md_err, Method.MEDOID)):
            r = consensus_keypoint(obs, cfg.with_method(method))
            out[t] = math.hypot(r.location.x - g.x, r.location.y - g.y)
    return ms_err, md_err
