"""Robust consensus over per-proposal keypoint predictions.

Every proposal box yields one location and one visibility confidence per
keypoint. For each keypoint the predictions are thresholded on confidence,
and the survivors are reduced to a single location by a selection estimator
(the medoid), optionally after modified Z-score outlier rejection or
medoid-shift mode seeking.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from typing import Hashable, Optional, Sequence, Union

import numpy as np

from kpconsensus.geometry import Point, Rect
from kpconsensus.records import NUM_KEYPOINTS, PredictionSet

MAD_LAMBDA = 0.6745
# Relative slack under which two distance sums count as tied.
TIE_RTOL = 1e-12
AUTO = "auto"


class Method(str, enum.Enum):
    MEDOID = "medoid"
    INLIERS = "inliers"
    MEDOID_SHIFT = "medoid-shift"


@dataclass(frozen=True)
class KeypointObservation:
    location: Point
    confidence: float
    source_box_id: Hashable = None

    def __post_init__(self) -> None:
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence must lie in [0, 1], got {self.confidence!r}")


@dataclass(frozen=True)
class ConsensusConfig:
    """Thresholds and reduction method for one consensus run.

    ``inlier_location`` only matters for :attr:`Method.INLIERS`: ``"filtered"``
    reports the medoid of all visibility-filtered predictions, ``"inliers"``
    the medoid of the Z-score survivors. ``bandwidth`` is the flat-kernel
    radius for medoid shift in pixels, or ``"auto"``. ``shift_inliers``
    picks the medoid-shift inlier set: ``"zscore"`` keeps the members of
    the largest cluster that pass the Z-score test against its medoid,
    ``"cluster"`` keeps the whole cluster.
    """

    visibility_threshold: float = 0.6
    z_threshold: float = 0.35
    lam: float = MAD_LAMBDA
    method: Method = Method.MEDOID
    bandwidth: Union[float, str] = AUTO
    inlier_location: str = "filtered"
    shift_inliers: str = "zscore"

    def __post_init__(self) -> None:
        object.__setattr__(self, "method", Method(self.method))
        if not 0.0 <= self.visibility_threshold <= 1.0:
            raise ValueError("visibility_threshold must lie in [0, 1]")
        if not self.z_threshold > 0:
            raise ValueError("z_threshold must be positive")
        if not self.lam > 0:
            raise ValueError("lam must be positive")
        if self.bandwidth != AUTO and not float(self.bandwidth) > 0:
            raise ValueError("bandwidth must be positive or 'auto'")
        if self.inlier_location not in ("filtered", "inliers"):
            raise ValueError("inlier_location must be 'filtered' or 'inliers'")
        if self.shift_inliers not in ("zscore", "cluster"):
            raise ValueError("shift_inliers must be 'zscore' or 'cluster'")

    def with_method(self, method) -> "ConsensusConfig":
        return replace(self, method=Method(method))


# Ground-truth object box given: proposals pre-filtered around the box.
GT_BOX = ConsensusConfig(visibility_threshold=0.6, z_threshold=0.35)
# No ground-truth box: top-scored proposals over the whole image.
NO_GT_BOX = ConsensusConfig(visibility_threshold=0.94, z_threshold=0.3)
PRESETS: dict[str, ConsensusConfig] = {"gt-box": GT_BOX, "no-gt-box": NO_GT_BOX}


@dataclass(frozen=True)
class ConsensusResult:
    visible: bool
    location: Optional[Point] = None
    inliers: tuple[KeypointObservation, ...] = ()
    all_filtered: tuple[KeypointObservation, ...] = field(default=(), repr=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "inliers", tuple(self.inliers))
        object.__setattr__(self, "all_filtered", tuple(self.all_filtered))
        if self.visible != (self.location is not None) or self.visible != bool(self.inliers):
            raise ValueError("visible, location and inliers must agree")

    @classmethod
    def invisible(cls, all_filtered: Sequence[KeypointObservation] = ()) -> "ConsensusResult":
        return cls(False, None, (), tuple(all_filtered))


def _as_points(points) -> np.ndarray:
    pts = np.asarray(
        [getattr(p, "location", p) for p in points] if not isinstance(points, np.ndarray) else points,
        dtype=float,
    )
    return pts.reshape(-1, 2)


def pairwise_distances(pts: np.ndarray) -> np.ndarray:
    diff = pts[:, None, :] - pts[None, :, :]
    return np.hypot(diff[..., 0], diff[..., 1])


def _argmin_lowest(values: np.ndarray) -> int:
    """Index of the minimum, treating values within ``TIE_RTOL`` as tied."""
    lo = values.min()
    return int(np.flatnonzero(values <= lo + abs(lo) * TIE_RTOL)[0])


def filter_by_visibility(obs: Sequence[KeypointObservation], threshold: float) -> list[KeypointObservation]:
    """Keep observations whose confidence is at least ``threshold``, in order."""
    return [o for o in obs if o.confidence >= threshold]


def medoid(points) -> tuple[int, Point]:
    """Input point with the smallest summed Euclidean distance to all others.

    Ties go to the lowest index.

    Returns:
        ``(index, point)`` of the medoid.

    Raises:
        ValueError: on empty input.
    """
    pts = _as_points(points)
    if len(pts) == 0:
        raise ValueError("medoid of an empty set")
    idx = _argmin_lowest(pairwise_distances(pts).sum(axis=1))
    return idx, Point(float(pts[idx, 0]), float(pts[idx, 1]))


def modified_z_scores(points, lam: float = MAD_LAMBDA) -> np.ndarray:
    """Robust outlyingness ``lam * d_i / median(d)`` with ``d_i`` the distance to the medoid.

    When the median distance is zero, points coincident with the medoid
    score 0 and every other point scores ``inf``.
    """
    pts = _as_points(points)
    _, m = medoid(pts)
    d = np.hypot(pts[:, 0] - m.x, pts[:, 1] - m.y)
    mad = float(np.median(d))
    if mad == 0.0:
        return np.where(d == 0.0, 0.0, np.inf)
    return lam * d / mad


def filter_inliers(obs: Sequence[KeypointObservation], cfg: ConsensusConfig) -> list[KeypointObservation]:
    if not obs:
        return []
    z = modified_z_scores(obs, cfg.lam)
    return [o for o, zi in zip(obs, z) if zi <= cfg.z_threshold]


def auto_bandwidth(pts: np.ndarray, floor: float = 1.0) -> float:
    """Median pairwise distance, never below ``floor`` pixels."""
    n = len(pts)
    if n < 2:
        return floor
    iu = np.triu_indices(n, k=1)
    return max(floor, float(np.median(pairwise_distances(pts)[iu])))


def medoid_shift(points, bandwidth: Union[float, str] = AUTO) -> tuple[list[list[int]], int]:
    """Partition points into medoid-shift basins with a flat kernel.

    Each point ``i`` links to ``argmin_j sum_k d(j, k) [d(i, k) <= bandwidth]``;
    following the links to their fixed points groups indices into clusters.

    Returns:
        ``(clusters, mode)``: clusters as sorted index lists, ordered by
        their smallest member, and the index of the medoid of the largest
        cluster. Equal-sized clusters are ranked by the index of their medoid.
    """
    pts = _as_points(points)
    n = len(pts)
    if n == 0:
        raise ValueError("medoid shift of an empty set")
    h = auto_bandwidth(pts) if bandwidth == AUTO else float(bandwidth)
    dist = pairwise_distances(pts)
    kernel = (dist <= h).astype(float)
    # cost[j, i]: total distance from candidate j to the neighbours of i
    cost = dist @ kernel.T
    links = np.array([_argmin_lowest(cost[:, i]) for i in range(n)])

    roots = np.empty(n, dtype=int)
    for i in range(n):
        seen = []
        j = i
        while links[j] != j and j not in seen:
            seen.append(j)
            j = int(links[j])
        if links[j] != j:
            # cycle: fall back to its lowest member as the mode
            cyc = seen[seen.index(j):]
            j = min(cyc)
        roots[i] = j

    groups: dict[int, list[int]] = {}
    for i, r in enumerate(roots):
        groups.setdefault(int(r), []).append(i)
    clusters = sorted(groups.values(), key=lambda c: c[0])

    best_mode = -1
    best_size = -1
    for c in clusters:
        local, _ = medoid(pts[c])
        mode = c[local]
        if len(c) > best_size or (len(c) == best_size and mode < best_mode):
            best_size, best_mode = len(c), mode
    return clusters, best_mode


def consensus_keypoint(obs: Sequence[KeypointObservation], cfg: ConsensusConfig) -> ConsensusResult:
    """Reduce one keypoint's observations to a location-and-visibility decision."""
    filtered = filter_by_visibility(obs, cfg.visibility_threshold)
    if not filtered:
        return ConsensusResult.invisible()
    pts = _as_points(filtered)

    if cfg.method is Method.MEDOID:
        idx, loc = medoid(pts)
        inliers = [filtered[idx]]
    elif cfg.method is Method.INLIERS:
        inliers = filter_inliers(filtered, cfg)
        if cfg.inlier_location == "inliers":
            _, loc = medoid(inliers)
        else:
            _, loc = medoid(pts)
    else:
        clusters, mode = medoid_shift(pts, cfg.bandwidth)
        largest = next(c for c in clusters if mode in c)
        inliers = [filtered[i] for i in largest]
        if cfg.shift_inliers == "zscore":
            inliers = filter_inliers(inliers, cfg)
        loc = Point(float(pts[mode, 0]), float(pts[mode, 1]))
    return ConsensusResult(True, loc, tuple(inliers), tuple(filtered))


def consensus_image(
    predictions: Sequence[PredictionSet],
    boxes: Optional[Sequence[Rect]] = None,
    cfg: ConsensusConfig = GT_BOX,
    num_keypoints: Optional[int] = None,
) -> list[ConsensusResult]:
    """Run per-keypoint consensus over every proposal of one image.

    Args:
        predictions: one prediction set per proposal.
        boxes: the un-padded proposal boxes the predictions are relative to;
            defaults to each prediction set's own box.
        cfg: thresholds and method.
        num_keypoints: keypoint count; inferred from the predictions when
            omitted, 15 if there are none.
    """
    if boxes is None:
        boxes = [p.box for p in predictions]
    if len(boxes) != len(predictions):
        raise ValueError(f"{len(predictions)} prediction sets but {len(boxes)} boxes")
    if num_keypoints is None:
        num_keypoints = predictions[0].num_keypoints if predictions else NUM_KEYPOINTS
    for b, p in enumerate(predictions):
        if p.num_keypoints != num_keypoints:
            raise ValueError(f"prediction set {b} has {p.num_keypoints} keypoints, expected {num_keypoints}")
    if not predictions:
        return [ConsensusResult.invisible() for _ in range(num_keypoints)]

    locs = np.stack([p.image_locations(b) for p, b in zip(predictions, boxes)])
    vis = np.stack([p.vis for p in predictions])
    results = []
    for k in range(num_keypoints):
        keep = np.flatnonzero(vis[:, k] >= cfg.visibility_threshold)
        obs = [
            KeypointObservation(Point(float(locs[b, k, 0]), float(locs[b, k, 1])), float(vis[b, k]), int(b))
            for b in keep
        ]
        results.append(consensus_keypoint(obs, cfg))
    return results
