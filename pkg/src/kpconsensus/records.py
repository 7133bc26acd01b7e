"""Ground-truth and per-proposal prediction containers shared across modules."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Sequence

import numpy as np

from kpconsensus.geometry import Point, Rect

# CUB-200-2011 part ordering (part ids 1..15 map to indices 0..14).
KEYPOINT_NAMES: tuple[str, ...] = (
    "back",
    "beak",
    "belly",
    "breast",
    "crown",
    "forehead",
    "left eye",
    "left leg",
    "left wing",
    "nape",
    "right eye",
    "right leg",
    "right wing",
    "tail",
    "throat",
)
NUM_KEYPOINTS = len(KEYPOINT_NAMES)


class RecordError(ValueError):
    """A record violates a type invariant. ``field`` names the offending path."""

    def __init__(self, message: str, field: str = ""):
        self.field = field
        self.message = message
        super().__init__(f"{field}: {message}" if field else message)


class Keypoint(NamedTuple):
    x: float
    y: float
    visible: bool

    @property
    def point(self) -> Point:
        return Point(self.x, self.y)


@dataclass(frozen=True)
class ImageAnnotation:
    image_id: str
    keypoints: tuple[Keypoint, ...]
    object_box: Rect
    width: Optional[float] = None
    height: Optional[float] = None
    class_label: str = ""
    is_train: Optional[bool] = None
    path: str = ""

    def __post_init__(self) -> None:
        object.__setattr__(self, "keypoints", tuple(Keypoint(*k) for k in self.keypoints))
        if self.width is not None and self.height is not None:
            for i, kp in enumerate(self.keypoints):
                if kp.visible and not (0 <= kp.x <= self.width and 0 <= kp.y <= self.height):
                    raise RecordError(
                        f"visible keypoint ({kp.x}, {kp.y}) outside image "
                        f"{self.width}x{self.height}",
                        f"{self.image_id}.keypoints[{i}]",
                    )

    @property
    def num_keypoints(self) -> int:
        return len(self.keypoints)

    def visible_mask(self) -> np.ndarray:
        return np.array([k.visible for k in self.keypoints], dtype=bool)

    def locations(self) -> np.ndarray:
        return np.array([[k.x, k.y] for k in self.keypoints], dtype=float).reshape(-1, 2)


@dataclass(frozen=True, eq=False)
class PredictionSet:
    """One proposal's network output.

    ``loc`` holds ``N`` box-normalized ``(u, v)`` locations and ``vis`` the
    matching visibility confidences. Proposal-only records carry ``N = 0``.
    """

    image_id: str
    box: Rect
    box_score: float = 0.0
    loc: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    vis: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self) -> None:
        loc = np.array(self.loc, dtype=float).reshape(-1, 2)
        vis = np.array(self.vis, dtype=float).reshape(-1)
        if len(loc) != len(vis):
            raise RecordError(f"{len(loc)} locations but {len(vis)} confidences", "loc")
        if not math.isfinite(self.box_score):
            raise RecordError("must be finite", "box_score")
        if not np.all(np.isfinite(loc)):
            raise RecordError("must be finite", f"loc[{int(np.flatnonzero(~np.isfinite(loc).all(1))[0])}]")
        bad = ~(np.isfinite(vis) & (vis >= 0.0) & (vis <= 1.0))
        if bad.any():
            i = int(np.flatnonzero(bad)[0])
            raise RecordError(f"confidence {vis[i]!r} not in [0, 1]", f"vis[{i}]")
        loc.flags.writeable = False
        vis.flags.writeable = False
        object.__setattr__(self, "loc", loc)
        object.__setattr__(self, "vis", vis)

    @property
    def num_keypoints(self) -> int:
        return len(self.vis)

    def image_locations(self, box: Optional[Rect] = None) -> np.ndarray:
        """Denormalize ``loc`` into image coordinates using ``box`` (default: own box)."""
        b = self.box if box is None else box
        out = np.empty_like(self.loc)
        out[:, 0] = b.x + self.loc[:, 0] * b.w
        out[:, 1] = b.y + self.loc[:, 1] * b.h
        return out


def natural_key(image_id: str):
    """Sort key ordering numeric ids numerically and everything else lexically."""
    return (0, int(image_id), "") if image_id.isdigit() else (1, 0, image_id)


def group_by_image(items: Sequence, key=lambda it: it.image_id) -> dict[str, list]:
    groups: dict[str, list] = {}
    for it in items:
        groups.setdefault(key(it), []).append(it)
    return {k: groups[k] for k in sorted(groups, key=natural_key)}
