import numpy as np
import pytest

from kpconsensus.geometry import Rect
from kpconsensus.records import NUM_KEYPOINTS, ImageAnnotation, Keypoint


def make_annotation(image_id="1", visible=None, box=(0.0, 0.0, 100.0, 100.0), width=200.0, height=200.0, seed=0):
    """Random 15-keypoint annotation with keypoints inside ``box``."""
    rng = np.random.default_rng(seed)
    x, y, w, h = box
    if visible is None:
        visible = [True] * NUM_KEYPOINTS
    kps = []
    for v in visible:
        if v:
            kps.append(Keypoint(float(x + rng.integers(0, int(w) + 1)), float(y + rng.integers(0, int(h) + 1)), True))
        else:
            kps.append(Keypoint(0.0, 0.0, False))
    return ImageAnnotation(image_id, kps, Rect(*box), width, height)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def annotation():
    return make_annotation()
