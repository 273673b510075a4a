"""Shared domain types: images with labels and boxes, classification scores."""

from dataclasses import dataclass, field

import numpy as np

PRE_SOFTMAX = "pre_softmax"
POST_SOFTMAX = "post_softmax"


@dataclass(frozen=True)
class BoundingBox:
    """Pixel-aligned box: top-left corner (x0, y0), width w, height h."""
    x0: int
    y0: int
    w: int
    h: int

    def validate(self, height: int, width: int) -> None:
        if self.w <= 0 or self.h <= 0:
            raise ValueError(f"degenerate box {self}")
        if self.x0 < 0 or self.y0 < 0 or self.x0 + self.w > width or self.y0 + self.h > height:
            raise ValueError(f"box {self} outside {width}x{height} image")


@dataclass
class LabeledImage:
    """(C, H, W) float32 image in [0, 255] with its class and object boxes."""
    image: np.ndarray
    label: int
    bboxes: list = field(default_factory=list)
    image_id: str = ""

    @property
    def bbox(self) -> BoundingBox:
        if not self.bboxes:
            raise ValueError(f"image {self.image_id!r} has no bounding box")
        return self.bboxes[0]


@dataclass(frozen=True)
class ClassScores:
    scores: np.ndarray
    stage: str = PRE_SOFTMAX

    def __post_init__(self):
        if self.stage not in (PRE_SOFTMAX, POST_SOFTMAX):
            raise ValueError(f"unknown score stage {self.stage!r}")


def softmax(scores: np.ndarray) -> np.ndarray:
    z = np.exp(scores - scores.max())
    return (z / z.sum()).astype(scores.dtype)


def average_scores(scores_list) -> ClassScores:
    """Elementwise mean of same-stage score vectors."""
    if not scores_list:
        raise ValueError("nothing to average")
    stages = {s.stage for s in scores_list}
    if len(stages) > 1:
        raise ValueError(f"cannot average mixed stages {sorted(stages)}")
    lengths = {len(s.scores) for s in scores_list}
    if len(lengths) > 1:
        raise ValueError(f"cannot average mixed lengths {sorted(lengths)}")
    mean = np.mean([s.scores for s in scores_list], axis=0).astype(np.float32)
    return ClassScores(mean, scores_list[0].stage)
