from dataclasses import dataclass, field, replace
from logging import Logger, getLogger
from typing import Dict, List, Optional, Sequence

import numpy as np

from panoptrack.config.defaults import NMS_IOU, SCORE_FLOOR
from panoptrack.geom import Box2D, Box3D, RigidTransform, iou_3d, transform_box
from panoptrack.utils.errors import GeometryError, MissingPoseError

EMBEDDING_TOLERANCE = 1e-6


@dataclass(frozen=True)
class FusionConfig:
    nms_iou: float = NMS_IOU
    category_aware: bool = True
    score_floor: float = SCORE_FLOOR

    def __post_init__(self) -> None:
        if not 0.0 <= self.nms_iou <= 1.0:
            raise ValueError(f"nms_iou outside [0, 1]: {self.nms_iou}")


@dataclass(frozen=True)
class DetectionRecord:
    box: Box3D
    confidence: float
    camera_id: int
    frame: int
    category: str = "car"
    embedding: Optional[np.ndarray] = field(default=None, compare=False, repr=False)
    box_2d: Optional[Box2D] = None

    def __post_init__(self) -> None:
        if not 0.0 <= self.confidence <= 1.0:
            raise GeometryError(f"confidence outside [0, 1]: {self.confidence}")
        if self.embedding is not None:
            embedding = np.asarray(self.embedding, dtype=np.float64)
            norm = float(np.linalg.norm(embedding))
            if abs(norm - 1.0) > EMBEDDING_TOLERANCE:
                raise GeometryError(f"embedding is not unit norm: {norm}")
            embedding.setflags(write=False)
            object.__setattr__(self, "embedding", embedding)


@dataclass(frozen=True)
class FrameBundle:
    frame: int
    detections: Dict[int, List[DetectionRecord]]
    poses: Dict[int, RigidTransform]

    @property
    def camera_ids(self) -> List[int]:
        return sorted(set(self.poses) | set(self.detections))


def lift_detections(
    detections: Sequence[DetectionRecord], pose: RigidTransform
) -> List[DetectionRecord]:
    return [replace(d, box=transform_box(d.box, pose)) for d in detections]


def lift_frame(bundle: FrameBundle) -> List[DetectionRecord]:
    lifted: List[DetectionRecord] = []
    for camera_id in sorted(bundle.detections):
        detections = bundle.detections[camera_id]
        if not detections:
            continue
        try:
            pose = bundle.poses[camera_id]
        except KeyError:
            raise MissingPoseError(camera_id=camera_id, frame=bundle.frame) from None
        lifted.extend(lift_detections(detections, pose))
    return lifted


def _nms_order(detections: Sequence[DetectionRecord]) -> List[int]:
    return sorted(
        range(len(detections)),
        key=lambda i: (-detections[i].confidence, detections[i].camera_id, i),
    )


def nms_3d(
    detections: Sequence[DetectionRecord],
    iou_threshold: float = NMS_IOU,
    category_aware: bool = True,
) -> List[DetectionRecord]:
    """Greedy 3D non-maximum suppression.

    Detections are visited by descending confidence, ties broken by lower
    camera id and then input position. A kept detection removes every
    remaining detection (of its category when ``category_aware``) whose 3D IoU
    with it reaches ``iou_threshold``.
    """
    if not 0.0 <= iou_threshold <= 1.0:
        raise ValueError(f"iou_threshold outside [0, 1]: {iou_threshold}")
    remaining = _nms_order(detections)
    kept: List[DetectionRecord] = []
    while remaining:
        best = detections[remaining.pop(0)]
        kept.append(best)
        remaining = [
            i
            for i in remaining
            if (category_aware and detections[i].category != best.category)
            or iou_3d(best.box, detections[i].box) < iou_threshold
        ]
    return kept


def filter_by_score(
    detections: Sequence[DetectionRecord], score_floor: float
) -> List[DetectionRecord]:
    return [d for d in detections if d.confidence >= score_floor]


def merge_detections(
    bundle: FrameBundle,
    iou_threshold: float = NMS_IOU,
    category_aware: bool = True,
    score_floor: float = SCORE_FLOOR,
    logger: Optional[Logger] = None,
) -> List[DetectionRecord]:
    logger = logger or getLogger("panoptrack")
    lifted = filter_by_score(lift_frame(bundle), score_floor)
    merged = nms_3d(lifted, iou_threshold=iou_threshold, category_aware=category_aware)
    logger.debug(
        f"frame {bundle.frame}: merged {len(lifted)} detections into {len(merged)}"
    )
    return merged
